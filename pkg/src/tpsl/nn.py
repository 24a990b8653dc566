"""Dense feed-forward networks with hand-written backpropagation.

Both parties' sub-networks are :class:`MlpModel` instances. Hidden layers use
ReLU; the last affine layer feeds an output head (``identity`` for the feature
party's embedding, ``sigmoid`` for a binary label party, ``softmax`` for k
classes). Every routine accepts a single input vector or a row-stacked batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HEADS = ("identity", "sigmoid", "softmax")
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpModel:
    """Ordered ``(W, b)`` pairs with ``W`` of shape ``(out, in)``."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    head: str = "identity"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[1]} inputs, "
                    f"previous layer emits {self.weights[i - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        if self.head == "sigmoid" and self.out_dim != 1:
            raise ShapeError("sigmoid head needs a single logit")
        for arr in (*self.weights, *self.biases):
            arr.setflags(write=False)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """Positions of each layer's ``(W, b)`` inside the flat vector."""
        out, pos = [], 0
        for w, b in zip(self.weights, self.biases):
            ws = slice(pos, pos + w.size)
            pos += w.size
            bs = slice(pos, pos + b.size)
            pos += b.size
            out.append((ws, bs))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [a.ravel() for w, b in zip(self.weights, self.biases) for a in (w, b)]
        )

    def with_flat(self, theta: np.ndarray) -> "MlpModel":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"flat vector has shape {theta.shape}, model needs ({self.n_params},)")
        ws, bs = [], []
        for (wsl, bsl), w, b in zip(self.layer_slices(), self.weights, self.biases):
            ws.append(theta[wsl].reshape(w.shape).copy())
            bs.append(theta[bsl].copy())
        return MlpModel(tuple(ws), tuple(bs), self.head)


def init_mlp(sizes, head: str = "identity", rng: np.random.Generator | None = None) -> MlpModel:
    """Gaussian weights with std ``1/sqrt(fan_in)`` and zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpModel(tuple(ws), tuple(bs), head)


@dataclass(frozen=True)
class ForwardTrace:
    """Cached intermediates of one forward pass.

    ``activations[0]`` is the input and ``activations[i + 1]`` the post-ReLU
    output of layer ``i`` for hidden layers. ``logits`` is the output of the
    last affine layer and ``output`` the head applied to it.
    """

    activations: tuple[np.ndarray, ...]
    pre_activations: tuple[np.ndarray, ...]
    logits: np.ndarray
    output: np.ndarray
    batched: bool
    n_layers: int

    @property
    def prediction(self) -> np.ndarray:
        """Head output, without the batch axis for a single input."""
        return self.output if self.batched else self.output[0]


def _as_batch(x: np.ndarray, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with in_dim={in_dim}")
    return x, batched


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: MlpModel, x) -> ForwardTrace:
    a, batched = _as_batch(x, model.in_dim)
    acts, pres = [a], []
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        pres.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            acts.append(a)
    logits = pres[-1]
    if model.head == "sigmoid":
        out = sigmoid(logits)
    elif model.head == "softmax":
        out = softmax(logits)
    else:
        out = logits
    return ForwardTrace(tuple(acts), tuple(pres), logits, out, batched, model.n_layers)


def _unbatch(arr: np.ndarray, batched: bool) -> np.ndarray:
    return arr if batched else arr[0]


def bce_loss(pred, label) -> float | np.ndarray:
    """Binary cross-entropy with predictions clamped to ``[1e-12, 1 - 1e-12]``."""
    p = np.clip(np.asarray(pred, dtype=float), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(label, dtype=float)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def cross_entropy_loss(probs, label) -> float | np.ndarray:
    p = np.clip(np.asarray(probs, dtype=float), PROB_FLOOR, 1.0)
    lab = np.asarray(label, dtype=int)
    if p.ndim == 1:
        return float(-np.log(p[lab]))
    return -np.log(p[np.arange(len(lab)), lab])


def loss(model: MlpModel, trace: ForwardTrace, label):
    if model.head == "sigmoid":
        return bce_loss(_unbatch(trace.output[:, 0], trace.batched), label)
    if model.head == "softmax":
        return cross_entropy_loss(_unbatch(trace.output, trace.batched), label)
    raise ValueError("identity head has no loss")


def logit_residual(model: MlpModel, trace: ForwardTrace, labels) -> np.ndarray:
    """``dloss/dlogits`` per sample, shape ``(n, out_dim)``.

    Sigmoid + BCE and softmax + cross-entropy both reduce to ``prediction - target``.
    The sigmoid case skips the clamp, which only matters for saturated outputs.
    """
    labels = np.atleast_1d(np.asarray(labels))
    n = trace.output.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} traced inputs")
    if model.head == "sigmoid":
        return trace.output - labels.astype(float)[:, None]
    if model.head == "softmax":
        onehot = np.zeros_like(trace.output)
        onehot[np.arange(n), labels.astype(int)] = 1.0
        return trace.output - onehot
    raise ValueError("identity head has no loss")


def _check_trace(model: MlpModel, trace: ForwardTrace):
    if trace.n_layers != model.n_layers or trace.activations[0].shape[1] != model.in_dim:
        raise ShapeError("trace was not produced by this model")
    if trace.logits.shape[1] != model.out_dim:
        raise ShapeError("trace output width does not match model")


def backprop(model: MlpModel, trace: ForwardTrace, upstream, per_sample_params: bool = False):
    """Pull ``upstream = dL/dlogits`` (shape ``(n, out_dim)``) back through the model.

    Returns ``(grad_input, grad_params)`` where ``grad_input`` has one row per
    sample and ``grad_params`` is the flat gradient summed over samples, or one
    flat row per sample when ``per_sample_params`` is set.
    """
    _check_trace(model, trace)
    delta = np.asarray(upstream, dtype=float)
    n = trace.activations[0].shape[0]
    if delta.shape != (n, model.out_dim):
        raise ShapeError(f"upstream shape {delta.shape}, expected {(n, model.out_dim)}")
    grads_w: list = [None] * model.n_layers
    grads_b: list = [None] * model.n_layers
    for i in range(model.n_layers - 1, -1, -1):
        a_prev = trace.activations[i]
        if per_sample_params:
            grads_w[i] = np.einsum("no,ni->noi", delta, a_prev).reshape(n, -1)
            grads_b[i] = delta
        else:
            grads_w[i] = (delta.T @ a_prev).ravel()
            grads_b[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i]
        if i > 0:
            delta = delta * (trace.pre_activations[i - 1] > 0)
    parts = [p for pair in zip(grads_w, grads_b) for p in pair]
    grad_params = np.concatenate(parts, axis=1 if per_sample_params else 0)
    return delta, grad_params


def logit_jacobian_input(model: MlpModel, trace: ForwardTrace) -> np.ndarray:
    """``d logits / d input`` per sample, shape ``(n, out_dim, in_dim)``."""
    n = trace.activations[0].shape[0]
    rows = []
    for j in range(model.out_dim):
        up = np.zeros((n, model.out_dim))
        up[:, j] = 1.0
        rows.append(backprop(model, trace, up)[0])
    return np.stack(rows, axis=1)


@dataclass(frozen=True)
class GradBundle:
    """Derivatives of the loss for one traced sample.

    ``grad_wrt_input`` is the gradient sent back across the cut and
    ``grad_wrt_params`` the flat parameter gradient. The split fields are set
    by :func:`backward_split_last_hidden`: ``v`` is the loss gradient at the
    logits, ``jac_input`` and ``jac_params`` are the logits' Jacobians with
    respect to the input and the flat parameters, and ``top_slice`` marks the
    parameters of the top block inside the flat layout.
    """

    grad_wrt_input: np.ndarray
    grad_wrt_params: np.ndarray
    v: np.ndarray | None = None
    jac_input: np.ndarray | None = None
    jac_params: np.ndarray | None = None
    top_slice: slice | None = field(default=None)


def _single(trace: ForwardTrace):
    if trace.activations[0].shape[0] != 1:
        raise ShapeError("expected a trace of a single input")


def backward(model: MlpModel, trace: ForwardTrace, label) -> GradBundle:
    _single(trace)
    resid = logit_residual(model, trace, [label])
    g_in, g_par = backprop(model, trace, resid)
    return GradBundle(g_in[0], g_par)


def top_block_slice(model: MlpModel, split_index: int | None = None) -> slice:
    """Flat-parameter slice of layers ``split_index..end`` (default: last layer)."""
    if split_index is None:
        split_index = model.n_layers - 1
    if not 0 <= split_index < model.n_layers:
        raise IndexError(f"split index {split_index} out of range for {model.n_layers} layers")
    start = model.layer_slices()[split_index][0].start
    return slice(start, model.n_params)


def backward_split_last_hidden(model: MlpModel, trace: ForwardTrace, label,
                               split_index: int | None = None) -> GradBundle:
    """Backward pass factored through the logits.

    The gradients are recovered as ``v @ jac_input`` and ``v @ jac_params``;
    ``top_slice`` selects the parameters of the top block (the final affine
    layer by default, or layers from ``split_index`` on).
    """
    _single(trace)
    top = top_block_slice(model, split_index)
    resid = logit_residual(model, trace, [label])
    k = model.out_dim
    jac_in, jac_par = [], []
    for j in range(k):
        up = np.zeros((1, k))
        up[0, j] = 1.0
        gi, gp = backprop(model, trace, up)
        jac_in.append(gi[0])
        jac_par.append(gp)
    jac_in = np.stack(jac_in)
    jac_par = np.stack(jac_par)
    v = resid[0]
    g_in, g_par = backprop(model, trace, resid)
    return GradBundle(g_in[0], g_par, v=v, jac_input=jac_in, jac_params=jac_par, top_slice=top)


def sgd_step(model: MlpModel, grad, lr: float) -> MlpModel:
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (model.n_params,):
        raise ShapeError(f"gradient shape {grad.shape}, model has {model.n_params} parameters")
    return model.with_flat(model.flat() - lr * grad)
