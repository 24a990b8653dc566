import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpsl.perturb import (
    MechanismError,
    NoiseCache,
    NoiseDraw,
    PerturbMechanism,
    audit_epsilon,
    coupled_perturb_last_hidden,
    draw_noise,
    epsilon_of,
    flipped_partner,
    grad_perturb_binary,
    grad_perturb_multi,
    laplace_logpdf,
    mech_for_epsilon,
    mixing_weights,
    multi_discrete_frequencies,
    quantize_draw,
    replay_or_draw,
    soft_target,
    zero_draw,
)

G0 = np.array([1.0, -2.0, 0.5])
G1 = np.array([-0.25, 3.0, 1.5])


# --- construction and epsilon calculus ---------------------------------------


def test_discrete_for_ln3_has_p_quarter():
    assert mech_for_epsilon("discrete", math.log(3)).p == pytest.approx(0.25, rel=1e-12)


def test_laplace_for_eps_one_has_unit_scale():
    assert mech_for_epsilon("laplace", 1.0).scale == 1.0


def test_multi_discrete_stay_probability():
    m = mech_for_epsilon("multi_discrete", math.log(2), 3)
    assert m.stay_prob == pytest.approx(0.5)
    assert (1 - m.stay_prob) / 2 == pytest.approx(0.25)


def test_multi_laplace_scale_is_two_over_eps():
    assert mech_for_epsilon("multi_laplace", 4.0, 3).laplace_scale == pytest.approx(0.5)


def test_gaussian_has_no_epsilon():
    with pytest.raises(MechanismError):
        mech_for_epsilon("gaussian", 1.0)
    assert epsilon_of(PerturbMechanism.gaussian(1.0)) is None
    assert epsilon_of(PerturbMechanism.none()) is None


def test_epsilon_of_examples():
    assert epsilon_of(PerturbMechanism.discrete(0.5)) == 0.0
    assert epsilon_of(PerturbMechanism.laplace(0.1)) == pytest.approx(10.0)


@pytest.mark.parametrize("kwargs", [dict(kind="laplace", scale=0.0), dict(kind="discrete", p=0.6),
                                    dict(kind="discrete", p=0.0), dict(kind="multi_discrete", eps=1.0, classes=1),
                                    dict(kind="multi_laplace", eps=-1.0, classes=3)])
def test_invalid_parameters(kwargs):
    with pytest.raises(MechanismError):
        PerturbMechanism(**kwargs)


@settings(max_examples=50)
@given(st.floats(1e-3, 30.0), st.sampled_from(["laplace", "discrete", "multi_laplace", "multi_discrete"]))
def test_epsilon_round_trip(eps, kind):
    k = 3 if kind.startswith("multi") else 2
    assert epsilon_of(mech_for_epsilon(kind, eps, k)) == pytest.approx(eps, rel=1e-12, abs=1e-12)


# --- binary GradPerturb --------------------------------------------------------


@pytest.mark.parametrize("mech", [PerturbMechanism.laplace(1.0), PerturbMechanism.discrete(0.3)])
def test_zero_draw_returns_true_gradient(mech):
    for y, gy in ((0, G0), (1, G1)):
        out, _ = grad_perturb_binary(y, G0, G1, mech, draw=zero_draw(mech))
        np.testing.assert_array_equal(out, gy)


def test_none_returns_true_gradient_and_gaussian_adds_noise():
    out, _ = grad_perturb_binary(1, G0, G1, PerturbMechanism.none())
    np.testing.assert_array_equal(out, G1)
    rng = np.random.default_rng(0)
    outs = np.stack([grad_perturb_binary(0, G0, G1, PerturbMechanism.gaussian(2.0), rng)[0]
                     for _ in range(20000)])
    np.testing.assert_allclose(outs.std(axis=0), 2.0, rtol=0.03)


def test_binary_rejects_multi_mechanism():
    with pytest.raises(MechanismError):
        grad_perturb_binary(0, G0, G1, mech_for_epsilon("multi_laplace", 1.0, 2), np.random.default_rng(0))


def test_discrete_frequencies():
    p, n = 0.3, 100_000
    mech = PerturbMechanism.discrete(p)
    rng = np.random.default_rng(1)
    stay = sum(np.array_equal(grad_perturb_binary(0, G0, G1, mech, rng)[0], G0) for _ in range(n))
    assert abs(stay / n - (1 - p)) <= 3 * math.sqrt(p * (1 - p) / n)


def test_laplace_is_unbiased():
    b, n = 2.0, 100_000
    rng = np.random.default_rng(2)
    u = np.array([draw_noise(PerturbMechanism.laplace(b), rng).value for _ in range(n)])
    outs = G1[None, :] + u[:, None] * (G0 - G1)[None, :]  # same form as the mechanism for y=1
    mean = outs.mean(axis=0)
    bound = 4 * b * np.linalg.norm(G1 - G0) / math.sqrt(n)
    assert np.all(np.abs(mean - G1) <= bound)
    # and the mechanism itself produces exactly that form
    out, d = grad_perturb_binary(1, G0, G1, PerturbMechanism.laplace(b), rng)
    np.testing.assert_allclose(out, G1 + d.value * (G0 - G1), atol=1e-15)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["laplace", "discrete"]), st.integers(0, 1))
def test_output_is_collinear_with_the_gap(seed, kind, y):
    rng = np.random.default_rng(seed)
    g0, g1 = rng.standard_normal((2, 5))
    out, draw = grad_perturb_binary(y, g0, g1, mech_for_epsilon(kind, 1.0), rng)
    gy, go = (g0, g1) if y == 0 else (g1, g0)
    diff = out - gy
    gap = go - gy
    # the 2x2 minors of [diff; gap] vanish
    minors = np.outer(diff, gap) - np.outer(gap, diff)
    assert np.max(np.abs(minors)) <= 1e-12 * (1 + abs(draw.value)) * np.max(np.abs(gap)) ** 2
    if kind == "discrete":
        assert np.array_equal(out, g0) or np.array_equal(out, g1)


# --- multi-class ----------------------------------------------------------------


def test_multi_discrete_frequencies_ln2_k3():
    mech = mech_for_epsilon("multi_discrete", math.log(2), 3)
    rng = np.random.default_rng(3)
    n = 100_000
    grads = np.eye(3)
    outs = np.array([np.argmax(grad_perturb_multi(0, grads, mech, rng)[0]) for _ in range(n)])
    freq = np.bincount(outs, minlength=3) / n
    expected = np.array([0.5, 0.25, 0.25])
    assert np.all(np.abs(freq - expected) <= 3 * np.sqrt(expected * (1 - expected) / n))


def test_multi_discrete_k2_matches_binary_discrete():
    eps, n = 1.3, 100_000
    multi = mech_for_epsilon("multi_discrete", eps, 2)
    binary = mech_for_epsilon("discrete", eps)
    rng = np.random.default_rng(4)
    keep_multi = np.mean([np.array_equal(grad_perturb_multi(1, [G0, G1], multi, rng)[0], G1) for _ in range(n)])
    keep_bin = np.mean([np.array_equal(grad_perturb_binary(1, G0, G1, binary, rng)[0], G1) for _ in range(n)])
    sigma = math.sqrt(binary.p * (1 - binary.p) / n)
    assert abs(keep_multi - (1 - binary.p)) <= 3 * sigma
    assert abs(keep_multi - keep_bin) <= 3 * math.sqrt(2) * sigma


def test_multi_zero_draw_and_support():
    grads = np.random.default_rng(5).standard_normal((4, 3))
    for kind in ("multi_laplace", "multi_discrete"):
        mech = mech_for_epsilon(kind, 1.0, 4)
        out, _ = grad_perturb_multi(2, grads, mech, draw=zero_draw(mech))
        np.testing.assert_array_equal(out, grads[2])
    mech = mech_for_epsilon("multi_discrete", 0.5, 4)
    rng = np.random.default_rng(6)
    for _ in range(200):
        out, _ = grad_perturb_multi(1, grads, mech, rng)
        assert any(np.array_equal(out, g) for g in grads)


def test_multi_laplace_form():
    grads = np.random.default_rng(7).standard_normal((3, 4))
    mech = mech_for_epsilon("multi_laplace", 2.0, 3)
    out, d = grad_perturb_multi(0, grads, mech, np.random.default_rng(8))
    np.testing.assert_allclose(out, grads[0] + d.value @ grads, atol=1e-14)


def test_multi_wrong_number_of_gradients():
    with pytest.raises(ValueError):
        grad_perturb_multi(0, [G0, G1], mech_for_epsilon("multi_laplace", 1.0, 3), np.random.default_rng(0))


def test_multi_discrete_vectorised_frequencies():
    mech = mech_for_epsilon("multi_discrete", 1.0, 5)
    n = 200_000
    f = multi_discrete_frequencies(mech, 2, n, np.random.default_rng(9))
    expected = np.full(5, (1 - mech.stay_prob) / 4)
    expected[2] = mech.stay_prob
    assert np.all(np.abs(f - expected) <= 3 * np.sqrt(expected * (1 - expected) / n))


# --- last-hidden coupling ---------------------------------------------------------


def _jacobians(seed=10):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(1), rng.standard_normal((1, 4)), rng.standard_normal((1, 7))


def test_last_hidden_zero_draw_is_unperturbed():
    v, je, jt = _jacobians()
    v0, v1 = v, v - 1.0
    mech = PerturbMechanism.laplace(1.0)
    g, u, _ = coupled_perturb_last_hidden(1, v0, v1, je, jt, mech, draw=zero_draw(mech))
    np.testing.assert_array_equal(g, v1 @ je)
    np.testing.assert_array_equal(u, v1 @ jt)


def test_last_hidden_forced_draw_recomposes():
    v, je, jt = _jacobians()
    v0, v1 = v, v - 1.0
    draw = NoiseDraw("laplace", 0.37)
    g, u, _ = coupled_perturb_last_hidden(0, v0, v1, je, jt, PerturbMechanism.laplace(1.0), draw=draw)
    vt = v0 + 0.37 * (v1 - v0)
    np.testing.assert_allclose(g, vt @ je, atol=1e-15)
    np.testing.assert_allclose(u, vt @ jt, atol=1e-15)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 1))
def test_flip_with_one_minus_u_gives_same_output(seed, y):
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(1)
    v1 = v0 - 1.0
    mech = PerturbMechanism.laplace(float(rng.uniform(0.1, 5)))
    draw = quantize_draw(draw_noise(mech, rng, y))
    partner = flipped_partner(draw, y, 1 - y)
    assert partner.value == 1.0 - draw.value
    # canonical form used by the protocol is bit-identical
    assert soft_target(y, draw) == soft_target(1 - y, partner)
    a, _ = grad_perturb_binary(y, v0, v1, mech, draw=draw)
    b, _ = grad_perturb_binary(1 - y, v0, v1, mech, draw=partner)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_last_hidden_shape_mismatch():
    with pytest.raises(ValueError):
        coupled_perturb_last_hidden(0, [0.1], [-0.9], np.ones((2, 3)), np.ones((1, 4)),
                                    PerturbMechanism.laplace(1.0), np.random.default_rng(0))


@pytest.mark.parametrize("kind", ["multi_laplace", "multi_discrete"])
def test_multi_flip_partner_preserves_mixing_weights(kind):
    mech = mech_for_epsilon(kind, 1.0, 4)
    rng = np.random.default_rng(11)
    for _ in range(50):
        y, y_new = rng.choice(4, size=2, replace=False)
        d = draw_noise(mech, rng, int(y))
        p = flipped_partner(d, int(y), int(y_new))
        np.testing.assert_allclose(mixing_weights(int(y), d, 4), mixing_weights(int(y_new), p, 4), atol=1e-15)


# --- cache --------------------------------------------------------------------------


def test_replay_returns_stored_draw():
    cache = NoiseCache()
    rng = np.random.default_rng(12)
    mech = PerturbMechanism.laplace(1.0)
    a = replay_or_draw(cache, 7, lambda: draw_noise(mech, rng))
    b = replay_or_draw(cache, 7, lambda: draw_noise(mech, rng))
    c = replay_or_draw(cache, 8, lambda: draw_noise(mech, rng))
    assert a is b
    assert a.value != c.value
    assert len(cache) == 2


def test_cache_rejects_second_write():
    cache = NoiseCache()
    cache.put(1, NoiseDraw("laplace", 0.0))
    with pytest.raises(KeyError):
        cache.put(1, NoiseDraw("laplace", 1.0))


# --- audit ------------------------------------------------------------------------


def test_audit_discrete_ln3():
    res = audit_epsilon(PerturbMechanism.discrete(0.25), 1_000_000, np.random.default_rng(13))
    assert res.eps_hat == pytest.approx(math.log(3), abs=0.02)


@pytest.mark.parametrize("eps", [0.1, 0.5, 1.0, 3.0, 10.0])
def test_audit_laplace_is_exact(eps):
    assert audit_epsilon(mech_for_epsilon("laplace", eps)).eps_hat == eps


def test_audit_multi_laplace_is_exact():
    assert audit_epsilon(mech_for_epsilon("multi_laplace", 2.0, 3)).eps_hat == 2.0


def test_audit_sentinels():
    assert audit_epsilon(PerturbMechanism.none()).eps_hat == math.inf
    with pytest.raises(MechanismError):
        audit_epsilon(PerturbMechanism.gaussian(1.0))


def test_laplace_density_ratio_bounded_on_grid():
    b = 0.7
    u = np.linspace(-10, 10, 4001)
    ratio = laplace_logpdf(u, b) - laplace_logpdf(1 - u, b)
    assert np.all(np.abs(ratio) <= 1 / b + 1e-12)
