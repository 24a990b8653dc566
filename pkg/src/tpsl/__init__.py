"""Two-party split learning with label-DP gradient perturbation, attacks and an experiment harness."""

from .attacks import attack_auc, norm_attack, roc_auc, sda_score, shortest_distance_attack, spectral_scores
from .data import Dataset, SyntheticSpec, gen_synthetic, load_csv, vertical_partition
from .nn import MlpModel, backward, backward_split_last_hidden, forward, init_mlp
from .perturb import PerturbMechanism, audit_epsilon, grad_perturb_binary, grad_perturb_multi, mech_for_epsilon
from .protocol import ProtocolConfig, RunResult, Transcript, coupling_test, run_protocol, run_tpsl, run_vanilla

__version__ = "0.1.0"
