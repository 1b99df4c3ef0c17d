"""Deterministic federated-learning simulator with differential privacy.

Local clients train on disjoint shards of a synthetic segmentation task,
clip and noise their updates, and upload them over a simulated byte-exact
transport; the server averages survivors into the global model.  An
inversion-attack harness measures what the uploaded updates leak, with
and without noise.
"""

from .attack import AttackResult, analytic_invert_linear, invert_from_message, optimize_invert
from .client import ClientState, DivergedError, Hyper, client_round, client_update
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .dpcore import (
    DpConfig,
    PrivacyReport,
    clip_update,
    epsilon_classic,
    epsilon_paper,
    gaussian_noise,
    laplace_noise,
    make_report,
    privatize,
)
from .estimator import FederatedSegmenter
from .learn import (
    Model,
    SegDataset,
    SegMetrics,
    evaluate,
    forward_loss_grad,
    gen_dataset,
    model_layout,
    partition,
    predict,
    seg_metrics,
)
from .net import ChannelConfig, ClientMessage, ServerMessage, SimChannel, decode, encode
from .params import LayoutSpec, ParamVector, axpy, flatten, l2_norm, unflatten
from .seeds import derive_seed, rng_for
from .server import (
    ExperimentResult,
    RoundRecord,
    StopRule,
    aggregate,
    init_global,
    run_experiment,
    run_round,
    select_clients,
)

__version__ = "0.1.0"

__all__ = [
    "AttackResult",
    "analytic_invert_linear",
    "invert_from_message",
    "optimize_invert",
    "ClientState",
    "DivergedError",
    "Hyper",
    "client_round",
    "client_update",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "DpConfig",
    "PrivacyReport",
    "clip_update",
    "epsilon_classic",
    "epsilon_paper",
    "gaussian_noise",
    "laplace_noise",
    "make_report",
    "privatize",
    "FederatedSegmenter",
    "Model",
    "SegDataset",
    "SegMetrics",
    "evaluate",
    "forward_loss_grad",
    "gen_dataset",
    "model_layout",
    "partition",
    "predict",
    "seg_metrics",
    "ChannelConfig",
    "ClientMessage",
    "ServerMessage",
    "SimChannel",
    "decode",
    "encode",
    "LayoutSpec",
    "ParamVector",
    "axpy",
    "flatten",
    "l2_norm",
    "unflatten",
    "derive_seed",
    "rng_for",
    "ExperimentResult",
    "RoundRecord",
    "StopRule",
    "aggregate",
    "init_global",
    "run_experiment",
    "run_round",
    "select_clients",
]
