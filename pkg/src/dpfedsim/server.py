"""Server-side round orchestration and aggregation.

One round: distribute the global parameters over the simulated transport,
collect the (surviving) client updates, average them in ascending
client-id order, and evaluate the new global model on the held-out split.
Aggregation is theta + mean(deltas), accumulated sequentially so the
result is bit-for-bit reproducible and matches a scalar reference loop.

``run_experiment`` wires the whole thing together from an
ExperimentConfig: dataset generation, 70/30 train/test split, client
partitioning, per-round execution, and the stop rule (max rounds, plus an
optional patience-based convergence rule, disabled by default).
"""

import time
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .client import ClientState, DivergedError, client_round
from .config import ExperimentConfig
from .dpcore import (
    DpConfig,
    epsilon_classic,
    epsilon_paper,
    gaussian_noise,
    laplace_noise,
)
from .learn.data import SegDataset, gen_dataset, partition
from .learn.models import Model, evaluate, model_layout
from .net import ChannelConfig, ClientMessage, ServerMessage, SimChannel, decode, encode
from .params import LayoutSpec, ParamVector, axpy, zeros
from .seeds import derive_seed, rng_for

__all__ = [
    "RoundRecord",
    "StopRule",
    "RoundState",
    "Transport",
    "RoundFailedError",
    "ProtocolError",
    "ExperimentResult",
    "ExperimentSetup",
    "setup_experiment",
    "init_global",
    "select_clients",
    "aggregate",
    "make_transport",
    "run_round",
    "run_experiment",
]

_INIT_BOUND = 0.1


class RoundFailedError(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoundRecord:
    round: int
    loss: float
    dice: float
    jaccard: float
    acc: float
    epsilon_paper: float
    epsilon_classic: float
    participating_clients: int
    wall_ms: int


@dataclass(frozen=True)
class StopRule:
    max_rounds: int
    metric: Optional[str] = None  # None disables the convergence rule
    patience: int = 5
    min_delta: float = 1e-3

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass(frozen=True)
class RoundState:
    round_t: int
    theta: ParamVector
    selected: tuple = ()
    history: tuple = ()


@dataclass
class Transport:
    """Per-client channel pairs plus the shared latency setting."""

    to_client: dict
    to_server: dict
    latency_ticks: int = 0

    def tick(self, n: int = 1) -> None:
        for chan in list(self.to_client.values()) + list(self.to_server.values()):
            chan.tick(n)


@dataclass(frozen=True)
class ExperimentResult:
    history: tuple
    theta: ParamVector
    layout: LayoutSpec
    model_kind: str
    test_images: np.ndarray
    test_masks: np.ndarray


def init_global(model_kind: str, seed: int, h: int, w: int) -> ParamVector:
    """Initial global parameters: uniform weights in +-0.1, zero biases."""
    layout = model_layout(model_kind, h, w)
    rng = np.random.default_rng(seed)
    parts = []
    for layer in layout.layers:
        if layer.name.endswith("_b") or layer.name == "bias":
            parts.append(np.zeros(layer.size))
        else:
            parts.append(rng.uniform(-_INIT_BOUND, _INIT_BOUND, layer.size))
    return ParamVector(np.concatenate(parts), layout.layout_id)


def select_clients(registered: Sequence[int], k: int, rng: np.random.Generator) -> list:
    """Draw ``k`` distinct client ids uniformly without replacement."""
    ids = sorted(registered)
    if len(set(ids)) != len(ids):
        raise ValueError("registered client ids must be distinct")
    if not 1 <= k <= len(ids):
        raise ValueError(f"k must lie in [1, {len(ids)}], got {k}")
    if k == len(ids):
        return list(ids)
    picked = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in picked)


def aggregate(
    theta_t: ParamVector,
    messages: Sequence[ClientMessage],
    expected_round: Optional[int] = None,
    weights: Optional[Mapping[int, float]] = None,
) -> ParamVector:
    """theta_{t+1} = theta_t + weighted mean of the carried deltas.

    Deltas are summed in ascending client-id order (so the result does not
    depend on arrival order).  Default weights are equal (1/k); passing a
    client_id -> weight map enables shard-size weighting.
    """
    if not messages:
        raise ValueError("no updates")
    ordered = sorted(messages, key=lambda m: m.client_id)
    ids = [m.client_id for m in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in round: {ids}")
    rounds = {m.round for m in ordered}
    if len(rounds) > 1:
        raise ValueError(f"messages from mixed rounds: {sorted(rounds)}")
    if expected_round is not None and rounds != {expected_round}:
        raise ValueError(f"messages from round {rounds.pop()}, expected {expected_round}")
    if weights is not None:
        total = sum(weights[m.client_id] for m in ordered)
        coeffs = [weights[m.client_id] / total for m in ordered]
    else:
        coeffs = None

    acc = zeros(theta_t.size, theta_t.layout_id)
    for i, msg in enumerate(ordered):
        if msg.delta.size != theta_t.size:
            raise ValueError(
                f"client {msg.client_id} delta length {msg.delta.size} "
                f"does not match layout size {theta_t.size}"
            )
        delta = ParamVector(msg.delta, theta_t.layout_id)
        acc = axpy(coeffs[i] if coeffs else 1.0, delta, acc)
    if coeffs is not None:
        return axpy(1.0, acc, theta_t)
    return axpy(1.0 / len(ordered), acc, theta_t)


def make_transport(
    client_ids: Sequence[int],
    drop_rate: float,
    latency_ticks: int,
    seed: int,
    capture: Optional[list] = None,
) -> Transport:
    to_client, to_server = {}, {}
    for cid in client_ids:
        to_client[cid] = SimChannel(
            ChannelConfig(drop_rate, latency_ticks, derive_seed(seed, "chan_down", cid)),
            capture=capture,
        )
        to_server[cid] = SimChannel(
            ChannelConfig(drop_rate, latency_ticks, derive_seed(seed, "chan_up", cid)),
            capture=capture,
        )
    return Transport(to_client, to_server, latency_ticks)


def _server_side_noise(dp: DpConfig, size: int, layout_id: str, rng) -> ParamVector:
    if dp.mechanism == "gaussian":
        return gaussian_noise(size, dp.sigma, dp.clip_c, rng, layout_id=layout_id)
    return laplace_noise(
        size, dp.clip_c, epsilon_paper(dp.clip_c, dp.sigma), rng, layout_id=layout_id
    )


def _dp_epsilons(dp: DpConfig) -> tuple:
    if dp.mechanism == "none":
        return float("inf"), float("inf")
    eps_p = epsilon_paper(dp.clip_c, dp.sigma)
    if dp.mechanism == "gaussian":
        return eps_p, epsilon_classic(dp.sigma, dp.delta)
    return eps_p, eps_p


def run_round(
    state: RoundState,
    clients: Mapping[int, ClientState],
    dp: DpConfig,
    transport: Transport,
    eval_images: np.ndarray,
    eval_masks: np.ndarray,
    root_seed: int,
    layout: LayoutSpec,
    participants: Optional[int] = None,
    weights: Optional[Mapping[int, float]] = None,
) -> RoundState:
    """Execute one full round over the transport and append its record.

    Clients that never receive the model (downlink drop) or whose upload
    is dropped simply do not contribute; the round aggregates survivors
    and fails only when nothing arrives.
    """
    started = time.perf_counter()
    r = state.round_t + 1
    ids = sorted(clients)
    k = participants if participants is not None else len(ids)
    selected = select_clients(ids, k, rng_for(root_seed, "select", r))

    frame = encode(ServerMessage(round=r, theta=state.theta.values, layout_digest=layout.digest64()))
    for cid in selected:
        transport.to_client[cid].send(frame)
    transport.tick(transport.latency_ticks)

    for cid in selected:
        buf = transport.to_client[cid].recv()
        if buf is None:
            continue
        sm = decode(buf)
        if sm.layout_digest != layout.digest64():
            raise ProtocolError(
                f"round {r}: layout digest mismatch for client {cid}"
            )
        theta_c = ParamVector(sm.theta, layout.layout_id)
        st = clients[cid]
        msg = client_round(
            theta_c,
            st,
            dp,
            round_no=sm.round,
            sgd_rng=rng_for(st.rng_seed, "sgd", sm.round),
            dp_rng=rng_for(st.rng_seed, "dp", sm.round),
        )
        transport.to_server[cid].send(encode(msg))
    transport.tick(transport.latency_ticks)

    received = []
    for cid in selected:
        buf = transport.to_server[cid].recv()
        if buf is not None:
            received.append(decode(buf))
    if not received:
        raise RoundFailedError(f"round failed: no client updates survived in round {r}")

    theta_next = aggregate(state.theta, received, expected_round=r, weights=weights)
    if dp.mechanism != "none" and dp.noise_site == "server":
        noise = _server_side_noise(
            dp, theta_next.size, layout.layout_id, rng_for(root_seed, "server_dp", r)
        )
        theta_next = axpy(1.0 / len(received), noise, theta_next)
    if not np.isfinite(theta_next.values).all():
        raise DivergedError(f"diverged: non-finite global parameters in round {r}")

    kind = clients[selected[0]].model_kind
    loss, metrics = evaluate(Model(kind, theta_next, layout), eval_images, eval_masks)
    eps_p, eps_c = _dp_epsilons(dp)
    record = RoundRecord(
        round=r,
        loss=loss,
        dice=metrics.dice,
        jaccard=metrics.jaccard,
        acc=metrics.acc,
        epsilon_paper=eps_p,
        epsilon_classic=eps_c,
        participating_clients=len(received),
        wall_ms=int((time.perf_counter() - started) * 1000),
    )
    return RoundState(
        round_t=r,
        theta=theta_next,
        selected=tuple(selected),
        history=state.history + (record,),
    )


def _improved(metric: str, new: float, best: float, min_delta: float) -> bool:
    if metric == "loss":
        return new < best - min_delta
    return new > best + min_delta


def _should_stop(rule: StopRule, history: tuple) -> bool:
    if rule.metric is None or len(history) == 0:
        return False
    best = None
    stale = 0
    for rec in history:
        value = getattr(rec, rule.metric)
        if best is None or _improved(rule.metric, value, best, rule.min_delta):
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= rule.patience


@dataclass(frozen=True)
class ExperimentSetup:
    """Everything a round loop needs, derived deterministically from a config."""

    train: SegDataset
    test: SegDataset
    clients: dict
    layout: LayoutSpec
    theta0: ParamVector
    transport: Transport


def setup_experiment(
    cfg: ExperimentConfig,
    dataset: Optional[SegDataset] = None,
    capture: Optional[list] = None,
) -> ExperimentSetup:
    """Materialize dataset, split, shards, clients, init, and transport."""
    root = cfg.root_seed
    if dataset is None:
        ds_seed = cfg.dataset.seed if cfg.dataset.seed is not None else derive_seed(root, "dataset")
        dataset = gen_dataset(cfg.dataset.n, cfg.dataset.h, cfg.dataset.w, ds_seed)
    h, w = dataset.height, dataset.width

    perm = rng_for(root, "split").permutation(len(dataset))
    n_train = (7 * len(dataset)) // 10
    if n_train < cfg.clients:
        raise ValueError(f"train split ({n_train}) smaller than client count ({cfg.clients})")
    train = dataset.subset(perm[:n_train])
    test = dataset.subset(perm[n_train:])

    shards = partition(train, cfg.clients, cfg.dataset.partition_mode,
                       seed=derive_seed(root, "partition"))
    hyper = cfg.hyper()
    clients = {
        cid: ClientState(cid, train.subset(idx), derive_seed(root, "client", cid),
                         hyper, cfg.model_kind)
        for cid, idx in enumerate(shards)
    }

    layout = model_layout(cfg.model_kind, h, w)
    theta0 = init_global(cfg.model_kind, derive_seed(root, "init"), h, w)
    t_seed = cfg.transport.seed if cfg.transport.seed is not None else derive_seed(root, "transport")
    transport = make_transport(
        sorted(clients), cfg.transport.drop_rate, cfg.transport.latency_ticks, t_seed,
        capture=capture,
    )
    return ExperimentSetup(train, test, clients, layout, theta0, transport)


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Optional[SegDataset] = None,
    stop: Optional[StopRule] = None,
) -> ExperimentResult:
    """Run the full federated experiment described by ``cfg``.

    A caller-provided dataset overrides the generated one (its shape wins
    over ``cfg.dataset``).  Every randomized step is seeded from
    ``cfg.root_seed``, so the entire history is a pure function of the
    config.
    """
    env = setup_experiment(cfg, dataset)
    test, clients, layout = env.test, env.clients, env.layout
    if stop is None:
        conv = cfg.convergence
        stop = StopRule(
            max_rounds=cfg.rounds,
            metric=conv.metric if conv else None,
            patience=conv.patience if conv else 5,
            min_delta=conv.min_delta if conv else 1e-3,
        )

    weights = None
    if cfg.weighting == "size":
        weights = {cid: float(len(st.shard)) for cid, st in clients.items()}

    state = RoundState(0, env.theta0)
    while state.round_t < stop.max_rounds:
        state = run_round(
            state, clients, cfg.dp, env.transport, test.images, test.masks,
            cfg.root_seed, layout, weights=weights,
        )
        if _should_stop(stop, state.history):
            break
    return ExperimentResult(
        history=state.history,
        theta=state.theta,
        layout=layout,
        model_kind=cfg.model_kind,
        test_images=test.images,
        test_masks=test.masks,
    )
