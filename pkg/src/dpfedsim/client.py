"""Client-side local training.

Each round a client runs E passes of mini-batch SGD over its shard,
starting from the distributed global parameters, and uploads the
resulting delta (local minus global), clipped and noised per the privacy
config.  The delta is tracked directly as an accumulator, so a single
full-batch step yields exactly ``-lr * grad``.

Clients are pure given their RNG streams: two clients with identical
shards, seeds, and parameters produce identical messages, and execution
order across clients has no effect.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dpcore import DpConfig, privatize
from .learn.data import SegDataset
from .learn.models import Model, forward_loss_grad, model_layout
from .net import ClientMessage
from .params import ParamVector, axpy, zeros_like

__all__ = ["Hyper", "ClientState", "DivergedError", "client_update", "client_round"]


class DivergedError(RuntimeError):
    """Training produced a non-finite loss or parameters."""


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.1
    batch_size: int = 16
    local_epochs: int = 5
    # "epochs": local_epochs full passes over the shard per round;
    # "steps": local_epochs individual mini-batch steps per round.
    local_unit: str = "epochs"

    def __post_init__(self):
        if self.lr < 0.0:
            raise ValueError("lr must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.local_unit not in ("epochs", "steps"):
            raise ValueError("local_unit must be 'epochs' or 'steps'")


@dataclass(frozen=True)
class ClientState:
    client_id: int
    shard: SegDataset
    rng_seed: int
    hyper: Hyper
    model_kind: str = "linear_pixel"

    def __post_init__(self):
        if len(self.shard) == 0:
            raise ValueError("client shard must be nonempty")


def client_update(
    theta: ParamVector,
    state: ClientState,
    rng: Optional[np.random.Generator] = None,
) -> ParamVector:
    """Local SGD from ``theta``; returns the parameter delta.

    The RNG drives batch shuffling only and is consumed one permutation
    per epoch, so running E=1 twice with a shared generator and chained
    parameters reproduces a single E=2 call exactly.
    """
    hyper = state.hyper
    images, masks = state.shard.images, state.shard.masks
    n = len(state.shard)
    layout = model_layout(state.model_kind, state.shard.height, state.shard.width)
    if theta.layout_id != layout.layout_id:
        raise ValueError("theta layout does not match the client model")
    if rng is None:
        rng = np.random.default_rng(state.rng_seed)

    acc = zeros_like(theta)
    batch = hyper.batch_size

    def one_step(idx, epoch, step):
        nonlocal acc
        try:
            point = axpy(1.0, acc, theta)
            model = Model(state.model_kind, point, layout)
            loss, grad = forward_loss_grad(model, images[idx], masks[idx])
        except ValueError as exc:
            if "non-finite" in str(exc):
                raise DivergedError(f"diverged at epoch {epoch}, step {step}") from exc
            raise
        if not math.isfinite(loss):
            raise DivergedError(f"diverged at epoch {epoch}, step {step}")
        try:
            acc = axpy(-hyper.lr, grad, acc)
        except ValueError as exc:
            raise DivergedError(f"diverged at epoch {epoch}, step {step}") from exc

    if hyper.local_unit == "epochs":
        for epoch in range(hyper.local_epochs):
            order = rng.permutation(n)
            for step, start in enumerate(range(0, n, batch)):
                one_step(order[start : start + batch], epoch, step)
    else:
        steps_left = hyper.local_epochs
        epoch = 0
        while steps_left > 0:
            order = rng.permutation(n)
            for step, start in enumerate(range(0, n, batch)):
                if steps_left == 0:
                    break
                one_step(order[start : start + batch], epoch, step)
                steps_left -= 1
            epoch += 1
    return acc


def client_round(
    theta: ParamVector,
    state: ClientState,
    dp: DpConfig,
    round_no: int,
    sgd_rng: Optional[np.random.Generator] = None,
    dp_rng: Optional[np.random.Generator] = None,
) -> ClientMessage:
    """Produce the upload message for one round.

    The carried delta is the privatized local update.  When the config
    places noise at the server, the client only clips; the ``dp_applied``
    flag still records that the round runs under the privacy mechanism.
    """
    delta = client_update(theta, state, rng=sgd_rng)
    effective = dp
    if dp.mechanism != "none" and dp.noise_site == "server":
        effective = DpConfig(dp.clip_c, dp.sigma, dp.delta, "none", dp.noise_site)
    if dp_rng is None:
        dp_rng = np.random.default_rng(state.rng_seed)
    private = privatize(delta, effective, dp_rng)
    return ClientMessage(
        round=round_no,
        client_id=state.client_id,
        delta=private.values,
        dp_applied=dp.mechanism != "none",
    )
