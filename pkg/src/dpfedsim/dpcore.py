"""Differential-privacy mechanisms and accounting for uploaded updates.

Clipping bounds the L2 sensitivity of a client update at the threshold C,
then calibrated noise is added before upload:

  * Gaussian mechanism: i.i.d. N(0, (sigma * C)^2) per coordinate, where
    sigma is the noise multiplier.
  * Laplace mechanism: i.i.d. Laplace with scale b = sensitivity / epsilon
    (per-coordinate std b * sqrt(2)).

Two epsilon figures are reported because two accounting conventions are in
circulation and they disagree:

  * ``epsilon_paper``:  eps = C / sigma, the simple budget used to
    parameterize runs here.
  * ``epsilon_classic``: eps = sqrt(2 ln(1.25 / delta)) / sigma, the
    standard single-shot Gaussian-mechanism bound for noise multiplier
    sigma (noise std sigma * C on a query with sensitivity C).

No composition across rounds is claimed; both figures are single-release
numbers.

Sampling is reproducible across platforms: Gaussian draws come from a
Box-Muller transform over the generator's uniform stream, Laplace draws
from the inverse-CDF transform.  Only the raw uniform stream of the seeded
PCG64 generator is consumed.
"""

import math
from dataclasses import dataclass

import numpy as np

from .params import ParamVector, axpy, l2_norm, scale

__all__ = [
    "MECHANISMS",
    "NOISE_SITES",
    "DpConfig",
    "PrivacyReport",
    "clip_update",
    "gaussian_noise",
    "laplace_noise",
    "privatize",
    "epsilon_paper",
    "epsilon_classic",
    "make_report",
]

MECHANISMS = ("gaussian", "laplace", "none")
NOISE_SITES = ("client", "server")

# Clipping triggers only when the norm exceeds C by more than this relative
# tolerance; a vector whose norm already sits within one rounding error of C
# is returned unchanged, which makes clipping bit-exactly idempotent.
_CLIP_TOL = 1e-12


@dataclass(frozen=True)
class DpConfig:
    """Privacy hyperparameters: threshold C, multiplier sigma, delta."""

    clip_c: float
    sigma: float = 0.05
    delta: float = 1e-5
    mechanism: str = "gaussian"
    noise_site: str = "client"

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.noise_site not in NOISE_SITES:
            raise ValueError(f"noise_site must be one of {NOISE_SITES}, got {self.noise_site!r}")
        if not (self.clip_c > 0.0 and math.isfinite(self.clip_c)):
            raise ValueError("clip_c must be a positive finite real")
        if self.mechanism != "none" and not (self.sigma > 0.0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be a positive finite real")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class PrivacyReport:
    epsilon_paper: float
    epsilon_classic: float
    sensitivity: float
    mechanism: str


def clip_update(delta: ParamVector, clip_c: float) -> ParamVector:
    """Scale ``delta`` down so its L2 norm does not exceed ``clip_c``.

    Implements delta / max(1, |delta|_2 / C): direction is preserved and
    the input is returned unchanged when its norm is already within the
    threshold.
    """
    if not (clip_c > 0.0):
        raise ValueError("clip_c must be positive")
    norm = l2_norm(delta)
    if norm <= clip_c * (1.0 + _CLIP_TOL):
        return delta
    return scale(delta, clip_c / norm)


def _standard_normals(n: int, rng: np.random.Generator) -> np.ndarray:
    """Standard normals via Box-Muller over pairs of uniforms."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1], keeps the log finite
    u2 = rng.random(m)
    radius = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * m)
    out[0::2] = radius * np.cos(2.0 * np.pi * u2)
    out[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return out[:n]


def gaussian_noise(
    length: int,
    sigma: float,
    clip_c: float,
    rng: np.random.Generator,
    layout_id: str = "noise",
) -> ParamVector:
    """I.i.d. zero-mean Gaussian noise with per-entry std ``sigma * clip_c``."""
    if not (sigma > 0.0 and clip_c > 0.0):
        raise ValueError("sigma and clip_c must be positive")
    std = sigma * clip_c
    return ParamVector(std * _standard_normals(int(length), rng), layout_id)


def laplace_noise(
    length: int,
    sensitivity: float,
    epsilon: float,
    rng: np.random.Generator,
    layout_id: str = "noise",
) -> ParamVector:
    """I.i.d. zero-mean Laplace noise with scale ``b = sensitivity / epsilon``.

    Uses the inverse-CDF transform x = -b * sgn(u - 1/2) * ln(1 - 2|u - 1/2|)
    on uniforms u from the generator.  Per-entry std is b * sqrt(2).
    """
    if not (sensitivity > 0.0 and epsilon > 0.0):
        raise ValueError("sensitivity and epsilon must be positive")
    b = sensitivity / epsilon
    u = rng.random(int(length))
    u = np.where(u == 0.0, 0.5, u)  # measure-zero guard for log1p(-1)
    v = u - 0.5
    out = -b * np.sign(v) * np.log1p(-2.0 * np.abs(v))
    return ParamVector(out, layout_id)


def privatize(delta: ParamVector, cfg: DpConfig, rng: np.random.Generator) -> ParamVector:
    """Clip ``delta`` to ``cfg.clip_c`` and add the configured noise.

    With ``mechanism="none"`` only the clip is applied.  The Laplace scale
    is derived from the config as b = C / (C / sigma) = sigma, since the
    budget parameterization ties epsilon to C / sigma.
    """
    clipped = clip_update(delta, cfg.clip_c)
    if cfg.mechanism == "none":
        return clipped
    if cfg.mechanism == "gaussian":
        noise = gaussian_noise(
            clipped.size, cfg.sigma, cfg.clip_c, rng, layout_id=clipped.layout_id
        )
    else:
        noise = laplace_noise(
            clipped.size,
            cfg.clip_c,
            epsilon_paper(cfg.clip_c, cfg.sigma),
            rng,
            layout_id=clipped.layout_id,
        )
    return axpy(1.0, noise, clipped)


def epsilon_paper(clip_c: float, sigma: float) -> float:
    """Budget under the simple convention eps = C / sigma."""
    if not (clip_c > 0.0 and sigma > 0.0):
        raise ValueError("clip_c and sigma must be positive")
    return clip_c / sigma


def epsilon_classic(sigma: float, delta: float) -> float:
    """Single-shot Gaussian-mechanism bound eps = sqrt(2 ln(1.25/delta)) / sigma."""
    if not (sigma > 0.0):
        raise ValueError("sigma must be positive")
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def make_report(cfg: DpConfig) -> PrivacyReport:
    """Summarize the privacy parameters of a config.

    For the Laplace mechanism the classic column reports the pure-DP budget
    sensitivity / scale, which coincides with the simple budget here; with
    the mechanism disabled both figures are infinite.
    """
    if cfg.mechanism == "none":
        return PrivacyReport(math.inf, math.inf, cfg.clip_c, cfg.mechanism)
    eps_p = epsilon_paper(cfg.clip_c, cfg.sigma)
    if cfg.mechanism == "gaussian":
        eps_c = epsilon_classic(cfg.sigma, cfg.delta)
    else:
        eps_c = eps_p
    return PrivacyReport(eps_p, eps_c, cfg.clip_c, cfg.mechanism)
