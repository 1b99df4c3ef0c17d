"""Gradient-inversion attack harness.

Reconstructs a client's training image from the update it uploaded, using
only what a network observer sees: the wire message (delta) and the public
model spec plus global parameters.  Ground truth enters only when scoring
a finished reconstruction.

Two attacks:

``analytic_invert_linear``
    Exact closed form for the per-pixel linear model.  A single-sample,
    single-step update factors per pixel into an outer product of the
    softmax residual and the pixel color (times a common positive scale
    from the learning rate and clipping), so each color follows from
    dividing a weight-gradient row by the matching bias-gradient entry.
    The scale cancels in the ratio; added noise does not, which is the
    whole point of the privacy mechanism.

``optimize_invert``
    Gradient matching: minimize 1 - cos(g(x_hat), -delta) over a dummy
    input x_hat, where g is the parameter gradient the dummy input would
    produce.  Cosine distance makes the attack invariant to clipping and
    to the (unknown) learning rate.  For the linear model the per-pixel
    labels are first recovered from the signs of the bias-gradient block
    and the input gradient of the objective is computed analytically; for
    the conv model labels are unknown (its bias gradients pool over
    pixels), so matching runs against uniform soft labels with a numeric
    input gradient, which keeps the attack weak there by construction.
    Steps are accepted only when the objective decreases.

Reconstructions can be written as plain-text PPM/PGM for side-by-side
visual inspection.
"""

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .learn.models import Model, loss_grad_soft
from .net import ClientMessage
from .params import ParamVector, unflatten

__all__ = [
    "AttackResult",
    "analytic_invert_linear",
    "optimize_invert",
    "invert_from_message",
    "recover_labels_linear",
    "reconstruction_scores",
    "write_ppm",
    "write_pgm",
]

_DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class AttackResult:
    reconstructed: np.ndarray
    mse: float
    psnr: float
    iterations_used: int
    dp_was_applied: bool


def reconstruction_scores(recon: np.ndarray, truth: np.ndarray) -> tuple:
    """MSE and PSNR (dB) of a reconstruction against the true image."""
    mse = float(np.mean((np.asarray(recon) - np.asarray(truth)) ** 2))
    psnr = math.inf if mse == 0.0 else -10.0 * math.log10(mse)
    return mse, psnr


def _delta_values(delta: Union[ParamVector, np.ndarray]) -> np.ndarray:
    if isinstance(delta, ParamVector):
        return delta.values
    return np.asarray(delta, dtype=np.float64).reshape(-1)


def _split_linear(delta: np.ndarray, model: Model):
    if model.kind != "linear_pixel":
        raise ValueError("this attack targets the linear_pixel model")
    if delta.size != model.layout.total_size:
        raise ValueError(
            f"delta length {delta.size} does not match model size {model.layout.total_size}"
        )
    pv = ParamVector(delta, model.layout.layout_id)
    parts = unflatten(pv, model.layout)
    return parts["weight"], parts["bias"]


def analytic_invert_linear(delta, model: Model) -> np.ndarray:
    """Closed-form image recovery from a single-sample linear update.

    For each pixel, picks the bias-gradient row with the largest magnitude
    and divides the matching weight-gradient row by it.  Raises when the
    residuals are all (numerically) zero, i.e. the update carries no
    per-pixel information.
    """
    dw, db = _split_linear(_delta_values(delta), model)
    mag = np.abs(db)
    if mag.max() < _DEGENERATE_TOL:
        raise ValueError("uninformative gradient")
    row = mag.argmax(axis=-1)
    db_sel = np.take_along_axis(db, row[..., None], axis=-1)
    if np.abs(db_sel).min() < _DEGENERATE_TOL:
        raise ValueError("uninformative gradient")
    dw_sel = np.take_along_axis(dw, row[..., None, None], axis=2)[..., 0, :]
    return dw_sel / db_sel


def recover_labels_linear(delta, model: Model) -> np.ndarray:
    """Per-pixel labels from the bias-gradient block of an uploaded delta.

    The update is a negative multiple of the gradient, and the residual is
    negative exactly at the true class, so the largest (most positive)
    delta entry per pixel marks the label.
    """
    _, db = _split_linear(_delta_values(delta), model)
    return db.argmax(axis=-1)


class _LinearMatcher:
    """Cosine gradient matching for the per-pixel linear model.

    Works in flattened pixel space: weights (p, 3, 3), biases (p, 3).  The
    constant 1/(batch * pixels) factor of the true gradient is dropped;
    cosine distance is invariant to it.
    """

    def __init__(self, delta: np.ndarray, model: Model):
        h, w = model.layout.layers[0].shape[:2]
        self.h, self.w = h, w
        theta = unflatten(model.params, model.layout)
        self.W = theta["weight"].reshape(-1, 3, 3)
        self.b = theta["bias"].reshape(-1, 3)
        dw, db = _split_linear(delta, model)
        self.tw = -dw.reshape(-1, 3, 3)  # match against minus the delta:
        self.tb = -db.reshape(-1, 3)  # uploads are negative gradient multiples
        self.nt = math.sqrt(float((self.tw**2).sum() + (self.tb**2).sum()))
        if self.nt == 0.0:
            raise ValueError("uninformative gradient")
        labels = db.reshape(-1, 3).argmax(axis=-1)
        self.onehot = np.zeros((labels.size, 3))
        self.onehot[np.arange(labels.size), labels] = 1.0

    def _residual(self, x):
        scores = np.einsum("pck,pk->pc", self.W, x) + self.b
        z = scores - scores.max(axis=-1, keepdims=True)
        expz = np.exp(z)
        pi = expz / expz.sum(axis=-1, keepdims=True)
        return pi, pi - self.onehot

    def _jtv(self, x, pi, r, vw, vb):
        """(d g / d x)^T v for a vector v with blocks (vw, vb)."""
        term1 = np.einsum("pck,pc->pk", vw, r)
        q = np.einsum("pck,pk->pc", vw, x) + vb
        sq = pi * q - pi * (pi * q).sum(axis=-1, keepdims=True)
        term2 = np.einsum("pck,pc->pk", self.W, sq)
        return term1 + term2

    def objective(self, x):
        pi, r = self._residual(x)
        gw = r[:, :, None] * x[:, None, :]
        u = float((gw * self.tw).sum() + (r * self.tb).sum())
        ng = math.sqrt(float((gw**2).sum() + (r**2).sum()))
        if ng == 0.0:
            raise ValueError("uninformative gradient")
        return 1.0 - u / (ng * self.nt)

    def objective_grad(self, x):
        pi, r = self._residual(x)
        gw = r[:, :, None] * x[:, None, :]
        u = float((gw * self.tw).sum() + (r * self.tb).sum())
        ng = math.sqrt(float((gw**2).sum() + (r**2).sum()))
        if ng == 0.0:
            raise ValueError("uninformative gradient")
        f = 1.0 - u / (ng * self.nt)
        jt_t = self._jtv(x, pi, r, self.tw, self.tb)
        jt_g = self._jtv(x, pi, r, gw, r)
        grad = -jt_t / (ng * self.nt) + (u / (ng**3 * self.nt)) * jt_g
        return f, grad


class _MicroMatcher:
    """Cosine matching for the conv model via numeric input gradients."""

    _FD_EPS = 1e-5

    def __init__(self, delta: np.ndarray, model: Model, h: int, w: int):
        self.model = model
        self.h, self.w = h, w
        if delta.size != model.layout.total_size:
            raise ValueError("delta length does not match model size")
        self.target = -delta
        self.nt = math.sqrt(float((self.target**2).sum()))
        if self.nt == 0.0:
            raise ValueError("uninformative gradient")
        self.soft = np.full((1, h, w, 3), 1.0 / 3.0)

    def objective(self, x):
        _, g = loss_grad_soft(self.model, x.reshape(1, self.h, self.w, 3), self.soft)
        gv = g.values
        ng = math.sqrt(float((gv**2).sum()))
        if ng == 0.0:
            raise ValueError("uninformative gradient")
        return 1.0 - float((gv * self.target).sum()) / (ng * self.nt)

    def objective_grad(self, x):
        f = self.objective(x)
        grad = np.empty_like(x)
        flat = x.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + self._FD_EPS
            hi = self.objective(x)
            flat[i] = orig - self._FD_EPS
            lo = self.objective(x)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * self._FD_EPS)
        return f, grad


def _reconstruct(delta: np.ndarray, model: Model, h: int, w: int, budget: int, seed: int):
    """Run the matching optimization; sees public information only.

    Returns (image, iterations_used, trace of accepted objective values).
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if model.kind == "linear_pixel":
        matcher = _LinearMatcher(delta, model)
        x = None
    else:
        matcher = _MicroMatcher(delta, model, h, w)
    rng = np.random.default_rng(seed)
    # dummy start: mid-gray plus a little seeded noise
    if model.kind == "linear_pixel":
        x = 0.5 + 0.02 * (rng.random((h * w, 3)) - 0.5)
    else:
        x = 0.5 + 0.02 * (rng.random((h, w, 3)) - 0.5)

    if budget == 0:
        image = x.reshape(h, w, 3).copy()
        return image, 0, []

    f = matcher.objective(x)
    if not math.isfinite(f):
        raise RuntimeError("non-finite objective")
    trace = [f]
    step = 0.25
    iterations = 0
    for _ in range(budget):
        fx, grad = matcher.objective_grad(x)
        if not np.isfinite(grad).all():
            raise RuntimeError("non-finite objective")
        accepted = False
        while step >= 1e-13:
            cand = np.clip(x - step * grad, 0.0, 1.0)
            fc = matcher.objective(cand)
            if math.isfinite(fc) and fc < f:
                x, f = cand, fc
                trace.append(f)
                step *= 1.3
                accepted = True
                break
            step *= 0.5
        iterations += 1
        if not accepted:
            break
    return x.reshape(h, w, 3).copy(), iterations, trace


def optimize_invert(
    delta,
    model: Model,
    budget: int,
    seed: int = 0,
    truth: Optional[np.ndarray] = None,
    dp_was_applied: bool = False,
    image_hw: Optional[tuple] = None,
) -> AttackResult:
    """Gradient-matching reconstruction with a fixed iteration budget.

    ``truth`` is used only to score the finished reconstruction (nan
    metrics when omitted); the optimization itself runs on the delta and
    public model alone.  Deterministic per seed.
    """
    values = _delta_values(delta)
    if model.kind == "linear_pixel":
        h, w = model.layout.layers[0].shape[:2]
    else:
        if image_hw is None:
            if truth is None:
                raise ValueError("image_hw (or truth) is required for the conv model")
            h, w = np.asarray(truth).shape[:2]
        else:
            h, w = image_hw
    image, iterations, _ = _reconstruct(values, model, h, w, budget, seed)
    if truth is not None:
        mse, psnr = reconstruction_scores(image, truth)
    else:
        mse, psnr = math.nan, math.nan
    return AttackResult(image, mse, psnr, iterations, dp_was_applied)


def invert_from_message(
    msg: ClientMessage,
    model: Model,
    budget: int,
    seed: int = 0,
    truth: Optional[np.ndarray] = None,
    image_hw: Optional[tuple] = None,
) -> AttackResult:
    """Attack surface for an observed wire message."""
    return optimize_invert(
        msg.delta,
        model,
        budget,
        seed=seed,
        truth=truth,
        dp_was_applied=msg.dp_applied,
        image_hw=image_hw,
    )


def _to_255(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.int64)


def write_ppm(path, image: np.ndarray) -> None:
    """Plain (ASCII, P3) PPM writer for [0,1]-ranged RGB images."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError("image must have shape (h, w, 3)")
    h, w = img.shape[:2]
    data = _to_255(img)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in data:
            fh.write(" ".join(str(v) for v in row.reshape(-1)))
            fh.write("\n")


def write_pgm(path, gray: np.ndarray) -> None:
    """Plain (ASCII, P2) PGM writer for [0,1]-ranged grayscale images."""
    img = np.asarray(gray)
    if img.ndim != 2:
        raise ValueError("image must have shape (h, w)")
    h, w = img.shape
    data = _to_255(img)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in data:
            fh.write(" ".join(str(v) for v in row))
            fh.write("\n")
