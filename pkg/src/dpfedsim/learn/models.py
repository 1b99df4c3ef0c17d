"""Toy differentiable segmentation models with hand-written gradients.

Two model kinds:

``linear_pixel``
    An independent affine classifier per pixel position: for each (i, j),
    scores = weight[i,j] @ rgb + bias[i,j] with weight (3 classes x 3
    channels).  No weight sharing, so a single sample's parameter gradient
    factors per pixel into an outer product of the softmax residual and
    that pixel's color (which is what makes update inversion tractable,
    and what the privacy mechanisms are defending against).

``micro_dual_branch``
    A minimal two-branch model fused by addition: a local 3x3 convolution
    (3 input channels, 1 output channel, zero padding) plus a global
    branch (4x average pool, per-class affine on pooled color, nearest-
    neighbor 4x upsample).  The scalar local feature is broadcast-added to
    the 3 global class channels and a final per-pixel affine head maps the
    fused channels to class scores.  Requires h and w divisible by 4.

Loss is per-pixel softmax cross-entropy, averaged over batch and pixels.
All gradients are exact analytic derivatives (checked against finite
differences in the test suite).
"""

from dataclasses import dataclass

import numpy as np

from ..params import LayoutSpec, ParamVector, flatten, unflatten
from .metrics import SegMetrics, seg_metrics

__all__ = [
    "MODEL_KINDS",
    "Model",
    "model_layout",
    "forward_loss_grad",
    "class_scores",
    "predict",
    "evaluate",
]

MODEL_KINDS = ("linear_pixel", "micro_dual_branch")

_POOL = 4


@dataclass(frozen=True)
class Model:
    """A model kind plus its flat parameters and layer layout."""

    kind: str
    params: ParamVector
    layout: LayoutSpec

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.params.layout_id != self.layout.layout_id:
            raise ValueError("params layout_id does not match layout")


def model_layout(kind: str, h: int, w: int) -> LayoutSpec:
    """Layer layout for a model kind at image size h x w."""
    if kind == "linear_pixel":
        return LayoutSpec.from_shapes(
            [("weight", (h, w, 3, 3)), ("bias", (h, w, 3))]
        )
    if kind == "micro_dual_branch":
        if h % _POOL or w % _POOL:
            raise ValueError("micro_dual_branch needs h and w divisible by 4")
        return LayoutSpec.from_shapes(
            [
                ("conv_w", (3, 3, 3)),
                ("conv_b", (1,)),
                ("glob_w", (3, 3)),
                ("glob_b", (3,)),
                ("head_w", (3, 3)),
                ("head_b", (3,)),
            ]
        )
    raise ValueError(f"unknown model kind {kind!r}")


def _as_batch(images: np.ndarray, masks=None):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"images must have shape (b, h, w, 3), got {x.shape}")
    if masks is None:
        return x, None
    y = np.asarray(masks)
    if y.ndim == 2:
        y = y[None]
    if y.shape != x.shape[:3]:
        raise ValueError(f"masks shape {y.shape} does not match images {x.shape[:3]}")
    if y.min() < 0 or y.max() > 2:
        raise ValueError("mask labels must lie in {0, 1, 2}")
    return x, y.astype(np.int64)


def _check_model_shape(model: Model, x: np.ndarray) -> None:
    _, h, w, _ = x.shape
    if model.kind == "linear_pixel":
        lh, lw = model.layout.layers[0].shape[:2]
        if (h, w) != (lh, lw):
            raise ValueError(f"image size {(h, w)} does not match model {(lh, lw)}")
    else:
        if h % _POOL or w % _POOL:
            raise ValueError("micro_dual_branch needs h and w divisible by 4")


def _scores_linear(p, x):
    return np.einsum("hwck,bhwk->bhwc", p["weight"], x) + p["bias"]


def _scores_micro(p, x):
    b, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    local = np.zeros((b, h, w))
    for u in range(3):
        for v in range(3):
            local += xp[:, u : u + h, v : v + w, :] @ p["conv_w"][u, v]
    local += p["conv_b"][0]
    pooled = x.reshape(b, h // _POOL, _POOL, w // _POOL, _POOL, 3).mean(axis=(2, 4))
    gcell = pooled @ p["glob_w"].T + p["glob_b"]
    gup = np.repeat(np.repeat(gcell, _POOL, axis=1), _POOL, axis=2)
    fused = gup + local[..., None]
    scores = fused @ p["head_w"].T + p["head_b"]
    return scores, (xp, pooled, fused, local)


def class_scores(model: Model, images: np.ndarray) -> np.ndarray:
    """Per-pixel class scores, shape (b, h, w, 3)."""
    x, _ = _as_batch(images)
    _check_model_shape(model, x)
    p = unflatten(model.params, model.layout)
    if model.kind == "linear_pixel":
        return _scores_linear(p, x)
    scores, _ = _scores_micro(p, x)
    return scores


def _softmax_ce(scores, y):
    """Mean cross-entropy and its gradient wrt scores."""
    z = scores - scores.max(axis=-1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=-1, keepdims=True)
    logp = z - np.log(denom)
    npix = y.size
    picked = np.take_along_axis(logp, y[..., None], axis=-1)
    loss = -float(picked.sum()) / npix
    dscores = expz / denom
    np.put_along_axis(
        dscores, y[..., None], np.take_along_axis(dscores, y[..., None], axis=-1) - 1.0, axis=-1
    )
    dscores /= npix
    return loss, dscores


def _linear_grads(x, ds):
    return [
        ("weight", np.einsum("bhwc,bhwk->hwck", ds, x)),
        ("bias", ds.sum(axis=0)),
    ]


def _micro_grads(p, cache, x, ds):
    xp, pooled, fused, _ = cache
    b, h, w, _ = x.shape
    d_head_w = np.einsum("bhwc,bhwm->cm", ds, fused)
    d_head_b = ds.sum(axis=(0, 1, 2))
    dfused = ds @ p["head_w"]
    dlocal = dfused.sum(axis=-1)
    dgcell = dfused.reshape(b, h // _POOL, _POOL, w // _POOL, _POOL, 3).sum(axis=(2, 4))
    d_glob_w = np.einsum("bstc,bstk->ck", dgcell, pooled)
    d_glob_b = dgcell.sum(axis=(0, 1, 2))
    d_conv_w = np.empty((3, 3, 3))
    for u in range(3):
        for v in range(3):
            d_conv_w[u, v] = np.einsum("bhw,bhwk->k", dlocal, xp[:, u : u + h, v : v + w, :])
    d_conv_b = np.array([dlocal.sum()])
    return [
        ("conv_w", d_conv_w),
        ("conv_b", d_conv_b),
        ("glob_w", d_glob_w),
        ("glob_b", d_glob_b),
        ("head_w", d_head_w),
        ("head_b", d_head_b),
    ]


def forward_loss_grad(model: Model, images, masks):
    """Mean softmax cross-entropy over a batch and its parameter gradient."""
    x, y = _as_batch(images, masks)
    if y is None:
        raise ValueError("masks are required")
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    _check_model_shape(model, x)
    p = unflatten(model.params, model.layout)
    if model.kind == "linear_pixel":
        scores = _scores_linear(p, x)
        loss, ds = _softmax_ce(scores, y)
        return loss, flatten(_linear_grads(x, ds))
    scores, cache = _scores_micro(p, x)
    loss, ds = _softmax_ce(scores, y)
    return loss, flatten(_micro_grads(p, cache, x, ds))


def loss_grad_soft(model: Model, images, soft_targets):
    """Cross-entropy against per-pixel soft targets; used by attack code.

    ``soft_targets`` has shape (b, h, w, 3) with rows summing to 1.
    """
    x, _ = _as_batch(images)
    t = np.asarray(soft_targets, dtype=np.float64)
    if t.ndim == 3:
        t = t[None]
    if t.shape != x.shape[:3] + (3,):
        raise ValueError("soft targets must have shape (b, h, w, 3)")
    _check_model_shape(model, x)
    p = unflatten(model.params, model.layout)
    if model.kind == "linear_pixel":
        scores = _scores_linear(p, x)
    else:
        scores, cache = _scores_micro(p, x)
    z = scores - scores.max(axis=-1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=-1, keepdims=True)
    logp = z - np.log(denom)
    npix = t.size // 3
    loss = -float((t * logp).sum()) / npix
    ds = (expz / denom - t) / npix
    if model.kind == "linear_pixel":
        return loss, flatten(_linear_grads(x, ds))
    return loss, flatten(_micro_grads(p, cache, x, ds))


def predict(model: Model, image: np.ndarray) -> np.ndarray:
    """Argmax class mask for one image (h, w, 3) or a batch (b, h, w, 3)."""
    single = np.asarray(image).ndim == 3
    scores = class_scores(model, image)
    labels = scores.argmax(axis=-1).astype(np.uint8)
    return labels[0] if single else labels


def evaluate(model: Model, images, masks) -> tuple[float, SegMetrics]:
    """Held-out mean cross-entropy plus Dice/Jaccard/Acc in one pass."""
    x, y = _as_batch(images, masks)
    _check_model_shape(model, x)
    scores = class_scores(model, x)
    z = scores - scores.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -float(np.take_along_axis(logp, y[..., None], axis=-1).sum()) / y.size
    pred = scores.argmax(axis=-1).astype(np.uint8)
    return loss, seg_metrics(pred, y)
