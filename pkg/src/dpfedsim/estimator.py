"""Scikit-learn style front end for federated training.

``FederatedSegmenter`` wraps the protocol simulator behind the usual
fit/predict/score surface so it composes with pipelines, ``clone``, and
parameter searches (e.g. grid-searching ``dp_sigma``).  ``fit`` shards the
provided images across simulated clients and runs the configured number
of federated rounds; 30% of the data is held out internally for the
per-round metrics available as ``history_``.
"""

import numpy as np
from sklearn.base import BaseEstimator

from .config import DatasetConfig, ExperimentConfig, TransportConfig
from .dpcore import DpConfig
from .learn.data import SegDataset
from .learn.models import Model, predict
from .server import run_experiment

__all__ = ["FederatedSegmenter"]


def _check_images(X, name="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n_samples, h, w, 3), got {X.shape}")
    if X.shape[1] < 8 or X.shape[2] < 8:
        raise ValueError(f"{name} images must be at least 8x8")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def _check_masks(y, shape, name="y"):
    y = np.asarray(y)
    if y.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"{name} labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() > 2:
        raise ValueError(f"{name} labels must lie in {{0, 1, 2}}")
    return y.astype(np.uint8)


class FederatedSegmenter(BaseEstimator):
    """Pixel-level 3-class segmenter trained by simulated federated rounds.

    Parameters mirror the experiment config: the model kind, client count,
    round budget, local SGD settings, the privacy mechanism (clipping
    threshold, noise multiplier, delta, placement), partitioning mode, and
    transport drop rate.  ``random_state`` is the root seed all
    sub-streams derive from.
    """

    def __init__(
        self,
        model_kind="micro_dual_branch",
        n_clients=5,
        rounds=20,
        local_epochs=5,
        lr=0.1,
        batch_size=16,
        partition_mode="iid",
        dp_mechanism="none",
        dp_sigma=0.05,
        dp_clip_c=0.5,
        dp_delta=1e-5,
        noise_site="client",
        drop_rate=0.0,
        random_state=0,
    ):
        self.model_kind = model_kind
        self.n_clients = n_clients
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.partition_mode = partition_mode
        self.dp_mechanism = dp_mechanism
        self.dp_sigma = dp_sigma
        self.dp_clip_c = dp_clip_c
        self.dp_delta = dp_delta
        self.noise_site = noise_site
        self.drop_rate = drop_rate
        self.random_state = random_state

    def _config(self, n, h, w) -> ExperimentConfig:
        return ExperimentConfig(
            clients=self.n_clients,
            local_epochs=self.local_epochs,
            rounds=self.rounds,
            model_kind=self.model_kind,
            dataset=DatasetConfig(n=n, h=h, w=w, partition_mode=self.partition_mode),
            dp=DpConfig(
                clip_c=self.dp_clip_c,
                sigma=self.dp_sigma,
                delta=self.dp_delta,
                mechanism=self.dp_mechanism,
                noise_site=self.noise_site,
            ),
            hyper_lr=self.lr,
            hyper_batch=self.batch_size,
            transport=TransportConfig(drop_rate=self.drop_rate),
            convergence=None,
            root_seed=self.random_state,
        )

    def fit(self, X, y):
        X = _check_images(X)
        y = _check_masks(y, X.shape[:3])
        if len(X) < self.n_clients:
            raise ValueError(
                f"need at least n_clients={self.n_clients} samples, got {len(X)}"
            )
        cfg = self._config(len(X), X.shape[1], X.shape[2])
        result = run_experiment(cfg, dataset=SegDataset(X, y))
        self.theta_ = result.theta
        self.layout_ = result.layout
        self.history_ = list(result.history)
        self.n_rounds_ = len(result.history)
        self.image_shape_ = (X.shape[1], X.shape[2])
        self.classes_ = np.array([0, 1, 2])
        return self

    def _model(self) -> Model:
        if not hasattr(self, "theta_"):
            raise AttributeError("estimator is not fitted; call fit first")
        return Model(self.model_kind, self.theta_, self.layout_)

    def predict(self, X):
        model = self._model()
        X = _check_images(X)
        if X.shape[1:3] != self.image_shape_:
            raise ValueError(
                f"X image size {X.shape[1:3]} does not match fitted size {self.image_shape_}"
            )
        return predict(model, X)

    def score(self, X, y):
        """Mean pixel accuracy over the given samples."""
        X = _check_images(X)
        y = _check_masks(y, X.shape[:3])
        pred = self.predict(X)
        return float((pred == y).mean())
