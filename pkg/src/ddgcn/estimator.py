"""scikit-learn style wrapper around the network and its training loop."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionError
from .model import ModelConfig
from .training import TrainConfig, evaluate_horizons, fit, mpjpe_loss


def check_motion(X, name="X", n_frames=None, n_joints=None, n_dims=None):
    """Validate a ``[N, T, M, D]`` motion batch and return it as float64."""
    X = check_array(X, allow_nd=True, dtype=np.float64, input_name=name)
    if X.ndim != 4:
        raise DimensionError(f"{name} must be [N, T, M, D], got {X.ndim} dimensions")
    for axis, want, label in ((1, n_frames, "frames"), (2, n_joints, "joints"), (3, n_dims, "dims")):
        if want is not None and X.shape[axis] != want:
            raise DimensionError(f"{name} has {X.shape[axis]} {label}, expected {want}")
    return X


class DDGCNForecaster(RegressorMixin, BaseEstimator):
    """Forecast future skeleton frames from observed ones.

    ``fit(X, y)`` takes histories ``X`` of shape ``[N, T_h, M, D]`` and the
    following frames ``y`` of shape ``[N, T_f, M, D]``; ``predict(X)``
    returns forecasts shaped like ``y``. ``score`` is the negated MPJPE so
    that larger is better, as model selection utilities expect.

    ``level_joint_counts=None`` means the default hierarchy of the chosen
    topology: ``(22, 11, 2)`` for ``"h36m"``, a single level for ``"chain"``.
    """

    def __init__(self, topology="chain", level_joint_counts=None, d_hidden=128, n_blocks=3,
                 phi_mode="phi1", dropout=0.1, adjacency_init="mean", decoder_init="xavier",
                 epochs=50, batch_size=16, learning_rate=1e-5, lr_decay=0.96, decay_every=4,
                 clip_norm=1.0, random_state=0):
        self.topology = topology
        self.level_joint_counts = level_joint_counts
        self.d_hidden = d_hidden
        self.n_blocks = n_blocks
        self.phi_mode = phi_mode
        self.dropout = dropout
        self.adjacency_init = adjacency_init
        self.decoder_init = decoder_init
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _configs(self, t_history, t_future, n_joints, n_dims):
        counts = self.level_joint_counts
        if counts is None:
            counts = (22, 11, 2) if self.topology == "h36m" else (n_joints,)
        seed = 0 if self.random_state is None else int(self.random_state)
        model_cfg = ModelConfig(
            t_history=t_history, t_future=t_future, n_joints=n_joints, n_dims=n_dims,
            d_hidden=self.d_hidden, n_blocks=self.n_blocks, n_levels_extra=len(counts) - 1,
            level_joint_counts=tuple(counts), topology=self.topology, dropout=self.dropout,
            phi_mode=self.phi_mode, adjacency_init=self.adjacency_init,
            decoder_init=self.decoder_init, seed=seed,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.learning_rate,
            lr_decay=self.lr_decay, decay_every=self.decay_every, clip_norm=self.clip_norm,
            checkpoint_every=0, seed=seed,
        )
        return model_cfg, train_cfg

    def fit(self, X, y, eval_set=None):
        X = check_motion(X, "X")
        y = check_motion(y, "y", n_joints=X.shape[2], n_dims=X.shape[3])
        if y.shape[0] != X.shape[0]:
            raise DimensionError("X and y hold different numbers of samples")
        model_cfg, train_cfg = self._configs(X.shape[1], y.shape[1], X.shape[2], X.shape[3])
        val = None
        if eval_set is not None:
            val = (check_motion(eval_set[0], "eval X"), check_motion(eval_set[1], "eval y"))
        result = fit(model_cfg, (X, y), val, train_cfg)
        self.model_ = result.model
        self.history_ = result.history
        self.config_ = model_cfg
        self.n_joints_ = X.shape[2]
        self.t_history_ = X.shape[1]
        self.t_future_ = y.shape[1]
        return self

    def predict_full(self, X):
        """Reconstructed history followed by the forecast, ``[N, T_h + T_f, M, D]``."""
        check_is_fitted(self, "model_")
        X = check_motion(X, "X", self.t_history_, self.n_joints_, self.config_.n_dims)
        self.model_.eval()
        with torch.no_grad():
            return self.model_(torch.from_numpy(X)).numpy()

    def predict(self, X):
        return self.predict_full(X)[:, self.t_history_:]

    def score(self, X, y, sample_weight=None):
        pred = torch.from_numpy(self.predict(X))
        y = torch.from_numpy(check_motion(y, "y"))
        if sample_weight is None:
            return -float(mpjpe_loss(pred, y))
        per = torch.linalg.vector_norm(pred - y, dim=-1).mean(dim=(1, 2)).numpy()
        return -float(np.average(per, weights=sample_weight))

    def horizon_errors(self, X, y, horizons_ms, fps=25.0):
        """Per-horizon MPJPE table (see :func:`ddgcn.training.evaluate_horizons`)."""
        check_is_fitted(self, "model_")
        return evaluate_horizons(self.model_, check_motion(X, "X"), check_motion(y, "y"),
                                 horizons_ms, fps)
