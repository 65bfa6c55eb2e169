"""scikit-learn style wrappers: ``fit(scenes)``, ``predict(scenes)``,
``score(scenes)`` (negative average RMSE), ``get_params``/``set_params``.

Targets live inside the scenes (their future frames), so ``y`` is ignored.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .features import SceneTensors, check_scenes
from .losses import KdmState, LossConfig
from .student import StudentConfig
from .teacher import TeacherConfig
from .training import TrainConfig, evaluate, predict, train_student, train_teacher


def check_forecast_input(X, require_future: bool = False):
    """Validate scenes for prediction (and, for scoring, that futures exist)."""
    if isinstance(X, SceneTensors):
        return X
    X = check_scenes(X)
    if require_future and any(s.future_frames == 0 or not np.isfinite(s.target).all() for s in X):
        raise ValueError("scoring needs scenes with complete futures")
    return X


class _Forecaster(RegressorMixin, BaseEstimator):
    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, lr_max=self.lr_max, lr_min=self.lr_min,
            restart_epochs=self.restart_epochs, epochs=self.epochs, seed=self.seed, clip_norm=self.clip_norm,
        )

    @property
    def _history_mode(self) -> str:
        return getattr(self, "history_mode", "recent")

    def predict(self, X) -> np.ndarray:
        """(N, T_f, 2) point forecasts relative to each target's last observed position."""
        check_is_fitted(self, "model_")
        pred, _, _ = predict(self.model_, check_forecast_input(X), self.point, history_mode=self._history_mode)
        return pred

    def predict_proba(self, X) -> np.ndarray:
        """(N, C) maneuver probabilities."""
        check_is_fitted(self, "model_")
        _, probs, _ = predict(self.model_, check_forecast_input(X), self.point, history_mode=self._history_mode)
        return probs

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_forecast_input(X, require_future=True), self.point,
                        history_mode=self._history_mode)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Negative average RMSE in meters (higher is better)."""
        return -self.evaluate(X).rmse_avg

    def save(self, path):
        check_is_fitted(self, "model_")
        extra = {"kdm_log_var": self.kdm_.log_var} if getattr(self, "kdm_", None) is not None else None
        return save_checkpoint(self.model_, path, seed=self.seed, extra_arrays=extra,
                               meta={"estimator_params": self._serializable_params()})

    def _serializable_params(self) -> dict:
        # the teacher object itself is not persisted with a student
        return {k: v for k, v in self.get_params(deep=False).items() if k != "teacher"}

    @classmethod
    def load(cls, path):
        ckpt = load_checkpoint(path)
        est = cls(**ckpt.manifest.get("estimator_params", {}))
        est.model_ = ckpt.model
        if "kdm_log_var" in ckpt.extra:
            import torch

            est.kdm_ = KdmState()
            with torch.no_grad():
                est.kdm_.log_var.copy_(torch.from_numpy(ckpt.extra["kdm_log_var"]))
        return est


class TeacherForecaster(_Forecaster):
    """Teacher network trained on the teacher loss.

    Parameters mirror :class:`TrainConfig` plus the ablation switches of
    :class:`TeacherConfig`.
    """

    def __init__(self, history_frames=16, epochs=50, batch_size=128, lr_max=1e-3, lr_min=1e-5,
                 restart_epochs=10, clip_norm=10.0, seed=0, coordinate_mode="all-modes", point="best",
                 use_vision_pool=True, use_surround=True, use_transformer=True, history_mode="recent"):
        self.history_frames = history_frames
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.restart_epochs = restart_epochs
        self.clip_norm = clip_norm
        self.seed = seed
        self.coordinate_mode = coordinate_mode
        self.point = point
        self.use_vision_pool = use_vision_pool
        self.use_surround = use_surround
        self.use_transformer = use_transformer
        self.history_mode = history_mode

    def fit(self, X, y=None, X_val=None):
        X = check_forecast_input(X, require_future=True)
        cfg = TeacherConfig(
            history_frames=self.history_frames, use_vision_pool=self.use_vision_pool,
            use_surround=self.use_surround, use_transformer=self.use_transformer,
        )
        res = train_teacher(X, self._train_config(), cfg, LossConfig(coordinate_mode=self.coordinate_mode),
                            val=X_val, history_mode=self.history_mode)
        self.model_ = res.model
        self.history_ = res.history
        self.n_parameters_ = sum(p.numel() for p in self.model_.parameters() if p.requires_grad)
        return self


class StudentForecaster(_Forecaster):
    """Student network, distilled from ``teacher`` (a fitted
    :class:`TeacherForecaster`, a teacher model or a checkpoint path) or
    trained supervised when ``teacher`` is None or ``alpha`` is 0."""

    def __init__(self, teacher=None, variant="full", alpha=0.5, temperature=2.0, learn_kdm=True, epochs=50,
                 batch_size=128, lr_max=1e-3, lr_min=1e-5, restart_epochs=10, clip_norm=10.0, seed=0,
                 coordinate_mode="all-modes", point="best"):
        self.teacher = teacher
        self.variant = variant
        self.alpha = alpha
        self.temperature = temperature
        self.learn_kdm = learn_kdm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.restart_epochs = restart_epochs
        self.clip_norm = clip_norm
        self.seed = seed
        self.coordinate_mode = coordinate_mode
        self.point = point

    def _student_config(self) -> StudentConfig:
        if self.variant == "s":
            return StudentConfig.small()
        if self.variant == "full":
            return StudentConfig()
        raise ValueError(f"variant must be 'full' or 's', got {self.variant!r}")

    def fit(self, X, y=None, X_val=None):
        X = check_forecast_input(X, require_future=True)
        teacher = self.teacher
        if isinstance(teacher, TeacherForecaster):
            check_is_fitted(teacher, "model_")
            teacher = teacher.model_
        loss = LossConfig(alpha=self.alpha, temperature=self.temperature, coordinate_mode=self.coordinate_mode)
        res = train_student(X, teacher, self._train_config(), self._student_config(), loss,
                            kdm=KdmState(learnable=self.learn_kdm), val=X_val)
        self.model_ = res.model
        self.kdm_ = res.kdm
        self.history_ = res.history
        self.n_parameters_ = sum(p.numel() for p in self.model_.parameters() if p.requires_grad)
        return self
