"""Teacher and student training loops, per-horizon RMSE evaluation and
metrics logging."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_model, model_kind, save_checkpoint
from .data import MANEUVERS, TrajectoryScene, crop_history, label_maneuver, maneuver_name
from .features import SceneTensors, build_scene_tensors, check_scenes, stack_tensors
from .forecast import GmmForecast
from .losses import KdmState, LossBundle, LossConfig, kdm_combine, track_loss, distillation_loss
from .student import StudentConfig, StudentModel
from .teacher import TeacherConfig, TeacherModel

logger = logging.getLogger(__name__)

HORIZONS_S = (1.0, 2.0, 3.0, 4.0, 5.0)

METRIC_FIELDS = (
    "step", "epoch", "batch", "lr", "tra_man", "tra_coor", "dis_man", "dis_coor", "total",
    "s_1", "s_2", "s_t", "s_d", "sigma_1", "sigma_2", "sigma_t", "sigma_d", "grad_norm",
)


class TrainingDivergence(FloatingPointError):
    """Non-finite loss or forecast during training."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    # cosine-annealing period (epochs) before the first warm restart
    restart_epochs: int = 10
    restart_mult: int = 1
    epochs: int = 50
    seed: int = 0
    clip_norm: float = 10.0
    shuffle: bool = True
    # peak learning rate of the KDM log-variances; 0 means lr_max
    kdm_lr: float = 0.0

    def __post_init__(self):
        if not self.lr_max > self.lr_min > 0:
            raise ValueError(f"need lr_max > lr_min > 0, got {self.lr_max}, {self.lr_min}")
        if self.kdm_lr < 0:
            raise ValueError("kdm_lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.restart_epochs < 1:
            raise ValueError("batch_size, epochs and restart_epochs must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")


@dataclass
class EvalReport:
    rmse_per_horizon: tuple
    rmse_avg: float
    maneuver_accuracy: dict
    n_samples: int
    horizons: tuple = HORIZONS_S

    def __post_init__(self):
        self.rmse_per_horizon = tuple(float(v) for v in self.rmse_per_horizon)
        if any(v < 0 or not math.isfinite(v) for v in self.rmse_per_horizon):
            raise ValueError("RMSE values must be finite and non-negative")
        if abs(self.rmse_avg - float(np.mean(self.rmse_per_horizon))) > 1e-9:
            raise ValueError("rmse_avg must be the mean of the horizon values")

    def to_dict(self) -> dict:
        return {
            "rmse_per_horizon": list(self.rmse_per_horizon),
            "rmse_avg": self.rmse_avg,
            "horizons_s": list(self.horizons),
            "maneuver_accuracy": dict(self.maneuver_accuracy),
            "n_samples": self.n_samples,
        }

    def row(self) -> dict:
        out = {f"rmse_{h:g}s": v for h, v in zip(self.horizons, self.rmse_per_horizon)}
        out["rmse_avg"] = self.rmse_avg
        out["n_samples"] = self.n_samples
        return out


@dataclass
class TrainResult:
    model: nn.Module
    history: list = field(default_factory=list)
    final_loss: float = float("nan")
    best_epoch: int = -1
    checkpoints: dict = field(default_factory=dict)
    kdm: KdmState | None = None
    metrics_path: Path | None = None


# ---------------------------------------------------------------------------
# data plumbing


def with_labels(scenes: Sequence[TrajectoryScene]) -> list[TrajectoryScene]:
    """Fill missing maneuver labels from each scene's future motion."""
    out = []
    for s in scenes:
        if s.maneuver_label is None:
            if s.future_frames == 0:
                raise ValueError("cannot label a scene without future frames")
            s = replace(s, maneuver_label=label_maneuver(s))
        out.append(s)
    return out


def featurize(scenes, history_frames: int, mode: str = "recent", vision=None) -> SceneTensors:
    """Stacked tensors of ``scenes`` cropped to ``history_frames`` (raw positions
    are cropped before differencing, so dropped frames cannot leak in)."""
    if isinstance(scenes, SceneTensors):
        if scenes.history_frames != history_frames:
            raise ValueError(f"tensors carry {scenes.history_frames} frames, model needs {history_frames}")
        return scenes
    scenes = check_scenes(scenes)
    items = []
    for s in scenes:
        if s.history_frames < history_frames:
            raise ValueError(f"scene has {s.history_frames} history frames, model needs {history_frames}")
        if s.history_frames != history_frames:
            s = crop_history(s, history_frames, mode)
        items.append(build_scene_tensors(s) if vision is None else build_scene_tensors(s, vision))
    return stack_tensors(items)


def _check_futures(tensors: SceneTensors):
    if tensors.future.shape[-2] == 0 or not np.isfinite(tensors.future).all():
        raise ValueError("scenes must have complete futures")


def _labels(batch, n_modes: int) -> torch.Tensor:
    m = batch["maneuver"]
    if (m < 0).any():
        raise ValueError("unlabelled scenes in training data")
    # a unimodal decoder has one class; every sample belongs to it
    return torch.zeros_like(m) if n_modes == 1 else m


def _index(batch: dict, idx) -> dict:
    return {k: v[idx] for k, v in batch.items()}


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start : start + batch_size])


def make_scheduler(opt, cfg: TrainConfig):
    return torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=cfg.restart_epochs, T_mult=cfg.restart_mult, eta_min=cfg.lr_min
    )


def _seed_all(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


class MetricsLog:
    """Append-only CSV of per-step loss parts, KDM state and learning rate."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self.rows = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                with self.path.open("w", newline="") as fh:
                    csv.writer(fh).writerow(METRIC_FIELDS)

    def append(self, row: dict):
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def _check_finite(parts: dict, epoch: int, batch: int):
    for name, v in parts.items():
        if not torch.isfinite(v).all():
            raise TrainingDivergence(
                f"non-finite {name} at epoch {epoch}, batch {batch}: "
                + ", ".join(f"{k}={float(x):.4g}" for k, x in parts.items())
            )


def _forward(model, batch, epoch, b) -> GmmForecast:
    forecast = model(batch)
    for name in ("logits", "mu", "sigma", "rho"):
        if not torch.isfinite(getattr(forecast, name)).all():
            raise TrainingDivergence(f"non-finite forecast {name} at epoch {epoch}, batch {b}")
    return forecast


# ---------------------------------------------------------------------------
# teacher


def train_teacher(
    scenes,
    cfg: TrainConfig = TrainConfig(),
    model_cfg: TeacherConfig = TeacherConfig(),
    loss_cfg: LossConfig = LossConfig(),
    val=None,
    out_dir=None,
    history_mode: str = "recent",
    model: TeacherModel | None = None,
) -> TrainResult:
    """Adam on the teacher loss. No early stopping: the final checkpoint is
    kept for distillation, and the best-validation one alongside it."""
    _seed_all(cfg.seed)
    if model is None:
        model = TeacherModel(model_cfg)
    model_cfg = model.cfg
    data = featurize(with_labels(scenes) if not isinstance(scenes, SceneTensors) else scenes,
                     model_cfg.history_frames, history_mode)
    _check_futures(data)
    val_data = None
    if val is not None:
        val_data = featurize(with_labels(val) if not isinstance(val, SceneTensors) else val,
                             model_cfg.history_frames, history_mode)
    batch_all = data.to_torch()
    out_dir = Path(out_dir) if out_dir is not None else None
    log = MetricsLog(out_dir / "metrics.csv" if out_dir else None)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_max)
    sched = make_scheduler(opt, cfg)
    rng = np.random.default_rng(cfg.seed) if cfg.shuffle else None
    n = len(data)
    n_batches = math.ceil(n / cfg.batch_size)
    result = TrainResult(model=model, metrics_path=log.path)
    best = float("inf")
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        total = 0.0
        for b, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            batch = _index(batch_all, idx)
            forecast = _forward(model, batch, epoch, b)
            man, coor = track_loss(forecast, batch["future"], _labels(batch, model_cfg.n_modes), loss_cfg.coordinate_mode)
            _check_finite({"maneuver loss": man, "coordinate loss": coor}, epoch, b)
            loss = man + coor
            lr = opt.param_groups[0]["lr"]
            opt.zero_grad()
            loss.backward()
            gnorm = _clip(model, cfg.clip_norm)
            opt.step()
            model.after_step()
            sched.step(epoch + (b + 1) / n_batches)
            log.append({"step": step, "epoch": epoch, "batch": b, "lr": lr, "tra_man": man.item(),
                        "tra_coor": coor.item(), "total": loss.item(), "grad_norm": gnorm})
            total += loss.item() * len(idx)
            step += 1
        epoch_loss = total / n
        entry = {"epoch": epoch, "train_loss": epoch_loss}
        score = epoch_loss
        if val_data is not None:
            rep = evaluate(model, val_data)
            entry["val_rmse_avg"] = rep.rmse_avg
            score = rep.rmse_avg
        result.history.append(entry)
        if score < best:
            best = score
            result.best_epoch = epoch
            if out_dir:
                result.checkpoints["best"] = save_checkpoint(model, out_dir / "best", seed=cfg.seed, meta={"epoch": epoch})
        logger.info("teacher epoch %d loss %.4f", epoch, epoch_loss)
    result.final_loss = result.history[-1]["train_loss"]
    model.eval()
    if out_dir:
        result.checkpoints["final"] = save_checkpoint(model, out_dir / "final", seed=cfg.seed, meta={"epoch": cfg.epochs - 1})
    return result


def _clip(model, clip_norm):
    params = [p for p in model.parameters() if p.grad is not None]
    if clip_norm is None:
        return float(torch.norm(torch.stack([p.grad.norm() for p in params]))) if params else 0.0
    return float(nn.utils.clip_grad_norm_(params, clip_norm))


# ---------------------------------------------------------------------------
# student


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def student_step_parts(student_fc, teacher_fc, batch, n_modes, loss_cfg: LossConfig) -> LossBundle:
    gt = batch["future"]
    tra_man, tra_coor = track_loss(student_fc, gt, _labels(batch, n_modes), loss_cfg.coordinate_mode)
    if teacher_fc is None or loss_cfg.alpha == 0:
        zero = tra_man.new_zeros(())
        return LossBundle(tra_man, tra_coor, zero, zero)
    dis_man, dis_coor = distillation_loss(student_fc, teacher_fc, loss_cfg)
    return LossBundle(tra_man, tra_coor, dis_man, dis_coor)


def train_student(
    scenes,
    teacher=None,
    cfg: TrainConfig = TrainConfig(),
    model_cfg: StudentConfig = StudentConfig(),
    loss_cfg: LossConfig = LossConfig(),
    kdm: KdmState | None = None,
    val=None,
    out_dir=None,
) -> TrainResult:
    """Student on its last-8-frame inputs, distilled from a frozen teacher.

    ``teacher=None`` or ``alpha=0`` is plain supervised training under the
    same KDM weighting. The KDM log-variances are optimised jointly with the
    student unless ``kdm`` was built with ``learnable=False``.
    """
    _seed_all(cfg.seed)
    student = StudentModel(model_cfg)
    kdm = kdm if kdm is not None else KdmState()
    scenes = with_labels(check_scenes(scenes))
    data = featurize(scenes, model_cfg.history_frames)
    _check_futures(data)
    batch_all = data.to_torch()
    use_teacher = teacher is not None and loss_cfg.alpha != 0
    teacher_all = None
    if use_teacher:
        teacher = freeze(load_model(teacher))
        if model_kind(teacher) != "teacher":
            raise TypeError("distillation source must be a teacher checkpoint")
        if teacher.cfg.n_modes != model_cfg.n_modes:
            raise ValueError("teacher and student maneuver sets differ")
        teacher_all = featurize(scenes, teacher.cfg.history_frames).to_torch()
    val_data = featurize(with_labels(val), model_cfg.history_frames) if val is not None else None
    out_dir = Path(out_dir) if out_dir is not None else None
    log = MetricsLog(out_dir / "metrics.csv" if out_dir else None)

    groups = [{"params": list(student.parameters())}]
    kdm_params = [p for p in kdm.parameters() if p.requires_grad]
    if kdm_params:
        groups.append({"params": kdm_params, "lr": cfg.kdm_lr or cfg.lr_max})
    opt = torch.optim.Adam(groups, lr=cfg.lr_max)
    sched = make_scheduler(opt, cfg)
    rng = np.random.default_rng(cfg.seed) if cfg.shuffle else None
    n = len(data)
    n_batches = math.ceil(n / cfg.batch_size)
    result = TrainResult(model=student, kdm=kdm, metrics_path=log.path)
    best = float("inf")
    step = 0
    for epoch in range(cfg.epochs):
        student.train()
        total = 0.0
        for b, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            batch = _index(batch_all, idx)
            forecast = _forward(student, batch, epoch, b)
            teacher_fc = None
            if use_teacher:
                with torch.no_grad():
                    teacher_fc = teacher(_index(teacher_all, idx))
            bundle = student_step_parts(forecast, teacher_fc, batch, model_cfg.n_modes, loss_cfg)
            names = ("tracking maneuver loss", "tracking coordinate loss",
                     "distillation maneuver loss", "distillation coordinate loss")
            _check_finite(dict(zip(names, bundle.parts())), epoch, b)
            # combine in double precision so the logged total is reproducible
            s = kdm.log_var.double()
            if not use_teacher:
                # no distillation term: keep s_d from drifting under the regulariser alone
                s = torch.cat([s[:3], s[3:].detach()])
            loss = kdm_combine([p.double() for p in bundle.parts()], s)
            lr = opt.param_groups[0]["lr"]
            s_now = [float(v) for v in kdm.log_var.detach()]
            sig_now = [math.exp(v / 2) for v in s_now]
            opt.zero_grad()
            loss.backward()
            gnorm = _clip(student, cfg.clip_norm)
            opt.step()
            student.after_step()
            sched.step(epoch + (b + 1) / n_batches)
            row = {"step": step, "epoch": epoch, "batch": b, "lr": lr, "total": loss.item(), "grad_norm": gnorm}
            row.update({k: v.item() for k, v in zip(("tra_man", "tra_coor", "dis_man", "dis_coor"), bundle.parts())})
            row.update(dict(zip(("s_1", "s_2", "s_t", "s_d"), s_now)))
            row.update(dict(zip(("sigma_1", "sigma_2", "sigma_t", "sigma_d"), sig_now)))
            log.append(row)
            total += loss.item() * len(idx)
            step += 1
        epoch_loss = total / n
        entry = {"epoch": epoch, "train_loss": epoch_loss, **kdm.as_dict()}
        score = epoch_loss
        if val_data is not None:
            rep = evaluate(student, val_data)
            entry["val_rmse_avg"] = rep.rmse_avg
            score = rep.rmse_avg
        result.history.append(entry)
        if score < best:
            best = score
            result.best_epoch = epoch
            if out_dir:
                result.checkpoints["best"] = save_checkpoint(
                    student, out_dir / "best", seed=cfg.seed, extra_arrays={"kdm_log_var": kdm.log_var},
                    meta={"epoch": epoch},
                )
        logger.info("student epoch %d loss %.4f %s", epoch, epoch_loss, kdm.as_dict())
    result.final_loss = result.history[-1]["train_loss"]
    student.eval()
    if out_dir:
        result.checkpoints["final"] = save_checkpoint(
            student, out_dir / "final", seed=cfg.seed, extra_arrays={"kdm_log_var": kdm.log_var},
            meta={"epoch": cfg.epochs - 1, "distilled": use_teacher, "alpha": loss_cfg.alpha},
        )
    return result


# ---------------------------------------------------------------------------
# evaluation


def horizon_indices(dt: float, horizon: int, horizons=HORIZONS_S) -> list[int]:
    """0-based future-frame index closest to each horizon (frame k lies at (k+1)*dt)."""
    idx = []
    for h in horizons:
        k = int(round(h / dt)) - 1
        if not 0 <= k < horizon:
            raise ValueError(f"horizon {h}s is outside a {horizon}-frame future at dt={dt}")
        idx.append(k)
    return idx


def rmse_report(pred, gt, dt: float, probs=None, labels=None, horizons=HORIZONS_S) -> EvalReport:
    """Per-horizon RMSE of (N, T_f, 2) point predictions plus per-maneuver accuracy."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} must both be (N, T_f, 2)")
    if len(pred) == 0:
        raise ValueError("empty scene set")
    idx = horizon_indices(dt, gt.shape[1], horizons)
    sq = ((pred[:, idx] - gt[:, idx]) ** 2).sum(-1)  # (N, H)
    rmse = np.sqrt(sq.mean(0))
    acc = {}
    if probs is not None and labels is not None and np.asarray(probs).shape[-1] == len(MANEUVERS):
        hit = np.asarray(probs).argmax(-1) == np.asarray(labels)
        for c in range(len(MANEUVERS)):
            sel = np.asarray(labels) == c
            if sel.any():
                acc[maneuver_name(c)] = float(hit[sel].mean())
        if (np.asarray(labels) >= 0).any():
            acc["overall"] = float(hit[np.asarray(labels) >= 0].mean())
    return EvalReport(tuple(rmse), float(rmse.mean()), acc, len(pred), tuple(horizons))


@torch.no_grad()
def predict(model, scenes, point: str = "best", batch_size: int = 256, history_mode: str = "recent"):
    """(point predictions (N, T_f, 2), maneuver probabilities (N, C), tensors) for ``scenes``."""
    model = load_model(model)
    model.eval()
    data = featurize(scenes, model.cfg.history_frames, history_mode)
    batch_all = data.to_torch()
    preds, probs = [], []
    for idx in _batches(len(data), batch_size, None):
        fc = model(_index(batch_all, idx))
        preds.append(fc.point_prediction(point).double().numpy())
        probs.append(fc.probs.double().numpy())
    return np.concatenate(preds), np.concatenate(probs), data


def evaluate(model, scenes, point: str = "best", history_mode: str = "recent") -> EvalReport:
    """RMSE at 1-5 s of the most probable maneuver's mean (or the
    probability-weighted mean with ``point="weighted"``)."""
    if not isinstance(scenes, SceneTensors) and len(scenes) == 0:
        raise ValueError("empty scene set")
    pred, probs, data = predict(model, scenes, point, history_mode=history_mode)
    _check_futures(data)
    dt = float(np.asarray(data.dt).reshape(-1)[0])
    return rmse_report(pred, data.future, dt, probs, data.maneuver)
