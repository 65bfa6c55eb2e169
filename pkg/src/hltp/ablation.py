"""Ablation harness: component toggles (methods A-G), observation-length
sweep, missing-history subsets and the SWA window grid."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import MISSING_RANGES, TrajectoryScene, make_missing_subset
from .losses import KdmState, LossConfig
from .student import StudentConfig
from .swa import ShiftWindowConfig, SwaConfig
from .teacher import TeacherConfig
from .training import EvalReport, TrainConfig, evaluate, train_student, train_teacher

logger = logging.getLogger(__name__)

COMPONENT_METHODS = {
    "A": "without vision-aware pooling",
    "B": "without surround-aware encoder",
    "C": "without transformer",
    "D": "dot-product attention instead of SWA",
    "E": "unimodal decoder",
    "F": "without KDM (fixed equal weights)",
    "G": "full model",
}
T_OBS_SWEEP = (4, 6, 10, 12, 16)
HISTORY_MODES = ("recent", "initial")
# (window_x, window_y, stride_x, stride_y): the stride grid at a 32x24 window,
# then the window-height grid at strides (8, 6)
SWA_GRID = (
    (32, 24, 8, 4),
    (32, 24, 8, 6),
    (32, 24, 8, 8),
    (32, 24, 8, 12),
    (32, 24, 16, 12),
    (32, 12, 8, 6),
    (32, 18, 8, 6),
    (32, 30, 8, 6),
    (32, 36, 8, 6),
)
# windows per axis for every grid cell; fixes the per-cell canvas size
GRID_WINDOWS = 4
SUITES = ("components", "t_obs", "missing", "swa-window")


class UnknownSuiteError(ValueError):
    pass


@dataclass
class AblationRow:
    label: str
    report: EvalReport
    info: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"label": self.label, **self.info, **self.report.row()}


@dataclass
class AblationTable:
    suite: str
    rows: list

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.rows]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dicts = [r.as_dict() for r in self.rows]
        keys = list(dict.fromkeys(k for d in dicts for k in d))
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for d in dicts:
                w.writerow({k: _cell(v) for k, v in d.items()})
        return path


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list, tuple)):
        return json.dumps(v, sort_keys=True)
    return v


@dataclass(frozen=True)
class AblationConfig:
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    teacher: TeacherConfig = TeacherConfig()
    student: StudentConfig = StudentConfig()


def canvas_for(window_x, window_y, stride_x, stride_y, z: int = GRID_WINDOWS) -> tuple[int, int]:
    """(L, D) on which a window grid has exactly ``z`` windows per axis."""
    return window_x + (z - 1) * stride_x, window_y + (z - 1) * stride_y


def pad_neighbors(scene: TrajectoryScene, n_max: int) -> TrajectoryScene:
    """Add masked neighbor slots up to ``n_max``."""
    n = scene.max_neighbors
    if n_max < n:
        raise ValueError(f"cannot pad {n} neighbor slots down to {n_max}")
    if n_max == n:
        return scene
    T = scene.total_frames
    nbr = np.concatenate([scene.neighbors, np.zeros((n_max - n, T, 2))], axis=0)
    mask = np.concatenate([scene.neighbor_mask, np.zeros((n_max - n, T), dtype=bool)], axis=0)
    return replace(scene, neighbors=nbr, neighbor_mask=mask)


def _key(cfg) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, default=str)


def run_components(train, test, cfg: AblationConfig) -> AblationTable:
    """Methods A-G; each row trains a teacher, distils a student and reports the student."""
    teachers = {}
    rows = []
    for method, desc in COMPONENT_METHODS.items():
        t_cfg, s_cfg = cfg.teacher, cfg.student
        kdm = KdmState()
        if method == "A":
            t_cfg, s_cfg = replace(t_cfg, use_vision_pool=False), replace(s_cfg, use_vision_pool=False)
        elif method == "B":
            t_cfg = replace(t_cfg, use_surround=False)
        elif method == "C":
            t_cfg = replace(t_cfg, use_transformer=False)
        elif method == "D":
            t_cfg = replace(t_cfg, swa=replace(t_cfg.swa, kind="dot"))
            s_cfg = replace(s_cfg, swa=replace(s_cfg.swa, kind="dot"))
        elif method == "E":
            t_cfg, s_cfg = replace(t_cfg, n_modes=1), replace(s_cfg, n_modes=1)
        elif method == "F":
            kdm = KdmState(learnable=False)
        key = _key(t_cfg)
        if key not in teachers:
            teachers[key] = train_teacher(train, cfg.train, t_cfg, cfg.loss).model
        teacher = teachers[key]
        student = train_student(train, teacher, cfg.train, s_cfg, cfg.loss, kdm=kdm).model
        rep = evaluate(student, test)
        info = {"method": desc, "teacher_rmse_avg": evaluate(teacher, test).rmse_avg}
        rows.append(AblationRow(method, rep, info))
        logger.info("components %s rmse_avg %.3f", method, rep.rmse_avg)
    return AblationTable("components", rows)


def run_t_obs(train, test, cfg: AblationConfig) -> AblationTable:
    """Teacher trained and evaluated on k observed frames taken from the recent or initial end."""
    rows = []
    for k in T_OBS_SWEEP:
        for mode in HISTORY_MODES:
            t_cfg = replace(cfg.teacher, history_frames=k)
            model = train_teacher(train, cfg.train, t_cfg, cfg.loss, history_mode=mode).model
            rep = evaluate(model, test, history_mode=mode)
            rows.append(AblationRow(f"{k} {mode}", rep, {"t_obs": k, "history_mode": mode}))
    return AblationTable("t_obs", rows)


def run_missing(train, test, cfg: AblationConfig) -> AblationTable:
    """One teacher trained on complete histories, evaluated on each interpolated subset."""
    model = train_teacher(train, cfg.train, cfg.teacher, cfg.loss).model
    rows = []
    for a, b in MISSING_RANGES:
        subset = [make_missing_subset(s, (a, b)) for s in test]
        rows.append(AblationRow(f"{a}-{b}", evaluate(model, subset), {"dropped_frames": f"{a}-{b}"}))
    return AblationTable("missing", rows)


def swa_cell_config(teacher: TeacherConfig, cell) -> TeacherConfig:
    wx, wy, sx, sy = cell
    L, D = canvas_for(wx, wy, sx, sy)
    heads = teacher.swa.heads
    swa = SwaConfig(heads=heads, d_q=D * heads, d_k=D * heads, d_v=D * heads, window=ShiftWindowConfig(wx, wy, sx, sy))
    return replace(teacher, max_neighbors=L - 1, swa=swa)


def run_swa_window(train, test, cfg: AblationConfig, cells=SWA_GRID) -> AblationTable:
    """Teacher per window cell; scenes are padded with masked slots to the cell's canvas height."""
    rows = []
    for cell in cells:
        t_cfg = swa_cell_config(cfg.teacher, cell)
        n = t_cfg.max_neighbors
        tr = [pad_neighbors(s, n) for s in train]
        te = [pad_neighbors(s, n) for s in test]
        model = train_teacher(tr, cfg.train, t_cfg, cfg.loss).model
        wx, wy, sx, sy = cell
        L, D = canvas_for(*cell)
        info = {"window": f"{wx}x{wy}", "strides": f"{sx},{sy}", "canvas": f"{L}x{D}"}
        rows.append(AblationRow(f"{wx}x{wy}/{sx},{sy}", evaluate(model, te), info))
    return AblationTable("swa-window", rows)


_RUNNERS = {
    "components": run_components,
    "t_obs": run_t_obs,
    "missing": run_missing,
    "swa-window": run_swa_window,
}


def run_ablation(suite: str, train: Sequence[TrajectoryScene], test: Sequence[TrajectoryScene],
                 cfg: AblationConfig = AblationConfig()) -> AblationTable:
    if suite not in _RUNNERS:
        raise UnknownSuiteError(f"unknown suite {suite!r}; valid suites: {', '.join(SUITES)}")
    if not train or not test:
        raise ValueError("ablation needs non-empty train and test scenes")
    return _RUNNERS[suite](list(train), list(test), cfg)
