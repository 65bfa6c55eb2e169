"""Scene tensors: visual vectors S, context matrices M, and batching.

Kinematics come from second-order finite differences of positions
(central in the interior, one-sided second order at the ends), computed only
over each agent's valid frames so padded slots never leak into features.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .data import TrajectoryScene, crop_history
from .vision import VisionSectorConfig, central_flags, wrap_angle

STATIONARY_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class Kinematics:
    velocity: np.ndarray  # (A, T, 2)
    speed: np.ndarray  # (A, T)
    accel: np.ndarray  # (A, T) rate of change of speed
    heading: np.ndarray  # (A, T)
    valid: np.ndarray  # (A, T)


def agent_kinematics(pos: np.ndarray, valid: np.ndarray, dt: float) -> Kinematics:
    """Finite-difference kinematics per agent over its valid frames.

    Agents with fewer than three valid frames are marked invalid throughout.
    """
    A, T, _ = pos.shape
    vel = np.zeros((A, T, 2))
    speed = np.zeros((A, T))
    accel = np.zeros((A, T))
    heading = np.zeros((A, T))
    ok = valid.copy()
    for i in range(A):
        idx = np.flatnonzero(valid[i])
        if len(idx) < 3:
            ok[i] = False
            continue
        t = idx * dt
        p = pos[i, idx]
        v = np.stack([np.gradient(p[:, k], t, edge_order=2) for k in range(2)], axis=-1)
        s = np.hypot(v[:, 0], v[:, 1])
        vel[i, idx] = v
        speed[i, idx] = s
        accel[i, idx] = np.gradient(s, t, edge_order=2)
        heading[i, idx] = displacement_heading(p)
    return Kinematics(vel, speed, accel, heading, ok)


def displacement_heading(p: np.ndarray) -> np.ndarray:
    """Heading of the frame-to-frame displacement ending at each frame.

    Stationary steps hold the last moving heading; frames before the first
    movement take the first moving heading; a vehicle that never moves has
    heading 0.
    """
    n = len(p)
    out = np.zeros(n)
    if n < 2:
        return out
    d = np.diff(p, axis=0)
    moving = np.hypot(d[:, 0], d[:, 1]) >= STATIONARY_EPS
    if not moving.any():
        return out
    h = np.arctan2(d[:, 1], d[:, 0])
    first = int(np.argmax(moving))
    current = h[first]
    out[: first + 1] = current
    for k in range(first, n - 1):
        if moving[k]:
            current = h[k]
        out[k + 1] = current
    return out


def _history(scene: TrajectoryScene):
    T_obs = scene.history_frames
    if T_obs < 3:
        raise ValueError("at least 3 history frames are needed for second differences")
    pos, valid = scene.agents()
    pos, valid = pos[:, :T_obs], valid[:, :T_obs]
    # padded coordinates are never read
    pos = np.where(valid[..., None], pos, 0.0)
    return pos, valid


def build_visual_vectors(scene: TrajectoryScene, kin: Kinematics | None = None) -> np.ndarray:
    """S: (N+1, T_obs, 4) channels [dx, dy, dspeed, daccel] relative to the target."""
    pos, valid = _history(scene)
    kin = kin or agent_kinematics(pos, valid, scene.dt)
    S = np.zeros(pos.shape[:2] + (4,))
    S[..., :2] = pos - pos[:1]
    S[..., 2] = kin.speed - kin.speed[:1]
    S[..., 3] = kin.accel - kin.accel[:1]
    S[~kin.valid] = 0.0
    S[0] = 0.0
    return S


def build_context_matrices(scene: TrajectoryScene, kin: Kinematics | None = None) -> np.ndarray:
    """M: (N+1, T_obs, 2) adjacent-frame speed and heading differences per agent."""
    pos, valid = _history(scene)
    kin = kin or agent_kinematics(pos, valid, scene.dt)
    M = np.zeros(pos.shape[:2] + (2,))
    both = kin.valid[:, 1:] & kin.valid[:, :-1]
    M[:, 1:, 0] = np.where(both, kin.speed[:, 1:] - kin.speed[:, :-1], 0.0)
    M[:, 1:, 1] = np.where(both, wrap_angle(kin.heading[:, 1:] - kin.heading[:, :-1]), 0.0)
    return M


@dataclass(frozen=True, eq=False)
class SceneTensors:
    """Model-ready arrays for one scene (or a stacked batch, with a leading axis)."""

    S: np.ndarray  # (A, T, 4)
    M: np.ndarray  # (A, T, 2)
    agent_mask: np.ndarray  # (A,)
    frame_mask: np.ndarray  # (A, T)
    central: np.ndarray  # (A, T)
    target_history: np.ndarray  # (T, 4): centred position and velocity of the target
    future: np.ndarray  # (T_f, 2) relative to the last observed target position, NaN if unknown
    maneuver: np.ndarray  # () int, -1 if unlabelled
    origin: np.ndarray  # (2,)
    dt: np.ndarray  # ()

    @property
    def history_frames(self) -> int:
        return self.S.shape[-2]

    def __len__(self):
        if self.S.ndim != 4:
            raise TypeError("unbatched SceneTensors has no length")
        return self.S.shape[0]

    def __getitem__(self, idx) -> "SceneTensors":
        if self.S.ndim != 4:
            raise TypeError("indexing needs a batched SceneTensors")
        return SceneTensors(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def to_torch(self, dtype=torch.float32) -> dict[str, torch.Tensor]:
        out = {}
        for f in fields(self):
            a = getattr(self, f.name)
            if a.dtype == bool:
                out[f.name] = torch.from_numpy(np.ascontiguousarray(a))
            elif np.issubdtype(a.dtype, np.integer):
                out[f.name] = torch.from_numpy(np.ascontiguousarray(a)).long()
            else:
                out[f.name] = torch.from_numpy(np.ascontiguousarray(a)).to(dtype)
        return out


def build_scene_tensors(scene: TrajectoryScene, vision: VisionSectorConfig = VisionSectorConfig()) -> SceneTensors:
    pos, valid = _history(scene)
    kin = agent_kinematics(pos, valid, scene.dt)
    T_obs = scene.history_frames
    origin = scene.target[T_obs - 1]
    S = build_visual_vectors(scene, kin)
    M = build_context_matrices(scene, kin)
    central = central_flags(pos, kin.valid, kin.speed[0], kin.heading[0], vision)
    agent_mask = kin.valid[:, -1].copy()
    target_history = np.concatenate([pos[0] - origin, kin.velocity[0]], axis=-1)
    if scene.future_frames > 0:
        future = scene.target[T_obs:] - origin
    else:
        future = np.zeros((0, 2))
    m = scene.maneuver
    return SceneTensors(
        S=S,
        M=M,
        agent_mask=agent_mask,
        frame_mask=kin.valid,
        central=central,
        target_history=target_history,
        future=future,
        maneuver=np.asarray(-1 if m is None else m, dtype=np.int64),
        origin=np.asarray(origin, dtype=float),
        dt=np.asarray(scene.dt, dtype=float),
    )


def stack_tensors(items: Sequence[SceneTensors]) -> SceneTensors:
    if not items:
        raise ValueError("cannot stack zero scenes")
    return SceneTensors(**{f.name: np.stack([getattr(t, f.name) for t in items]) for f in fields(SceneTensors)})


def truncate_history(tensors: SceneTensors, k: int, mode: str = "recent") -> SceneTensors:
    """Keep ``k`` frames of every per-frame array (recent: the last k, initial: the first k)."""
    T = tensors.history_frames
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > T:
        raise ValueError(f"k={k} exceeds the {T} available frames")
    if mode == "recent":
        sl = slice(T - k, T)
    elif mode == "initial":
        sl = slice(0, k)
    else:
        raise ValueError(f"mode must be 'recent' or 'initial', got {mode!r}")
    return replace(
        tensors,
        S=tensors.S[..., sl, :],
        M=tensors.M[..., sl, :],
        frame_mask=tensors.frame_mask[..., sl],
        central=tensors.central[..., sl],
        target_history=tensors.target_history[..., sl, :],
    )


class SceneFeaturizer(TransformerMixin, BaseEstimator):
    """Turn a sequence of :class:`TrajectoryScene` into stacked :class:`SceneTensors`.

    Parameters
    ----------
    history_frames : int or None
        Crop each scene to this many history frames before differencing
        (``None`` keeps the scene's own history length).
    history_mode : {"recent", "initial"}
        Which end of the history to keep when cropping.
    vision : VisionSectorConfig
        Sector geometry for the central flags.
    """

    def __init__(self, history_frames=None, history_mode="recent", vision=None):
        self.history_frames = history_frames
        self.history_mode = history_mode
        self.vision = vision

    def fit(self, X, y=None):
        check_scenes(X)
        return self

    def transform(self, X) -> SceneTensors:
        X = check_scenes(X)
        vision = self.vision or VisionSectorConfig()
        out = []
        for scene in X:
            if self.history_frames is not None and self.history_frames != scene.history_frames:
                scene = crop_history(scene, self.history_frames, self.history_mode)
            out.append(build_scene_tensors(scene, vision))
        return stack_tensors(out)


def check_scenes(X) -> list[TrajectoryScene]:
    """Validate a scene collection: non-empty, homogeneous shapes."""
    if isinstance(X, TrajectoryScene):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one scene")
    for s in X:
        if not isinstance(s, TrajectoryScene):
            raise TypeError(f"expected TrajectoryScene, got {type(s).__name__}")
    shapes = {(s.total_frames, s.history_frames, s.max_neighbors) for s in X}
    if len(shapes) != 1:
        raise ValueError(f"scenes must share (frames, history, neighbors); got {sorted(shapes)}")
    return X
