"""Trajectory ingestion: CSV parsing, scene segmentation, missing-data subsets
and a kinematic generator of maneuver-labelled synthetic scenes.

Coordinates follow the NGSIM convention: ``x`` is lateral (positive to the
left for the generator), ``y`` is longitudinal. Everything is in meters and
seconds.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .storage import load_arrays, read_manifest, save_arrays, write_manifest

logger = logging.getLogger(__name__)

FEET_TO_METERS = 0.3048

POSITION_CLASSES = ("left", "right", "keep")
VELOCITY_CLASSES = ("accelerate", "brake", "maintain")
MANEUVERS = tuple(itertools.product(POSITION_CLASSES, VELOCITY_CLASSES))
NUM_MANEUVERS = len(MANEUVERS)

# the five standard missing-data subsets, 1-based inclusive frame ranges
MISSING_RANGES = ((3, 10), (4, 11), (5, 12), (6, 13), (7, 14))


class DataError(ValueError):
    """Raised for malformed trajectory input."""


def maneuver_index(position: str | int, velocity: str | int) -> int:
    p = POSITION_CLASSES.index(position) if isinstance(position, str) else int(position)
    v = VELOCITY_CLASSES.index(velocity) if isinstance(velocity, str) else int(velocity)
    if not (0 <= p < 3 and 0 <= v < 3):
        raise ValueError(f"invalid maneuver ({position!r}, {velocity!r})")
    return 3 * p + v


def maneuver_name(index: int) -> str:
    p, v = MANEUVERS[index]
    return f"{p}/{v}"


@dataclass(frozen=True)
class RawTrack:
    vehicle_id: int
    frames: np.ndarray  # (n,) int, strictly increasing
    xy: np.ndarray  # (n, 2) meters
    source_rate: float

    def __post_init__(self):
        if len(self.frames) != len(self.xy):
            raise DataError(f"vehicle {self.vehicle_id}: frames/xy length mismatch")
        if len(self.frames) > 1 and np.any(np.diff(self.frames) <= 0):
            raise DataError(f"vehicle {self.vehicle_id}: frame indices not strictly increasing")
        if not np.all(np.isfinite(self.xy)):
            raise DataError(f"vehicle {self.vehicle_id}: non-finite coordinates")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class SegmentationConfig:
    history_frames: int = 16
    future_frames: int = 25
    downsample_factor: int = 2
    segment_seconds: float = 8.0
    max_neighbors: int = 12
    window_stride: int = 1

    def __post_init__(self):
        if self.history_frames < 2:
            raise ValueError("history_frames must be >= 2")
        if self.future_frames < 1:
            raise ValueError("future_frames must be >= 1")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.max_neighbors < 0 or self.window_stride < 1:
            raise ValueError("max_neighbors must be >= 0 and window_stride >= 1")

    @property
    def total_frames(self) -> int:
        return self.history_frames + self.future_frames


@dataclass(frozen=True, eq=False)
class TrajectoryScene:
    """One target-centred segment.

    ``target`` and ``neighbors`` cover ``history_frames + future_frames``
    frames. Neighbor slots beyond the real neighbor count are padding and
    carry ``neighbor_mask == False``; their coordinates are never read.
    """

    target: np.ndarray  # (T, 2)
    neighbors: np.ndarray  # (N_max, T, 2)
    neighbor_mask: np.ndarray  # (N_max, T) bool
    dt: float
    history_frames: int
    maneuver_label: tuple[int, int] | None = None
    target_id: int = -1
    start_frame: int = 0
    neighbor_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.dt <= 0:
            raise DataError("dt must be positive")
        T = self.target.shape[0]
        if self.target.shape != (T, 2):
            raise DataError(f"target must be (T, 2), got {self.target.shape}")
        if self.neighbors.ndim != 3 or self.neighbors.shape[1:] != (T, 2):
            raise DataError(f"neighbors must be (N, {T}, 2), got {self.neighbors.shape}")
        if self.neighbor_mask.shape != self.neighbors.shape[:2]:
            raise DataError("neighbor_mask shape mismatch")
        if not (2 <= self.history_frames <= T):
            raise DataError("history_frames out of range")
        if not np.all(np.isfinite(self.target[: self.history_frames])):
            raise DataError("target history must be fully observed")

    @property
    def total_frames(self) -> int:
        return self.target.shape[0]

    @property
    def future_frames(self) -> int:
        return self.total_frames - self.history_frames

    @property
    def max_neighbors(self) -> int:
        return self.neighbors.shape[0]

    @property
    def maneuver(self) -> int | None:
        if self.maneuver_label is None:
            return None
        return maneuver_index(*self.maneuver_label)

    def agents(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack target and neighbors: positions (N+1, T, 2), validity (N+1, T)."""
        pos = np.concatenate([self.target[None], self.neighbors], axis=0)
        valid = np.concatenate(
            [np.isfinite(self.target).all(-1)[None], self.neighbor_mask.astype(bool)], axis=0
        )
        return pos, valid

    def with_agents(self, pos: np.ndarray, valid: np.ndarray | None = None) -> "TrajectoryScene":
        mask = self.neighbor_mask if valid is None else valid[1:]
        return replace(self, target=pos[0].copy(), neighbors=pos[1:].copy(), neighbor_mask=mask.copy())

    def translated(self, offset) -> "TrajectoryScene":
        off = np.asarray(offset, dtype=float)
        return replace(self, target=self.target + off, neighbors=self.neighbors + off)


# ---------------------------------------------------------------------------
# CSV parsing

_SCHEMAS = {
    # columns: id, frame, x, y; unit scale; default source rate (Hz)
    "generic": (("vehicle_id", "frame_id", "x_m", "y_m"), 1.0, 10.0),
    "ngsim-like": (("vehicle_id", "frame_id", "x_m", "y_m"), FEET_TO_METERS, 10.0),
    "highd-like": (("vehicle_id", "frame_id", "x_m", "y_m"), 1.0, 25.0),
}
_ALIASES = {
    "vehicle_id": ("vehicle_id", "Vehicle_ID", "id"),
    "frame_id": ("frame_id", "Frame_ID", "frame"),
    "x_m": ("x_m", "Local_X", "x"),
    "y_m": ("y_m", "Local_Y", "y"),
}


def parse_trajectory_csv(path, schema: str = "generic", source_rate: float | None = None) -> list[RawTrack]:
    """Read a trajectory CSV into one :class:`RawTrack` per vehicle.

    ``ngsim-like`` files are in feet and converted to meters. Rows may be
    interleaved across vehicles; samples are sorted by frame. A repeated
    ``(vehicle_id, frame_id)`` pair is an error.
    """
    if schema not in _SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}; expected one of {sorted(_SCHEMAS)}")
    columns, scale, default_rate = _SCHEMAS[schema]
    rate = float(source_rate or default_rate)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    per_vehicle: dict[int, list[tuple[int, float, float]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        idx = []
        for col in columns:
            found = [header.index(a) for a in _ALIASES[col] if a in header]
            if not found:
                raise DataError(f"{path}: missing column {col!r} in header {header}")
            idx.append(found[0])
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vid = int(row[idx[0]])
                frame = int(row[idx[1]])
                x = float(row[idx[2]]) * scale
                y = float(row[idx[3]]) * scale
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: malformed row at line {lineno}: {row!r}") from exc
            if not (np.isfinite(x) and np.isfinite(y)):
                raise DataError(f"{path}: non-finite coordinate at line {lineno}")
            per_vehicle.setdefault(vid, []).append((frame, x, y))

    tracks = []
    for vid in sorted(per_vehicle):
        samples = sorted(per_vehicle[vid], key=lambda s: s[0])
        frames = np.array([s[0] for s in samples], dtype=np.int64)
        if np.any(np.diff(frames) <= 0):
            dup = frames[1:][np.diff(frames) <= 0][0]
            raise DataError(f"vehicle_id {vid}: frame {dup} is not strictly increasing (duplicate frame)")
        xy = np.array([s[1:] for s in samples], dtype=float)
        tracks.append(RawTrack(vid, frames, xy, rate))
    return tracks


def write_trajectory_csv(path, tracks: Iterable[RawTrack]) -> Path:
    """Write tracks in the generic schema (meters)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "frame_id", "x_m", "y_m"])
        for tr in tracks:
            for f, (x, y) in zip(tr.frames, tr.xy):
                w.writerow([tr.vehicle_id, int(f), repr(float(x)), repr(float(y))])
    return path


# ---------------------------------------------------------------------------
# segmentation


def resample_track(track: RawTrack, factor: int) -> RawTrack:
    """Keep frames on the global grid ``frame % factor == 0`` and renumber them."""
    if factor == 1:
        return track
    keep = track.frames % factor == 0
    return RawTrack(track.vehicle_id, track.frames[keep] // factor, track.xy[keep], track.source_rate / factor)


def segment_scenes(tracks: Sequence[RawTrack], cfg: SegmentationConfig = SegmentationConfig()) -> list[TrajectoryScene]:
    """Cut every track into target-centred scenes of ``T_obs + T_f`` frames.

    Neighbors are the ``cfg.max_neighbors`` vehicles nearest to the target at
    its last history frame (ties broken by vehicle id), padded and masked.
    Tracks too short for a single window are skipped and counted.
    """
    if not tracks:
        return []
    rates = {float(t.source_rate) for t in tracks}
    if len(rates) != 1:
        raise DataError(f"tracks mix source rates {sorted(rates)}")
    source_rate = rates.pop()
    dt = cfg.downsample_factor / source_rate
    resampled = sorted((resample_track(t, cfg.downsample_factor) for t in tracks), key=lambda t: t.vehicle_id)

    # frame -> (ids, xy) for neighbor lookup
    lookup: dict[int, dict[int, np.ndarray]] = {}
    for tr in resampled:
        for f, p in zip(tr.frames, tr.xy):
            lookup.setdefault(int(f), {})[tr.vehicle_id] = p
    by_id = {tr.vehicle_id: tr for tr in resampled}

    T_obs, T = cfg.history_frames, cfg.total_frames
    scenes, skipped = [], 0
    for tr in resampled:
        starts = _window_starts(tr.frames, T, cfg.window_stride)
        if not starts:
            skipped += 1
            continue
        for i0 in starts:
            frames = tr.frames[i0 : i0 + T]
            target = tr.xy[i0 : i0 + T]
            last = int(frames[T_obs - 1])
            origin = target[T_obs - 1]
            present = lookup.get(last, {})
            cands = [
                (float(np.hypot(*(p - origin))), vid) for vid, p in present.items() if vid != tr.vehicle_id
            ]
            cands.sort()
            chosen = [vid for _, vid in cands[: cfg.max_neighbors]]
            nbr = np.zeros((cfg.max_neighbors, T, 2))
            mask = np.zeros((cfg.max_neighbors, T), dtype=bool)
            for slot, vid in enumerate(chosen):
                other = by_id[vid]
                pos = np.searchsorted(other.frames, frames)
                pos = np.clip(pos, 0, len(other.frames) - 1)
                hit = other.frames[pos] == frames
                nbr[slot, hit] = other.xy[pos[hit]] - origin
                mask[slot] = hit
            scenes.append(
                TrajectoryScene(
                    target=target - origin,
                    neighbors=nbr,
                    neighbor_mask=mask,
                    dt=dt,
                    history_frames=T_obs,
                    target_id=tr.vehicle_id,
                    start_frame=int(frames[0]),
                    neighbor_ids=tuple(chosen),
                )
            )
    if skipped:
        logger.info("segment_scenes: skipped %d tracks shorter than %d frames", skipped, T)
    segment_scenes.last_skipped = skipped
    return scenes


segment_scenes.last_skipped = 0


def _window_starts(frames: np.ndarray, length: int, stride: int) -> list[int]:
    """Start indices of windows of ``length`` consecutive frame numbers."""
    n = len(frames)
    if n < length:
        return []
    # run id increments wherever consecutive frames have a gap
    breaks = np.concatenate([[0], np.cumsum(np.diff(frames) != 1)])
    starts = []
    i = 0
    while i + length <= n:
        if breaks[i] == breaks[i + length - 1]:
            starts.append(i)
            i += stride
        else:
            i += 1
    return starts


# ---------------------------------------------------------------------------
# missing-data protocol


def make_missing_subset(scene: TrajectoryScene, drop_range: tuple[int, int]) -> TrajectoryScene:
    """Drop history frames ``drop_range`` (1-based, inclusive) and refill them
    by linear interpolation between the surviving frames on either side.

    Neighbors without a valid anchor on both sides lose the dropped frames
    (their mask is cleared there) instead of being extrapolated.
    """
    a, b = map(int, drop_range)
    T_obs = scene.history_frames
    if not (1 <= a <= b <= T_obs):
        raise ValueError(f"drop range {drop_range} outside history frames 1..{T_obs}")
    if a == 1 or b == T_obs:
        raise ValueError(f"drop range {drop_range} has no surviving anchor frame on one side")
    lo, hi = a - 2, b  # 0-based anchor indices
    pos, valid = scene.agents()
    pos = pos.copy()
    valid = valid.copy()
    drop = np.arange(a - 1, b)
    k = (drop - lo)[:, None].astype(float)
    for i in range(pos.shape[0]):
        if valid[i, lo] and valid[i, hi]:
            # multiply before dividing: exact whenever the motion is grid-representable
            pos[i, drop] = pos[i, lo] + (pos[i, hi] - pos[i, lo]) * k / (hi - lo)
            valid[i, drop] = True
        else:
            if i == 0:
                raise ValueError("target lacks interpolation anchors")
            valid[i, drop] = False
    return scene.with_agents(pos, valid)


def missing_subsets(scene: TrajectoryScene) -> dict[str, TrajectoryScene]:
    return {f"{a}-{b}": make_missing_subset(scene, (a, b)) for a, b in MISSING_RANGES}


def crop_history(scene: TrajectoryScene, k: int, mode: str = "recent") -> TrajectoryScene:
    """Keep ``k`` history frames (the most recent or the initial ones) plus the future.

    With ``mode="initial"`` the future still starts right after the original
    history, so the kept frames are not contiguous with it.
    """
    T_obs = scene.history_frames
    if not (2 <= k <= T_obs):
        raise ValueError(f"k={k} must lie in [2, {T_obs}]")
    if mode == "recent":
        idx = np.arange(T_obs - k, scene.total_frames)
    elif mode == "initial":
        idx = np.concatenate([np.arange(k), np.arange(T_obs, scene.total_frames)])
    else:
        raise ValueError(f"mode must be 'recent' or 'initial', got {mode!r}")
    return replace(
        scene,
        target=scene.target[idx],
        neighbors=scene.neighbors[:, idx],
        neighbor_mask=scene.neighbor_mask[:, idx],
        history_frames=k,
    )


# ---------------------------------------------------------------------------
# maneuver labelling


def label_maneuver(scene: TrajectoryScene, lane_width: float = 3.5, speed_threshold: float = 0.5) -> tuple[str, str]:
    """Label from future motion: lateral shift beyond half a lane is a lane
    change; a mean speed change beyond ``speed_threshold`` is accelerate/brake."""
    T_obs = scene.history_frames
    tgt = scene.target
    lateral = tgt[-1, 0] - tgt[T_obs - 1, 0]
    if lateral > 0.5 * lane_width:
        pos = "left"
    elif lateral < -0.5 * lane_width:
        pos = "right"
    else:
        pos = "keep"
    speed = np.linalg.norm(np.diff(tgt[T_obs - 2 :], axis=0), axis=-1) / scene.dt
    change = float(np.mean(speed[1:] - speed[0]))
    if change > speed_threshold:
        vel = "accelerate"
    elif change < -speed_threshold:
        vel = "brake"
    else:
        vel = "maintain"
    return pos, vel


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticConfig:
    """Generator settings. ``counts`` maps ``(position, velocity)`` to a scene count."""

    counts: dict = field(default_factory=dict)
    lane_width: float = 3.5
    speed_range: tuple[float, float] = (15.0, 30.0)
    acceleration: float = 1.0
    noise: float = 0.0
    history_frames: int = 16
    future_frames: int = 25
    dt: float = 0.2
    max_neighbors: int = 12
    neighbor_range: tuple[int, int] = (2, 8)
    lane_change_seconds: float = 3.0
    # lane-change start, seconds relative to the last history frame
    lane_change_start: tuple[float, float] = (-1.0, 0.0)

    @classmethod
    def balanced(cls, n_scenes: int, **kwargs) -> "SyntheticConfig":
        base, extra = divmod(int(n_scenes), NUM_MANEUVERS)
        counts = {m: base + (i < extra) for i, m in enumerate(MANEUVERS)}
        return cls(counts=counts, **kwargs)

    @property
    def n_scenes(self) -> int:
        return int(sum(self.counts.values()))


def _lane_change_profile(tau: np.ndarray, width: float, steepness: float = 10.0) -> np.ndarray:
    """Logistic lateral offset normalised to be exactly 0 at tau<=0 and ``width`` at tau>=1."""
    tau = np.clip(tau, 0.0, 1.0)
    s = 1.0 / (1.0 + np.exp(-steepness * (tau - 0.5)))
    s0 = 1.0 / (1.0 + np.exp(steepness / 2))
    s1 = 1.0 / (1.0 + np.exp(-steepness / 2))
    return width * (s - s0) / (s1 - s0)


def synthetic_track(
    position: str,
    velocity: str,
    *,
    v0: float,
    t: np.ndarray,
    lane_width: float = 3.5,
    acceleration: float = 1.0,
    lc_start: float = 0.0,
    lc_seconds: float = 3.0,
) -> np.ndarray:
    """Kinematic (x, y) track at times ``t`` starting at the origin."""
    t0 = t - t[0]
    a = {"accelerate": acceleration, "brake": -acceleration, "maintain": 0.0}[velocity]
    y = v0 * t0 + 0.5 * a * t0**2
    sign = {"left": 1.0, "right": -1.0, "keep": 0.0}[position]
    x = sign * _lane_change_profile((t - lc_start) / lc_seconds, lane_width) if sign else np.zeros_like(t)
    return np.stack([x, y], axis=-1)


def generate_synthetic_scenes(cfg: SyntheticConfig, seed: int = 0) -> list[TrajectoryScene]:
    """Deterministic kinematic scenes labelled with their generating maneuver."""
    if cfg.n_scenes <= 0:
        raise ValueError("synthetic config requests no scenes")
    rng = np.random.default_rng(seed)
    T_obs, T_f = cfg.history_frames, cfg.future_frames
    T = T_obs + T_f
    # time 0 is the last history frame
    t = (np.arange(T) - (T_obs - 1)) * cfg.dt
    lo_v, hi_v = cfg.speed_range
    scenes = []
    for (pos_cls, vel_cls) in MANEUVERS:
        for _ in range(int(cfg.counts.get((pos_cls, vel_cls), 0))):
            v0 = rng.uniform(lo_v, hi_v)
            if vel_cls == "brake":
                # keep the vehicle moving forward over the whole segment
                v0 = max(v0, cfg.acceleration * (t[-1] - t[0]) + 2.0)
            lc_start = rng.uniform(*cfg.lane_change_start)
            tgt = synthetic_track(
                pos_cls, vel_cls, v0=v0, t=t, lane_width=cfg.lane_width,
                acceleration=cfg.acceleration, lc_start=lc_start, lc_seconds=cfg.lane_change_seconds,
            )
            n_nbr = int(rng.integers(cfg.neighbor_range[0], cfg.neighbor_range[1] + 1))
            n_nbr = min(n_nbr, cfg.max_neighbors)
            nbr = np.zeros((cfg.max_neighbors, T, 2))
            mask = np.zeros((cfg.max_neighbors, T), dtype=bool)
            for k in range(n_nbr):
                lane = int(rng.integers(-1, 2))
                gap = rng.uniform(-40.0, 40.0)
                vn = np.clip(v0 + rng.normal(0.0, 2.0), 1.0, None)
                track = synthetic_track("keep", "maintain", v0=vn, t=t)
                track[:, 0] += lane * cfg.lane_width
                track[:, 1] += gap + tgt[0, 1]
                nbr[k] = track
                mask[k] = True
            if cfg.noise > 0:
                tgt = tgt + rng.normal(0.0, cfg.noise, tgt.shape)
                nbr[:n_nbr] += rng.normal(0.0, cfg.noise, nbr[:n_nbr].shape)
            origin = tgt[T_obs - 1].copy()
            nbr[:n_nbr] -= origin
            scenes.append(
                TrajectoryScene(
                    target=tgt - origin,
                    neighbors=nbr,
                    neighbor_mask=mask,
                    dt=cfg.dt,
                    history_frames=T_obs,
                    maneuver_label=(pos_cls, vel_cls),
                    target_id=len(scenes),
                    neighbor_ids=tuple(range(n_nbr)),
                )
            )
    return scenes


# ---------------------------------------------------------------------------
# scene cache


def save_scenes(directory, scenes: Sequence[TrajectoryScene], meta: dict | None = None) -> Path:
    """Write ``manifest.json`` plus ``scenes.npz`` (stacked arrays)."""
    if not scenes:
        raise ValueError("no scenes to save")
    directory = Path(directory)
    shapes = {(s.total_frames, s.max_neighbors, s.history_frames) for s in scenes}
    if len(shapes) != 1:
        raise ValueError(f"scenes differ in shape: {sorted(shapes)}")
    labels = np.array(
        [s.maneuver if s.maneuver is not None else -1 for s in scenes], dtype=np.int64
    )
    arrays = {
        "target": np.stack([s.target for s in scenes]),
        "neighbors": np.stack([s.neighbors for s in scenes]),
        "neighbor_mask": np.stack([s.neighbor_mask for s in scenes]),
        "dt": np.array([s.dt for s in scenes]),
        "maneuver": labels,
        "target_id": np.array([s.target_id for s in scenes], dtype=np.int64),
        "start_frame": np.array([s.start_frame for s in scenes], dtype=np.int64),
    }
    save_arrays(directory / "scenes.npz", arrays)
    write_manifest(
        directory / "manifest.json",
        {
            "kind": "scene-cache",
            "n_scenes": len(scenes),
            "history_frames": scenes[0].history_frames,
            "total_frames": scenes[0].total_frames,
            "max_neighbors": scenes[0].max_neighbors,
            "arrays": sorted(arrays),
            **(meta or {}),
        },
    )
    return directory


def load_scenes(directory) -> list[TrajectoryScene]:
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.json")
    arr = load_arrays(directory / "scenes.npz")
    T_obs = int(manifest["history_frames"])
    scenes = []
    for i in range(int(manifest["n_scenes"])):
        m = int(arr["maneuver"][i])
        label = MANEUVERS[m] if m >= 0 else None
        scenes.append(
            TrajectoryScene(
                target=arr["target"][i],
                neighbors=arr["neighbors"][i],
                neighbor_mask=arr["neighbor_mask"][i].astype(bool),
                dt=float(arr["dt"][i]),
                history_frames=T_obs,
                maneuver_label=label,
                target_id=int(arr["target_id"][i]),
                start_frame=int(arr["start_frame"][i]),
            )
        )
    return scenes
