"""Speed-adaptive visual sector and vision-aware pooling.

The sector geometry (band lookup, bearing test, per-frame central flags) is
plain numpy and computed once per scene. The learnable part is the pair of
scalar weights ``w_c`` (inside the central sector) and ``w_n`` (outside);
:class:`VisionPool` turns central flags into ``H`` and multiplies it into the
visual vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

KMH_PER_MS = 3.6


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)


@dataclass(frozen=True)
class VisionSectorConfig:
    thresholds_kmh: tuple[float, ...] = (0.0, 30.0, 60.0, 90.0)
    band_angles_deg: tuple[float, ...] = (180.0, 120.0, 90.0, 60.0)
    w_c_init: float = 1.0
    w_n_init: float = 0.2

    def __post_init__(self):
        th, ang = np.asarray(self.thresholds_kmh, float), np.asarray(self.band_angles_deg, float)
        if len(th) != len(ang) or len(th) == 0:
            raise ValueError("need one band angle per speed threshold")
        if th[0] != 0.0 or np.any(np.diff(th) <= 0):
            raise ValueError("thresholds must start at 0 and strictly increase")
        if np.any(np.diff(ang) >= 0):
            raise ValueError("band angles must strictly decrease")
        if np.any(ang <= 0) or np.any(ang > 360):
            raise ValueError("band angles must lie in (0, 360]")
        if self.w_c_init < self.w_n_init:
            raise ValueError("w_c_init must be >= w_n_init")


def sector_band(speed_ms: float, cfg: VisionSectorConfig = VisionSectorConfig()) -> int:
    """Index of the left-closed speed band containing ``speed_ms`` (m/s)."""
    if speed_ms < 0:
        raise ValueError(f"speed must be non-negative, got {speed_ms}")
    kmh = speed_ms * KMH_PER_MS
    return int(np.searchsorted(cfg.thresholds_kmh, kmh, side="right") - 1)


def sector_bands(speeds_ms: np.ndarray, cfg: VisionSectorConfig = VisionSectorConfig()) -> np.ndarray:
    speeds_ms = np.asarray(speeds_ms, dtype=float)
    if np.any(speeds_ms < 0):
        raise ValueError("speeds must be non-negative")
    return np.searchsorted(cfg.thresholds_kmh, speeds_ms * KMH_PER_MS, side="right") - 1


def in_central_sector(target_xy, target_heading: float, agent_xy, band_angle_deg: float) -> bool:
    """True iff the bearing to the agent lies within +-band_angle/2 of the heading.

    An agent at the target's own position (the target itself) is central.
    """
    d = np.asarray(agent_xy, float) - np.asarray(target_xy, float)
    if np.hypot(*d) < 1e-9:
        return True
    rel = wrap_angle(np.arctan2(d[1], d[0]) - target_heading)
    return bool(abs(rel) <= np.deg2rad(band_angle_deg) / 2 + 1e-12)


def central_flags(
    pos: np.ndarray,
    valid: np.ndarray,
    target_speed: np.ndarray,
    target_heading: np.ndarray,
    cfg: VisionSectorConfig = VisionSectorConfig(),
) -> np.ndarray:
    """Per-agent, per-frame central flags for one scene history.

    ``pos`` is (A, T, 2) with the target in row 0. The band is re-evaluated
    at every frame from that frame's target speed.
    """
    half = np.deg2rad(np.asarray(cfg.band_angles_deg, float))[sector_bands(target_speed, cfg)] / 2
    d = pos - pos[:1]
    bearing = np.arctan2(d[..., 1], d[..., 0])
    rel = np.abs(wrap_angle(bearing - target_heading[None]))
    flags = (rel <= half[None] + 1e-12) | (np.hypot(d[..., 0], d[..., 1]) < 1e-9)
    flags &= valid
    flags[0] = True
    return flags


class VisionPool(nn.Module):
    """Learnable central/peripheral weights and the elementwise pooling."""

    def __init__(self, cfg: VisionSectorConfig = VisionSectorConfig(), enabled: bool = True):
        super().__init__()
        self.cfg = cfg
        self.enabled = enabled
        self.w_c = nn.Parameter(torch.tensor(float(cfg.w_c_init)))
        self.w_n = nn.Parameter(torch.tensor(float(cfg.w_n_init)))

    def weights(self, central: torch.Tensor) -> torch.Tensor:
        """H with a trailing singleton channel axis: (..., A, T, 1)."""
        if not self.enabled:
            return torch.ones(central.shape + (1,), dtype=self.w_c.dtype, device=central.device)
        h = torch.where(central, self.w_c, self.w_n)
        return h.unsqueeze(-1)

    def forward(self, S: torch.Tensor, central: torch.Tensor) -> torch.Tensor:
        return apply_vision_pool(self.weights(central), S)

    @torch.no_grad()
    def clamp_(self):
        """Keep w_c >= w_n after an optimizer step."""
        if self.w_n > self.w_c:
            self.w_n.copy_(self.w_c)


def apply_vision_pool(H, S):
    """Elementwise product ``H * S`` with strict broadcast checking."""
    if H.ndim != S.ndim:
        raise ValueError(f"H has {H.ndim} dims but S has {S.ndim}")
    for h, s in zip(H.shape, S.shape):
        if h not in (1, s):
            raise ValueError(f"H shape {tuple(H.shape)} does not broadcast to S shape {tuple(S.shape)}")
    return H * S
