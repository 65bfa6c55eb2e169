"""Lightweight student: vision pooling over the last 8 frames, GRU embedding,
reduced-head SWA and a GRU multimodal decoder sharing the teacher's output
type."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
from torch import nn

from .data import NUM_MANEUVERS
from .forecast import GmmForecast
from .swa import ShiftWindowAttention, ShiftWindowConfig, SwaConfig, TrackEmbedder
from .teacher import S_SCALE, HistoryEncoder, MultimodalDecoder, _inputs, _scale
from .vision import VisionPool, VisionSectorConfig


@dataclass(frozen=True)
class StudentConfig:
    history_frames: int = 8
    future_frames: int = 25
    max_neighbors: int = 12
    variant: str = "full"
    embed_hidden: int = 64
    embed_dim: int = 96
    # 24-wide heads; a 5x16 window with strides (4, 4) gives 3 windows per axis
    swa: SwaConfig = SwaConfig(heads=4, d_q=96, d_k=96, d_v=96, window=ShiftWindowConfig(5, 16, 4, 4))
    history_hidden: int = 48
    decoder_hidden: int = 112
    head_hidden: int = 128
    n_modes: int = NUM_MANEUVERS
    cv_prior: bool = True
    sigma_min: float = 0.1
    use_vision_pool: bool = True
    vision: VisionSectorConfig = VisionSectorConfig()

    def __post_init__(self):
        if self.variant not in ("full", "s"):
            raise ValueError("variant must be 'full' or 's'")
        if self.history_frames < 2:
            raise ValueError("history_frames must be >= 2")

    @classmethod
    def small(cls, **kwargs) -> "StudentConfig":
        """HLTP(s): recurrent widths halved, attention heads 4 -> 2."""
        base = cls(**kwargs)
        heads = max(1, base.swa.heads // 2)
        head_dim = base.swa.d_k // heads
        # keep the window count of the full model on the wider per-head map
        win = base.swa.window
        z = (base.n_agents - win.window_x) // win.stride_x + 1
        stride_y = win.stride_y * 2
        window_y = head_dim - (z - 1) * stride_y
        swa = replace(base.swa, heads=heads, window=replace(win, window_y=window_y, stride_y=stride_y))
        return replace(
            base,
            variant="s",
            embed_hidden=base.embed_hidden // 2,
            history_hidden=base.history_hidden // 2,
            decoder_hidden=base.decoder_hidden // 2,
            swa=swa,
        )

    @property
    def n_agents(self) -> int:
        return self.max_neighbors + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        d = dict(d)
        swa = dict(d.pop("swa", {}))
        window = ShiftWindowConfig(**swa.pop("window", {}))
        vision = d.pop("vision", {})
        vision = VisionSectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in vision.items()})
        return cls(swa=SwaConfig(window=window, **swa), vision=vision, **d)


class StudentModel(nn.Module):
    def __init__(self, cfg: StudentConfig = StudentConfig()):
        super().__init__()
        self.cfg = cfg
        self.vision = VisionPool(cfg.vision, enabled=cfg.use_vision_pool)
        self.embed = TrackEmbedder(4, cfg.embed_hidden, cfg.embed_dim, cell="gru")
        self.swa = ShiftWindowAttention(cfg.swa, cfg.n_agents, cfg.embed_dim, cfg.history_frames * 4)
        self.history = HistoryEncoder(cfg.history_hidden, cell="gru")
        ctx = 2 * cfg.swa.head_dim + cfg.history_hidden
        self.decoder = MultimodalDecoder(
            ctx, cfg.decoder_hidden, cfg.future_frames, cfg.n_modes, cfg.cv_prior, cfg.sigma_min
        )
        # the decoder's maneuver MLP width follows head_hidden, not the GRU width
        self.decoder.maneuver = nn.Sequential(
            nn.Linear(ctx, cfg.head_hidden), nn.ELU(), nn.Linear(cfg.head_hidden, cfg.n_modes)
        )
        nn.init.zeros_(self.decoder.maneuver[-1].weight)
        nn.init.zeros_(self.decoder.maneuver[-1].bias)

    def forward(self, batch) -> GmmForecast:
        S, _, central, hist, agent_mask = _inputs(batch, self.cfg.history_frames)
        S_tilde = self.vision(S, central)
        x = _scale(S_tilde, S_SCALE)
        emb = self.embed(x)
        O_vis = self.swa(x, emb[:, 0], emb, agent_mask)
        pooled = O_vis.sum(1)
        context = torch.cat([pooled, O_vis[:, 0], self.history(hist)], dim=-1)
        return self.decoder(context, hist[:, -1, 2:], batch["dt"])

    def after_step(self):
        self.vision.clamp_()
