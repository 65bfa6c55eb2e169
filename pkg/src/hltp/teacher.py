"""Teacher network: vision pooling -> LSTM embedding -> SWA, a surround-aware
encoder over the most recent quarter of the context matrices, a transformer
interaction stage, and a 9-maneuver GMM decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .data import NUM_MANEUVERS
from .forecast import GmmForecast, bounded_rho
from .swa import ShiftWindowAttention, ShiftWindowConfig, SwaConfig, TrackEmbedder
from .vision import VisionPool, VisionSectorConfig

# fixed per-channel normalisation of [dx, dy, dspeed, daccel]
S_SCALE = (0.1, 0.05, 0.2, 0.5)
# target history [x, y, vx, vy]
HIST_SCALE = (1.0, 0.02, 1.0, 0.05)


@dataclass(frozen=True)
class TeacherConfig:
    history_frames: int = 16
    future_frames: int = 25
    max_neighbors: int = 12
    embed_hidden: int = 64
    embed_dim: int = 64
    swa: SwaConfig = SwaConfig()
    surround_channels: int = 16
    surround_dim: int = 32
    surround_dropout: float = 0.2
    d_model: int = 64
    transformer_layers: int = 2
    transformer_heads: int = 4
    transformer_ff: int = 128
    history_hidden: int = 32
    decoder_hidden: int = 64
    n_modes: int = NUM_MANEUVERS
    cv_prior: bool = True
    sigma_min: float = 0.1
    # ablation switches
    use_vision_pool: bool = True
    use_surround: bool = True
    use_transformer: bool = True
    vision: VisionSectorConfig = VisionSectorConfig()

    @property
    def n_agents(self) -> int:
        return self.max_neighbors + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherConfig":
        d = dict(d)
        swa = dict(d.pop("swa", {}))
        window = ShiftWindowConfig(**swa.pop("window", {}))
        vision = d.pop("vision", {})
        vision = VisionSectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in vision.items()})
        return cls(swa=SwaConfig(window=window, **swa), vision=vision, **d)


def _scale(x, scale):
    return x * x.new_tensor(scale)


class MaskedBatchNorm(nn.Module):
    """Batch norm over channels whose statistics only see valid agents."""

    def __init__(self, channels):
        super().__init__()
        self.bn = nn.BatchNorm1d(channels)

    def forward(self, x, agent_mask):
        # x: (B, A, t, C)
        out = torch.zeros_like(x)
        sel = x[agent_mask]  # (n_valid, t, C)
        if sel.shape[0] == 0:
            return out
        n, t, C = sel.shape
        out[agent_mask] = self.bn(sel.reshape(n * t, C)).reshape(n, t, C)
        return out


class GraphAttention(nn.Module):
    """Single-head graph attention over a fully connected graph with self loops."""

    def __init__(self, in_dim, out_dim, negative_slope=0.2):
        super().__init__()
        self.W = nn.Linear(in_dim, out_dim, bias=False)
        self.a_src = nn.Parameter(torch.empty(out_dim))
        self.a_dst = nn.Parameter(torch.empty(out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.negative_slope = negative_slope
        nn.init.normal_(self.a_src, std=0.1)
        nn.init.normal_(self.a_dst, std=0.1)

    def forward(self, x, agent_mask):
        h = self.W(x)  # (B, A, D)
        e = (h @ self.a_dst)[..., :, None] + (h @ self.a_src)[..., None, :]
        e = F.leaky_relu(e, self.negative_slope)
        e = e.masked_fill(~agent_mask[:, None, :], float("-inf"))
        alpha = torch.softmax(e, dim=-1)
        return alpha @ h + self.bias


class SurroundEncoder(nn.Module):
    """Conv stack over the recent quarter of M, then graph attention and ELU.

    The second convolution spans three frames of one agent only: agents have
    no spatial order, so mixing along that axis would break equivariance.
    """

    def __init__(self, history_frames, channels=16, out_dim=32, dropout=0.2):
        super().__init__()
        self.frames = max(2, history_frames // 4)
        self.expand = nn.Conv2d(2, channels, kernel_size=1)
        self.conv = nn.Conv2d(channels, channels, kernel_size=(1, 3), padding=(0, 1))
        self.norm = MaskedBatchNorm(channels)
        self.dropout = nn.Dropout(dropout)
        self.gat = GraphAttention(channels * self.frames, out_dim)

    def forward(self, M, agent_mask):
        x = M[:, :, -self.frames :, :]  # (B, A, t, 2)
        x = x.permute(0, 3, 1, 2)  # (B, 2, A, t)
        x = self.conv(self.expand(x)).permute(0, 2, 3, 1)  # (B, A, t, C)
        x = self.dropout(self.norm(x, agent_mask))
        x = x.reshape(x.shape[0], x.shape[1], -1)
        return F.elu(self.gat(x, agent_mask)) * agent_mask[..., None]


class HistoryEncoder(nn.Module):
    """Recurrent summary of the target's own centred history."""

    def __init__(self, hidden, cell="lstm"):
        super().__init__()
        rnn = {"lstm": nn.LSTM, "gru": nn.GRU}[cell]
        self.rnn = rnn(4, hidden, batch_first=True)

    def forward(self, hist):
        _, h = self.rnn(_scale(hist, HIST_SCALE))
        if isinstance(h, tuple):
            h = h[0]
        return h[-1]


class MultimodalDecoder(nn.Module):
    """Maneuver head (MLP + softmax) and a GRU trajectory head per maneuver.

    One GRU is shared across maneuvers and conditioned on a one-hot maneuver
    code; each of the ``T_f`` steps emits (dx, dy, sigma_x, sigma_y, rho).
    Means accumulate step displacements on top of a constant-velocity
    extrapolation of the last observed target velocity when ``cv_prior``.
    Standard deviations are floored at ``sigma_min`` meters.
    """

    def __init__(self, context_dim, hidden, future_frames, n_modes=NUM_MANEUVERS, cv_prior=True, sigma_min=0.1):
        super().__init__()
        if not 0 < sigma_min < 1:
            raise ValueError("sigma_min must lie in (0, 1) meters")
        self.n_modes = n_modes
        self.sigma_min = sigma_min
        # softplus offset that makes the initial sigma exactly 1 m
        self._sigma_shift = math.log(math.expm1(1.0 - sigma_min))
        self.future_frames = future_frames
        self.cv_prior = cv_prior
        self.maneuver = nn.Sequential(nn.Linear(context_dim, hidden), nn.ELU(), nn.Linear(hidden, n_modes))
        nn.init.zeros_(self.maneuver[-1].weight)
        nn.init.zeros_(self.maneuver[-1].bias)
        self.init_hidden = nn.Linear(context_dim, hidden)
        self.gru = nn.GRUCell(context_dim + n_modes, hidden)
        self.head = nn.Linear(hidden, 5)
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)

    def forward(self, context, last_velocity, dt) -> GmmForecast:
        B = context.shape[0]
        C, T = self.n_modes, self.future_frames
        logits = self.maneuver(context)
        code = torch.eye(C, dtype=context.dtype, device=context.device)
        ctx = context[:, None].expand(B, C, -1).reshape(B * C, -1)
        inp = torch.cat([ctx, code[None].expand(B, C, C).reshape(B * C, C)], dim=-1)
        h = torch.tanh(self.init_hidden(ctx))
        outs = []
        for _ in range(T):
            h = self.gru(inp, h)
            outs.append(self.head(h))
        raw = torch.stack(outs, dim=1).reshape(B, C, T, 5)
        step = raw[..., :2]
        if self.cv_prior:
            step = step + (last_velocity * dt[:, None])[:, None, None, :]
        mu = torch.cumsum(step, dim=2)
        sigma = F.softplus(raw[..., 2:4] + self._sigma_shift) + self.sigma_min
        rho = bounded_rho(raw[..., 4])
        return GmmForecast(logits, mu, sigma, rho)


def _inputs(batch, frames):
    T = batch["S"].shape[-2]
    if T < frames:
        raise ValueError(f"model needs {frames} history frames, got {T}")
    sl = slice(T - frames, T)
    return (
        batch["S"][..., sl, :],
        batch["M"][..., sl, :],
        batch["central"][..., sl],
        batch["target_history"][..., sl, :],
        batch["agent_mask"],
    )


class TeacherModel(nn.Module):
    def __init__(self, cfg: TeacherConfig = TeacherConfig()):
        super().__init__()
        self.cfg = cfg
        self.vision = VisionPool(cfg.vision, enabled=cfg.use_vision_pool)
        self.embed = TrackEmbedder(4, cfg.embed_hidden, cfg.embed_dim, cell="lstm")
        self.swa = ShiftWindowAttention(cfg.swa, cfg.n_agents, cfg.embed_dim, cfg.history_frames * 4)
        self.surround = SurroundEncoder(cfg.history_frames, cfg.surround_channels, cfg.surround_dim, cfg.surround_dropout)
        self.token = nn.Linear(cfg.surround_dim + cfg.swa.head_dim, cfg.d_model)
        layer = nn.TransformerEncoderLayer(
            cfg.d_model, cfg.transformer_heads, cfg.transformer_ff, dropout=0.0, batch_first=True
        )
        self.transformer = nn.TransformerEncoder(layer, cfg.transformer_layers, enable_nested_tensor=False)
        self.history = HistoryEncoder(cfg.history_hidden, cell="lstm")
        self.decoder = MultimodalDecoder(
            cfg.d_model + cfg.history_hidden, cfg.decoder_hidden, cfg.future_frames, cfg.n_modes, cfg.cv_prior,
            cfg.sigma_min,
        )

    def surround_encode(self, M, agent_mask):
        if not self.cfg.use_surround:
            return M.new_zeros(M.shape[:2] + (self.cfg.surround_dim,))
        return self.surround(M, agent_mask)

    def interact(self, O_sur, O_vis, agent_mask):
        if agent_mask.shape[-1] == 0:
            raise ValueError("no agent tokens")
        tokens = self.token(torch.cat([O_sur, O_vis], dim=-1))
        if not self.cfg.use_transformer:
            return tokens
        return self.transformer(tokens, src_key_padding_mask=~agent_mask)

    def forward(self, batch) -> GmmForecast:
        S, M, central, hist, agent_mask = _inputs(batch, self.cfg.history_frames)
        S_tilde = self.vision(S, central)
        x = _scale(S_tilde, S_SCALE)
        emb = self.embed(x)
        O_vis = self.swa(x, emb[:, 0], emb, agent_mask)
        O_sur = self.surround_encode(M, agent_mask)
        I = self.interact(O_sur, O_vis, agent_mask)
        context = torch.cat([I[:, 0], self.history(hist)], dim=-1)
        return self.decoder(context, hist[:, -1, 2:], batch["dt"])

    def after_step(self):
        self.vision.clamp_()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
