"""Track embedding and shift-window attention (SWA).

Score maps are ``L x D`` with ``L`` the number of agent slots and ``D`` the
per-head key width. Two equally sized windows slide over the query and key
maps in lock-step; each window's elementwise product is scattered back onto an
``L x D`` canvas, every cell is divided by the number of windows covering it,
and the canvas is scaled elementwise by the learnable map ``W_a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


class WindowConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftWindowConfig:
    window_x: int = 5
    window_y: int = 8
    stride_x: int = 4
    stride_y: int = 4


def validate_window(cfg: ShiftWindowConfig, L: int, D: int) -> int:
    """Common window count ``z`` for an ``L x D`` map, or raise.

    Legal iff ``(L - l) / stride_x + 1`` and ``(D - d) / stride_y + 1`` are the
    same positive integer.
    """
    l, d, sx, sy = cfg.window_x, cfg.window_y, cfg.stride_x, cfg.stride_y
    if min(L, D, l, d, sx, sy) <= 0:
        raise WindowConfigError(f"all sizes must be positive (L={L}, D={D}, window={l}x{d}, strides={sx},{sy})")
    if l > L or d > D:
        raise WindowConfigError(f"window {l}x{d} larger than map {L}x{D}")
    z_x = (L - l) / sx + 1
    z_y = (D - d) / sy + 1
    if (L - l) % sx or (D - d) % sy or z_x != z_y:
        raise WindowConfigError(f"window counts must be equal integers: z_x={z_x:g}, z_y={z_y:g}")
    return int(z_x)


def window_coverage(cfg: ShiftWindowConfig, L: int, D: int) -> np.ndarray:
    """Number of windows covering each cell of the ``L x D`` map."""
    z = validate_window(cfg, L, D)
    rows = np.zeros(L, dtype=np.int64)
    cols = np.zeros(D, dtype=np.int64)
    for m in range(z):
        rows[m * cfg.stride_x : m * cfg.stride_x + cfg.window_x] += 1
        cols[m * cfg.stride_y : m * cfg.stride_y + cfg.window_y] += 1
    return np.outer(rows, cols)


def _window_index(cfg: ShiftWindowConfig, L: int, D: int):
    z = validate_window(cfg, L, D)
    r = torch.arange(z)[:, None] * cfg.stride_x + torch.arange(cfg.window_x)[None]  # (z, l)
    c = torch.arange(z)[:, None] * cfg.stride_y + torch.arange(cfg.window_y)[None]  # (z, d)
    # broadcast to (z, z, l, d): window (m, n) at (m*sx, n*sy)
    rr = r[:, None, :, None].expand(z, z, cfg.window_x, cfg.window_y)
    cc = c[None, :, None, :].expand(z, z, cfg.window_x, cfg.window_y)
    return rr, cc


def shift_window_scores(Q: torch.Tensor, K: torch.Tensor, cfg: ShiftWindowConfig, W_a: torch.Tensor) -> torch.Tensor:
    """Vectorised SWA score map for ``Q, K`` of shape ``(..., L, D)``."""
    if Q.shape != K.shape:
        raise ValueError(f"Q {tuple(Q.shape)} and K {tuple(K.shape)} differ")
    L, D = Q.shape[-2:]
    rr, cc = _window_index(cfg, L, D)
    prod = Q[..., rr, cc] * K[..., rr, cc]  # (..., z, z, l, d)
    lead = Q.shape[:-2]
    canvas = Q.new_zeros(lead + (L * D,))
    flat = (rr * D + cc).reshape(-1).to(Q.device)
    canvas = canvas.index_add(-1, flat, prod.reshape(lead + (-1,)))
    count = torch.zeros(L * D, dtype=Q.dtype, device=Q.device).index_add(
        0, flat, torch.ones_like(flat, dtype=Q.dtype)
    )
    canvas = canvas / count.clamp(min=1)
    return canvas.reshape(lead + (L, D)) * W_a


def shift_window_scores_reference(Q, K, cfg: ShiftWindowConfig, W_a) -> np.ndarray:
    """Quadruple-loop transcription of the scatter-accumulate rule (one 2-D map)."""
    Q, K, W_a = (np.asarray(a, dtype=np.float64) for a in (Q, K, W_a))
    L, D = Q.shape
    z = validate_window(cfg, L, D)
    canvas = np.zeros((L, D))
    count = np.zeros((L, D))
    for m in range(z):
        for n in range(z):
            x0, y0 = m * cfg.stride_x, n * cfg.stride_y
            for a in range(cfg.window_x):
                for b in range(cfg.window_y):
                    canvas[x0 + a, y0 + b] += Q[x0 + a, y0 + b] * K[x0 + a, y0 + b]
                    count[x0 + a, y0 + b] += 1
    out = np.divide(canvas, count, out=np.zeros_like(canvas), where=count > 0)
    return W_a * out


@dataclass(frozen=True)
class SwaConfig:
    heads: int = 4
    d_q: int = 64
    d_k: int = 64
    d_v: int = 64
    window: ShiftWindowConfig = ShiftWindowConfig()
    # "swa" or "dot" (plain scaled dot-product attention, for ablation)
    kind: str = "swa"

    def __post_init__(self):
        for name in ("d_q", "d_k", "d_v"):
            if getattr(self, name) % self.heads:
                raise ValueError(f"{name}={getattr(self, name)} not divisible by heads={self.heads}")
        if not (self.d_q == self.d_k == self.d_v):
            raise ValueError("per-head query, key and value widths must match for the elementwise product")
        if self.kind not in ("swa", "dot"):
            raise ValueError(f"unknown attention kind {self.kind!r}")

    @property
    def head_dim(self) -> int:
        return self.d_k // self.heads


class TrackEmbedder(nn.Module):
    """Recurrent layer over time per agent, then ELU and a linear map.

    The last hidden state of each agent's sequence is the embedding; target
    and neighbors share weights.
    """

    def __init__(self, in_dim=4, hidden=64, out_dim=64, cell="lstm"):
        super().__init__()
        rnn = {"lstm": nn.LSTM, "gru": nn.GRU}[cell]
        self.rnn = rnn(in_dim, hidden, batch_first=True)
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is (B, A, T, C) -> (B, A, out_dim)."""
        B, A, T, C = x.shape
        if T == 0:
            raise ValueError("cannot embed an empty time axis")
        _, h = self.rnn(x.reshape(B * A, T, C))
        if isinstance(h, tuple):
            h = h[0]
        return self.out(F.elu(h[-1])).reshape(B, A, -1)


def embed_tracks(embedder: TrackEmbedder, S_tilde: torch.Tensor):
    """Split embeddings into the target row and the neighbor rows."""
    emb = embedder(S_tilde)
    return emb[:, 0], emb[:, 1:]


class ShiftWindowAttention(nn.Module):
    """Multi-head SWA block over ``n_agents`` slots with an additive value skip.

    ``W_a`` is materialised as an ``L x D`` map from two learnable rows, one
    for the target slot and one shared by all neighbor slots, so the block
    stays equivariant to neighbor order.
    """

    def __init__(self, cfg: SwaConfig, n_agents: int, emb_dim: int, value_in: int):
        super().__init__()
        self.cfg = cfg
        self.n_agents = n_agents
        if cfg.kind == "swa":
            validate_window(cfg.window, n_agents, cfg.head_dim)
        self.W_q = nn.Linear(emb_dim, cfg.d_q)
        self.W_k = nn.Linear(emb_dim, cfg.d_k)
        self.W_v = nn.Linear(value_in, cfg.d_v)
        self.W_a_rows = nn.Parameter(torch.ones(2, cfg.head_dim))

    @property
    def W_a(self) -> torch.Tensor:
        idx = torch.ones(self.n_agents, dtype=torch.long, device=self.W_a_rows.device)
        idx[0] = 0
        return self.W_a_rows[idx]

    def project_qkv(self, F_tar, F_all, S_tilde):
        """Q from the target embedding (broadcast over rows), K from each
        agent's embedding, V from the agent's flattened pooled history;
        each returned as (B, H, A, D)."""
        B, A = F_all.shape[:2]
        H, D = self.cfg.heads, self.cfg.head_dim
        Q = self.W_q(F_tar)[:, None].expand(B, A, self.cfg.d_q)
        K = self.W_k(F_all)
        V = self.W_v(S_tilde.reshape(B, A, -1))
        split = lambda x: x.reshape(B, A, H, D).permute(0, 2, 1, 3)
        return split(Q), split(K), split(V)

    def forward(self, S_tilde, F_tar, F_all, agent_mask):
        Qh, Kh, Vh = self.project_qkv(F_tar, F_all, S_tilde)
        if self.cfg.kind == "swa":
            scores = shift_window_scores(Qh, Kh, self.cfg.window, self.W_a) / math.sqrt(self.cfg.d_k)
        else:
            # one weight per agent row, broadcast across the head width
            scores = (Qh * Kh).sum(-1, keepdim=True).expand_as(Qh) / math.sqrt(self.cfg.head_dim)
        keep = agent_mask[:, None, :, None]
        scores = scores.masked_fill(~keep, float("-inf"))
        attn = torch.softmax(scores, dim=-2)
        heads = attn * torch.tanh(Vh)
        out = heads.sum(1) + Vh.sum(1)
        return out * agent_mask[..., None]


def swa_forward(block: ShiftWindowAttention, S_tilde, F_tar, F_all, agent_mask):
    return block(S_tilde, F_tar, F_all, agent_mask)
