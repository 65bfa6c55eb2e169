"""GMM forecast container and mixture density evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

RHO_LIMIT = 0.999
LOG_2PI = math.log(2 * math.pi)


def bounded_rho(raw: torch.Tensor) -> torch.Tensor:
    """``RHO_LIMIT * tanh(raw)``, kept strictly inside the limit in ``raw``'s dtype.

    tanh saturates to 1 in float32 for moderate inputs, and float32(0.999)
    itself exceeds 0.999, so the product alone can touch or pass the bound.
    """
    limit = torch.tensor(RHO_LIMIT, dtype=raw.dtype, device=raw.device)
    inner = torch.nextafter(limit, torch.zeros_like(limit))
    while inner >= RHO_LIMIT:
        inner = torch.nextafter(inner, torch.zeros_like(inner))
    return (limit * torch.tanh(raw)).clamp(-inner, inner)


@dataclass
class GmmForecast:
    """Per-maneuver bivariate Gaussian sequences plus maneuver logits.

    Shapes: ``logits`` (B, C); ``mu`` and ``sigma`` (B, C, T_f, 2);
    ``rho`` (B, C, T_f). ``mu`` is relative to the target's last observed
    position.
    """

    logits: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    rho: torch.Tensor

    @property
    def n_modes(self) -> int:
        return self.logits.shape[-1]

    @property
    def horizon(self) -> int:
        return self.mu.shape[-2]

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    def detach(self) -> "GmmForecast":
        return GmmForecast(self.logits.detach(), self.mu.detach(), self.sigma.detach(), self.rho.detach())

    def __getitem__(self, idx) -> "GmmForecast":
        return GmmForecast(self.logits[idx], self.mu[idx], self.sigma[idx], self.rho[idx])

    def point_prediction(self, mode: str = "best") -> torch.Tensor:
        """(B, T_f, 2): mean of the most probable maneuver, or the probability-weighted mean."""
        if mode == "best":
            k = self.logits.argmax(-1)
            return self.mu[torch.arange(self.mu.shape[0]), k]
        if mode == "weighted":
            return (self.probs[..., None, None] * self.mu).sum(1)
        raise ValueError(f"unknown point-prediction mode {mode!r}")

    def check(self, atol: float = 1e-6) -> None:
        """Raise if any GMM invariant is violated."""
        for name in ("logits", "mu", "sigma", "rho"):
            if not torch.isfinite(getattr(self, name)).all():
                raise FloatingPointError(f"non-finite {name} in forecast")
        p = self.probs
        if (p < 0).any() or ((p.sum(-1) - 1).abs() > atol).any():
            raise ValueError("maneuver probabilities are not a simplex")
        if (self.sigma <= 0).any():
            raise ValueError("non-positive sigma")
        if (self.rho.abs() >= RHO_LIMIT).any():
            raise ValueError("|rho| reached its limit")

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {
            "probs": self.probs.detach().cpu().numpy(),
            "mu": self.mu.detach().cpu().numpy(),
            "sigma": self.sigma.detach().cpu().numpy(),
            "rho": self.rho.detach().cpu().numpy(),
        }


def bivariate_log_density(x, y, mu, sigma, rho):
    """log N((x, y); mu, sigma, rho) in numpy, broadcasting over leading axes."""
    sx, sy = sigma[..., 0], sigma[..., 1]
    dx = (x - mu[..., 0]) / sx
    dy = (y - mu[..., 1]) / sy
    one_m = 1.0 - rho**2
    z = dx**2 + dy**2 - 2 * rho * dx * dy
    return -LOG_2PI - np.log(sx) - np.log(sy) - 0.5 * np.log(one_m) - z / (2 * one_m)


def mixture_density_grid(probs, mu, sigma, rho, xs, ys) -> np.ndarray:
    """Mixture density on the grid ``ys x xs`` for one time step.

    ``probs`` (C,), ``mu``/``sigma`` (C, 2), ``rho`` (C,). Returns an array
    of shape (len(ys), len(xs)).
    """
    probs, mu, sigma, rho = (np.asarray(a, dtype=np.float64) for a in (probs, mu, sigma, rho))
    X, Y = np.meshgrid(np.asarray(xs, float), np.asarray(ys, float))
    logd = bivariate_log_density(X[None], Y[None], mu[:, None, None], sigma[:, None, None], rho[:, None, None])
    return np.einsum("c,cij->ij", probs, np.exp(logd))
