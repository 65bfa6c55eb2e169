"""Batch export of GMM forecast heat maps (Agg backend, no display)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .forecast import mixture_density_grid  # noqa: E402


@dataclass(frozen=True)
class DensityGrid:
    xs: np.ndarray  # lateral cell centres
    ys: np.ndarray  # longitudinal cell centres
    density: np.ndarray  # (T_f, len(ys), len(xs))

    @property
    def cell_area(self) -> float:
        return float((self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0]))

    def integral(self, step: int) -> float:
        return float(self.density[step].sum() * self.cell_area)


def grid_extent(mu, sigma, margin_sigma: float = 6.0):
    """Bounding box ``(x0, x1, y0, y1)`` covering every component +- ``margin_sigma`` sigma."""
    mu = np.asarray(mu, dtype=float).reshape(-1, 2)
    sigma = np.asarray(sigma, dtype=float).reshape(-1, 2)
    lo = (mu - margin_sigma * sigma).min(0)
    hi = (mu + margin_sigma * sigma).max(0)
    return lo[0], hi[0], lo[1], hi[1]


def density_grid(probs, mu, sigma, rho, nx: int = 200, ny: int = 200, extent=None,
                 margin_sigma: float = 6.0, steps=None) -> DensityGrid:
    """Rasterise the mixture density of one forecast at each requested step.

    ``probs`` (C,), ``mu``/``sigma`` (C, T_f, 2), ``rho`` (C, T_f).
    """
    probs, mu, sigma, rho = (np.asarray(a, dtype=np.float64) for a in (probs, mu, sigma, rho))
    steps = range(mu.shape[1]) if steps is None else steps
    x0, x1, y0, y1 = extent if extent is not None else grid_extent(mu[:, list(steps)], sigma[:, list(steps)], margin_sigma)
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    dens = np.stack([mixture_density_grid(probs, mu[:, t], sigma[:, t], rho[:, t], xs, ys) for t in steps])
    return DensityGrid(xs, ys, dens)


def plot_density(forecast: dict, history, future, output, nx: int = 300, ny: int = 300,
                 margin_sigma: float = 3.0, title: str | None = None) -> Path:
    """Heat map of the per-step mixture densities (each step normalised to its
    own peak, composited by maximum) with the observed history and ground truth.

    ``forecast`` holds numpy ``probs`` (C,), ``mu``/``sigma`` (C, T_f, 2) and
    ``rho`` (C, T_f) for one scene, relative to the last observed position;
    ``history`` (T_obs, 2) and ``future`` (T_f, 2) use the same frame.
    """
    future = np.asarray(future, dtype=float)
    history = np.asarray(history, dtype=float)
    if future.size == 0 or not np.isfinite(future).all():
        raise ValueError("scene has no complete future to plot against")
    probs, mu, sigma, rho = (forecast[k] for k in ("probs", "mu", "sigma", "rho"))
    x0, x1, y0, y1 = grid_extent(mu, sigma, margin_sigma)
    pts = np.concatenate([history, future], axis=0)
    x0, x1 = min(x0, pts[:, 0].min()) - 1.0, max(x1, pts[:, 0].max()) + 1.0
    y0, y1 = min(y0, pts[:, 1].min()) - 2.0, max(y1, pts[:, 1].max()) + 2.0
    grid = density_grid(probs, mu, sigma, rho, nx, ny, extent=(x0, x1, y0, y1))
    peak = grid.density.max(axis=(1, 2), keepdims=True)
    comp = (grid.density / np.where(peak > 0, peak, 1.0)).max(0)

    fig, ax = plt.subplots(figsize=(10, 3.2))
    # longitudinal axis drawn horizontally
    ax.imshow(comp.T, origin="lower", extent=(y0, y1, x0, x1), aspect="auto", cmap="inferno")
    ax.plot(history[:, 1], history[:, 0], "-", color="tab:cyan", lw=1.5, label="history")
    ax.plot(future[:, 1], future[:, 0], "--", color="white", lw=1.2, label="ground truth")
    best = int(np.argmax(probs))
    ax.plot(mu[best, :, 1], mu[best, :, 0], ":", color="tab:green", lw=1.2, label="most probable mode")
    ax.set_xlabel("longitudinal (m)")
    ax.set_ylabel("lateral (m)")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper left", fontsize=7)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(output, dpi=120)
    plt.close(fig)
    return output
