"""Training objectives: bivariate NLL, teacher/track/distillation losses and
uncertainty-weighted loss balancing (KDM).

All losses are batch means of per-sample sums over horizon steps and
maneuver modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .forecast import LOG_2PI, GmmForecast

COORDINATE_MODES = ("all-modes", "best-mode")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    temperature: float = 2.0
    coordinate_mode: str = "all-modes"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.coordinate_mode not in COORDINATE_MODES:
            raise ValueError(f"coordinate_mode must be one of {COORDINATE_MODES}")


def bivariate_nll(gt: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """Negative log of the bivariate normal density at ``gt``, computed in log space.

    ``gt``, ``mu`` and ``sigma`` end in a coordinate axis of size 2; ``rho``
    lacks it. Leading axes broadcast.
    """
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    if (rho.abs() >= 1).any():
        raise ValueError("|rho| must be < 1")
    d = (gt - mu) / sigma
    dx, dy = d[..., 0], d[..., 1]
    one_m = 1 - rho**2
    z = dx**2 + dy**2 - 2 * rho * dx * dy
    return LOG_2PI + torch.log(sigma[..., 0]) + torch.log(sigma[..., 1]) + 0.5 * torch.log(one_m) + z / (2 * one_m)


def _check_alignment(forecast: GmmForecast, gt: torch.Tensor):
    if gt.shape[-2] != forecast.horizon:
        raise ValueError(f"horizon mismatch: forecast {forecast.horizon} vs ground truth {gt.shape[-2]}")


def _mode_weights(forecast: GmmForecast, gt: torch.Tensor, mode: str) -> torch.Tensor:
    """(B, C) weights selecting which modes enter the coordinate terms."""
    if mode == "all-modes":
        return torch.ones(forecast.mu.shape[:2], dtype=gt.dtype, device=gt.device)
    if mode == "best-mode":
        err = ((forecast.mu - gt[:, None]) ** 2).sum((-1, -2))
        return nn.functional.one_hot(err.argmin(-1), forecast.n_modes).to(gt.dtype)
    raise ValueError(f"unknown coordinate mode {mode!r}")


def track_loss(forecast: GmmForecast, gt: torch.Tensor, maneuver: torch.Tensor, coordinate_mode="all-modes"):
    """(maneuver part, coordinate part) of the supervised loss.

    coordinate part: sum over steps and modes of the per-point MSE between
    each mode's mean and the ground truth.
    maneuver part: sum over steps of [sum over modes of the bivariate NLL of
    the ground truth, plus the cross-entropy of the true maneuver].
    """
    _check_alignment(forecast, gt)
    if (maneuver < 0).any() or (maneuver >= forecast.n_modes).any():
        raise ValueError("maneuver labels out of range for this forecast")
    w = _mode_weights(forecast, gt, coordinate_mode)
    g = gt[:, None]  # (B, 1, T, 2)
    mse = ((forecast.mu - g) ** 2).mean(-1)  # (B, C, T)
    nll = bivariate_nll(g, forecast.mu, forecast.sigma, forecast.rho)  # (B, C, T)
    ce = -forecast.log_probs.gather(1, maneuver[:, None]).squeeze(1)  # (B,)
    coor = (w[..., None] * mse).sum((1, 2))
    man = (w[..., None] * nll).sum((1, 2)) + forecast.horizon * ce
    return man.mean(), coor.mean()


def teacher_loss(forecast: GmmForecast, gt: torch.Tensor, maneuver: torch.Tensor, coordinate_mode="all-modes"):
    man, coor = track_loss(forecast, gt, maneuver, coordinate_mode)
    return man + coor


def softened_log_probs(forecast: GmmForecast, temperature: float) -> torch.Tensor:
    return torch.log_softmax(forecast.log_probs / temperature, dim=-1)


def maneuver_cross_entropy(student: GmmForecast, teacher: GmmForecast, temperature: float) -> torch.Tensor:
    """Per-sample cross-entropy between temperature-softened teacher and student maneuver distributions."""
    p_t = softened_log_probs(teacher, temperature).exp()
    return -(p_t * softened_log_probs(student, temperature)).sum(-1)


def distillation_loss(student: GmmForecast, teacher: GmmForecast, cfg: LossConfig = LossConfig()):
    """(maneuver part, coordinate part), both scaled by 2*alpha*T^2.

    The teacher's mode means serve as pseudo ground truth for the student's
    Gaussians of the same mode; maneuvers are matched by softened
    cross-entropy summed over the horizon.
    """
    T = cfg.temperature
    if T <= 0:
        raise ValueError("temperature must be positive")
    if student.horizon != teacher.horizon or student.n_modes != teacher.n_modes:
        raise ValueError("student and teacher forecasts must share horizon and maneuver set")
    teacher = teacher.detach()
    scale = 2 * cfg.alpha * T**2
    man = scale * student.horizon * maneuver_cross_entropy(student, teacher, T)
    nll = bivariate_nll(teacher.mu, student.mu, student.sigma, student.rho)
    coor = scale * nll.sum((1, 2))
    return man.mean(), coor.mean()


@dataclass
class LossBundle:
    tra_man: torch.Tensor
    tra_coor: torch.Tensor
    dis_man: torch.Tensor
    dis_coor: torch.Tensor
    total: torch.Tensor | None = None

    def parts(self):
        return self.tra_man, self.tra_coor, self.dis_man, self.dis_coor

    def as_floats(self) -> dict[str, float]:
        out = {k: float(getattr(self, k)) for k in ("tra_man", "tra_coor", "dis_man", "dis_coor")}
        if self.total is not None:
            out["total"] = float(self.total)
        return out


class KdmState(nn.Module):
    """Learnable log-variances ``s = log sigma^2`` for (man, coor, track, distill)."""

    names = ("sigma_1", "sigma_2", "sigma_t", "sigma_d")

    def __init__(self, learnable: bool = True):
        super().__init__()
        self.log_var = nn.Parameter(torch.zeros(4), requires_grad=learnable)

    @property
    def sigmas(self) -> torch.Tensor:
        return torch.exp(self.log_var / 2)

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.sigmas.detach())}


def _half_precision(s):
    """1 / (2 sigma^2) from the log-variance."""
    return 0.5 * torch.exp(-s)


def _split(log_var):
    return log_var[0], log_var[1], log_var[2], log_var[3]


def kdm_combine(parts, state) -> torch.Tensor:
    """Two-level uncertainty-weighted total with the log(s1 s2 st sd) regulariser."""
    parts = parts.parts() if isinstance(parts, LossBundle) else tuple(parts)
    tra_man, tra_coor, dis_man, dis_coor = parts
    s = state.log_var if isinstance(state, KdmState) else state
    for p in parts:
        if not torch.isfinite(torch.as_tensor(p)).all():
            raise FloatingPointError("non-finite loss part")
    s1, s2, st, sd = _split(s)
    w1, w2, wt, wd = (_half_precision(x) for x in (s1, s2, st, sd))
    return wt * (w1 * tra_man + w2 * tra_coor) + wd * (w1 * dis_man + w2 * dis_coor) + 0.5 * s.sum()


def _log_sigma(s):
    return 0.5 * s


def option1_total(parts, state) -> torch.Tensor:
    """Tracking/distillation first, then maneuver/coordinate, with its own constant term."""
    tra_man, tra_coor, dis_man, dis_coor = parts.parts() if isinstance(parts, LossBundle) else parts
    s1, s2, st, sd = _split(state.log_var if isinstance(state, KdmState) else state)
    w1, w2, wt, wd = (_half_precision(x) for x in (s1, s2, st, sd))
    const = (_log_sigma(s1) + _log_sigma(s2)) * (wt + wd) + _log_sigma(st) + _log_sigma(sd)
    return wt * (w1 * tra_man + w2 * tra_coor) + wd * (w1 * dis_man + w2 * dis_coor) + const


def option2_total(parts, state) -> torch.Tensor:
    """Maneuver/coordinate first, then tracking/distillation, with its own constant term."""
    tra_man, tra_coor, dis_man, dis_coor = parts.parts() if isinstance(parts, LossBundle) else parts
    s1, s2, st, sd = _split(state.log_var if isinstance(state, KdmState) else state)
    w1, w2, wt, wd = (_half_precision(x) for x in (s1, s2, st, sd))
    const = (_log_sigma(st) + _log_sigma(sd)) * (w1 + w2) + _log_sigma(s1) + _log_sigma(s2)
    return w1 * (wt * tra_man + wd * dis_man) + w2 * (wt * tra_coor + wd * dis_coor) + const


def kdm_option_gap(parts, state) -> torch.Tensor:
    """Difference of the two nesting orders; depends on the variances only."""
    s1, s2, st, sd = _split(state.log_var if isinstance(state, KdmState) else state)
    w1, w2, wt, wd = (_half_precision(x) for x in (s1, s2, st, sd))
    log12 = _log_sigma(s1) + _log_sigma(s2)
    logtd = _log_sigma(st) + _log_sigma(sd)
    return log12 * (wt + wd) + logtd - logtd * (w1 + w2) - log12


def student_loss_bundle(student, teacher, gt, maneuver, cfg: LossConfig, state) -> LossBundle:
    tra_man, tra_coor = track_loss(student, gt, maneuver, cfg.coordinate_mode)
    if teacher is None or cfg.alpha == 0:
        zero = tra_man.new_zeros(())
        dis_man, dis_coor = zero, zero
    else:
        dis_man, dis_coor = distillation_loss(student, teacher, cfg)
    bundle = LossBundle(tra_man, tra_coor, dis_man, dis_coor)
    bundle.total = kdm_combine(bundle, state)
    return bundle
