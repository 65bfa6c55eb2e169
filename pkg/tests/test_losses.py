import math

import numpy as np
import pytest
import torch

from gradcheck import RTOL, fd_relative_error
from hltp.forecast import LOG_2PI, GmmForecast
from hltp.losses import (
    KdmState,
    LossBundle,
    LossConfig,
    bivariate_nll,
    distillation_loss,
    kdm_combine,
    kdm_option_gap,
    maneuver_cross_entropy,
    option1_total,
    option2_total,
    student_loss_bundle,
    teacher_loss,
    track_loss,
)

D = torch.float64


def _t(*x):
    return torch.tensor(x, dtype=D)


def _forecast(B=2, C=3, T=4, seed=0, requires_grad=False):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(B, C, generator=g, dtype=D)
    mu = torch.randn(B, C, T, 2, generator=g, dtype=D)
    sigma = 0.5 + torch.rand(B, C, T, 2, generator=g, dtype=D)
    rho = 0.9 * (2 * torch.rand(B, C, T, generator=g, dtype=D) - 1)
    return GmmForecast(logits, mu, sigma, rho)


# -- bivariate NLL ---------------------------------------------------------


def test_nll_closed_forms():
    z, one, zero = _t(0.0, 0.0), _t(1.0, 1.0), _t(0.0)
    assert abs(bivariate_nll(z, z, one, zero).item() - math.log(2 * math.pi)) < 1e-9
    assert abs(bivariate_nll(_t(1.0, 0.0), z, one, zero).item() - (math.log(2 * math.pi) + 0.5)) < 1e-9


def test_nll_matches_direct_density():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mu = rng.normal(size=2)
        sx, sy = rng.uniform(0.1, 3, 2)
        # within a few sigma so the direct density stays representable
        gt = mu + rng.normal(size=2) * (sx, sy)
        r = rng.uniform(-0.95, 0.95)
        dx, dy = (gt - mu) / (sx, sy)
        dens = math.exp(-(dx**2 + dy**2 - 2 * r * dx * dy) / (2 * (1 - r**2))) / (2 * math.pi * sx * sy * math.sqrt(1 - r**2))
        got = bivariate_nll(torch.tensor(gt), torch.tensor(mu), torch.tensor([sx, sy], dtype=D), torch.tensor(r, dtype=D)).item()
        assert abs(got - (-math.log(dens))) <= 1e-9 * abs(math.log(dens)) + 1e-12


def test_nll_rejects_invalid():
    z = _t(0.0, 0.0)
    with pytest.raises(ValueError):
        bivariate_nll(z, z, _t(0.0, 1.0), _t(0.0))
    with pytest.raises(ValueError):
        bivariate_nll(z, z, _t(1.0, 1.0), _t(1.0))


def test_nll_finite_for_tiny_sigma():
    v = bivariate_nll(_t(0.0, 0.0), _t(0.0, 0.0), _t(1e-3, 1e-3), _t(0.0))
    assert torch.isfinite(v) and v < 0


# -- teacher / track losses ------------------------------------------------


def test_teacher_loss_perfect_single_mode():
    T = 25
    gt = torch.randn(1, T, 2, dtype=D)
    fc = GmmForecast(torch.zeros(1, 1, dtype=D), gt[:, None].clone(), torch.ones(1, 1, T, 2, dtype=D),
                     torch.zeros(1, 1, T, dtype=D))
    assert teacher_loss(fc, gt, torch.zeros(1, dtype=torch.long)).item() == pytest.approx(T * LOG_2PI, abs=1e-9)


def test_mse_quadratic_in_offset():
    gt = torch.zeros(1, 5, 2, dtype=D)
    fc = _forecast(1, 2, 5)
    fc.mu = torch.full_like(fc.mu, 0.7)
    _, c1 = track_loss(fc, gt, torch.zeros(1, dtype=torch.long))
    fc.mu = torch.full_like(fc.mu, 1.4)
    _, c2 = track_loss(fc, gt, torch.zeros(1, dtype=torch.long))
    assert c2.item() == pytest.approx(4 * c1.item(), rel=1e-12)


def test_two_mode_hand_sum():
    T = 1
    gt = torch.zeros(1, T, 2, dtype=D)
    mu = torch.tensor([[[[1.0, 0.0]], [[0.0, 2.0]]]], dtype=D)
    sigma = torch.ones(1, 2, T, 2, dtype=D)
    rho = torch.zeros(1, 2, T, dtype=D)
    p = torch.tensor([[0.3, 0.7]], dtype=D)
    fc = GmmForecast(p.log(), mu, sigma, rho)
    # MSE per point is the coordinate mean: (1 + 0)/2 + (0 + 4)/2
    mse = 0.5 + 2.0
    nll = (LOG_2PI + 0.5) + (LOG_2PI + 2.0)
    ce = -math.log(0.7)
    loss = teacher_loss(fc, gt, torch.tensor([1])).item()
    assert loss == pytest.approx(mse + nll + ce, abs=1e-12)


def test_track_perfect_and_uniform():
    T, C = 6, 9
    gt = torch.randn(1, T, 2, dtype=D)
    fc = GmmForecast(torch.zeros(1, C, dtype=D), gt[:, None].expand(1, C, T, 2).clone(),
                     torch.ones(1, C, T, 2, dtype=D), torch.zeros(1, C, T, dtype=D))
    man, coor = track_loss(fc, gt, torch.tensor([4]))
    assert coor.item() == 0.0
    assert man.item() == pytest.approx(C * T * LOG_2PI + T * math.log(9), abs=1e-9)


def test_track_parts_sum_to_teacher():
    fc = _forecast(3, 9, 5, seed=2)
    gt = torch.randn(3, 5, 2, dtype=D)
    lab = torch.tensor([0, 4, 8])
    man, coor = track_loss(fc, gt, lab)
    assert (man + coor).item() == pytest.approx(teacher_loss(fc, gt, lab).item(), rel=1e-14)


def test_horizon_mismatch():
    with pytest.raises(ValueError, match="horizon"):
        track_loss(_forecast(1, 2, 5), torch.zeros(1, 4, 2, dtype=D), torch.zeros(1, dtype=torch.long))


def test_best_mode_selects_closest():
    fc = _forecast(1, 3, 4)
    gt = fc.mu[:, 1].clone()
    man_all, coor_all = track_loss(fc, gt, torch.tensor([0]), "all-modes")
    _, coor_best = track_loss(fc, gt, torch.tensor([0]), "best-mode")
    assert coor_best.item() == 0.0 and coor_all.item() > 0


# -- distillation ----------------------------------------------------------


def _probs_forecast(p, T=1):
    p = torch.tensor([p], dtype=D)
    C = p.shape[-1]
    return GmmForecast(p.log(), torch.zeros(1, C, T, 2, dtype=D), torch.ones(1, C, T, 2, dtype=D),
                       torch.zeros(1, C, T, dtype=D))


def test_alpha_zero_is_exactly_zero():
    s, t = _forecast(2, 9, 3, 0), _forecast(2, 9, 3, 1)
    man, coor = distillation_loss(s, t, LossConfig(alpha=0.0))
    assert man.item() == 0.0 and coor.item() == 0.0


def test_hand_example_t1():
    man, _ = distillation_loss(_probs_forecast([0.6, 0.4]), _probs_forecast([0.8, 0.2]), LossConfig(alpha=0.5, temperature=1.0))
    # -(0.8 ln 0.6 + 0.2 ln 0.4) evaluates to 0.5919186...
    assert man.item() == pytest.approx(-(0.8 * math.log(0.6) + 0.2 * math.log(0.4)), abs=1e-12)
    assert abs(man.item() - 0.591919) < 1e-6


def test_self_distillation_is_entropy():
    t = _forecast(2, 9, 1, 5)
    ce = maneuver_cross_entropy(t, t, 1.0)
    p = t.probs
    torch.testing.assert_close(ce, -(p * p.log()).sum(-1))


def test_high_temperature_uniform_limit():
    s, t = _forecast(4, 9, 1, 6), _forecast(4, 9, 1, 7)
    s.logits, t.logits = 5 * s.logits, 5 * t.logits
    ce = maneuver_cross_entropy(s, t, 1e3)
    assert torch.all((ce - math.log(9)).abs() < 1e-3)


def test_distillation_shape_checks():
    with pytest.raises(ValueError):
        distillation_loss(_forecast(1, 9, 3), _forecast(1, 9, 4))
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)


def test_teacher_is_not_differentiated():
    s = _forecast(2, 9, 3, 0)
    t = _forecast(2, 9, 3, 1)
    t.mu.requires_grad_(True)
    man, coor = distillation_loss(s, t)
    assert not (man + coor).requires_grad or torch.autograd.grad(man + coor, t.mu, allow_unused=True)[0] is None


# -- KDM -------------------------------------------------------------------


def test_kdm_unit_sigmas():
    parts = [_t(1.0), _t(2.0), _t(3.0), _t(5.0)]
    s = torch.zeros(4, dtype=D)
    assert kdm_combine(parts, s).item() == pytest.approx(11 / 4, abs=1e-14)
    assert kdm_combine([_t(4.0)] * 4, s).item() == pytest.approx(4.0, abs=1e-14)


def test_kdm_sigma1_two():
    a, b, c, d = 1.3, 0.7, 2.9, 4.1
    s = torch.tensor([math.log(4.0), 0, 0, 0], dtype=D)
    want = (a + c) / 16 + (b + d) / 4 + math.log(2)
    assert kdm_combine([_t(a), _t(b), _t(c), _t(d)], s).item() == pytest.approx(want, abs=1e-12)


def test_kdm_bundle_and_state():
    st = KdmState()
    bundle = LossBundle(_t(1.0), _t(1.0), _t(1.0), _t(1.0))
    assert kdm_combine(bundle, st).item() == pytest.approx(1.0)
    assert all(v == 1.0 for v in st.as_dict().values())
    assert not KdmState(learnable=False).log_var.requires_grad


def test_kdm_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        kdm_combine([_t(1.0), _t(float("nan")), _t(1.0), _t(1.0)], torch.zeros(4, dtype=D))


def test_option_gap_examples():
    parts = [_t(1.0)] * 4
    assert kdm_option_gap(parts, torch.zeros(4, dtype=D)).item() == 0.0
    s = torch.tensor([math.log(4.0), 0, 0, 0], dtype=D)
    assert abs(kdm_option_gap(parts, s).item()) < 1e-15
    # sigma_1 = sigma_t = 2: substitute into the two constant terms directly
    s = torch.tensor([math.log(4.0), 0, math.log(4.0), 0], dtype=D)
    l12, ltd = math.log(2), math.log(2)
    want = l12 * (1 / 8 + 1 / 2) + ltd - ltd * (1 / 8 + 1 / 2) - l12
    assert kdm_option_gap(parts, s).item() == pytest.approx(want, abs=1e-14)
    assert (option1_total(parts, s) - option2_total(parts, s)).item() == pytest.approx(want, abs=1e-14)


def test_student_bundle_alpha_zero_is_supervised():
    s, t = _forecast(2, 9, 3, 0), _forecast(2, 9, 3, 1)
    gt = torch.randn(2, 3, 2, dtype=D)
    lab = torch.tensor([1, 2])
    st = KdmState().double()
    b0 = student_loss_bundle(s, t, gt, lab, LossConfig(alpha=0.0), st)
    bn = student_loss_bundle(s, None, gt, lab, LossConfig(), st)
    assert b0.total.item() == bn.total.item()
    assert b0.dis_man.item() == 0 and b0.dis_coor.item() == 0


# -- gradient checks -------------------------------------------------------

SEEDS = range(20)


def _rand_gauss(seed, shape=(3,)):
    g = torch.Generator().manual_seed(seed)
    gt = torch.randn(*shape, 2, generator=g, dtype=D)
    mu = torch.randn(*shape, 2, generator=g, dtype=D)
    sigma = 0.5 + torch.rand(*shape, 2, generator=g, dtype=D)
    rho = 0.8 * (2 * torch.rand(*shape, generator=g, dtype=D) - 1)
    return gt, mu, sigma, rho


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_nll(seed):
    assert fd_relative_error(lambda *a: bivariate_nll(*a).sum(), _rand_gauss(seed)) < RTOL


def _raw_forecast(seed, B=2, C=3, T=3):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(B, C, generator=g, dtype=D), torch.randn(B, C, T, 2, generator=g, dtype=D),
            torch.randn(B, C, T, 2, generator=g, dtype=D), torch.randn(B, C, T, generator=g, dtype=D))


def _fc(logits, mu, raw_sigma, raw_rho):
    # unconstrained parameters through the decoder's activations
    return GmmForecast(logits, mu, torch.nn.functional.softplus(raw_sigma) + 0.1, 0.999 * torch.tanh(raw_rho))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["all-modes", "best-mode"])
def test_grad_teacher_and_track(seed, mode):
    gt = torch.randn(2, 3, 2, generator=torch.Generator().manual_seed(100 + seed), dtype=D)
    lab = torch.tensor([0, 2])
    raw = _raw_forecast(seed)
    assert fd_relative_error(lambda *r: teacher_loss(_fc(*r), gt, lab, mode), raw) < RTOL
    assert fd_relative_error(lambda *r: track_loss(_fc(*r), gt, lab, mode)[0], raw) < RTOL
    assert fd_relative_error(lambda *r: track_loss(_fc(*r), gt, lab, mode)[1], raw) < RTOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_distillation(seed):
    teacher = _fc(*_raw_forecast(1000 + seed))
    cfg = LossConfig(alpha=0.5, temperature=2.0)
    raw = _raw_forecast(seed)
    assert fd_relative_error(lambda *r: distillation_loss(_fc(*r), teacher, cfg)[0], raw) < RTOL
    assert fd_relative_error(lambda *r: distillation_loss(_fc(*r), teacher, cfg)[1], raw) < RTOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_kdm(seed):
    g = torch.Generator().manual_seed(seed)
    parts = list(torch.rand(4, generator=g, dtype=D) * 5)
    s = torch.randn(4, generator=g, dtype=D)
    assert fd_relative_error(lambda *a: kdm_combine(list(a[:4]), a[4]), parts + [s]) < RTOL
    assert fd_relative_error(lambda *a: option1_total(list(a[:4]), a[4]), parts + [s]) < RTOL
    assert fd_relative_error(lambda *a: option2_total(list(a[:4]), a[4]), parts + [s]) < RTOL
