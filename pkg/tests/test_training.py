import math

import numpy as np
import pytest
import torch

from hltp.checkpoint import load_checkpoint
from hltp.losses import KdmState, LossConfig, kdm_combine
from hltp.student import StudentConfig
from hltp.teacher import TeacherConfig
from hltp.training import (
    EvalReport,
    TrainConfig,
    TrainingDivergence,
    _check_finite,
    evaluate,
    horizon_indices,
    make_scheduler,
    read_metrics,
    rmse_report,
    train_student,
    train_teacher,
)

FAST = TrainConfig(epochs=2, batch_size=8, restart_epochs=1)


@pytest.fixture(scope="module")
def teacher(scenes):
    return train_teacher(scenes, FAST).model


def _state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_max=1e-5, lr_min=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(kdm_lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0)


def test_schedule_restarts_to_peak():
    cfg = TrainConfig(restart_epochs=3)
    opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))], lr=cfg.lr_max)
    sched = make_scheduler(opt, cfg)
    lrs = []
    for epoch in range(7):
        lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step(epoch + 1)
    assert lrs[0] == pytest.approx(cfg.lr_max)
    assert lrs[3] == pytest.approx(cfg.lr_max) and lrs[6] == pytest.approx(cfg.lr_max)
    assert lrs[1] < lrs[0] and lrs[2] < lrs[1]
    assert min(lrs) >= cfg.lr_min


def test_teacher_training_logs_and_checkpoints(scenes, tmp_path):
    res = train_teacher(scenes, FAST, val=scenes[:4], out_dir=tmp_path)
    assert len(res.history) == 2 and "val_rmse_avg" in res.history[0]
    assert set(res.checkpoints) == {"best", "final"}
    rows = read_metrics(res.metrics_path)
    assert len(rows) == 2 * math.ceil(len(scenes) / 8)
    assert all(r["tra_man"] is not None and r["dis_man"] is None for r in rows)
    ck = load_checkpoint(res.checkpoints["final"])
    assert ck.kind == "teacher" and ck.manifest["seed"] == 0


def test_training_is_deterministic(scenes, teacher):
    a = train_student(scenes, teacher, FAST).model
    b = train_student(scenes, teacher, FAST).model
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(va, vb), k


def test_teacher_stays_frozen(scenes, teacher):
    before = _state(teacher)
    train_student(scenes, teacher, FAST)
    for k, v in teacher.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert all(not p.requires_grad for p in teacher.parameters())


def test_alpha_zero_equals_supervised(scenes, teacher):
    a = train_student(scenes, teacher, FAST, loss_cfg=LossConfig(alpha=0.0))
    b = train_student(scenes, None, FAST, loss_cfg=LossConfig(alpha=0.0))
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k]), k
    assert torch.equal(a.kdm.log_var, b.kdm.log_var)


def test_logged_total_matches_combination(scenes, teacher, tmp_path):
    res = train_student(scenes, teacher, FAST, out_dir=tmp_path)
    rows = read_metrics(res.metrics_path)
    assert rows
    for r in rows:
        parts = torch.tensor([r["tra_man"], r["tra_coor"], r["dis_man"], r["dis_coor"]], dtype=torch.float64)
        s = torch.tensor([r["s_1"], r["s_2"], r["s_t"], r["s_d"]], dtype=torch.float64)
        assert abs(float(kdm_combine(parts, s)) - r["total"]) <= 1e-9
        assert r["sigma_1"] == pytest.approx(math.exp(r["s_1"] / 2), rel=1e-12)
    ck = load_checkpoint(res.checkpoints["final"])
    np.testing.assert_array_equal(ck.extra["kdm_log_var"], res.kdm.log_var.detach().numpy())


def test_fixed_kdm_stays_equal(scenes, teacher):
    res = train_student(scenes, teacher, FAST, kdm=KdmState(learnable=False))
    assert torch.equal(res.kdm.log_var, torch.zeros(4))


def test_supervised_keeps_distillation_weight(scenes):
    res = train_student(scenes, None, FAST)
    assert res.kdm.log_var[3].item() == 0.0
    assert res.kdm.log_var[:3].abs().sum() > 0


def test_student_rejects_student_as_teacher(scenes):
    student = train_student(scenes, None, TrainConfig(epochs=1, batch_size=8)).model
    with pytest.raises(TypeError):
        train_student(scenes, student, FAST)


def test_mode_mismatch_rejected(scenes, teacher):
    with pytest.raises(ValueError, match="maneuver"):
        train_student(scenes, teacher, FAST, StudentConfig(n_modes=1))


def test_divergence_names_the_part():
    with pytest.raises(TrainingDivergence, match=r"coordinate loss at epoch 3, batch 7"):
        _check_finite({"maneuver loss": torch.tensor(1.0), "coordinate loss": torch.tensor(float("nan"))}, 3, 7)


def test_horizon_indices():
    assert horizon_indices(0.2, 25) == [4, 9, 14, 19, 24]
    with pytest.raises(ValueError):
        horizon_indices(0.2, 20)


def test_rmse_constant_offset():
    gt = np.random.default_rng(0).normal(size=(6, 25, 2))
    rep = rmse_report(gt + [0.3, 0.4], gt, 0.2)
    np.testing.assert_allclose(rep.rmse_per_horizon, 0.5, rtol=1e-12)
    assert rep.rmse_avg == pytest.approx(0.5) and rep.n_samples == 6


def test_rmse_hand_example():
    gt = np.zeros((2, 25, 2))
    pred = np.zeros_like(gt)
    pred[0, 4] = (3.0, 4.0)  # 5 m error on one of two samples at 1 s
    rep = rmse_report(pred, gt, 0.2)
    assert rep.rmse_per_horizon[0] == pytest.approx(math.sqrt(12.5))
    assert rep.rmse_per_horizon[1:] == (0.0, 0.0, 0.0, 0.0)
    assert rep.row()["rmse_1s"] == rep.rmse_per_horizon[0]


def test_rmse_rejects_bad_input():
    with pytest.raises(ValueError):
        rmse_report(np.zeros((0, 25, 2)), np.zeros((0, 25, 2)), 0.2)
    with pytest.raises(ValueError):
        rmse_report(np.zeros((1, 25, 2)), np.zeros((1, 24, 2)), 0.2)
    with pytest.raises(ValueError):
        EvalReport((1.0, 2.0), 2.0, {}, 1, (1, 2))


def test_evaluate_empty_and_accuracy(scenes, teacher):
    with pytest.raises(ValueError, match="empty"):
        evaluate(teacher, [])
    rep = evaluate(teacher, scenes)
    assert rep.n_samples == len(scenes)
    assert 0.0 <= rep.maneuver_accuracy["overall"] <= 1.0
    assert set(rep.to_dict()) >= {"rmse_per_horizon", "rmse_avg", "maneuver_accuracy"}


def test_history_mode_changes_teacher_inputs(scenes):
    model = train_teacher(scenes, TrainConfig(epochs=1, batch_size=8), TeacherConfig(history_frames=8)).model
    a = evaluate(model, scenes, history_mode="recent").rmse_avg
    b = evaluate(model, scenes, history_mode="initial").rmse_avg
    assert a != b
