import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import RTOL, fd_relative_error
from hltp.swa import (
    ShiftWindowAttention,
    ShiftWindowConfig,
    SwaConfig,
    TrackEmbedder,
    WindowConfigError,
    embed_tracks,
    shift_window_scores,
    shift_window_scores_reference,
    swa_forward,
    validate_window,
    window_coverage,
)

BEST = ShiftWindowConfig(32, 24, 8, 6)


def test_validate_examples():
    assert validate_window(BEST, 56, 42) == 4
    assert validate_window(ShiftWindowConfig(8, 6, 8, 6), 32, 24) == 4
    with pytest.raises(WindowConfigError, match=r"z_x=4.*z_y=5.5"):
        validate_window(ShiftWindowConfig(8, 6, 8, 4), 32, 24)
    with pytest.raises(WindowConfigError):
        validate_window(ShiftWindowConfig(40, 6, 8, 6), 32, 24)


def test_single_full_window():
    Q, K = torch.randn(7, 5, dtype=torch.float64), torch.randn(7, 5, dtype=torch.float64)
    out = shift_window_scores(Q, K, ShiftWindowConfig(7, 5, 1, 1), torch.ones(7, 5, dtype=torch.float64))
    assert torch.equal(out, Q * K)


def test_zero_query():
    K = torch.randn(56, 42)
    out = shift_window_scores(torch.zeros(56, 42), K, BEST, torch.randn(56, 42))
    assert torch.all(out == 0)


def test_batched_matches_reference():
    rng = np.random.default_rng(1)
    Q, K, W = rng.normal(size=(3, 2, 13, 24)), rng.normal(size=(3, 2, 13, 24)), rng.normal(size=(13, 24))
    cfg = ShiftWindowConfig(5, 16, 4, 4)
    out = shift_window_scores(torch.from_numpy(Q), torch.from_numpy(K), cfg, torch.from_numpy(W)).numpy()
    for a in range(3):
        for h in range(2):
            np.testing.assert_allclose(out[a, h], shift_window_scores_reference(Q[a, h], K[a, h], cfg, W), rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(1, 8), st.integers(1, 8))
def test_legal_configs_coverage(z, sx, sy, l, d):
    L, D = l + (z - 1) * sx, d + (z - 1) * sy
    cfg = ShiftWindowConfig(l, d, sx, sy)
    assert validate_window(cfg, L, D) == z
    cov = window_coverage(cfg, L, D)
    if sx <= l and sy <= d:
        assert cov.min() >= 1
    else:
        # strides longer than the window leave gaps; those cells score zero
        Q = torch.ones(L, D, dtype=torch.float64)
        out = shift_window_scores(Q, Q, cfg, torch.ones(L, D, dtype=torch.float64)).numpy()
        assert np.all(out[cov == 0] == 0) and np.all(out[cov > 0] == 1)


def _heads(cfg=SwaConfig(heads=2, d_q=8, d_k=8, d_v=8, window=ShiftWindowConfig(2, 2, 1, 1)), n_agents=4):
    torch.manual_seed(0)
    return ShiftWindowAttention(cfg, n_agents, emb_dim=6, value_in=3 * 4).double()


def test_project_qkv_shapes_and_reassembly():
    block = ShiftWindowAttention(SwaConfig(heads=4, d_q=32, d_k=32, d_v=32, window=ShiftWindowConfig(5, 4, 4, 2)), 13, 16, 8)
    F = torch.randn(2, 13, 16)
    S = torch.randn(2, 13, 2, 4)
    Q, K, V = block.project_qkv(F[:, 0], F, S)
    assert Q.shape == K.shape == V.shape == (2, 4, 13, 8)
    torch.testing.assert_close(K.permute(0, 2, 1, 3).reshape(2, 13, 32), block.W_k(F))
    # every query row carries the target embedding
    assert torch.equal(Q[:, :, 0], Q[:, :, 5])


def test_divisibility_enforced():
    with pytest.raises(ValueError):
        SwaConfig(heads=3, d_q=32, d_k=32, d_v=32)


def _eq3_direct(block, S, F, mask):
    """Term-by-term transcription: sum over heads of softmax_rows(O_i / sqrt(d_k)) * tanh(V_i), plus the V skip."""
    B, A = F.shape[:2]
    cfg = block.cfg
    Q, K, V = block.project_qkv(F[:, 0], F, S)
    out = torch.zeros(B, A, cfg.head_dim, dtype=F.dtype)
    for b in range(B):
        for h in range(cfg.heads):
            O = torch.tensor(
                shift_window_scores_reference(Q[b, h].detach().numpy(), K[b, h].detach().numpy(), cfg.window,
                                              block.W_a.detach().numpy())
            ) / math.sqrt(cfg.d_k)
            for j in range(cfg.head_dim):
                col = [O[a, j].item() if mask[b, a] else -math.inf for a in range(A)]
                m = max(col)
                e = [math.exp(c - m) if c > -math.inf else 0.0 for c in col]
                z = sum(e)
                for a in range(A):
                    out[b, a, j] += e[a] / z * math.tanh(V[b, h, a, j].item()) + V[b, h, a, j].item()
    return out * mask[..., None]


def test_swa_forward_matches_direct_transcription():
    block = _heads()
    with torch.no_grad():
        block.W_a_rows.copy_(torch.randn(2, 4))
    S = torch.randn(2, 4, 3, 4, dtype=torch.float64)
    F = torch.randn(2, 4, 6, dtype=torch.float64)
    mask = torch.tensor([[True, True, False, True], [True, True, True, True]])
    out = swa_forward(block, S, F[:, 0], F, mask)
    torch.testing.assert_close(out, _eq3_direct(block, S, F, mask), rtol=1e-10, atol=1e-12)


def test_single_agent_softmax_is_one():
    block = _heads(SwaConfig(heads=1, d_q=2, d_k=2, d_v=2, window=ShiftWindowConfig(1, 2, 1, 1)), 1)
    S, F = torch.randn(1, 1, 3, 4, dtype=torch.float64), torch.randn(1, 1, 6, dtype=torch.float64)
    _, _, V = block.project_qkv(F[:, 0], F, S)
    out = block(S, F[:, 0], F, torch.ones(1, 1, dtype=torch.bool))
    torch.testing.assert_close(out[0], (torch.tanh(V) + V)[0, 0])


def test_masked_rows_poisoned():
    block = _heads()
    S = torch.randn(1, 4, 3, 4, dtype=torch.float64)
    F = torch.randn(1, 4, 6, dtype=torch.float64)
    mask = torch.tensor([[True, False, True, False]])
    ref = block(S, F[:, 0], F, mask)
    S2, F2 = S.clone(), F.clone()
    S2[:, ~mask[0]] = 1e6
    F2[:, ~mask[0]] = -1e6
    out = block(S2, F2[:, 0], F2, mask)
    torch.testing.assert_close(out, ref, rtol=0, atol=0)
    assert torch.all(out[0, ~mask[0]] == 0)


def test_softmax_rows_sum_to_one():
    block = _heads()
    Q, K, _ = block.project_qkv(torch.randn(3, 6, dtype=torch.float64), torch.randn(3, 4, 6, dtype=torch.float64),
                                torch.randn(3, 4, 3, 4, dtype=torch.float64))
    scores = shift_window_scores(Q, K, block.cfg.window, block.W_a)
    mask = torch.tensor([True, True, False, True])
    attn = torch.softmax(scores.masked_fill(~mask[None, None, :, None], -math.inf), dim=-2)
    assert torch.allclose(attn.sum(-2), torch.ones((), dtype=attn.dtype), atol=1e-6)
    assert torch.all(attn[..., 2, :] == 0)


def test_neighbor_permutation_equivariance():
    block = _heads()
    S, F = torch.randn(1, 4, 3, 4, dtype=torch.float64), torch.randn(1, 4, 6, dtype=torch.float64)
    mask = torch.ones(1, 4, dtype=torch.bool)
    perm = torch.tensor([0, 3, 1, 2])
    a = block(S, F[:, 0], F, mask)[:, perm]
    b = block(S[:, perm], F[:, 0], F[:, perm], mask)
    torch.testing.assert_close(a, b)


def test_dot_product_variant_runs():
    block = ShiftWindowAttention(SwaConfig(kind="dot"), 13, 64, 64)
    out = block(torch.randn(2, 13, 16, 4), torch.randn(2, 64), torch.randn(2, 13, 64), torch.ones(2, 13, dtype=torch.bool))
    assert out.shape == (2, 13, 16) and torch.isfinite(out).all()


def test_embedder_properties():
    emb = TrackEmbedder(4, 8, 5)
    x = torch.randn(1, 4, 6, 4)
    x[:, 2] = x[:, 1]
    tar, nbr = embed_tracks(emb, x)
    assert tar.shape == (1, 5) and nbr.shape == (1, 3, 5)
    torch.testing.assert_close(nbr[:, 0], nbr[:, 1])
    perm = torch.tensor([0, 2, 3, 1])
    torch.testing.assert_close(emb(x[:, perm]), emb(x)[:, perm])
    with pytest.raises(ValueError):
        emb(torch.zeros(1, 4, 0, 4))


@pytest.mark.parametrize("seed", range(20))
def test_swa_gradients(seed):
    torch.manual_seed(seed)
    cfg = SwaConfig(heads=2, d_q=4, d_k=4, d_v=4, window=ShiftWindowConfig(2, 1, 1, 1))
    block = ShiftWindowAttention(cfg, 3, 3, 2 * 2).double()
    S = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    F = torch.randn(1, 3, 3, dtype=torch.float64)
    mask = torch.tensor([[True, True, False]])
    probe = torch.randn(1, 3, 2, dtype=torch.float64)
    names = ("W_q.weight", "W_k.weight", "W_v.weight", "W_a_rows")
    params = dict(block.named_parameters())

    def fn(*ps):
        override = dict(zip(names, ps))
        out = torch.func.functional_call(block, {**params, **override}, (S, F[:, 0], F, mask))
        return (out * probe).sum()

    assert fd_relative_error(fn, [params[n] for n in names]) < RTOL
