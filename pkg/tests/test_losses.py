import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ccl_ad.backbone import ForwardOutput
from ccl_ad.losses import (
    FULL,
    DegenerateFeatureWarning,
    LossConfig,
    PairSets,
    check_window,
    cosine_sim,
    global_cl_loss,
    kd_loss,
    local_cl_loss,
    select_positive_index,
    supervised_contrastive_loss,
    total_loss,
    window_argmax,
    window_offsets,
    windowed_similarity,
)

D = torch.float64


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# --- cosine_sim ---------------------------------------------------------------

def test_cosine_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine_sim(v, v) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_zero_vector_warns_and_returns_zero():
    with pytest.warns(DegenerateFeatureWarning):
        assert cosine_sim([0, 0, 0], [1, 2, 3]) == 0.0


def test_zero_feature_gives_finite_loss():
    f = torch.tensor(dtype=D, data=[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
    loss = supervised_contrastive_loss(f, PairSets.from_labels([0, 0, 1, 1]), 0.1)
    assert torch.isfinite(loss)


# --- supervised contrastive loss ---------------------------------------------

def test_supcon_symmetric_logits_is_log2():
    f = torch.tensor(dtype=D, data=[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    ps = PairSets(torch.tensor([0]), torch.tensor([[False, True, False]]), torch.tensor([[False, True, True]]))
    assert supervised_contrastive_loss(f, ps, 0.1).item() == pytest.approx(math.log(2), abs=1e-12)


def test_supcon_two_candidate_closed_form_extreme():
    f = torch.tensor(dtype=D, data=[[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    ps = PairSets(torch.tensor([0]), torch.tensor([[False, True, False]]), torch.tensor([[False, True, True]]))
    got = supervised_contrastive_loss(f, ps, 0.1).item()
    assert got == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    assert got == pytest.approx(2.06e-9, rel=1e-2)


def test_supcon_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = _unit(rng, 4, 6)
        labels = [0, 0, 1, 1]
        got = supervised_contrastive_loss(torch.tensor(x), PairSets.from_labels(labels), 0.1).item()
        assert got == pytest.approx(oracles.supcon(x, labels, 0.1), abs=1e-9)


def test_supcon_errors():
    f = torch.eye(3, dtype=D)
    with pytest.raises(ValueError):
        supervised_contrastive_loss(f, PairSets.from_labels([0, 1, 2]), 0.1)
    with pytest.raises(ValueError):
        supervised_contrastive_loss(f, PairSets.from_labels([0, 0, 1]), 0.0)


def test_pairsets_invariants():
    ps = PairSets.from_labels([0, 1, 0, 1])
    rows = torch.arange(4)
    assert not ps.candidates[rows, ps.anchors].any()
    assert not (ps.positives & ~ps.candidates).any()
    with pytest.raises(ValueError):
        PairSets(torch.tensor([0]), torch.tensor([[True, False]]), torch.tensor([[True, True]]))


def test_supcon_no_overflow_at_small_tau():
    f = torch.tensor(_unit(np.random.default_rng(1), 6, 4))
    loss = supervised_contrastive_loss(f, PairSets.from_labels([0, 0, 1, 1, 2, 2]), 1e-3)
    assert torch.isfinite(loss)


# --- windows --------------------------------------------------------------------

def test_window_sizes():
    assert window_offsets(3, 3, 8, 8, 1) == [(3, 3)]
    assert len(window_offsets(3, 3, 8, 8, 3)) == 9
    assert len(window_offsets(0, 0, 8, 8, 3)) == 4
    assert len(window_offsets(0, 7, 8, 8, FULL)) == 64
    with pytest.raises(IndexError):
        window_offsets(8, 0, 8, 8, 3)


@pytest.mark.parametrize("k", [0, 2, -1, 1.5, "half"])
def test_check_window_rejects(k):
    with pytest.raises(ValueError):
        check_window(k)


def test_windowed_similarity_self_is_one():
    v = np.random.default_rng(2).standard_normal((5, 5, 4))
    sims = windowed_similarity(v, v, (2, 2), 3)
    assert len(sims) == 9
    assert sims[(2, 2)] == pytest.approx(1.0)
    assert list(windowed_similarity(v, v, (1, 3), 1)) == [(1, 3)]


def test_select_positive_tie_rules():
    flat = {(m, n): 0.5 for m in range(3) for n in range(3)}
    assert select_positive_index(flat, (1, 1)) == (1, 1)
    # equal best at two cells at the same distance: row-major wins
    sims = {(0, 1): 0.9, (1, 0): 0.9, (1, 1): 0.1}
    assert select_positive_index(sims, (1, 1)) == (0, 1)
    assert select_positive_index({(4, 4): -1.0}, (4, 4)) == (4, 4)


@pytest.mark.parametrize("k", [1, 3, 5, FULL])
def test_window_argmax_matches_exhaustive(k):
    rng = np.random.default_rng(3)
    for trial in range(30):
        h, w = rng.integers(1, 9, size=2)
        # quantised similarities force frequent ties
        sim = rng.integers(0, 3, size=(h * w, h * w)).astype(np.float64)
        got = window_argmax(torch.tensor(sim), h, w, k).numpy()
        for p in range(h * w):
            x, y = divmod(p, w)
            m, n = oracles.best_cell(lambda m, n: sim[p, m * w + n], x, y, h, w, k)
            assert got[p] == m * w + n


def test_select_positive_matches_window_argmax():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 6, 6, 3))
    sims_full = np.einsum("xyc,mnc->xymn", a / np.linalg.norm(a, axis=-1, keepdims=True),
                          b / np.linalg.norm(b, axis=-1, keepdims=True)).reshape(36, 36)
    vec = window_argmax(torch.tensor(sims_full), 6, 6, 3).numpy()
    for p in range(36):
        x, y = divmod(p, 6)
        m, n = select_positive_index(windowed_similarity(a, b, (x, y), 3), (x, y))
        assert vec[p] == m * 6 + n


def test_k1_and_full_agree_with_dominant_diagonal():
    rng = np.random.default_rng(5)
    base = np.eye(16)[:, :16]  # orthogonal per-position features
    v = base.reshape(4, 4, 16)
    noisy = v + 0.05 * rng.standard_normal(v.shape)
    for x in range(4):
        for y in range(4):
            s1 = select_positive_index(windowed_similarity(v, noisy, (x, y), 1), (x, y))
            sf = select_positive_index(windowed_similarity(v, noisy, (x, y), FULL), (x, y))
            assert s1 == sf == (x, y)


# --- local CL ----------------------------------------------------------------------

def _stages(rng, E, shapes):
    return [rng.standard_normal((E, h, w, c)) for (h, w, c) in shapes]


def _to_torch(stages):
    return [torch.tensor(s).permute(0, 3, 1, 2).contiguous() for s in stages]


@pytest.mark.parametrize("k", [1, 3, FULL])
def test_local_cl_matches_oracle(k):
    rng = np.random.default_rng(6)
    for _ in range(5):
        stages = _stages(rng, 4, [(2, 2, 4), (2, 2, 4)])
        labels = [0, 1, 0, 1]
        cfg = LossConfig(k=k, stages_used=(1, 2))
        got = local_cl_loss(_to_torch(stages), labels, cfg, n_anchors=2).item()
        assert got == pytest.approx(oracles.local_cl(stages, labels, 2, 0.1, k), abs=1e-7)


def test_local_cl_two_samples_exact():
    rng = np.random.default_rng(7)
    stages = _stages(rng, 2, [(2, 2, 4)])
    cfg = LossConfig(k=1, stages_used=(1,))
    got = local_cl_loss(_to_torch(stages), [0, 0], cfg, n_anchors=1).item()
    assert got == pytest.approx(oracles.local_cl(stages, [0, 0], 1, 0.1, 1), abs=1e-7)


def test_local_cl_identical_features():
    v = np.tile(np.array([1.0, 2.0, -1.0]), (4, 2, 2, 1))
    labels = [0, 1, 0, 1]
    got = local_cl_loss(_to_torch([v]), labels, LossConfig(k=3, stages_used=(1,)), n_anchors=2).item()
    # every candidate is identical: one positive among 12 uniform candidates
    assert got == pytest.approx(math.log(12), abs=1e-9)
    assert got == pytest.approx(oracles.local_cl([v], labels, 2, 0.1, 3), abs=1e-9)


def test_local_cl_companion_positives_from_every_same_class_entry():
    rng = np.random.default_rng(8)
    stages = _stages(rng, 6, [(2, 2, 4)])
    labels = [0, 0, 1, 0, 0, 1]
    got = local_cl_loss(_to_torch(stages), labels, LossConfig(stages_used=(1,)), n_anchors=3).item()
    assert got == pytest.approx(oracles.local_cl(stages, labels, 3, 0.1, 1), abs=1e-7)


def test_local_cl_requires_a_positive_source():
    v = torch.randn(2, 4, 2, 2, dtype=D)
    with pytest.raises(ValueError):
        local_cl_loss([v], [0, 1], LossConfig(stages_used=(1,)), n_anchors=1)


def test_local_cl_subsampling_keeps_positives_and_cap():
    torch.manual_seed(0)
    v = torch.randn(8, 4, 4, 4, dtype=D)
    labels = torch.tensor([0, 1, 0, 1] * 2)
    cfg = LossConfig(stages_used=(1,), max_candidates=10)
    gen = torch.Generator().manual_seed(1)
    loss = local_cl_loss([v], labels, cfg, n_anchors=4, generator=gen)
    assert torch.isfinite(loss) and loss.item() >= 0
    # no cap hit: identical to the uncapped evaluation
    big = LossConfig(stages_used=(1,), max_candidates=10_000)
    assert local_cl_loss([v], labels, big, 4).item() == pytest.approx(
        local_cl_loss([v], labels, LossConfig(stages_used=(1,), max_candidates=None), 4).item())


# --- global CL and KD ------------------------------------------------------------

def test_global_cl_orthogonal_classes():
    g = torch.tensor(dtype=D, data=[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    got = global_cl_loss(g, [0, 0, 1, 1], 0.1).item()
    expected = -math.log(math.exp(10) / (math.exp(10) + 2))
    assert got == pytest.approx(expected, rel=1e-9)
    assert got == pytest.approx(9.1e-5, rel=1e-2)


def test_global_cl_uniform_logits():
    g = torch.ones(4, 3, dtype=D)
    got = global_cl_loss(g, [0, 0, 1, 1], 0.1).item()
    # |A| = 3 candidates, |P| = 1 positive, uniform logits
    assert got == pytest.approx(math.log(3), abs=1e-12)


def test_global_cl_single_class_is_class_agnostic():
    g = torch.tensor(_unit(np.random.default_rng(9), 4, 5))
    got = global_cl_loss(g, [2, 2, 2, 2], 0.1).item()
    assert got == pytest.approx(oracles.supcon(g.numpy(), [0, 0, 0, 0], 0.1), abs=1e-9)


def test_kd_examples():
    rng = np.random.default_rng(10)
    enc = [torch.tensor(rng.standard_normal((2, 4, s, s))) for s in (4, 2, 1)]
    assert kd_loss(enc, enc).item() == pytest.approx(0.0, abs=1e-12)
    dec = [enc[0], -enc[1], enc[2]]
    assert kd_loss(enc, dec).item() == pytest.approx(2.0, abs=1e-12)
    dec = [torch.tensor(rng.standard_normal(t.shape)) for t in enc]
    assert kd_loss(enc, dec).item() == pytest.approx(oracles.kd(enc, dec), abs=1e-9)
    with pytest.raises(ValueError):
        kd_loss(enc, [enc[0], enc[1][:, :, :1], enc[2]])


# --- total loss ----------------------------------------------------------------------

def _fake_output(rng, E=4):
    enc = [torch.tensor(rng.standard_normal((E, 4, s, s))) for s in (2, 1)]
    dec = [torch.tensor(rng.standard_normal((E, 4, s, s))) for s in (2, 1)]
    proj = [torch.tensor(rng.standard_normal((E, 4, s, s))) for s in (2, 1)]
    g = torch.nn.functional.normalize(torch.tensor(rng.standard_normal((E, 6))), dim=1)
    return ForwardOutput(enc, proj, None, g, dec)


def test_total_loss_reduces_to_kd():
    out = _fake_output(np.random.default_rng(11))
    terms = total_loss(out, [0, 1, 0, 1], LossConfig(lambda1=0, lambda2=0, stages_used=(1, 2)))
    assert terms.total.item() == terms.kd.item()
    assert terms.lcl.item() == 0.0 and terms.gcl.item() == 0.0


def test_total_loss_is_sum_of_terms():
    rng = np.random.default_rng(12)
    out = _fake_output(rng)
    labels = [0, 1, 0, 1]
    cfg = LossConfig(lambda1=0.7, lambda2=1.3, stages_used=(1, 2))
    terms = total_loss(out, labels, cfg, n_anchors=2)
    kd = kd_loss(out.encoder_pyramid, out.decoder_pyramid).item()
    lcl = local_cl_loss(out.projected, labels, cfg, 2).item()
    gcl = global_cl_loss(out.global_features, labels, 0.1).item()
    assert terms.total.item() == pytest.approx(kd + 0.7 * lcl + 1.3 * gcl, abs=1e-9)


def test_default_loss_weights():
    cfg = LossConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.tau, cfg.k) == (1.0, 1.0, 0.1, 1)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0)
    with pytest.raises(ValueError):
        LossConfig(lambda1=-1)
    with pytest.raises(ValueError):
        LossConfig(stages_used=())


# --- gradients -----------------------------------------------------------------------

def _grad_check(fn, x):
    t = torch.tensor(x, requires_grad=True)
    fn(t).backward()
    numeric = oracles.central_difference(lambda a: fn(torch.tensor(a)).item(), x, 1e-4)
    return oracles.relative_error(t.grad.numpy(), numeric)


def test_gradients_supcon_and_global():
    rng = np.random.default_rng(13)
    for _ in range(5):
        x = rng.standard_normal((4, 8))
        ps = PairSets.from_labels([0, 0, 1, 1])
        assert _grad_check(lambda t: supervised_contrastive_loss(t, ps, 0.1), x) < 1e-4
        assert _grad_check(lambda t: global_cl_loss(t, [0, 1, 0, 1], 0.1), x) < 1e-4


@pytest.mark.parametrize("k", [1, FULL])
def test_gradients_local(k):
    rng = np.random.default_rng(14)
    cfg = LossConfig(k=k, stages_used=(1,))
    for _ in range(3):
        x = rng.standard_normal((4, 8, 2, 2))
        assert _grad_check(lambda t: local_cl_loss([t], [0, 1, 0, 1], cfg, 2), x) < 1e-4


def test_gradients_kd():
    rng = np.random.default_rng(15)
    enc = torch.tensor(rng.standard_normal((2, 8, 2, 2)))
    x = rng.standard_normal((2, 8, 2, 2))
    assert _grad_check(lambda t: kd_loss([enc], [t]), x) < 1e-4


# --- properties ------------------------------------------------------------------------

seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.05, 1.0), st.sampled_from([1, 3, FULL]))
def test_losses_non_negative(seed, tau, k):
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.standard_normal((4, 8)))
    assert global_cl_loss(x, [0, 1, 0, 1], tau).item() >= 0
    v = torch.tensor(rng.standard_normal((4, 4, 2, 2)))
    assert local_cl_loss([v], [0, 1, 0, 1], LossConfig(tau=tau, k=k, stages_used=(1,)), 2).item() >= 0
    assert kd_loss([v], [torch.tensor(rng.standard_normal((4, 4, 2, 2)))]).item() >= 0


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from([1, 3, FULL]))
def test_scale_invariance(seed, k):
    rng = np.random.default_rng(seed)
    g = torch.tensor(rng.standard_normal((4, 6)))
    scale = torch.tensor(rng.uniform(0.1, 10.0, size=(4, 1)))
    assert global_cl_loss(g * scale, [0, 1, 0, 1], 0.1).item() == pytest.approx(
        global_cl_loss(g, [0, 1, 0, 1], 0.1).item(), abs=1e-9)
    v = torch.tensor(rng.standard_normal((4, 4, 2, 2)))
    pscale = torch.tensor(rng.uniform(0.1, 10.0, size=(4, 1, 2, 2)))
    cfg = LossConfig(k=k, stages_used=(1,))
    assert local_cl_loss([v * pscale], [0, 1, 0, 1], cfg, 2).item() == pytest.approx(
        local_cl_loss([v], [0, 1, 0, 1], cfg, 2).item(), abs=1e-9)
    e = torch.tensor(rng.standard_normal((2, 4, 2, 2)))
    assert kd_loss([e], [v[:2] * pscale[:2]]).item() == pytest.approx(kd_loss([e], [v[:2]]).item(), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seeds, st.permutations(range(3)))
def test_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    labels = torch.tensor([0, 1, 1] * 2)
    g = torch.tensor(rng.standard_normal((6, 5)))
    idx = torch.tensor(list(perm) + [p + 3 for p in perm])
    assert global_cl_loss(g[idx], labels[idx], 0.1).item() == pytest.approx(
        global_cl_loss(g, labels, 0.1).item(), abs=1e-9)
    v = torch.tensor(rng.standard_normal((6, 4, 2, 2)))
    cfg = LossConfig(k=3, stages_used=(1,))
    assert local_cl_loss([v[idx]], labels[idx], cfg, 3).item() == pytest.approx(
        local_cl_loss([v], labels, cfg, 3).item(), abs=1e-9)
