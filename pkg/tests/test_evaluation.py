import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from retina_ssl.data.dataset import Sample
from retina_ssl.evaluation import (
    THRESHOLD_GRID, Counts, auprc, evaluate, grid_dice, paired_tci, pooled_counts, pooled_dice,
    pr_curve, predict_sample, predict_single, predict_tta, select_threshold,
)
from retina_ssl.tensor import RngStream
from retina_ssl.unet import UNetConfig, build_unet

TINY = UNetConfig(encoder_levels=2, base_filters=4)


# -- brute-force oracles ------------------------------------------------------

def dice_oracle(probs, gts, fovs, t):
    tp = fp = fn = 0
    for p, g, f in zip(probs, gts, fovs):
        for pv, gv, fv in zip(p.ravel().tolist(), g.ravel().tolist(), f.ravel().tolist()):
            if not fv:
                continue
            pos = pv >= t
            tp += pos and gv
            fp += pos and not gv
            fn += (not pos) and gv
    return 2 * tp / (2 * tp + fp + fn)


def ap_oracle(scores, labels):
    scores, labels = list(map(float, scores)), list(map(bool, labels))
    n_pos = sum(labels)
    ap, prev_r = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        chosen = [lab for s, lab in zip(scores, labels) if s >= t]
        tp = sum(chosen)
        r = tp / n_pos
        ap += (r - prev_r) * tp / len(chosen)
        prev_r = r
    return ap


def _instance(rng):
    n = int(rng.integers(1, 4))
    shape = tuple(rng.integers(2, 7, size=2))
    probs = [np.round(rng.random(shape), int(rng.integers(1, 3))) for _ in range(n)]
    gts = [(rng.random(shape) < 0.3).astype(np.uint8) for _ in range(n)]
    fovs = [(rng.random(shape) < 0.85).astype(np.uint8) for _ in range(n)]
    gts[0].flat[0] = fovs[0].flat[0] = 1  # at least one in-FOV positive
    return probs, gts, fovs


# -- Dice ---------------------------------------------------------------------

def test_dice_hand_cases():
    g = np.array([1, 1, 0, 0])
    assert pooled_dice([g.astype(float)], [g], None, 0.5) == 1.0
    assert pooled_dice([np.array([0.0, 0.0, 1.0, 1.0])], [g], None, 0.5) == 0.0
    assert pooled_dice([np.array([1.0, 0.0, 1.0, 0.0])], [g], None, 0.5) == 0.5


def test_dice_pools_counts_not_means():
    probs = [np.array([1.0, 0.0]), np.array([1.0, 1.0, 1.0, 1.0])]
    gts = [np.array([1, 0]), np.array([1, 0, 0, 0])]
    # per-image mean would be (1 + 0.4) / 2; pooled counts give tp=2 fp=3 fn=0
    assert pooled_dice(probs, gts, None, 0.5) == pytest.approx(4 / 7)


def test_dice_matches_brute_force_on_500_instances():
    rng = np.random.default_rng(0)
    for _ in range(500):
        probs, gts, fovs = _instance(rng)
        t = float(rng.choice(THRESHOLD_GRID))
        assert abs(pooled_dice(probs, gts, fovs, t) - dice_oracle(probs, gts, fovs, t)) < 1e-9


def test_grid_dice_matches_pointwise_dice():
    rng = np.random.default_rng(1)
    for _ in range(30):
        probs, gts, fovs = _instance(rng)
        grid = grid_dice(probs, gts, fovs)
        for j in range(0, 101, 7):
            assert abs(grid[j] - dice_oracle(probs, gts, fovs, THRESHOLD_GRID[j])) < 1e-12


def test_fov_excludes_pixels():
    p, g, f = np.array([1.0, 1.0]), np.array([1, 0]), np.array([1, 0])
    assert pooled_counts([p], [g], [f], 0.5) == Counts(1, 0, 0, 0)


def test_empty_fov_and_shape_errors():
    with pytest.raises(ValueError):
        pooled_counts([np.ones(2)], [np.ones(2)], [np.zeros(2)], 0.5)
    with pytest.raises(ValueError):
        pooled_counts([np.ones(2)], [np.ones(3)], None, 0.5)


# -- threshold selection --------------------------------------------------------

def test_perfect_probs_pick_lowest_tie():
    g = (np.random.default_rng(2).random((8, 8)) < 0.3).astype(np.uint8)
    g[0, 0] = 1
    assert select_threshold([g.astype(float)], [g]) == 0.01


def test_scalar_toy_case():
    assert select_threshold([np.array([0.2, 0.6, 0.9])], [np.array([0, 1, 1])]) == 0.21


def test_inverted_probs_match_grid_oracle():
    g = np.array([0, 1, 1, 0, 1], np.uint8)
    probs = [1.0 - g.astype(float)]
    scores = [dice_oracle(probs, [g], [np.ones(5)], t) for t in THRESHOLD_GRID]
    t = select_threshold(probs, [g])
    assert t == THRESHOLD_GRID[int(np.argmax(scores))]


def test_all_negative_ground_truth_raises():
    with pytest.raises(ValueError):
        select_threshold([np.array([0.3, 0.7])], [np.array([0, 0])])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_threshold_attains_grid_maximum(seed):
    probs, gts, fovs = _instance(np.random.default_rng(seed))
    t = select_threshold(probs, gts, fovs)
    best = max(dice_oracle(probs, gts, fovs, u) for u in THRESHOLD_GRID)
    assert pooled_dice(probs, gts, fovs, t) == pytest.approx(best, abs=1e-12)


# -- PR curve and AP ----------------------------------------------------------

def test_pr_curve_hand_case():
    c = pr_curve([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 1])
    np.testing.assert_allclose(c.precision, [1, 1, 2 / 3, 3 / 4])
    np.testing.assert_allclose(c.recall, [1 / 3, 2 / 3, 2 / 3, 1])
    assert auprc(c) == pytest.approx(11 / 12, abs=1e-15)


def test_perfect_ranking_gives_one():
    c = pr_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert auprc(c) == 1.0
    assert np.all(c.precision[c.recall < 1] == 1.0)


def test_tied_scores_single_point():
    c = pr_curve([0.5] * 5, [1, 0, 0, 1, 0])
    assert len(c.thresholds) == 1
    assert c.precision[0] == pytest.approx(0.4) and c.recall[0] == 1.0


def test_pr_needs_positive():
    with pytest.raises(ValueError):
        pr_curve([0.1, 0.2], [0, 0])


def test_ap_matches_brute_force_on_500_instances():
    rng = np.random.default_rng(3)
    for _ in range(500):
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), int(rng.integers(1, 3)))
        labels = rng.random(n) < 0.4
        labels[0] = True
        assert abs(auprc(pr_curve(scores, labels)) - ap_oracle(scores, labels)) < 1e-9


def test_random_scores_ap_near_prevalence():
    rng = np.random.default_rng(4)
    labels = rng.random(20000) < 0.5
    ap = auprc(pr_curve(rng.random(20000), labels))
    assert abs(ap - labels.mean()) < 0.05


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_invariant_to_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(50)
    labels = rng.random(50) < 0.3
    labels[0] = True
    a = auprc(pr_curve(scores, labels))
    b = auprc(pr_curve(np.exp(3 * scores) - 7, labels))
    assert a == pytest.approx(b, abs=1e-12)


# -- confidence intervals -----------------------------------------------------

def test_one_sided_interval_hand_value():
    iv = paired_tci([1, 2, 3, 4])
    assert iv.mean == 2.5 and iv.sd == pytest.approx(1.2910, abs=1e-4)
    assert iv.lower == pytest.approx(0.981, abs=1e-3)
    assert iv.upper == math.inf and iv.significant


def test_two_sided_interval_symmetric():
    iv = paired_tci([0.3, -0.1, 0.8, 0.2, 0.5], sided="two")
    assert iv.mean - iv.lower == pytest.approx(iv.upper - iv.mean, abs=1e-12)


def test_interval_reproduces_reported_style():
    # four diffs with mean 0.21 and two-sided 95% half-width 0.42
    s = 0.42 * 2 / stats.t.ppf(0.975, 3)
    z = np.array([-1.5, -0.5, 0.5, 1.5])
    diffs = 0.21 + s * z / z.std(ddof=1)
    iv = paired_tci(diffs, sided="two")
    assert iv.lower == pytest.approx(-0.21, abs=1e-9)
    assert iv.upper == pytest.approx(0.63, abs=1e-9)
    assert not iv.significant


def test_zero_variance_interval_degenerates():
    assert paired_tci([0.7] * 4).lower == pytest.approx(0.7)
    iv = paired_tci([0.7] * 4, sided="two")
    assert iv.lower == pytest.approx(0.7) and iv.upper == pytest.approx(0.7)


def test_interval_errors():
    with pytest.raises(ValueError):
        paired_tci([1.0])
    with pytest.raises(ValueError):
        paired_tci([1.0, 2.0], sided="three")


# -- TTA --------------------------------------------------------------------

def _symmetric_model(seed=0):
    model = build_unet(TINY, RngStream(seed))
    for name, t in model.params.items():
        if t.ndim == 4:
            w = t.data
            t.data[...] = (w + w[..., ::-1, :] + w[..., :, ::-1] + w[..., ::-1, ::-1]) / 4
    return model


def test_tta_equals_single_pass_for_flip_invariant_model():
    model = _symmetric_model()
    img = np.random.default_rng(5).random((16, 24, 3)).astype(np.float32)
    np.testing.assert_allclose(predict_tta(model, img), predict_single(model, img), atol=1e-5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans(), st.booleans())
def test_tta_is_exactly_flip_equivariant(seed, h, v):
    model = build_unet(TINY, RngStream(seed % 97))
    img = np.random.default_rng(seed).random((16, 16, 3)).astype(np.float32)

    def flip(a):
        a = a[:, ::-1] if h else a
        return a[::-1] if v else a

    assert np.array_equal(flip(predict_tta(model, img)), predict_tta(model, np.ascontiguousarray(flip(img))))


def test_tta_averages_constant_maps():
    class Const:
        calls = 0

        def predict(self, x):
            Const.calls += 1
            return np.full((1, 1) + x.shape[2:], [0.1, 0.2, 0.3, 0.6][Const.calls - 1], np.float32)

    out = predict_tta(Const(), np.zeros((8, 8, 3), np.float32))
    np.testing.assert_allclose(out, 0.3, atol=1e-7)


# -- end to end -----------------------------------------------------------------

def _sample(seed, size=16):
    rng = np.random.default_rng(seed)
    g = (rng.random((size, size)) < 0.2).astype(np.uint8)
    g[0, 0] = 1
    return Sample(image=rng.random((size, size, 3)).astype(np.float32), targets={"vessels": g},
                  fov=np.ones_like(g), id=str(seed))


def test_predict_sample_resizes_back():
    model = build_unet(TINY, RngStream(0))
    p = predict_sample(model, _sample(0, 20), width=16)
    assert p.shape == (20, 20)


def test_evaluate_uses_training_threshold():
    model = build_unet(TINY, RngStream(1))
    train, test = [_sample(1), _sample(2)], [_sample(3)]
    rep = evaluate(model, test, train, "vessels", with_auprc=True)
    train_probs = [predict_sample(model, s) for s in train]
    assert rep.threshold == select_threshold(train_probs, [s.targets["vessels"] for s in train])
    test_probs = [predict_sample(model, s) for s in test]
    assert rep.dice == pytest.approx(pooled_dice(test_probs, [test[0].targets["vessels"]], None, rep.threshold))
    assert 0 <= rep.auprc <= 1
    assert "dice:" in rep.to_text()
