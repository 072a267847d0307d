import math

import numpy as np
import pytest

from conftest import SALIENT_FRACTION, query_fixture
from core.errors import DegenerateDistributionError, DomainError, ProfileIncompleteError, ConfigurationError
from core.habi import (
    DEGENERATE_OTSU,
    AnchorTable,
    CalibrationKnobs,
    HijackComponents,
    HijackProfile,
    ProfileMeta,
    calibrate,
    component_attention,
    discover_anchors,
    hijack_score,
    hijacking_ratio,
    identify_inert,
    otsu_threshold,
    quartile_threshold,
    salient_filter,
)
from core.logit_lens import Trace
from core.toy_lvlm import (
    ModelConfig,
    SceneParams,
    default_prompt,
    forward_capture,
    init_model,
    make_capture_fixture,
    make_scenes,
    uniform_rows,
)


def brute_force_otsu(values, bins=256):
    hist, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    centers = [(i + 0.5) / bins for i in range(bins)]
    best, best_t = -1.0, None
    for t in range(bins - 1):
        w0, w1 = int(hist[: t + 1].sum()), int(hist[t + 1:].sum())
        if w0 == 0 or w1 == 0:
            continue
        m0 = math.fsum(hist[i] * centers[i] for i in range(t + 1)) / w0
        m1 = math.fsum(hist[i] * centers[i] for i in range(t + 1, bins)) / w1
        between = w0 * w1 * (m0 - m1) ** 2
        if between > best:
            best, best_t = between, t
    return (best_t + 1) / bins


def make_profile(**overrides):
    fields = dict(anchors=[], tau_s=0.5, tau_r=0.5, meta=ProfileMeta(n_scenes=1, seed=0))
    fields.update(overrides)
    return HijackProfile(**fields)


# hijack score

def test_zero_dominance_scores_zero():
    assert hijack_score(HijackComponents(0.0, 2.0, 0.5)) == 0.0


def test_worked_hijack_score():
    c = HijackComponents.from_raw(0.5, 3, 0.2)
    assert c.frequency == pytest.approx(1.3863, abs=1e-4)
    assert c.attention == pytest.approx(0.1823, abs=1e-4)
    assert hijack_score(c) == pytest.approx(0.1264, abs=1e-4)


def test_unit_components():
    assert hijack_score(HijackComponents(1.0, 1.0, 1.0)) == 1.0


def test_negative_component_rejected():
    with pytest.raises(DomainError):
        HijackComponents(0.5, -1.0, 0.1)


# attention component

def test_uniform_attention_component():
    spec = query_fixture([uniform_rows(2, 3, 20 + i) for i in range(4)], n_vision=16, n_prompt=4)
    captures, _ = make_capture_fixture(spec)
    expected = np.mean([1 / (20 + i) for i in range(4)])
    assert component_attention(captures, 5) == pytest.approx(expected)


def test_single_step_single_head_component():
    row = np.array([0.1, 0.6, 0.3]).reshape(1, 1, 3)
    captures, _ = make_capture_fixture(query_fixture([row], n_vision=2, n_prompt=1))
    assert component_attention(captures, 1) == pytest.approx(0.6)


def test_component_uses_first_n_steps(rng):
    rows = []
    for i in range(12):
        raw = rng.random((1, 2, 8 + i))
        rows.append(raw / raw.sum(axis=-1, keepdims=True))
    captures, _ = make_capture_fixture(query_fixture(rows, n_vision=6, n_prompt=2))
    manual = np.mean([r[:, :, 2].mean() for r in rows[:10]])
    assert component_attention(captures, 2, n_steps=10) == pytest.approx(manual, abs=1e-12)


def test_component_needs_steps():
    with pytest.raises(DomainError):
        component_attention([], 0)


# quartile threshold

def test_quartile_lock():
    values = list(range(1, 9))
    assert quartile_threshold(values, 1.5) == 11.5
    assert quartile_threshold(values, 0.0) == 6.25


def test_constant_values_threshold():
    assert quartile_threshold([0.3] * 7, 4.0) == pytest.approx(0.3)


def test_quartile_needs_two_values():
    with pytest.raises(DomainError):
        quartile_threshold([1.0], 1.5)


def test_quartile_translation_and_scale(rng):
    values = rng.normal(size=40)
    base = quartile_threshold(values, 1.5)
    assert quartile_threshold(values + 3.25, 1.5) == pytest.approx(base + 3.25, abs=1e-9)
    assert quartile_threshold(values * 2.5, 1.5) == pytest.approx(base * 2.5, abs=1e-9)


# anchors

def _table(means):
    table = AnchorTable()
    scores = []
    for word, values in means.items():
        for v in values:
            table.add(word, v)
            scores.append(v)
    return table, scores


def test_single_outlier_anchor():
    table, scores = _table({1: [0.1, 0.12], 2: [0.11, 0.09], 3: [0.1, 0.1], 7: [5.0]})
    anchors, tau = discover_anchors(table, scores, 1.5)
    assert anchors == {7}
    assert tau < 5.0


def test_equal_means_give_no_anchor():
    table, scores = _table({1: [0.2, 0.2], 2: [0.2], 3: [0.2, 0.2]})
    anchors, _ = discover_anchors(table, scores, 1.5)
    assert anchors == frozenset()


def test_anchor_sets_shrink_with_multiplier(rng):
    table = AnchorTable()
    scores = []
    for word in range(30):
        for v in rng.gamma(2.0, 0.1 * (1 + word % 7), size=5):
            table.add(word, float(v))
            scores.append(float(v))
    previous = None
    for multiplier in (0.0, 0.5, 1.0, 1.5, 3.0):
        anchors, _ = discover_anchors(table, scores, multiplier)
        if previous is not None:
            assert anchors <= previous
        previous = anchors


def test_anchor_means_population():
    table, scores = _table({1: [0.1], 2: [0.1], 3: [0.1], 4: [0.1], 9: [1.0]})
    anchors, tau = discover_anchors(table, scores, 1.5, population="anchor_means")
    assert anchors == {9}
    assert tau == pytest.approx(0.1)


def test_no_scores():
    with pytest.raises(DomainError):
        discover_anchors(AnchorTable(), [], 1.5)


# hijacking ratio

def test_ratio_examples():
    assert hijacking_ratio(Trace(0, (1, 2, 3)), set()) == 0.0
    assert hijacking_ratio(Trace(0, (4, 4, 4)), {4}) == 1.0
    assert hijacking_ratio(Trace(0, (1, 2, 1, 3)), {1}) == 0.5


def test_ratio_monotone_in_anchor_set(rng):
    for _ in range(200):
        trace = Trace(0, tuple(rng.integers(0, 6, size=rng.integers(1, 8)).tolist()))
        small = set(rng.choice(6, size=rng.integers(0, 4), replace=False).tolist())
        large = small | set(rng.choice(6, size=2, replace=False).tolist())
        low, high = hijacking_ratio(trace, small), hijacking_ratio(trace, large)
        assert 0.0 <= low <= high <= 1.0


# Otsu

def test_otsu_two_clusters():
    values = [0.1] * 5 + [0.9] * 5
    tau = otsu_threshold(values)
    assert 0.1 < tau < 0.9
    assert tau == brute_force_otsu(values)


def test_otsu_identical_values():
    with pytest.raises(DegenerateDistributionError):
        otsu_threshold([0.4] * 10)


def test_otsu_out_of_range():
    with pytest.raises(DomainError):
        otsu_threshold([0.2, 1.5])


def test_otsu_matches_exhaustive_scan():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        low = rng.normal(0.2, 0.06, size=rng.integers(5, 40))
        high = rng.normal(0.75, 0.08, size=rng.integers(5, 40))
        values = np.clip(np.concatenate([low, high]), 0.0, 1.0)
        assert otsu_threshold(values) == brute_force_otsu(values)


# salient filter

def test_salient_single_heavy_token():
    mass = [0.1] + [0.05] * 18
    assert salient_filter(mass, 0.05) == {0}


def test_salient_full_fraction():
    assert salient_filter([0.0, 0.2, 0.3], 1.0) == {0, 1, 2}


def test_salient_uniform_picks_one():
    assert salient_filter([1 / 16] * 16, 0.05) == {0}


def test_salient_all_zero():
    assert salient_filter([0.0] * 4, 0.5) == frozenset()


def test_salient_fraction_range():
    with pytest.raises(ConfigurationError):
        salient_filter([0.5, 0.5], 0.0)


# identification

def test_identify_without_anchors(model, scenes):
    capture = forward_capture(model, scenes[0].sequence(default_prompt(model.config)))
    assert identify_inert(capture, model, make_profile(anchors=[], tau_r=0.0)) == frozenset()


def test_identify_with_top_threshold(model, scenes):
    scene = scenes[0]
    capture = forward_capture(model, scene.sequence(default_prompt(model.config)))
    profile = make_profile(anchors=[scene.planted_anchor_word], tau_r=1.0)
    assert identify_inert(capture, model, profile) == frozenset()


def test_identify_requires_thresholds(model, scenes):
    capture = forward_capture(model, scenes[0].sequence(default_prompt(model.config)))
    with pytest.raises(ProfileIncompleteError):
        identify_inert(capture, model, make_profile(tau_r=None))


def test_calibrated_profile_finds_planted_anchor(model, scenes, profile):
    assert scenes[0].planted_anchor_word in profile.anchors
    assert profile.meta.warning is None
    assert 0.0 <= profile.tau_r < 1.0
    assert profile.salient_fraction == SALIENT_FRACTION


def test_planted_recall_over_seeds():
    tp = fp = fn = 0
    for seed in range(20):
        model = init_model(ModelConfig(seed=seed))
        scenes = make_scenes(model, SceneParams(), seed=seed, n_scenes=10)
        profile = calibrate(scenes, model, CalibrationKnobs(salient_fraction=SALIENT_FRACTION, seed=seed))
        assert scenes[0].planted_anchor_word in profile.anchors
        for scene in scenes:
            capture = forward_capture(model, scene.sequence(default_prompt(model.config)))
            found = identify_inert(capture, model, profile)
            tp += len(found & scene.planted_inert)
            fp += len(found - scene.planted_inert)
            fn += len(scene.planted_inert - found)
    assert fn == 0
    assert tp / (tp + fp) >= 0.9


def test_no_planted_tokens_degenerates(model):
    scenes = make_scenes(model, SceneParams(n_inert=0), seed=5, n_scenes=10)
    profile = calibrate(scenes, model, CalibrationKnobs(salient_fraction=SALIENT_FRACTION))
    assert profile.meta.warning == DEGENERATE_OTSU
    assert profile.tau_r == 1.0
    for scene in scenes:
        capture = forward_capture(model, scene.sequence(default_prompt(model.config)))
        assert identify_inert(capture, model, profile) == frozenset()


def test_calibration_is_reproducible(model, scenes, profile):
    again = calibrate(scenes, model, CalibrationKnobs(salient_fraction=SALIENT_FRACTION, seed=1))
    assert again.to_json() == profile.to_json()


def test_calibration_needs_scenes(model):
    with pytest.raises(DomainError):
        calibrate([], model, CalibrationKnobs())


# profile document

def test_profile_roundtrip(ranked):
    text = ranked.to_json()
    assert HijackProfile.from_json(text).to_json() == text
    assert text.endswith("\n")


def test_profile_top_level_keys(profile):
    import json

    data = json.loads(profile.to_json())
    assert list(data) == [
        "anchors", "tau_s", "tau_r", "iqr_multiplier", "salient_fraction",
        "skip_salient_filter", "heads", "h_target", "k", "alpha", "meta",
    ]
    assert data["meta"]["smoothing"] == "log1p"
    assert data["meta"]["schema"] == "hijacklens.profile/1"


def test_profile_unknown_schema(profile):
    text = profile.to_json().replace("hijacklens.profile/1", "hijacklens.profile/9")
    with pytest.raises(ProfileIncompleteError):
        HijackProfile.from_json(text)


def test_profile_unknown_key(profile):
    text = profile.to_json().replace('"anchors"', '"surprise": 1, "anchors"', 1)
    with pytest.raises(ProfileIncompleteError):
        HijackProfile.from_json(text)


def test_profile_tau_r_range():
    with pytest.raises(ValueError):
        make_profile(tau_r=1.5)
