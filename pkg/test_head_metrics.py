import numpy as np
import pytest

from conftest import query_fixture
from core.errors import ConfigurationError, DomainError, NumericError
from core.head_metrics import (
    HeadId,
    HeadScore,
    HeadScoreTable,
    SceneHeadStats,
    all_heads,
    build_score_table,
    har,
    label_step,
    mean_nhar,
    nhar,
    nhar_normalized,
    persistent_set,
    rank_heads,
    select_heads,
    step_head_stats,
    target_heads,
    total_visual_attention,
)
from core.toy_lvlm import ModelConfig, default_prompt, forward_capture, generate_greedy, make_capture_fixture, uniform_rows

HEAD = HeadId(1, 1)


def worked_capture():
    row = np.array([0.5, 0.3, 0.2]).reshape(1, 1, 3)
    captures, _ = make_capture_fixture(query_fixture([row], n_vision=2, n_prompt=1))
    return captures[0]


def random_table(rng, n_layers=4, n_heads=4, distinct=True):
    table = HeadScoreTable()
    values = rng.permutation(n_layers * n_heads) / 10 if distinct else rng.integers(0, 3, size=n_layers * n_heads)
    for head, value in zip(all_heads(n_layers, n_heads), values):
        table.scores[head] = HeadScore(mean_nhar=float(value), total_visual_attention=float(rng.random()))
    return table


def test_head_ids_are_one_based():
    assert HeadId(2, 3).index == (1, 2)
    assert all_heads(2, 2) == [HeadId(1, 1), HeadId(1, 2), HeadId(2, 1), HeadId(2, 2)]


def test_head_outside_model():
    with pytest.raises(ConfigurationError):
        HeadId(5, 1).validate(ModelConfig())


def test_har_worked_example():
    capture = worked_capture()
    assert har(capture, HEAD, set()) == 0.0
    assert har(capture, HEAD, {0}) == pytest.approx(0.625)
    assert har(capture, HEAD, {0, 1}) == pytest.approx(1.0)


def test_har_without_vision_attention():
    row = np.array([0.0, 0.0, 1.0]).reshape(1, 1, 3)
    captures, _ = make_capture_fixture(query_fixture([row], n_vision=2, n_prompt=1))
    with pytest.raises(NumericError):
        har(captures[0], HEAD, {0})
    assert nhar(captures[0], HEAD, {0}) == 0.0


def test_nhar_worked_example():
    assert nhar(worked_capture(), HEAD, {0}) == pytest.approx(0.3)


def test_nhar_all_vision():
    row = np.full((1, 1, 4), 0.25)
    captures, _ = make_capture_fixture(query_fixture([row], n_vision=4, n_prompt=0))
    assert nhar(captures[0], HEAD, set()) == pytest.approx(1.0, abs=1e-6)


def test_inert_outside_span_ignored():
    assert nhar(worked_capture(), HEAD, {0, 2}) == pytest.approx(0.3)


def test_nhar_normalization_is_identity_on_softmax_rows(model, scenes):
    capture = forward_capture(model, scenes[0].sequence(default_prompt(model.config)))
    inert = scenes[0].planted_inert
    for head in all_heads(model.config.n_layers, model.config.n_heads):
        assert nhar_normalized(capture, head, inert) == pytest.approx(nhar(capture, head, inert), abs=1e-9)


def test_har_and_nhar_are_complementary(model, scenes):
    scene = scenes[3]
    _, captures = generate_greedy(model, scene.sequence(default_prompt(model.config)), max_new=5)
    for capture in captures:
        nhar_values, har_values = step_head_stats(capture, scene.planted_inert)
        v0, v1 = capture.seq.vision_span
        vision_mass = capture.query_rows()[:, :, v0:v1].sum(axis=-1)
        np.testing.assert_allclose(har_values + nhar_values / vision_mass, 1.0, atol=1e-9)
        assert np.all(nhar_values <= vision_mass + 1e-12)
        assert np.all(vision_mass <= 1.0 + 1e-9)


def test_vectorized_stats_match_per_head(model, scenes):
    scene = scenes[2]
    capture = forward_capture(model, scene.sequence(default_prompt(model.config)))
    nhar_values, har_values = step_head_stats(capture, scene.planted_inert)
    for head in all_heads(model.config.n_layers, model.config.n_heads):
        l, h = head.index
        assert nhar_values[l, h] == pytest.approx(nhar(capture, head, scene.planted_inert), abs=1e-12)
        assert har_values[l, h] == pytest.approx(har(capture, head, scene.planted_inert), abs=1e-12)


def test_total_visual_attention_uniform():
    captures, _ = make_capture_fixture(query_fixture([uniform_rows(1, 1, 32)] * 10, n_vision=16, n_prompt=16))
    assert total_visual_attention(captures, HEAD) == pytest.approx(5.0)


def test_total_visual_attention_text_only():
    row = np.zeros((1, 1, 6))
    row[..., 4:] = 0.5
    captures, _ = make_capture_fixture(query_fixture([row], n_vision=4, n_prompt=2))
    assert total_visual_attention(captures, HEAD) == 0.0


def test_mean_nhar():
    assert mean_nhar([0.2, 0.4]) == pytest.approx(0.3)
    assert mean_nhar([0.7]) == 0.7
    with pytest.raises(DomainError):
        mean_nhar([])


def test_label_step():
    objects = range(4, 10)
    assert label_step(5, {5, 6}, objects) == "real"
    assert label_step(7, {5, 6}, objects) == "hal"
    assert label_step(1, {5, 6}, objects) == "other"


def test_select_matches_sorted_prefix(rng):
    for _ in range(20):
        table = random_table(rng)
        k = int(rng.integers(1, 17))
        expected = sorted(table.scores, key=lambda h: table.scores[h].mean_nhar, reverse=True)[:k]
        assert select_heads(table, k) == expected


def test_select_ties_follow_head_order():
    table = HeadScoreTable()
    for head in reversed(all_heads(4, 4)):
        table.scores[head] = HeadScore(mean_nhar=0.5, total_visual_attention=1.0)
    assert select_heads(table, 3) == [HeadId(1, 1), HeadId(1, 2), HeadId(1, 3)]


def test_select_is_order_invariant(rng):
    table = random_table(rng, distinct=False)
    shuffled = HeadScoreTable()
    for i in rng.permutation(len(table)):
        head = table.heads()[i]
        shuffled.scores[head] = table.scores[head]
    assert select_heads(table, 6) == select_heads(shuffled, 6)


def test_select_all_heads(rng):
    table = random_table(rng)
    assert sorted(select_heads(table, 16)) == table.heads()


def test_select_k_too_large(rng):
    with pytest.raises(ConfigurationError):
        select_heads(random_table(rng), 17)


def test_select_by_total_attention(rng):
    table = random_table(rng)
    best = max(table.scores, key=lambda h: table.scores[h].total_visual_attention)
    assert select_heads(table, 1, criterion="total_attention") == [best]


def test_preselect_keeps_a_quarter(rng):
    assert len(random_table(rng).preselect()) == 4


def _spike_row(length, positions, n_vision):
    row = np.zeros(length)
    row[list(positions)] = 0.4
    row[n_vision:] = 0.2 / (length - n_vision)
    return row.reshape(1, 1, length)


def test_persistent_set_intersection():
    rows = [_spike_row(12, [3, 7], 10), _spike_row(13, [7, 9], 10)]
    captures, _ = make_capture_fixture(query_fixture(rows, n_vision=10, n_prompt=2))
    assert persistent_set(captures, t=2, k_top=2) == {7}
    assert persistent_set(captures, t=1, k_top=2) == {3, 7}


def test_persistent_set_needs_steps():
    captures, _ = make_capture_fixture(query_fixture([_spike_row(12, [3, 7], 10)], n_vision=10, n_prompt=2))
    assert len(captures) == 1
    with pytest.raises(DomainError):
        persistent_set(captures, t=5)


def test_persistent_set_matches_brute_force(rng):
    for _ in range(50):
        n_layers, n_heads = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        n_vision, n_prompt = int(rng.integers(4, 16)), int(rng.integers(1, 4))
        n_steps = int(rng.integers(1, 7))
        rows = []
        for step in range(n_steps):
            raw = rng.random((n_layers, n_heads, n_vision + n_prompt + step)) ** 3
            rows.append(raw / raw.sum(axis=-1, keepdims=True))
        captures, _ = make_capture_fixture(query_fixture(rows, n_vision=n_vision, n_prompt=n_prompt))
        t = int(rng.integers(1, n_steps + 1))
        k_top = int(rng.integers(1, n_vision + 1))

        expected = set(range(n_vision))
        for rows_t in rows[:t]:
            mean = rows_t[:, :, :n_vision].mean(axis=(0, 1))
            expected &= set(np.argsort(-mean, kind="stable")[:k_top].tolist())
        assert persistent_set(captures, t=t, k_top=k_top) == expected


def _stats(labels, nhar_values):
    steps = len(labels)
    values = np.asarray(nhar_values, dtype=float).reshape(steps, 1, 2)
    return SceneHeadStats(
        scene_id="s",
        tokens=[0] * steps,
        inert=frozenset(),
        labels=labels,
        nhar=values,
        har=np.zeros_like(values),
        visual_mass=np.ones_like(values),
    )


def test_no_gt_mode_differs_only_with_hallucinated_steps():
    config = ModelConfig(n_layers=1, n_heads=2)
    real_only = [_stats(["real", "real"], [[0.2, 0.4], [0.4, 0.2]])]
    assert build_score_table(real_only, config).rows() == build_score_table(real_only, config, no_gt=True).rows()

    mixed = [_stats(["real", "hal"], [[0.2, 0.4], [0.8, 0.0]])]
    gt = build_score_table(mixed, config)
    free = build_score_table(mixed, config, no_gt=True)
    assert gt.scores[HeadId(1, 1)].mean_nhar == pytest.approx(0.2)
    assert free.scores[HeadId(1, 1)].mean_nhar == pytest.approx(0.5)


def test_no_real_steps():
    with pytest.raises(DomainError):
        build_score_table([_stats(["other", "hal"], [[0.1, 0.1], [0.1, 0.1]])], ModelConfig(n_layers=1, n_heads=2))


def test_rank_heads_fills_profile(model, ranked):
    assert ranked.k == 8
    assert len(ranked.h_target) == 8
    assert len(ranked.heads) == model.config.n_total_heads
    assert len(target_heads(ranked)) == 8
    scores = {(l, h): s for l, h, s in ranked.heads}
    targets = {tuple(t) for t in ranked.h_target}
    chosen = [s for key, s in scores.items() if key in targets]
    rest = [s for key, s in scores.items() if key not in targets]
    assert min(chosen) >= max(rest)


def test_rank_heads_rejects_large_k(model, scenes, profile):
    with pytest.raises(ConfigurationError):
        rank_heads(scenes, model, profile, k=model.config.n_total_heads + 1)


def test_hallucinated_steps_show_more_hijacking(model, scenes, profile):
    _, table = rank_heads(scenes, model, profile, k=8)
    real, hal = table.har_separation()
    assert table.n_hal_steps > 0
    assert hal > real
