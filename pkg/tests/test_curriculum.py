import math

import pytest

import curriculum
from curriculum import PairedDataset, SamplerState, Schedule, next_batch, p_pair
from synthdata import SceneSample


def member(pair_id: int, view: str) -> SceneSample:
    return SceneSample(features=None, boxes=[], categories=[], view=view, pair_id=pair_id, image_w=64, image_h=64)


def make_dataset(n: int) -> PairedDataset:
    return PairedDataset([(member(i, "ground"), member(i, "aerial")) for i in range(n)])


def test_schedule_branches():
    s = Schedule(1 / 3, 2 / 3, 300)
    t1, t2 = s.boundaries
    assert p_pair(0, s) == 1.0
    assert p_pair(t2, s) == 0.0
    assert p_pair(300, s) == 0.0
    assert p_pair((t1 + t2) / 2, s) == pytest.approx(0.5, abs=1e-12)


def test_schedule_exact_linear_interior(rng):
    s = Schedule(0.25, 0.75, 1000)
    t1, t2 = s.boundaries
    for t in rng.uniform(t1, t2, size=1000):
        assert p_pair(t, s) == pytest.approx(1.0 - (t - t1) / (t2 - t1), abs=1e-12)
    before = rng.uniform(0, t1, size=100)
    after = rng.uniform(t2, 1000, size=100)
    assert all(p_pair(t, s) == 1.0 for t in before)
    assert all(p_pair(t, s) == 0.0 for t in after)


def test_schedule_is_non_increasing():
    s = Schedule(0.3, 0.6, 500)
    values = [p for _, p in curriculum.schedule_table(s)]
    assert len(values) == 501
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(0.7, 0.3, 10)
    with pytest.raises(ValueError):
        Schedule(0.3, 0.7, 0)
    with pytest.raises(ValueError, match="outside"):
        p_pair(11, Schedule(0.3, 0.7, 10))


def test_degenerate_schedule_is_a_step():
    s = Schedule(0.5, 0.5, 10)
    assert [p for _, p in curriculum.schedule_table(s)] == [1.0] * 5 + [0.0] * 6


def test_paired_dataset_validation():
    with pytest.raises(ValueError, match="pair id"):
        PairedDataset([(member(0, "ground"), member(1, "aerial"))])
    with pytest.raises(ValueError, match="views"):
        PairedDataset([(member(0, "aerial"), member(0, "ground"))])


def test_paired_dataset_from_samples():
    samples = [member(2, "aerial"), member(1, "ground"), member(2, "ground"), member(1, "aerial")]
    data = PairedDataset.from_samples(samples)
    assert len(data) == 2
    assert [(g.pair_id, a.pair_id) for g, a in data.pairs] == [(1, 1), (2, 2)]
    assert len(data.flat) == 4
    with pytest.raises(ValueError, match="missing"):
        PairedDataset.from_samples([member(0, "ground")])
    with pytest.raises(ValueError, match="duplicate"):
        PairedDataset.from_samples([member(0, "ground"), member(0, "ground")])


def test_next_batch_validation():
    state = SamplerState.seeded(0, Schedule(total_steps=10))
    with pytest.raises(ValueError, match="even"):
        next_batch(state, make_dataset(3), 5)
    with pytest.raises(ValueError, match="empty"):
        next_batch(state, PairedDataset([]), 4)


def test_paired_phase_batches_are_whole_pairs():
    data = make_dataset(20)
    state = SamplerState.seeded(7, Schedule(0.5, 0.8, 100))
    for _ in range(50):
        batch = next_batch(state, data, 8)
        for first, second in zip(batch[0::2], batch[1::2]):
            assert first.pair_id == second.pair_id
            assert (first.view, second.view) == ("ground", "aerial")
    assert state.step == 50
    assert state.paired_slots == state.total_slots == 200


def test_sampler_is_deterministic():
    data = make_dataset(15)
    runs = []
    for _ in range(2):
        state = SamplerState.seeded(123, Schedule(0.2, 0.6, 40))
        runs.append([[s.sample_id for s in next_batch(state, data, 6)] for _ in range(40)])
    assert runs[0] == runs[1]


def test_pair_fraction_tracks_schedule():
    data = make_dataset(50)
    s = Schedule(0.2, 0.7, 1000)
    t1, t2 = s.boundaries
    for t in (0, t1 + 0.25 * (t2 - t1), (t1 + t2) / 2, t1 + 0.75 * (t2 - t1), t2):
        state = SamplerState.seeded(int(t), s)
        for _ in range(2000):
            state.step = int(t)
            next_batch(state, data, 4)
        p = p_pair(int(t), s)
        n = state.total_slots
        bound = 4.0 * math.sqrt(p * (1.0 - p) / n) + 1e-12
        assert abs(state.paired_slots / n - p) <= bound


def test_random_phase_matches_uniform_pairing_rate():
    data = make_dataset(10)
    s = Schedule(0.1, 0.2, 100)
    state = SamplerState.seeded(5, s)
    state.step = 100
    batches = [next_batch(state, data, 4) for _ in range(10_000)]
    result = curriculum.pairing_test(batches, data, 0.0)
    assert result.slots == 20_000
    assert result.expected_rate == pytest.approx(0.1)
    assert result.p_value > 1e-6


def test_random_phase_never_starves_a_sample():
    data = make_dataset(12)
    state = SamplerState.seeded(3, Schedule(0.0, 0.0, 10), mode="curriculum")
    seen = set()
    for _ in range(200):
        seen.update(s.sample_id for s in next_batch(state, data, 4))
    assert seen == {s.sample_id for s in data.flat}


def test_uniform_mode_ignores_schedule():
    state = SamplerState.seeded(0, Schedule(total_steps=10), mode="uniform")
    assert state.current_p_pair() == 0.0
    with pytest.raises(ValueError):
        SamplerState.seeded(0, Schedule(total_steps=10), mode="hard-mining")


def test_pairing_test_degenerate_rate():
    data = make_dataset(4)
    state = SamplerState.seeded(1, Schedule(1.0, 1.0, 10))
    batches = [next_batch(state, data, 4) for _ in range(5)]
    result = curriculum.pairing_test(batches, data, 1.0)
    assert result.observed == result.slots == 10
    assert result.p_value == 1.0
    with pytest.raises(ValueError):
        curriculum.pairing_test(batches, data, 1.5)


def test_sensitivity_sweep_reports_spread():
    scores = {(0.23, 0.57): 40.0, (0.5, 0.5): 41.5}
    report = curriculum.sensitivity_sweep(scores, lambda t1, t2: scores[(t1, t2)])
    assert [c.val_map for c in report.cells] == [40.0, 41.5]
    assert report.spread == pytest.approx(1.5)
    assert report.to_dict()["cells"][1] == {"t1": 0.5, "t2": 0.5, "val_map": 41.5}
    with pytest.raises(ValueError):
        curriculum.sensitivity_sweep([(0.8, 0.2)], lambda t1, t2: 0.0)


def test_default_sweep_grid():
    assert len(curriculum.DEFAULT_SWEEP_GRID) == 9
    assert (0.33, 0.67) in curriculum.DEFAULT_SWEEP_GRID
