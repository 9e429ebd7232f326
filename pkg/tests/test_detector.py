from dataclasses import replace

import numpy as np
import pytest

import detector
import evalkit
import numerics as nx
import synthdata
from checkpoint_protocol import write_checkpoint
from cpa import CpaConfig, CpaParams
from detector import DetectorModel, DetectorParams, SplitAccessError, SplitAudit, TrainConfig
from synthdata import SceneSample

TINY_SPLITS = {"train": 4, "val": 2, "test": 2}


@pytest.fixture
def cpa_config():
    return CpaConfig(d=8, hidden=6, d_align=5)


@pytest.fixture
def tiny_splits(small_generator):
    return synthdata.generate_splits(small_generator, 0, TINY_SPLITS)


def random_model(generator, cpa_config, seed=0):
    rng = np.random.default_rng(seed)
    return DetectorModel(
        DetectorParams.initialize(generator, rng, zero_head=False),
        CpaParams.initialize(cpa_config, rng, neutral_routing=False),
    )


def test_train_config_validation():
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="hybrid")
    with pytest.raises(ValueError, match="even"):
        TrainConfig(batch_size=3)
    with pytest.raises(ValueError, match="select_on"):
        TrainConfig(select_on="ground")
    assert TrainConfig(mode="both").uses_cpa and TrainConfig(mode="both").uses_curriculum
    assert not TrainConfig(mode="curriculum").uses_cpa
    assert not TrainConfig(mode="cpa").uses_curriculum


def test_cell_targets_first_object_wins(small_generator):
    boxes = [(2.0, 2.0, 10.0, 10.0), (4.0, 4.0, 6.0, 6.0), (40.0, 40.0, 10.0, 10.0)]
    sample = SceneSample(None, boxes, [1, 2, 0], "aerial", 0, 64, 64)
    targets = detector.cell_targets(sample, small_generator)
    assert targets.positives.tolist() == [0, 10]
    assert targets.classes[0] == 1
    assert targets.classes[10] == 0
    background = np.delete(targets.classes, [0, 10])
    assert np.all(background == small_generator.categories)
    _, _, code = synthdata.center_cell(boxes[0], small_generator)
    assert np.array_equal(targets.boxes[0], code)


def test_text_summary_rows(small_generator):
    params = DetectorParams.initialize(small_generator, np.random.default_rng(0))
    sample = SceneSample(None, [(1.0, 1.0, 4.0, 4.0)] * 3, [2, 0, 2], "ground", 0, 64, 64)
    summary = detector.text_summary(sample, params)
    embed = params["text.embed"].value
    assert np.array_equal(summary.tokens.value, embed[[0, 1, 3]])


def test_fresh_head_predicts_nothing(small_generator, tiny_splits):
    model = detector.build_model(small_generator, 0)
    predict = detector.predictor(model)
    assert all(predict(sample) == [] for sample in tiny_splits.val.flat)
    assert model.cpa is None


def test_inference_ignores_cpa(small_generator, cpa_config, tiny_splits):
    model = random_model(small_generator, cpa_config)
    samples = tiny_splits.train.flat
    before = [detector.infer(s, model.detector, scored=True) for s in samples]
    assert any(before)
    for node in model.cpa.named().values():
        node.value += 1.0
    after = [detector.infer(s, model.detector, scored=True) for s in samples]
    assert before == after
    bare = DetectorModel(DetectorParams.from_arrays(small_generator, model.detector.arrays()))
    assert [detector.predictor(bare, scored=True)(s) for s in samples] == before


def test_inference_boxes_stay_inside_image(small_generator, cpa_config, tiny_splits):
    model = random_model(small_generator, cpa_config, seed=5)
    for sample in tiny_splits.train.flat:
        for det in detector.infer(sample, model.detector):
            x, y, w, h = det.box
            assert w > 0 and h > 0
            assert x >= 0 and y >= 0 and x + w <= 64 + 1e-9 and y + h <= 64 + 1e-9
            assert 0 <= det.category < small_generator.categories



def test_infer_is_deterministic_and_scored(small_generator, cpa_config, tiny_splits):
    model = random_model(small_generator, cpa_config, seed=5)
    for sample in tiny_splits.val.flat:
        dets = detector.infer(sample, model.detector, scored=True)
        assert len(dets) <= small_generator.grid_h * small_generator.grid_w
        assert all(0.0 < det.score <= 1.0 for det in dets)
        assert detector.infer(sample, model.detector, scored=True) == dets


def code_reading_params(generator):
    """A detector that copies features through and reads objectness and the geometry code."""
    params = DetectorParams.initialize(generator, np.random.default_rng(0))
    semantic = generator.d - synthdata.GEOMETRY_CHANNELS
    params["enc.w1"].value[...] = np.eye(generator.d)
    params["enc.b1"].value[...] = 5.0
    params["enc.w2"].value[...] = np.eye(generator.d)
    params["enc.b2"].value[...] = -5.0
    params["head.cls_w"].value[...] = 0.0
    params["head.cls_w"].value[semantic, 0] = 10.0
    params["head.cls_b"].value[...] = 0.0
    params["head.cls_b"].value[generator.categories] = 5.0
    params["head.box_w"].value[...] = 0.0
    params["head.box_w"].value[semantic + 1 :, :] = np.eye(4)
    params["head.box_b"].value[...] = 0.0
    return params


def test_infer_decodes_a_centred_object(small_generator):
    box = (24.0, 24.0, 16.0, 16.0)
    features = synthdata.render_features([box], [1], small_generator)
    sample = SceneSample(features, [box], [1], "ground", 0, 64, 64)
    dets = detector.infer(sample, code_reading_params(small_generator), scored=True)
    assert len(dets) == 1
    assert evalkit.iou(dets[0].box, box) > 0.5
    assert dets[0].score > 0.5

def test_training_loss_gradients(small_generator, cpa_config, tiny_splits):
    model = random_model(small_generator, cpa_config, seed=42)
    run = TrainConfig(mode="both", lambda_align=0.5, lambda_ent=0.1, lambda_bal=0.1)
    batch = tiny_splits.train.flat[:2]
    report = nx.grad_check(lambda: detector.forward_train(batch, model, run), model.named(), max_entries=12)
    assert report.passed, report.max_rel_error


def test_forward_train_records_terms(small_generator, cpa_config, tiny_splits):
    model = random_model(small_generator, cpa_config)
    batch = tiny_splits.train.flat[:4]
    record = {}
    loss = detector.forward_train(batch, model, TrainConfig(mode="cpa"), record)
    assert record["total"] == loss.item()
    assert record["total"] == pytest.approx(record["detection"] + record["aux"] - 0.01 * record["balance"])
    plain = {}
    detector.forward_train(batch, model, TrainConfig(mode="baseline"), plain)
    assert set(plain) == {"detection", "total"}
    assert plain["detection"] == record["detection"]



def test_single_path_forward_has_no_balance(small_generator, tiny_splits):
    single = CpaConfig(d=8, hidden=6, d_align=5, variant="single_path")
    model = random_model(small_generator, single)
    record = {}
    detector.forward_train(tiny_splits.train.flat[:4], model, TrainConfig(mode="cpa"), record)
    assert "balance" not in record
    assert record["total"] == pytest.approx(record["detection"] + record["aux"])

def test_select_epoch():
    assert detector.select_epoch([None, 3.0, 5.0, 5.0]) == 3
    assert detector.select_epoch([None, None]) == 1
    assert detector.select_epoch([2.0]) == 1
    with pytest.raises(ValueError):
        detector.select_epoch([])


def test_test_split_is_locked_until_selection(tiny_splits):
    audit = SplitAudit()
    with pytest.raises(SplitAccessError):
        audit.test_samples(tiny_splits)
    assert audit.early_attempts == 1
    audit.mark_selected()
    assert len(audit.test_samples(tiny_splits)) == 2 * TINY_SPLITS["test"]
    assert audit.test_reads == 1


def tiny_run(mode, seed=3):
    return TrainConfig(mode=mode, epochs=2, batch_size=4, warmup_steps=1, seed=seed)


def test_train_end_to_end_is_deterministic(small_generator, cpa_config, tiny_splits):
    records = []
    for _ in range(2):
        audit = SplitAudit()
        record = detector.train(tiny_run("both"), tiny_splits, small_generator, cpa_config, audit=audit)
        assert audit.test_reads == 1
        assert audit.early_attempts == 0
        records.append(record)
    first, second = records
    assert first.to_dict() == second.to_dict()
    for name, value in first.model.arrays().items():
        assert np.array_equal(value, second.model.arrays()[name])

    assert [e.epoch for e in first.epochs] == [1, 2]
    assert first.selected_epoch in (1, 2)
    assert first.selection_metric == "val.aerial.map"
    assert first.val == first.epochs[first.selected_epoch - 1].val
    assert set(first.test) == {"ground", "aerial", "all", "gap", "sample_count"}
    assert set(first.test_metrics()) >= {"aerial.map", "ground.map75", "gap"}
    assert first.param_counts["cpa"] > 0
    assert 0.0 <= first.paired_fraction <= 1.0
    assert set(first.epochs[0].routing) == {"ground", "aerial"}


def test_baseline_run_has_no_cpa(small_generator, tiny_splits):
    record = detector.train(tiny_run("baseline"), tiny_splits, small_generator)
    assert record.model.cpa is None
    assert record.param_counts["cpa"] == 0
    assert record.epochs[0].routing is None


def test_curriculum_run_starts_paired(small_generator, tiny_splits):
    run = TrainConfig(mode="curriculum", epochs=1, batch_size=4, t1=1.0, t2=1.0)
    record = detector.train(run, tiny_splits, small_generator)
    assert record.paired_fraction == 1.0



def test_single_path_run_has_no_routing(small_generator, tiny_splits):
    single = CpaConfig(d=8, hidden=6, d_align=5, variant="single_path")
    record = detector.train(tiny_run("cpa"), tiny_splits, small_generator, single)
    assert record.cpa_variant == "single_path"
    assert record.to_dict()["cpa_variant"] == "single_path"
    assert all(epoch.routing is None for epoch in record.epochs)
    assert record.param_counts["cpa"] == 8 * 8 + 8 + 8 * 5
    with pytest.raises(ValueError, match="no routing"):
        detector.analyze_routing(record.model, tiny_splits.val.flat)


def test_training_beats_the_untrained_model(small_generator):
    generator = replace(small_generator, noise_std=0.01, geometry_jitter=0.0)
    splits = synthdata.generate_splits(generator, 1, {"train": 24, "val": 4, "test": 2})
    untrained = detector.predictor(detector.build_model(generator, 0))
    before = evalkit.evaluate_samples(untrained, splits.val.flat).flat()["all.map"]
    run = TrainConfig(mode="baseline", epochs=15, batch_size=8, lr=0.03, warmup_steps=1, lr_schedule="constant",
                      select_on="all", seed=0)
    record = detector.train(run, splits, generator)
    assert before == 0.0
    assert record.val["all.map"] > before

def test_divergence_is_reported(monkeypatch, small_generator, tiny_splits):
    monkeypatch.setattr(detector, "forward_train", lambda *args, **kwargs: nx.constant(np.inf))
    with pytest.raises(detector.DivergenceError) as info:
        detector.train(tiny_run("baseline"), tiny_splits, small_generator)
    assert (info.value.epoch, info.value.step) == (1, 0)

    def explode(*args, **kwargs):
        raise nx.NonFiniteError("op=mul produced non-finite values")

    monkeypatch.setattr(detector, "forward_train", explode)
    with pytest.raises(detector.DivergenceError, match="non-finite"):
        detector.train(tiny_run("baseline"), tiny_splits, small_generator)


def test_checkpoint_round_trip(tmp_path, small_generator, cpa_config, tiny_splits):
    model = random_model(small_generator, cpa_config)
    path = tmp_path / "model.cvxc"
    detector.save_checkpoint(path, model, extra={"seed": 1})
    loaded = detector.load_checkpoint(path)
    assert loaded.cpa.config == cpa_config
    assert loaded.detector.generator == small_generator
    original = model.arrays()
    assert set(loaded.arrays()) == set(original)
    for name, value in loaded.arrays().items():
        assert np.array_equal(value, original[name])
    sample = tiny_splits.val.flat[0]
    assert detector.infer(sample, loaded.detector) == detector.infer(sample, model.detector)


def test_checkpoint_without_cpa_and_wrong_kind(tmp_path, small_generator):
    model = detector.build_model(small_generator, 4)
    path = tmp_path / "baseline.cvxc"
    detector.save_checkpoint(path, model)
    assert detector.load_checkpoint(path).cpa is None
    other = tmp_path / "other.cvxc"
    write_checkpoint(other, {}, {"kind": "something-else"})
    with pytest.raises(ValueError, match="not a detector checkpoint"):
        detector.load_checkpoint(other)


def test_build_model_rejects_width_mismatch(small_generator):
    with pytest.raises(ValueError, match="must match"):
        detector.build_model(small_generator, 0, CpaConfig(d=16))
