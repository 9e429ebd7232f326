import json
from dataclasses import replace

import numpy as np
import pytest

import synthdata
from synthdata import CocoFormatError, GeneratorConfig, SceneSample


def test_generator_config_validation():
    with pytest.raises(ValueError, match="geometry channels"):
        GeneratorConfig(d=5)
    with pytest.raises(ValueError, match="empty"):
        GeneratorConfig(ground_count=(9, 3))
    with pytest.raises(ValueError, match="consistency"):
        GeneratorConfig(consistency=1.5)
    with pytest.raises(ValueError, match="does not fit"):
        GeneratorConfig(image_w=32, image_h=32)
    with pytest.raises(ValueError, match="max_location_categories"):
        GeneratorConfig(max_location_categories=0)
    with pytest.raises(ValueError, match="non-negative"):
        GeneratorConfig(geometry_jitter=-0.1)


def test_generator_config_dict_round_trip(small_generator):
    assert GeneratorConfig.from_dict(small_generator.to_dict()) == small_generator
    assert json.loads(json.dumps(small_generator.to_dict())) == small_generator.to_dict()


def test_scene_sample_validation():
    with pytest.raises(ValueError, match="categories"):
        SceneSample(None, [(1.0, 1.0, 2.0, 2.0)], [], "ground", 0, 64, 64)
    with pytest.raises(ValueError, match="leaves"):
        SceneSample(None, [(60.0, 1.0, 8.0, 2.0)], [0], "ground", 0, 64, 64)
    with pytest.raises(ValueError, match="view"):
        SceneSample(None, [], [], "satellite", 0, 64, 64)
    assert SceneSample(None, [], [], "aerial", 12, 64, 64).sample_id == "pair000012_aerial"


def test_generate_pair_is_deterministic(small_generator):
    first = synthdata.generate_pair(small_generator, np.random.default_rng(9), pair_id=3)
    second = synthdata.generate_pair(small_generator, np.random.default_rng(9), pair_id=3)
    for a, b in zip(first, second):
        assert a.boxes == b.boxes
        assert a.categories == b.categories
        assert a.noise_seed == b.noise_seed
        assert np.array_equal(a.features.tokens.value, b.features.tokens.value)


def test_generated_pair_shape(small_generator, rng):
    for pair_id in range(30):
        ground, aerial = synthdata.generate_pair(small_generator, rng, pair_id=pair_id)
        assert (ground.view, aerial.view) == ("ground", "aerial")
        assert ground.pair_id == aerial.pair_id == pair_id
        lo, hi = small_generator.ground_count
        assert lo <= len(ground.boxes) <= hi
        lo, hi = small_generator.aerial_count
        assert lo <= len(aerial.boxes) <= hi
        for sample in (ground, aerial):
            assert sample.features.tokens.shape == (16, small_generator.d)
            for x, y, w, h in sample.boxes:
                assert x >= synthdata.BOX_MARGIN and y >= synthdata.BOX_MARGIN
                assert x + w <= sample.image_w - synthdata.BOX_MARGIN + 0.01
                assert y + h <= sample.image_h - synthdata.BOX_MARGIN + 0.01


def test_full_consistency_shares_category_sets(rng):
    cfg = GeneratorConfig(consistency=1.0)
    for pair_id in range(20):
        ground, aerial = synthdata.generate_pair(cfg, rng, pair_id=pair_id, render=False)
        assert set(ground.categories) == set(aerial.categories)


def test_views_differ_in_geometry():
    splits = synthdata.generate_splits(GeneratorConfig(), 0, {"train": 40, "val": 0, "test": 0}, render=False)
    stats = synthdata.geometry_statistics(splits.train.flat)
    ground, aerial = stats["ground"], stats["aerial"]
    assert aerial["mean_object_count"] > 2 * ground["mean_object_count"]
    assert ground["mean_box_area"] > 4 * aerial["mean_box_area"]
    assert aerial["mean_spread"] > ground["mean_spread"]
    assert ground["samples"] == aerial["samples"] == 40.0


def test_geometry_statistics_values():
    touching = SceneSample(None, [(0.0, 0.0, 2.0, 2.0), (2.0, 0.0, 2.0, 2.0), (10.0, 0.0, 2.0, 2.0)], [0, 0, 1],
                           "ground", 0, 20, 20)
    stats = synthdata.geometry_statistics([touching])["ground"]
    assert stats["mean_object_count"] == 3.0
    assert stats["mean_box_area"] == 4.0
    assert stats["mean_nn_gap"] == pytest.approx((0.0 + 0.0 + 6.0) / 3.0)
    assert stats["mean_coverage"] == pytest.approx(12.0 / 400.0)


def test_center_cell_round_trip(small_generator):
    box = (10.0, 22.0, 14.0, 6.0)
    row, col, code = synthdata.center_cell(box, small_generator)
    assert (row, col) == (1, 1)
    assert np.allclose(synthdata.decode_cell(row, col, code, small_generator), box, atol=1e-12)


def test_render_is_additive(small_generator):
    a = [(4.0, 4.0, 12.0, 12.0)]
    b = [(40.0, 30.0, 16.0, 14.0)]
    both = synthdata.render_features(a + b, [0, 2], small_generator).tokens.value
    first = synthdata.render_features(a, [0], small_generator).tokens.value
    second = synthdata.render_features(b, [2], small_generator).tokens.value
    assert np.allclose(both, first + second, rtol=0, atol=1e-12)


def test_render_writes_geometry_at_centre_cell(small_generator):
    box = (20.0, 36.0, 12.0, 8.0)
    tokens = synthdata.render_features([box], [1], small_generator).tokens.value
    row, col, code = synthdata.center_cell(box, small_generator)
    semantic = small_generator.d - synthdata.GEOMETRY_CHANNELS
    objectness = tokens[:, semantic]
    assert objectness[row * small_generator.grid_w + col] == 1.0
    assert np.count_nonzero(objectness) == 1
    assert np.allclose(tokens[row * small_generator.grid_w + col, semantic + 1 :], code)



def test_geometry_jitter_perturbs_the_centre_code(small_generator):
    box = (20.0, 36.0, 12.0, 8.0)
    row, col, code = synthdata.center_cell(box, small_generator)
    cell = row * small_generator.grid_w + col
    semantic = small_generator.d - synthdata.GEOMETRY_CHANNELS
    quiet = replace(small_generator, noise_std=0.0)
    first = synthdata.render_features([box], [1], quiet, np.random.default_rng(5)).tokens.value
    again = synthdata.render_features([box], [1], quiet, np.random.default_rng(5)).tokens.value
    assert np.array_equal(first, again)
    assert first[cell, semantic] == 1.0
    assert not np.allclose(first[cell, semantic + 1 :], code, rtol=0, atol=1e-3)

    exact = replace(quiet, geometry_jitter=0.0)
    tokens = synthdata.render_features([box], [1], exact, np.random.default_rng(5)).tokens.value
    assert np.allclose(tokens[cell, semantic + 1 :], code, rtol=0, atol=1e-12)


def test_empty_scene_renders_noise_only(small_generator):
    assert not synthdata.render_features([], [], small_generator).tokens.value.any()
    noisy = synthdata.render_features([], [], small_generator, np.random.default_rng(3)).tokens.value
    assert noisy.shape == (16, small_generator.d)
    assert abs(noisy.mean()) < 0.02


def test_single_location_category_generates(rng):
    cfg = GeneratorConfig(max_location_categories=1, consistency=1.0)
    for pair_id in range(10):
        ground, aerial = synthdata.generate_pair(cfg, rng, pair_id=pair_id, render=False)
        assert len(set(ground.categories)) == 1
        assert set(ground.categories) == set(aerial.categories)

def test_coco_round_trip_is_lossless(tmp_path, small_generator, rng):
    samples = [s for i in range(4) for s in synthdata.generate_pair(small_generator, rng, pair_id=i)]
    names = synthdata.category_names_for(small_generator)
    path = tmp_path / "annotations.json"
    synthdata.save_coco(samples, path, names)
    loaded, loaded_names = synthdata.read_coco(path)
    assert loaded_names == names
    assert len(loaded) == len(samples)
    assert [s.sample_id for s in synthdata.load_coco(path)] == [s.sample_id for s in samples]
    for original, back in zip(samples, loaded):
        assert back.boxes == original.boxes
        assert back.categories == original.categories
        assert (back.view, back.pair_id, back.noise_seed) == (original.view, original.pair_id, original.noise_seed)
    rendered = synthdata.attach_features(loaded, small_generator)
    for original, back in zip(samples, rendered):
        assert np.array_equal(back.features.tokens.value, original.features.tokens.value)


def test_coco_document_field_names(small_generator, rng):
    ground, aerial = synthdata.generate_pair(small_generator, rng, pair_id=0, render=False)
    doc = synthdata.coco_document([ground, aerial], synthdata.category_names_for(small_generator))
    assert set(doc) == {"images", "annotations", "categories"}
    ann = doc["annotations"][0]
    assert {"id", "image_id", "category_id", "bbox", "area", "iscrowd"} <= set(ann)
    assert doc["categories"][0] == {"id": 1, "name": synthdata.DEFAULT_CATEGORY_NAMES[0]}
    assert doc["images"][0]["file_name"] == "pair000000_ground.png"


def minimal_doc():
    return {
        "images": [{"id": 1, "file_name": "pair000001_ground.png", "width": 32, "height": 32}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 7, "bbox": [1, 1, 4, 4]}],
        "categories": [{"id": 7, "name": "car"}],
    }


def test_parse_coco_maps_category_ids():
    samples, names = synthdata.parse_coco(minimal_doc())
    assert names == ["car"]
    assert samples[0].categories == [0]
    assert samples[0].boxes == [(1.0, 1.0, 4.0, 4.0)]
    assert samples[0].noise_seed is None


def test_parse_coco_rejects_dangling_references():
    doc = minimal_doc()
    doc["annotations"].append({"id": 2, "image_id": 5, "category_id": 7, "bbox": [1, 1, 2, 2]})
    with pytest.raises(CocoFormatError, match=r"\[5\]"):
        synthdata.parse_coco(doc)
    doc = minimal_doc()
    doc["annotations"][0]["category_id"] = 3
    with pytest.raises(CocoFormatError, match="category ids: \\[3\\]"):
        synthdata.parse_coco(doc)


def test_parse_coco_rejects_malformed_documents():
    with pytest.raises(CocoFormatError):
        synthdata.parse_coco([])
    doc = minimal_doc()
    doc["images"][0]["file_name"] = "IMG_0001.jpg"
    with pytest.raises(CocoFormatError, match="pair<id>_<view>"):
        synthdata.parse_coco(doc)
    doc = minimal_doc()
    doc["annotations"][0]["bbox"] = [1, 2, 3]
    with pytest.raises(CocoFormatError, match="bbox"):
        synthdata.parse_coco(doc)
    doc = minimal_doc()
    del doc["categories"]
    with pytest.raises(CocoFormatError, match="categories"):
        synthdata.parse_coco(doc)


def test_read_coco_missing_and_bad_json(tmp_path):
    with pytest.raises(FileNotFoundError):
        synthdata.read_coco(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(CocoFormatError, match="malformed"):
        synthdata.read_coco(bad)


def test_generate_splits_uses_sequential_pair_ids(small_generator):
    splits = synthdata.generate_splits(small_generator, 1, {"train": 3, "val": 2, "test": 1}, render=False)
    assert [g.pair_id for g, _ in splits.train.pairs] == [0, 1, 2]
    assert [g.pair_id for g, _ in splits.val.pairs] == [3, 4]
    assert [g.pair_id for g, _ in splits.test.pairs] == [5]
    with pytest.raises(ValueError):
        splits.split("holdout")


def test_write_dataset_is_byte_identical(tmp_path, small_generator):
    sizes = {"train": 3, "val": 2, "test": 2}
    synthdata.write_dataset(tmp_path / "a", small_generator, 11, sizes)
    synthdata.write_dataset(tmp_path / "b", small_generator, 11, sizes)
    files = ["manifest.json", *(f"{name}/annotations.json" for name in synthdata.SPLITS)]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = synthdata.read_manifest(tmp_path / "a")
    assert manifest["master_seed"] == 11
    assert manifest["splits"] == sizes
    assert manifest["format_version"] == synthdata.DATASET_FORMAT_VERSION


def test_load_dataset_matches_in_memory_generation(tmp_path, small_generator):
    sizes = {"train": 2, "val": 1, "test": 1}
    synthdata.write_dataset(tmp_path, small_generator, 5, sizes)
    loaded, cfg = synthdata.load_dataset(tmp_path)
    fresh = synthdata.generate_splits(small_generator, 5, sizes)
    assert cfg == small_generator
    for name in synthdata.SPLITS:
        for a, b in zip(loaded.split(name).flat, fresh.split(name).flat):
            assert a.boxes == b.boxes
            assert np.array_equal(a.features.tokens.value, b.features.tokens.value)


def test_load_dataset_needs_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        synthdata.load_dataset(tmp_path)
