import json
import random

import pytest

from segfuse.coco_io import (
    LoadError,
    dataset_to_dict,
    load_dataset,
    load_results,
    parse_dataset,
    parse_results,
    results_to_list,
    write_dataset,
    write_results,
)
from segfuse.synth import NoiseProfile, gen_dataset, perturb_predictions


def _minimal():
    return {
        "images": [{"id": 1, "width": 4, "height": 4, "file_name": "a.png"}],
        "annotations": [
            {"id": 7, "image_id": 1, "category_id": 3, "bbox": [0, 0, 4, 4], "area": 16,
             "segmentation": {"size": [4, 4], "counts": [0, 16]}}
        ],
        "categories": [{"id": 3, "name": "fish"}],
    }


@pytest.fixture
def ds_path(tmp_path):
    p = tmp_path / "d.json"
    p.write_text(json.dumps(_minimal()))
    return p


class TestDataset:
    def test_minimal(self, ds_path):
        ds = load_dataset(ds_path)
        assert len(ds.annotations) == 1
        ann = ds.annotations[0]
        assert ann.mask.area() == 16
        assert ann.bbox.as_list() == [0, 0, 4, 4]

    def test_missing_images(self):
        data = _minimal()
        del data["images"]
        with pytest.raises(LoadError, match="missing images section"):
            parse_dataset(data)

    def test_roundtrip(self, tmp_path):
        ds, _ = gen_dataset(1, 5, 3, render=False)
        write_dataset(ds, tmp_path / "x.json")
        assert load_dataset(tmp_path / "x.json") == ds

    def test_unknown_category_named(self):
        data = _minimal()
        data["annotations"][0]["category_id"] = 99
        with pytest.raises(LoadError, match="annotation 7"):
            parse_dataset(data)

    def test_malformed_rle_named(self):
        data = _minimal()
        data["annotations"][0]["segmentation"]["counts"] = [0, 15]
        with pytest.raises(LoadError, match="annotation 7.*malformed"):
            parse_dataset(data)

    def test_iscrowd_rejected(self):
        data = _minimal()
        data["annotations"][0]["iscrowd"] = 1
        with pytest.raises(LoadError, match="iscrowd"):
            parse_dataset(data)

    def test_polygon_converted_to_rle(self):
        data = _minimal()
        data["annotations"][0]["segmentation"] = [[1, 1, 3, 1, 3, 3, 1, 3]]
        ann = parse_dataset(data).annotations[0]
        assert ann.mask.area() == 4

    def test_order_insensitive(self):
        ds, _ = gen_dataset(4, 6, 3, render=False)
        data = dataset_to_dict(ds)
        for key in ("images", "annotations", "categories"):
            random.Random(0).shuffle(data[key])
        assert parse_dataset(data) == ds


class TestResults:
    def test_empty(self, ds_path):
        ds = load_dataset(ds_path)
        assert parse_results([], ds) == {1: []}

    def test_sorted_by_score(self, ds_path):
        ds = load_dataset(ds_path)
        entries = [
            {"image_id": 1, "category_id": 3, "bbox": [0, 0, 1, 1], "score": 0.3},
            {"image_id": 1, "category_id": 3, "bbox": [1, 1, 1, 1], "score": 0.9},
        ]
        assert [d.score for d in parse_results(entries, ds)[1]] == [0.9, 0.3]

    def test_unknown_image(self, ds_path):
        ds = load_dataset(ds_path)
        with pytest.raises(LoadError, match="unknown image_id 999"):
            parse_results([{"image_id": 999, "category_id": 3, "bbox": [0, 0, 1, 1], "score": 0.5}], ds)

    @pytest.mark.parametrize("score", [-0.1, 1.5, float("nan")])
    def test_bad_score(self, ds_path, score):
        ds = load_dataset(ds_path)
        with pytest.raises(LoadError, match="score"):
            parse_results([{"image_id": 1, "category_id": 3, "bbox": [0, 0, 1, 1], "score": score}], ds)

    @pytest.mark.parametrize("entries", [
        [],
        [{"image_id": 1, "category_id": 3, "bbox": [0, 0, 1, 1], "score": 0.3}],
        [{"image_id": 1, "category_id": 3, "bbox": [0.5, 0.25, 1, 1], "score": 0.3,
          "segmentation": {"size": [4, 4], "counts": [5, 1, 10]}},
         {"image_id": 1, "category_id": 3, "bbox": [0, 0, 2, 2], "score": 0.8}],
    ])
    def test_write_load_roundtrip(self, ds_path, tmp_path, entries):
        ds = load_dataset(ds_path)
        preds = parse_results(entries, ds)
        write_results(preds, tmp_path / "r.json")
        assert load_results(tmp_path / "r.json", ds) == preds

    def test_synthetic_roundtrip_and_permutation(self, tmp_path):
        ds, _ = gen_dataset(2, 8, 3, render=False)
        preds = perturb_predictions(ds, NoiseProfile(score_sigma=0.0), seed=5)
        entries = results_to_list(preds)
        write_results(preds, tmp_path / "r.json")
        loaded = load_results(tmp_path / "r.json", ds)
        assert {i: sorted(map(repr, v)) for i, v in loaded.items()} == {
            i: sorted(map(repr, v)) for i, v in preds.items()
        }
        write_results(loaded, tmp_path / "r2.json")
        write_results(load_results(tmp_path / "r2.json", ds), tmp_path / "r3.json")
        assert (tmp_path / "r2.json").read_bytes() == (tmp_path / "r3.json").read_bytes()
        random.Random(1).shuffle(entries)
        assert parse_results(entries, ds) == loaded
