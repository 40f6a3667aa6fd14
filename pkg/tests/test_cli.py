import json

import pytest

from segfuse.ap_eval import EvalConfig, evaluate
from segfuse.cli import build_parser, run
from segfuse.coco_io import load_dataset, load_results, write_results
from segfuse.fusion import filter_controller, fuse


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["--seed", "3", "synth", "--images", "8", "--categories", "2", "--out-dir", str(out)]) == 0
    return out


def _canonical(grouped, ds, tmp_path):
    path = tmp_path / "api.json"
    write_results(grouped, path)
    return load_results(path, ds)


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_synth_layout(synth_dir):
    assert (synth_dir / "dataset.json").exists()
    assert len(list((synth_dir / "images").glob("*.png"))) == 8
    assert sorted(p.name for p in synth_dir.glob("model_*.json")) == ["model_0.json", "model_1.json", "model_2.json"]


def test_eval_perfect(tmp_path, synth_dir, capsys):
    ds = load_dataset(synth_dir / "dataset.json")
    perfect = [{"image_id": a.image_id, "category_id": a.category_id, "bbox": a.bbox.as_list(), "score": 1.0}
               for a in ds.annotations]
    path = tmp_path / "perfect.json"
    path.write_text(json.dumps(perfect))
    assert run(["eval", "--gt", str(synth_dir / "dataset.json"), "--dets", str(path)]) == 0
    out = _json_out(capsys)
    assert out["ap"] == 1.0 and out["schema_version"] == 1


def test_eval_matches_api(synth_dir, capsys):
    gt_path, dets_path = synth_dir / "dataset.json", synth_dir / "model_1.json"
    assert run(["eval", "--gt", str(gt_path), "--dets", str(dets_path), "--mode", "mask"]) == 0
    out = _json_out(capsys)
    ds = load_dataset(gt_path)
    expected = evaluate(ds, load_results(dets_path, ds), EvalConfig(mode="mask"))
    assert out["ap"] == expected.ap and out["ap75"] == expected.ap75


def test_fuse_matches_api(tmp_path, synth_dir):
    gt_path = synth_dir / "dataset.json"
    models = [synth_dir / f"model_{k}.json" for k in range(3)]
    trace_path, out_path = tmp_path / "trace.json", tmp_path / "fused.json"
    argv = ["fuse", "--gt", str(gt_path), "--models", *map(str, models[1:]),
            "--controller", str(models[0]), "--trace-out", str(trace_path), "--out", str(out_path)]
    assert run(argv) == 0
    ds = load_dataset(gt_path)
    ins = [load_results(p, ds) for p in models[1:]]
    fused, trace = fuse(ins, filter_controller(load_results(models[0], ds), 0.5))
    saved = json.loads(trace_path.read_text())
    assert saved["chosen_model"] == trace.chosen_model
    assert saved["ap_evaluations"] == len(ds.images) * 2
    assert load_results(out_path, ds) == _canonical(fused, ds, tmp_path)


def test_fuse_without_models_is_usage_error(synth_dir, capsys):
    path = str(synth_dir / "dataset.json")
    assert run(["fuse", "--gt", path, "--controller", str(synth_dir / "model_0.json")]) == 1
    assert "at least one" in capsys.readouterr().err


def test_confusion_defaults_and_pairs(tmp_path, synth_dir, capsys):
    gt_path = str(synth_dir / "dataset.json")
    conf = tmp_path / "conf.json"
    assert run(["confusion", "--gt", gt_path, "--dets", str(synth_dir / "model_2.json"), "--out", str(conf)]) == 0
    data = json.loads(conf.read_text())
    assert data["alpha"] == 0.5 and data["beta"] == 0.2
    assert run(["pairs", "--confusion", str(conf)]) == 0
    assert _json_out(capsys)["pairs"] == data["pairs"]


def test_augment_runs(tmp_path, synth_dir, capsys):
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps({"pairs": [[1, 2], [2, 1]]}))
    argv = ["augment", "--gt", str(synth_dir / "dataset.json"), "--images", str(synth_dir),
            "--pairs", str(pairs), "--bernoulli-p", "1", "--seed", "4", "--out-dir", str(tmp_path / "aug")]
    assert run(argv) == 0
    summary = _json_out(capsys)
    assert summary["samples"] == 8 and summary["errors"] == 0 and summary["augmented"] > 0
    manifest = json.loads((tmp_path / "aug" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 4


def test_missing_file_is_data_error(tmp_path):
    assert run(["eval", "--gt", str(tmp_path / "nope.json"), "--dets", str(tmp_path / "x.json")]) == 2


def test_malformed_json_is_data_error(tmp_path, synth_dir):
    bad = tmp_path / "bad.json"
    bad.write_text("[{\"image_id\": 1}]")
    assert run(["eval", "--gt", str(synth_dir / "dataset.json"), "--dets", str(bad)]) == 2


@pytest.mark.parametrize("argv", [[], ["eval"], ["confusion", "--gt", "a", "--dets", "b", "--alpha", "2"],
                                  ["--threads", "0", "pairs", "--confusion", "x"]])
def test_usage_errors(argv):
    assert run(argv) == 1


def test_parser_defaults():
    p = build_parser()
    conf = p.parse_args(["confusion", "--gt", "a", "--dets", "b"])
    aug = p.parse_args(["augment", "--gt", "a", "--images", "b", "--pairs", "c", "--out-dir", "d"])
    assert (conf.alpha, conf.beta) == (0.5, 0.2)
    assert aug.gamma == 0.5 and aug.resize_range == [0.4, 0.6] and aug.bernoulli_p == 0.5
