import json

import pytest

from faceshield.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, dispatch
from faceshield.storage import PNG_MAGIC, read_json, write_png
from faceshield.synthbench import save_toy_detector

FAST = {"attack": {"spectrum_samples": 1, "neighbor_samples": 1}, "guidance": {"samples": 2}}


@pytest.fixture
def workspace(tmp_path, untrained_toy, scene):
    image, _ = scene
    weights = save_toy_detector(untrained_toy, tmp_path / "toy.pt")
    clean = write_png(image, tmp_path / "clean.png")
    config = tmp_path / "fast.json"
    config.write_text(json.dumps(FAST))
    return tmp_path, weights, clean, config


def _protect(workspace, out_name, *extra):
    root, weights, clean, config = workspace
    out = root / out_name
    argv = ["protect-image", "--in", str(clean), "--out", str(out), "--detector", str(weights),
            "--config", str(config), *extra]
    return dispatch(argv), out


def test_eval_on_the_fixture(tmp_path, capsys):
    code = dispatch(["eval", "--pred", "data/fixtures/pred.json", "--gt", "data/fixtures/gt.json", "--iou", "0.5",
                     "--out", str(tmp_path)])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "f1 = 0.7500"
    stats = json.loads(lines[1])
    assert (stats["tp"], stats["fp"], stats["fn"]) == (3, 1, 1)
    assert read_json(tmp_path / "eval.json")["f1"] == pytest.approx(0.75)


def test_eval_writes_a_manifest_with_the_thresholds(tmp_path):
    code = dispatch(["eval", "--pred", "data/fixtures/pred.json", "--gt", "data/fixtures/gt.json",
                     "--threshold", "1.01", "--out", str(tmp_path)])
    assert code == EXIT_OK
    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["command"] == "eval"
    assert manifest["eval"] == {"iou_threshold": 0.5, "score_threshold": 1.01}
    assert manifest["inputs"] == {"pred": "data/fixtures/pred.json", "gt": "data/fixtures/gt.json"}
    assert manifest["f1"] == 0.0
    assert read_json(tmp_path / "eval.json")["tp"] == 0


def test_usage_errors_exit_2(workspace, capsys):
    code, _ = _protect(workspace, "x.png", "--method", "no-such")
    assert code == EXIT_USAGE
    assert dispatch(["eval", "--pred", "a", "--gt", "b", "--bogus"]) == EXIT_USAGE
    assert dispatch([]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "no-such" in err


def test_unknown_config_key_exits_2(workspace):
    root = workspace[0]
    bad = root / "bad.json"
    bad.write_text(json.dumps({"attack": {"strength": 3}}))
    code = dispatch(["eval", "--pred", "data/fixtures/pred.json", "--gt", "data/fixtures/gt.json",
                     "--config", str(bad)])
    assert code == EXIT_USAGE


def test_non_png_output_exits_2(workspace):
    code, out = _protect(workspace, "protected.jpg")
    assert code == EXIT_USAGE
    assert not out.exists()


def test_missing_input_is_a_runtime_failure(tmp_path):
    code = dispatch(["eval", "--pred", str(tmp_path / "none.json"), "--gt", "data/fixtures/gt.json"])
    assert code == EXIT_RUNTIME


def test_protect_image_writes_png_sidecar_and_manifest(workspace):
    code, out = _protect(workspace, "protected.png")
    assert code == EXIT_OK
    assert out.read_bytes()[:8] == PNG_MAGIC
    sidecar = read_json(out.with_suffix(".json"))
    assert sidecar["epsilon"] == 8
    assert sidecar["iterations"] == 10
    assert sidecar["linf"] <= 8
    manifest = read_json(out.with_name("protected_manifest.json"))
    assert manifest["attack"]["method"] == "ada-dim++"
    assert manifest["command"] == "protect-image"


def test_replay_from_the_manifest_is_byte_identical(workspace):
    root = workspace[0]
    code, a = _protect(workspace, "a.png", "--seed", "3")
    assert code == EXIT_OK
    manifest = root / "a_manifest.json"
    b = root / "b.png"
    assert dispatch(["replay", "--manifest", str(manifest), "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    replayed = read_json(root / "b_manifest.json")
    assert replayed["attack"]["seed"] == read_json(manifest)["attack"]["seed"]
    assert replayed["outputs"] == {"out": str(b)}


def test_replay_of_an_eval_run(tmp_path, capsys):
    assert dispatch(["eval", "--pred", "data/fixtures/pred.json", "--gt", "data/fixtures/gt.json",
                     "--out", str(tmp_path / "first")]) == EXIT_OK
    first = capsys.readouterr().out
    code = dispatch(["replay", "--manifest", str(tmp_path / "first" / "manifest.json"), "--out", str(tmp_path / "again")])
    assert code == EXIT_OK
    assert capsys.readouterr().out == first
    assert (tmp_path / "again" / "eval.json").exists()


def test_manifest_is_not_accepted_as_config(workspace):
    root = workspace[0]
    assert _protect(workspace, "a.png")[0] == EXIT_OK
    code = dispatch(["eval", "--pred", "data/fixtures/pred.json", "--gt", "data/fixtures/gt.json",
                     "--config", str(root / "a_manifest.json"), "--out", str(root / "eval")])
    assert code == EXIT_USAGE


def test_replay_errors(tmp_path):
    assert dispatch(["replay", "--manifest", str(tmp_path / "none.json")]) == EXIT_RUNTIME
    (tmp_path / "old.json").write_text(json.dumps({"schema_version": 0}))
    assert dispatch(["replay", "--manifest", str(tmp_path / "old.json")]) == EXIT_USAGE
    assert dispatch(["replay", "--manifest", str(tmp_path / "old.json"), "--seed", "1"]) == EXIT_USAGE
