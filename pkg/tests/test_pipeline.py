import numpy as np
import pandas as pd
import pytest

from faceshield.config import build_run_config, default_attack_config
from faceshield.errors import ConfigError, InputError
from faceshield.pipeline import (
    eval_run,
    evaluate_files,
    held_out_scenes,
    load_detector,
    poison_ratio_sweep,
    protect_video,
    robustness_run,
    train_toy,
    transfer_matrix,
)
from faceshield.storage import read_frames, read_json, write_frames
from faceshield.synthbench import generate_scenes, generate_translating_video

FAST_FILE = {"attack": {"method": "ada-bim", "iterations": 2}, "guidance": {"samples": 2}}


@pytest.fixture
def fast_run():
    def build(command, **flags):
        return build_run_config(command, FAST_FILE, flags)

    return build


def test_evaluate_files_on_the_fixture():
    stats = evaluate_files("data/fixtures/pred.json", "data/fixtures/gt.json")
    assert stats["f1"] == pytest.approx(0.75)
    assert stats["images"] == 2
    assert evaluate_files("data/fixtures/pred.json", "data/fixtures/gt.json", threshold=1.01)["tp"] == 0


def test_eval_run_writes_report_and_manifest(tmp_path, fast_run):
    run = fast_run("eval", eval={"score_threshold": 0.5})
    stats = eval_run(run, "data/fixtures/pred.json", "data/fixtures/gt.json", tmp_path)
    assert read_json(tmp_path / "eval.json") == pytest.approx(stats)
    assert stats["score_threshold"] == 0.5
    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["eval"]["score_threshold"] == 0.5
    assert manifest["f1"] == stats["f1"]


def test_train_toy_writes_weights_and_report(tmp_path, fast_run):
    run = fast_run("train-toy", toy={"train_count": 8, "val_count": 2, "epochs": 1, "channels": [4, 8, 8]})
    report = train_toy(run, tmp_path)
    assert 0.0 <= report["clean_f1"] <= 1.0
    assert len(report["loss_trace"]) == 1
    assert read_json(tmp_path / "training_report.json")["train_count"] == 8
    assert read_json(tmp_path / "manifest.json")["command"] == "train-toy"
    handle = load_detector(run, str(tmp_path / "toy_detector.pt"))
    assert handle.taps == (1, 2, 3)


def test_detector_needs_weights(fast_run):
    with pytest.raises(ConfigError):
        load_detector(fast_run("protect-image"))
    with pytest.raises(ConfigError):
        load_detector(fast_run("protect-image", detector={"adapter": "retinaface"}), "w.pt")
    with pytest.raises(InputError):
        load_detector(fast_run("protect-image"), "missing.pt")


def test_protect_video_writes_frames_and_report(tmp_path, untrained_toy, scene_config, fast_run):
    frames, _ = generate_translating_video(scene_config, frames=5)
    write_frames(frames, tmp_path / "clip", fps=8.0)
    run = fast_run("protect-video", schedule={"anchor_period": 3, "flow_iterations": 10, "flow_levels": 2})
    report = protect_video(run, tmp_path / "clip", tmp_path / "out", model=untrained_toy)
    out, fps = read_frames(tmp_path / "out")
    assert fps == 8.0 and len(out) == 5
    assert list(report.loc[report["is_anchor"], "frame"]) == [0, 3]
    csv = pd.read_csv(tmp_path / "out" / "report.csv")
    assert list(csv.columns) == ["frame", "mode", "anchor", "is_anchor", "f1_contrib", "linf", "threshold"]
    assert (csv["threshold"] == untrained_toy.threshold).all()
    assert (tmp_path / "out" / "timeline.png").exists()
    assert "video_f1" in read_json(tmp_path / "out" / "run_manifest.json")


def test_robustness_run_writes_tables(tmp_path, untrained_toy, scene_config, fast_run):
    clean = [im for im, _ in generate_scenes(scene_config, range(2))]
    write_frames(clean, tmp_path / "clean", fps=1.0)
    write_frames(clean, tmp_path / "protected", fps=1.0)
    run = fast_run("robustness", robustness={"jpeg_quality": [90], "resize_ratio": [1.0],
                                             "gaussian_noise": [5], "gaussian_blur": [3]})
    table = robustness_run(run, tmp_path / "protected", tmp_path / "clean", None, tmp_path / "out",
                           model=untrained_toy)
    assert list(table["transform"]) == ["baseline", "jpeg", "resize", "noise", "blur"]
    for name in ("robustness.csv", "robustness.json", "robustness.png", "manifest.json"):
        assert (tmp_path / "out" / name).exists()


def test_transfer_matrix_has_clean_and_attacked_rows(untrained_toy, scene_config):
    scenes = generate_scenes(scene_config, range(2))
    config = default_attack_config(method="ada-fgsm")
    table = transfer_matrix(scenes, {"a": untrained_toy}, {"a": untrained_toy, "b": untrained_toy}, config)
    assert list(zip(table["source"], table["target"])) == [("clean", "a"), ("clean", "b"), ("a", "a"), ("a", "b")]
    assert table["f1"].between(0, 1).all()


def test_poison_ratio_sweep(untrained_toy, scene_config):
    scenes = generate_scenes(scene_config, range(4))
    config = default_attack_config(method="random", seed=2)
    table = poison_ratio_sweep(scenes, untrained_toy, config, ratios=(0.0, 0.5, 1.0))
    assert list(table["protected"]) == [0, 2, 4]
    assert table.loc[0, "mean_crop_ssim"] == pytest.approx(1.0)
    assert np.all(table["polluted_fraction"].between(0, 1))
    with pytest.raises(ConfigError):
        poison_ratio_sweep(scenes, untrained_toy, config, ratios=(1.5,))


def test_held_out_scenes_come_from_the_validation_range(fast_run):
    run = fast_run("transfer")
    scenes = held_out_scenes(run, 3)
    assert len(scenes) == 3
    train = generate_scenes(run.scene, range(3))
    assert not np.array_equal(scenes[0][0].data, train[0][0].data)
