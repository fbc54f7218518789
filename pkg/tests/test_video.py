import numpy as np
import pytest

from faceshield.attack import run_attack
from faceshield.config import AnchorSchedule, SceneConfig, default_attack_config
from faceshield.detector import detect_many
from faceshield.domain import GroundTruth, Image
from faceshield.errors import AttackError, InputError, PropagationError
from faceshield.evaluation import corpus_f1
from faceshield.flow import compute_flow, warp_array
from faceshield.synthbench import generate_translating_video
from faceshield.video import (
    VideoSequence,
    anchor_count,
    perturbations,
    propagate,
    propagate_once,
    video_f1,
)

FAST_FLOW = dict(flow_iterations=20, flow_levels=2)


class CountingAttack:
    def __init__(self):
        self.calls = 0

    def __call__(self, model, image, config):
        self.calls += 1
        return run_attack(model, image, config)


@pytest.fixture
def clip(scene_config):
    frames, truths = generate_translating_video(scene_config, frames=8)
    return VideoSequence(tuple(frames), fps=10.0), truths


def test_video_sequence_validation(scene):
    image, _ = scene
    with pytest.raises(InputError):
        VideoSequence(())
    with pytest.raises(InputError):
        VideoSequence((image, Image.zeros(32, 32)))
    assert len(VideoSequence([image, image])) == 2


@pytest.mark.parametrize("mode", ["full", "fixed", "forward", "bidirectional"])
def test_static_video_reuses_the_anchor_perturbation(untrained_toy, scene, fast_attack, mode):
    image, _ = scene
    video = VideoSequence((image,) * 4)
    schedule = AnchorSchedule(anchor_period=3, **FAST_FLOW)
    protected, report = propagate(video, untrained_toy, fast_attack, schedule, mode=mode)
    anchor = protected[0].float_view - image.float_view
    for frame in protected.frames:
        np.testing.assert_allclose(frame.float_view - image.float_view, anchor, atol=1e-6)
    assert list(report["frame"]) == [0, 1, 2, 3]


def test_unit_anchor_period_equals_full(untrained_toy, clip, fast_attack):
    video, _ = clip
    schedule = AnchorSchedule(anchor_period=1, **FAST_FLOW)
    a, _ = propagate(video, untrained_toy, fast_attack, schedule, mode="bidirectional")
    b, _ = propagate(video, untrained_toy, fast_attack, schedule, mode="full")
    for x, y in zip(a.frames, b.frames):
        np.testing.assert_array_equal(x.data, y.data)


@pytest.mark.parametrize("mode, chain", [("forward", True), ("bidirectional", True), ("bidirectional", False), ("fixed", True)])
def test_every_frame_stays_in_the_ball(untrained_toy, clip, fast_attack, mode, chain):
    video, _ = clip
    schedule = AnchorSchedule(anchor_period=4, chain=chain, **FAST_FLOW)
    protected, report = propagate(video, untrained_toy, fast_attack, schedule, mode=mode)
    for clean, adv in zip(video.frames, protected.frames):
        assert np.abs(adv.float_view - clean.float_view).max() <= fast_attack.epsilon
    assert (report["linf"] <= fast_attack.epsilon).all()
    assert max(p.linf for p in perturbations(protected, video, fast_attack.epsilon)) <= fast_attack.epsilon


def test_attack_runs_only_on_anchors(untrained_toy, clip, fast_attack):
    video, _ = clip
    schedule = AnchorSchedule(anchor_period=3, **FAST_FLOW)
    counter = CountingAttack()
    _, report = propagate(video, untrained_toy, fast_attack, schedule, mode="bidirectional", attack_fn=counter)
    assert counter.calls == anchor_count(len(video), schedule, "bidirectional") == 3
    assert list(report.loc[report["is_anchor"], "frame"]) == [0, 3, 6]
    assert list(report["anchor"]) == [0, 0, 0, 3, 3, 3, 6, 6]


def test_bidirectional_is_the_mean_of_both_warps(clip):
    video, _ = clip
    schedule = AnchorSchedule(**FAST_FLOW)
    delta = np.random.default_rng(0).uniform(-8, 8, video[0].shape)
    kwargs = dict(method=schedule.flow_method, iterations=schedule.flow_iterations,
                  regularization=schedule.flow_regularization, levels=schedule.flow_levels)
    forward = warp_array(delta, compute_flow(video[0], video[1], **kwargs).vectors)
    backward = warp_array(delta, -compute_flow(video[1], video[0], **kwargs).vectors)
    got = propagate_once(delta, video[0], video[1], schedule, bidirectional=True)
    np.testing.assert_allclose(got, 0.5 * (forward + backward), atol=1e-12)
    np.testing.assert_allclose(propagate_once(delta, video[0], video[1], schedule, bidirectional=False), forward)


def test_anchor_failure_keeps_the_partial_report(untrained_toy, clip, fast_attack):
    video, _ = clip

    def flaky(model, image, config):
        if flaky.calls == 1:
            raise AttackError("diverged", [1.0])
        flaky.calls += 1
        return run_attack(model, image, config)

    flaky.calls = 0
    schedule = AnchorSchedule(anchor_period=4, **FAST_FLOW)
    with pytest.raises(PropagationError) as info:
        propagate(video, untrained_toy, fast_attack, schedule, mode="forward", attack_fn=flaky)
    assert [row["frame"] for row in info.value.partial_report] == [0, 1, 2, 3]


def test_report_scores_every_eval_interval(untrained_toy, clip, fast_attack):
    video, truths = clip
    schedule = AnchorSchedule(anchor_period=4, eval_interval=3, **FAST_FLOW)
    _, report = propagate(video, untrained_toy, fast_attack, schedule, mode="forward", ground_truth=truths)
    scored = report.dropna(subset=["f1_contrib"])
    assert list(scored["frame"]) == [0, 3, 6]
    assert 0.0 <= video_f1(report) <= 1.0
    assert {"frame", "mode", "anchor", "f1_contrib", "linf", "threshold"} <= set(report.columns)
    assert (report["threshold"] == untrained_toy.threshold).all()


def test_unknown_mode(untrained_toy, clip, fast_attack):
    video, _ = clip
    with pytest.raises(InputError):
        propagate(video, untrained_toy, fast_attack, AnchorSchedule(**FAST_FLOW), mode="sideways")


@pytest.mark.slow
def test_propagation_ordering_on_a_panning_face(trained_toy):
    frames, _ = generate_translating_video(SceneConfig(seed=0), frames=60)
    video = VideoSequence(tuple(frames))
    truths = [GroundTruth(tuple(d.boxes), f.image_id) for d, f in zip(detect_many(trained_toy, frames), frames)]
    attack = default_attack_config(method="ada-bim", seed=1)
    schedule = AnchorSchedule(anchor_period=15)

    scores = {}
    counter = CountingAttack()
    for mode in ("full", "fixed", "bidirectional"):
        fn = counter if mode == "bidirectional" else run_attack
        _, report = propagate(video, trained_toy, attack, schedule, mode=mode, attack_fn=fn, ground_truth=truths)
        scores[mode] = video_f1(report)

    clean = corpus_f1(detect_many(trained_toy, frames[::5]), truths[::5])["f1"]
    assert counter.calls == 4
    assert scores["full"] <= scores["bidirectional"] <= scores["fixed"]
    assert scores["bidirectional"] <= 0.5 * clean
