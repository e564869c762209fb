from __future__ import annotations

import itertools
import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from drivescene.core import FrameRecord, LabelSource, SceneLabel, TrafficLight
from drivescene.errors import AlignmentError, MisalignedWindow
from drivescene.mining import (
    STAGE_ORDER,
    ConsistencyRule,
    FusionPolicy,
    WindowConfig,
    check_motion_consistency,
    fuse_labels,
    mine_sequence,
    mine_sequences,
    simulate_drive,
    split_sequences,
    temporal_vote,
    window_length,
)

LIGHTS = [TrafficLight.RED, TrafficLight.GREEN, TrafficLight.YELLOW]


def light(c):
    return SceneLabel(traffic_light=c)


def frames_for(states, speed=10.0, fps=10.0, dt=100):
    return [
        FrameRecord(f"f{i}", i * dt, 0.0 if s == "stopped" else speed, s, f"img{i}", fps)
        for i, s in enumerate(states)
    ]


# --- window length ------------------------------------------------------------

def test_window_length_examples():
    assert window_length(5.0, 10.0) == 21
    assert window_length(0.5, 10.0) == 31
    assert window_length(math.inf, 10.0) == 3
    assert window_length(20.0, 10.0) == 5


@given(st.floats(0, 100), st.floats(0.5, 60))
def test_window_length_always_odd_and_clamped(speed, fps):
    n = window_length(speed, fps)
    assert n % 2 == 1 and 3 <= n <= 31


def test_window_config_validation():
    with pytest.raises(ValueError):
        WindowConfig(min_frames=4)
    with pytest.raises(ValueError):
        WindowConfig(min_frames=9, max_frames=7)
    with pytest.raises(ValueError):
        window_length(1.0, 0.0)


# --- temporal vote ---------------------------------------------------------------

def test_vote_replaces_minority_center():
    window = [light(c) for c in ("red", "red", "green", "red", "red")]
    assert temporal_vote(window, 2).traffic_light is TrafficLight.RED


def test_vote_constant_window_fixed_point():
    lab = SceneLabel(50.0, "green", True, 2, True)
    assert temporal_vote([lab] * 5, 2) == lab


def test_vote_tie_keeps_center():
    window = [light(c) for c in ("red", "red", "green", "green")]
    assert temporal_vote(window, 2).traffic_light is TrafficLight.GREEN


def test_vote_speed_median():
    window = [SceneLabel(s) for s in (40.0, 40.0, 90.0, 50.0, None)]
    assert temporal_vote(window, 2).recommended_speed_kmh == 45.0
    sparse = [SceneLabel(s) for s in (40.0, None, 90.0, None, None)]
    assert temporal_vote(sparse, 2).recommended_speed_kmh == 90.0


def test_vote_clears_cone_count_when_flipped():
    window = [SceneLabel(obstacles_cones=False)] * 2 + [SceneLabel(obstacles_cones=True, cone_count=3)] + [SceneLabel()] * 2
    voted = temporal_vote(window, 2)
    assert voted.obstacles_cones is False and voted.cone_count is None


def majority_oracle(values):
    n = len(values)
    for candidate in set(values):
        count = 0
        for v in values:
            if v == candidate:
                count += 1
        if count * 2 > n:
            return candidate
    return None


def test_vote_exhaustive_oracle_small():
    for length in range(1, 6):
        for seq in itertools.product(LIGHTS, repeat=length):
            window = [light(c) for c in seq]
            maj = majority_oracle(seq)
            for c in range(length):
                expected = maj if maj is not None else seq[c]
                voted = temporal_vote(window, c)
                assert voted.traffic_light is expected
                assert voted.traffic_light in seq


# --- motion consistency ------------------------------------------------------------

def test_red_while_cruising_halves_confidence():
    labels = [SceneLabel(traffic_light="red", confidence=0.8)] * 3
    out = check_motion_consistency(labels, frames_for(["cruising"] * 3))
    assert all(l.confidence == pytest.approx(0.4) for l in out)
    assert all(l.traffic_light is TrafficLight.RED for l in out)


def test_red_while_decelerating_untouched():
    labels = [SceneLabel(traffic_light="red", confidence=0.8)] * 3
    assert check_motion_consistency(labels, frames_for(["decelerating"] * 3)) == labels


def test_cone_spike_marked_suspect():
    labels = [SceneLabel(), SceneLabel(obstacles_cones=True), SceneLabel()]
    out = check_motion_consistency(labels, frames_for(["cruising"] * 3))
    assert "suspect:obstacles_cones" in out[1].flags
    assert out[1].obstacles_cones is True
    assert not out[0].flags and not out[2].flags


def test_persistent_cones_not_suspect():
    labels = [SceneLabel(obstacles_cones=True)] * 4
    out = check_motion_consistency(labels, frames_for(["cruising"] * 4))
    assert all(not l.flags for l in out)


def test_endless_crossroad_suspect():
    # 30 frames at 10 m/s, 1 s apart -> 290 m of travel
    labels = [SceneLabel(crossroad=True)] * 30
    frames = frames_for(["cruising"] * 30, speed=10.0, dt=1000)
    out = check_motion_consistency(labels, frames)
    assert all("suspect:crossroad" in l.flags for l in out)
    short = check_motion_consistency(labels[:10], frames[:10])
    assert all(not l.flags for l in short)


def test_consistency_misaligned():
    with pytest.raises(MisalignedWindow):
        check_motion_consistency([SceneLabel()] * 2, frames_for(["cruising"] * 3))


def test_rule_validation():
    with pytest.raises(ValueError):
        ConsistencyRule("x", "weather", "isolated", "mark_suspect")


# --- fusion ----------------------------------------------------------------------------

def test_fusion_expert_wins_owned_field():
    expert = SceneLabel(traffic_light="red", confidence=0.9, source="expert")
    vlm = SceneLabel(traffic_light="green", confidence=0.6)
    fused = fuse_labels(vlm, expert)
    assert fused.traffic_light is TrafficLight.RED and fused.source is LabelSource.FUSED


def test_fusion_agreement_takes_max_confidence():
    fused = fuse_labels(SceneLabel(traffic_light="red", confidence=0.55), SceneLabel(traffic_light="red", confidence=0.8))
    assert fused.traffic_light is TrafficLight.RED and fused.confidence == 0.8


def test_fusion_drops_low_confidence_disagreement():
    expert = SceneLabel(traffic_light="red", confidence=0.4)
    vlm = SceneLabel(traffic_light="green", confidence=0.3)
    assert fuse_labels(vlm, expert) is None


def test_fusion_falls_back_to_vlm():
    expert = SceneLabel(traffic_light="red", confidence=0.6)
    vlm = SceneLabel(traffic_light="green", confidence=0.6)
    assert fuse_labels(vlm, expert).traffic_light is TrafficLight.GREEN


def test_fusion_vlm_owns_crossroad():
    expert = SceneLabel(crossroad=False, confidence=0.95)
    vlm = SceneLabel(crossroad=True, confidence=0.6)
    assert fuse_labels(vlm, expert).crossroad is True


def test_fusion_suspect_flag_lowers_confidence():
    expert = SceneLabel(obstacles_cones=True, confidence=0.9).with_flag("suspect:obstacles_cones")
    vlm = SceneLabel(obstacles_cones=False, confidence=0.6)
    assert fuse_labels(vlm, expert).obstacles_cones is False


def test_fusion_policy_validation():
    with pytest.raises(ValueError):
        FusionPolicy(expert_threshold=1.2)


# --- sequence pipeline ------------------------------------------------------------------

def test_clean_constant_sequence_fixed_point():
    truth = SceneLabel(60.0, "green", True, None, False)
    frames, vlm, expert, corrupted = simulate_drive(100, truth, 0.0, seed=0)
    assert not corrupted
    out, stats = mine_sequence(frames, vlm, expert)
    assert stats.replaced == 0 and stats.dropped == 0
    assert all(lf.fused.content() == truth.content() for lf in out)
    assert stats.stage_order == STAGE_ORDER


def restored_fraction(out, truth, corrupted):
    ok = 0
    for lf in out:
        if lf.frame.frame_id in corrupted and lf.fused is not None:
            f = lf.fused
            if (f.traffic_light, f.obstacles_cones, f.crossroad) == (truth.traffic_light, truth.obstacles_cones, truth.crossroad):
                ok += 1
    return ok / len(corrupted)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_corruption_mostly_restored(seed):
    truth = SceneLabel(60.0, "green", False, None, False)
    frames, vlm, expert, corrupted = simulate_drive(500, truth, 0.05, seed=seed)
    assert window_length(frames[0].ego_speed_mps, frames[0].camera_fps) == 5
    out, stats = mine_sequence(frames, vlm, expert)
    assert restored_fraction(out, truth, corrupted) >= 0.9
    assert stats.kept + stats.dropped == stats.total == 500
    assert stats.replaced > 0


def test_disagreeing_low_confidence_all_dropped():
    truth = SceneLabel(60.0, "green", False, None, False)
    frames, vlm, _, _ = simulate_drive(50, truth, 0.0, seed=0, vlm_confidence=0.3)
    expert = {k: SceneLabel(traffic_light="red", confidence=0.4, source="expert") for k in vlm}
    out, stats = mine_sequence(frames, vlm, expert)
    assert stats.dropped == 50 and stats.kept == 0
    assert all(lf.fused is None for lf in out)


def test_alignment_error_lists_missing():
    truth = SceneLabel(60.0)
    frames, vlm, expert, _ = simulate_drive(10, truth, 0.0, seed=0)
    del vlm[frames[3].frame_id]
    with pytest.raises(AlignmentError) as info:
        mine_sequence(frames, vlm, expert)
    assert info.value.missing == [frames[3].frame_id]


def test_relabeling_frame_ids_commutes():
    truth = SceneLabel(60.0, "yellow", True, None, True)
    frames, vlm, expert, _ = simulate_drive(120, truth, 0.1, seed=5)
    out, stats = mine_sequence(frames, vlm, expert)
    rename = {f.frame_id: f"x-{i}" for i, f in enumerate(reversed(frames))}
    frames2 = [replace(f, frame_id=rename[f.frame_id]) for f in frames]
    out2, stats2 = mine_sequence(
        frames2, {rename[k]: v for k, v in vlm.items()}, {rename[k]: v for k, v in expert.items()}
    )
    assert [lf.labels for lf in out] == [lf.labels for lf in out2]
    assert stats.to_dict() == stats2.to_dict()


def test_mine_sequences_pool_matches_serial():
    truth = SceneLabel(50.0, "red", False, None, True)
    seqs = [simulate_drive(80, truth, 0.05, seed=s, prefix=f"s{s}-")[:3] for s in range(6)]
    serial, s1 = mine_sequences(seqs, workers=1)
    pooled, s2 = mine_sequences(seqs, workers=4)
    assert serial == pooled and s1.to_dict() == s2.to_dict()
    assert s1.total == 480 and s1.kept + s1.dropped == 480


def test_split_sequences():
    frames = frames_for(["cruising"] * 6)
    frames = frames[:3] + [replace(f, timestamp_ms=f.timestamp_ms + 10_000) for f in frames[3:]]
    assert [len(s) for s in split_sequences(frames)] == [3, 3]
