import logging

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from egocrash.encoders import EncoderConfig, ToyClip
from egocrash.errors import ConfigError, ContractViolation, DataError
from egocrash.gaze import (
    FixationLog, accumulate_fixations, gaussian_kernel, gaze_maps_from_log, load_gaze_maps, read_fixation_log,
    render_gaze_map, render_unnormalised, save_gaze_maps, tokenize_gaze, write_fixation_log,
)


def log_of(ts, xs=None, ys=None, subjects=None, w=64, h=48):
    n = len(ts)
    return FixationLog(ts, xs if xs is not None else [1] * n, ys if ys is not None else [1] * n,
                       subjects if subjects is not None else ["s0"] * n, w, h)


# ---- accumulation --------------------------------------------------------------------

def test_first_sample_goes_to_frame_zero():
    assert accumulate_fixations(log_of([0]), 30, 4).counts == [1, 0, 0, 0]


def test_empty_log_gives_empty_frames():
    acc = accumulate_fixations(log_of([]), 30, 5)
    assert acc.frames == [[]] * 5 and acc.dropped == 0


def test_one_second_at_250hz_into_30fps_buckets():
    ts = list(range(0, 1000, 4))  # 250 samples
    acc = accumulate_fixations(log_of(ts), 30, 30)
    # counting oracle: samples t with floor(30 t / 1000) == f
    expected = [sum(1 for t in ts if (30 * t) // 1000 == f) for f in range(30)]
    assert acc.counts == expected
    assert set(acc.counts) == {8, 9}
    assert sum(acc.counts) == 250


def test_late_samples_are_dropped_and_counted(caplog):
    with caplog.at_level(logging.WARNING):
        acc = accumulate_fixations(log_of([0, 40, 5000, 9999]), 30, 16)
    assert acc.dropped == 2
    assert sum(acc.counts) + acc.dropped == 4
    assert "dropped 2" in caplog.text


def test_subjects_are_pooled():
    acc = accumulate_fixations(log_of([10, 10, 12], xs=[1, 2, 3], subjects=["a", "b", "c"]), 30, 2)
    assert sorted(acc.frames[0]) == [(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3000), max_size=200), st.sampled_from([24, 25, 30, 60]), st.integers(1, 40))
def test_accumulation_conserves_samples(ts, fps, frames):
    acc = accumulate_fixations(log_of(sorted(ts)), fps, frames)
    assert sum(acc.counts) + acc.dropped == len(ts)


def test_accumulation_rejects_bad_fps():
    with pytest.raises(ConfigError):
        accumulate_fixations(log_of([0]), 0, 4)


def test_log_validation():
    with pytest.raises(ContractViolation):
        log_of([0], xs=[64]).validate()
    with pytest.raises(ContractViolation):
        log_of([5, 3], subjects=["a", "a"]).validate()
    log_of([5, 3], subjects=["a", "b"]).validate()


def test_log_round_trip(tmp_path):
    fix = log_of([0, 4, 8], xs=[1.5, 2, 3], ys=[4, 5.25, 6], subjects=["p1", "p2", "p1"])
    write_fixation_log(fix, tmp_path / "fix.csv")
    assert (tmp_path / "fix.csv").read_text().splitlines()[0] == "timestamp_ms,x,y,subject_id"
    back = read_fixation_log(tmp_path / "fix.csv", 64, 48)
    assert back.timestamps.tolist() == [0, 4, 8]
    assert back.xs.tolist() == [1.5, 2, 3] and back.ys.tolist() == [4, 5.25, 6]
    assert back.subjects == ["p1", "p2", "p1"]


def test_log_header_is_checked(tmp_path):
    (tmp_path / "bad.csv").write_text("t,x,y\n0,1,1\n")
    with pytest.raises(DataError):
        read_fixation_log(tmp_path / "bad.csv", 10, 10)
    with pytest.raises(DataError):
        read_fixation_log(tmp_path / "missing.csv", 10, 10)


# ---- rendering -----------------------------------------------------------------------

def test_even_kernel_is_centred_on_odd_window():
    k = gaussian_kernel(50)
    assert k.shape == (51, 51)
    assert np.unravel_index(k.argmax(), k.shape) == (25, 25)
    assert abs(k.sum() - 1) < 1e-12
    # sigma = 50 / 6: ratio between centre and one pixel off-centre along an axis
    assert np.isclose(k[25, 26] / k[25, 25], np.exp(-1 / (2 * (50 / 6) ** 2)))
    assert gaussian_kernel(7).shape == (7, 7)


def test_single_fixation_peak_and_reflection_symmetry():
    m = render_gaze_map([(40, 30)], 61, 81, kernel_size=20)
    assert np.unravel_index(m.argmax(), m.shape) == (30, 40)
    assert m.max() == 1.0
    assert np.allclose(m, m[::-1, ::-1])  # centred fixation: symmetric about it
    assert np.allclose(m[:, 40 - 15: 40 + 16], m[:, 40 - 15: 40 + 16][:, ::-1])
    assert np.allclose(m[30 - 15: 30 + 16], m[30 - 15: 30 + 16][::-1])


def test_duplicate_points_normalise_to_the_same_map():
    a = render_gaze_map([(5, 6)], 20, 20, 6)
    b = render_gaze_map([(5, 6), (5, 6)], 20, 20, 6)
    assert np.allclose(a, b)


def test_no_points_renders_zeros():
    assert not render_gaze_map([], 8, 8).any()


def test_interior_mass_equals_kernel_sum_direct_loop():
    size = 5
    k = gaussian_kernel(size)
    img = render_unnormalised([(4, 4)], 9, 9, size)
    # direct double-loop convolution oracle on the 9x9 grid
    ref = np.zeros((9, 9))
    r = size // 2
    for y in range(9):
        for x in range(9):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if (y - dy, x - dx) == (4, 4):
                        ref[y, x] += k[dy + r, dx + r]
    assert np.allclose(img, ref, atol=1e-15)
    assert abs(img.sum() - k.sum()) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 23), st.integers(0, 15)), max_size=6),
       st.lists(st.tuples(st.integers(0, 23), st.integers(0, 15)), max_size=6))
def test_rendering_is_linear_before_normalisation(a, b):
    lhs = render_unnormalised(a + b, 16, 24, 7)
    rhs = render_unnormalised(a, 16, 24, 7) + render_unnormalised(b, 16, 24, 7)
    assert np.allclose(lhs, rhs, atol=1e-14)


def test_out_of_bounds_point_is_rejected():
    with pytest.raises(ContractViolation):
        render_gaze_map([(10, 3)], 8, 8)


def test_maps_from_log_rescale_and_normalise():
    fix = log_of([0, 40, 80], xs=[32, 32, 0], ys=[24, 24, 0], w=64, h=48)
    maps = gaze_maps_from_log(fix, 4, 24, 32, kernel_size=6)
    assert maps.shape == (4, 24, 32)
    assert np.unravel_index(maps[0].argmax(), maps[0].shape) == (12, 16)
    assert maps[0].max() == 1.0 and maps[3].max() == 0.0


def test_gaze_png_round_trip(tmp_path):
    maps = np.stack([render_gaze_map([(3, 4)], 16, 16, 6), np.zeros((16, 16))])
    save_gaze_maps(maps, tmp_path / "gaze")
    assert sorted(p.name for p in (tmp_path / "gaze").iterdir()) == ["gaze_00000.png", "gaze_00001.png"]
    back = load_gaze_maps(tmp_path / "gaze")
    assert np.abs(back - maps).max() <= 0.5 / 255 + 1e-7


# ---- tokenization ----------------------------------------------------------------------

def _embed():
    return ToyClip(EncoderConfig(dim=16, patch=8)).patch_embed


def test_token_count_and_zero_map_gives_bias_tokens():
    pe = _embed()
    z = tokenize_gaze(torch.zeros(2, 3, 32, 32), pe)
    assert z.shape == (2 * 16, 3, 16)
    assert torch.allclose(z, pe.bias.expand_as(z), atol=1e-7)


def test_full_scale_token_count():
    pe = nn.Conv2d(3, 4, 14, stride=14)
    assert tokenize_gaze(torch.zeros(1, 1, 224, 224), pe).shape[0] == 256


def test_one_bright_patch_changes_exactly_one_token():
    pe = _embed()
    for pr, pc in [(0, 0), (1, 2), (3, 3)]:
        m = torch.zeros(1, 2, 32, 32)
        m[0, 1, pr * 8 + 3, pc * 8 + 5] = 1.0
        z = tokenize_gaze(m, pe)
        changed = (z - pe.bias).abs().amax(-1) > 1e-7  # [n, F]
        assert changed.sum() == 1
        assert changed[pr * 4 + pc, 1]


def test_indivisible_map_is_rejected():
    with pytest.raises(ConfigError):
        tokenize_gaze(torch.zeros(1, 1, 30, 32), _embed())
