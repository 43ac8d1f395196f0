import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from egocrash.encoders import ToyClip
from egocrash.errors import ContractViolation, DegenerateInputError, NumericError
from egocrash.metrics import (
    ColorDetector, MetricReport, afd, clip_score, clip_score_from_embeddings, frechet_distance,
    frechet_from_embeddings, frechet_from_stats, gazed_region, iou, temp_c, temp_c_from_embeddings,
)
from egocrash.scenario import generate_scenario
from egocrash.gaze import render_gaze_map


# ---- alignment and temporal consistency -------------------------------------------------

def test_clip_score_extremes():
    v = np.array([1.0, 2.0, -0.5])
    assert clip_score_from_embeddings(np.stack([v, 3 * v]), v) == pytest.approx(100.0, abs=1e-12)
    assert clip_score_from_embeddings(np.stack([v, -v]), v) == pytest.approx(0.0, abs=1e-12)
    assert clip_score_from_embeddings(np.stack([-v, -2 * v]), v) == pytest.approx(-100.0, abs=1e-12)


def test_clip_score_orthogonal_is_zero():
    assert clip_score_from_embeddings(np.array([[1.0, 0.0], [3.0, 0.0]]), np.array([0.0, 2.0])) == 0.0


def test_clip_score_zero_norm_is_degenerate():
    with pytest.raises(DegenerateInputError):
        clip_score_from_embeddings(np.zeros((2, 3)), np.ones(3))
    with pytest.raises(DegenerateInputError):
        clip_score_from_embeddings(np.ones((2, 3)), np.zeros(3))


def test_clip_score_through_the_encoder_is_frame_averaged():
    enc = ToyClip()
    rec = generate_scenario(2)
    got = clip_score(rec.frames, rec.prompt_f, enc)
    with torch.no_grad():
        f = enc.embed_frames(torch.from_numpy(rec.frames)).double().numpy()
        t = enc.pooled_text(rec.prompt_f).double().numpy()
    ref = 100 * np.mean([fi @ t / (np.linalg.norm(fi) * np.linalg.norm(t)) for fi in f])
    assert got == pytest.approx(ref, abs=1e-4)


def test_entity_word_prompt_scores_higher_on_its_clip():
    enc = ToyClip()
    for seed in range(5):
        rec = generate_scenario(seed)
        own = clip_score(rec.frames, rec.meta.entity_class, enc)
        for other in {"pedestrian", "truck", "car", "cyclist", "motorbike"} - {rec.meta.entity_class}:
            assert own > clip_score(rec.frames, other, enc)


def test_temp_c_constant_and_alternating():
    v = np.array([0.3, -1.0, 2.0])
    assert temp_c_from_embeddings(np.stack([v] * 5)) == pytest.approx(1.0, abs=1e-12)
    assert temp_c_from_embeddings(np.stack([v, -v, v, -v])) == pytest.approx(-1.0, abs=1e-12)
    clip = np.tile(np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32), (4, 1, 1, 1))
    assert temp_c(clip, ToyClip()) == pytest.approx(1.0, abs=1e-6)


def test_temp_c_matches_pairwise_loop():
    e = np.random.default_rng(1).normal(size=(7, 5))
    ref = 0.0
    for i in range(6):
        ref += np.dot(e[i], e[i + 1]) / np.sqrt(np.dot(e[i], e[i]) * np.dot(e[i + 1], e[i + 1]))
    assert temp_c_from_embeddings(e) == pytest.approx(ref / 6, abs=1e-8)


def test_temp_c_needs_two_frames():
    with pytest.raises(ContractViolation):
        temp_c_from_embeddings(np.ones((1, 3)))


# ---- Fréchet distance --------------------------------------------------------------------

def test_frechet_scalar_fixture():
    assert frechet_from_stats([0.0], [[1.0]], [3.0], [[4.0]]) == pytest.approx(10.0, abs=1e-6)


def test_frechet_diagonal_decomposes_per_dimension():
    rng = np.random.default_rng(2)
    mu_a, mu_b = rng.normal(size=4), rng.normal(size=4)
    va, vb = rng.uniform(0.1, 3, 4), rng.uniform(0.1, 3, 4)
    ref = sum((ma - mb) ** 2 + a + b - 2 * np.sqrt(a * b) for ma, mb, a, b in zip(mu_a, mu_b, va, vb))
    assert frechet_from_stats(mu_a, np.diag(va), mu_b, np.diag(vb)) == pytest.approx(ref, abs=1e-9)


def test_frechet_identical_sets_is_zero():
    e = np.random.default_rng(3).normal(size=(10, 6))
    assert frechet_from_embeddings(e, e) == pytest.approx(0.0, abs=1e-6)
    enc = ToyClip()
    clips = [generate_scenario(s).frames for s in range(4)]
    assert frechet_distance(clips, clips, enc) == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(2, 12))
def test_frechet_symmetric_and_nonnegative(seed, na, nb):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(na, 4))
    b = rng.normal(loc=0.5, size=(nb, 4)) * rng.uniform(0.2, 3)
    d_ab, d_ba = frechet_from_embeddings(a, b), frechet_from_embeddings(b, a)
    assert d_ab >= 0 and abs(d_ab - d_ba) < 1e-6


def test_frechet_non_psd_is_a_numeric_error():
    bad = np.array([[1.0, 0.0], [0.0, -2.0]])
    with pytest.raises(NumericError, match="condition"):
        frechet_from_stats([0, 0], np.eye(2) * 4, [0, 0], bad)


def test_frechet_set_size_contract():
    with pytest.raises(ContractViolation):
        frechet_distance([np.zeros((2, 3, 32, 32))], [np.zeros((2, 3, 32, 32))] * 2, ToyClip())


# ---- boxes and affordance -------------------------------------------------------------------

boxes = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_iou_range_and_self_overlap(a, b):
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0
    assert iou(a, b) == iou(b, a)


def test_iou_cases():
    assert iou((2, 2, 4, 4), (0, 0, 10, 10)) > 0
    assert iou((0, 0, 2, 2), (2, 2, 4, 4)) == 0
    assert iou(None, (0, 0, 1, 1)) == 0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(2 / 6)


def test_afd_golden_fixture():
    g = (0, 0, 10, 10)
    dets = [(1, 1, 3, 3), (20, 20, 22, 22), (8, 8, 12, 12), None, (9, 0, 11, 1)]
    assert afd(dets, [g] * 5) == 60.0


def test_afd_contracts():
    with pytest.raises(ContractViolation):
        afd([], [])
    with pytest.raises(ContractViolation):
        afd([(0, 0, 1, 1)], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(boxes, boxes), min_size=1, max_size=12), boxes)
def test_afd_monotone(checks, extra):
    dets = [c[0] for c in checks]
    regs = [c[1] for c in checks]
    base = afd(dets, regs)
    # an overlapping check never lowers the rate
    assert afd(dets + [extra], regs + [extra]) >= base
    # a disjoint check never raises it
    far = (extra[0] + 100, extra[1] + 100, extra[2] + 100, extra[3] + 100)
    assert afd(dets + [extra], regs + [far]) <= base


def test_gazed_region_single_peak_is_centred():
    m = render_gaze_map([(12, 9)], 24, 32, 10)
    x0, y0, x1, y1 = gazed_region(m)
    assert (x0 + x1 - 1) / 2 == 12 and (y0 + y1 - 1) / 2 == 9


def test_gazed_region_uniform_map_at_threshold_is_full_frame():
    assert gazed_region(np.full((6, 9), 0.5), threshold=1.0) == (0, 0, 9, 6)
    assert gazed_region(np.full((6, 9), 0.5)) == (0, 0, 9, 6)


def test_gazed_region_two_blobs_matches_pixel_scan():
    m = np.maximum(render_gaze_map([(4, 5)], 30, 40, 6), 0.8 * render_gaze_map([(33, 22)], 30, 40, 6))
    got = gazed_region(m, 0.5)
    peak = m.max()
    xs, ys = [], []
    for y in range(30):
        for x in range(40):
            if m[y, x] >= 0.5 * peak:
                xs.append(x)
                ys.append(y)
    assert got == (min(xs), min(ys), max(xs) + 1, max(ys) + 1)
    assert got[0] <= 4 < got[2] and got[0] <= 33 < got[2]


def test_gazed_region_empty_map():
    assert gazed_region(np.zeros((5, 5))) is None


def test_color_detector_recovers_ground_truth_boxes():
    det = ColorDetector()
    for seed in range(6):
        rec = generate_scenario(seed)
        assert det(rec.frames, rec.meta.entity_class) == [tuple(b) for b in rec.entity_boxes]
        assert det(rec.frames, "horse") == [None] * len(rec.frames)


# ---- report ------------------------------------------------------------------------------

def test_report_text_is_stable_and_round_trips():
    rep = MetricReport(values={"temp_c": 0.5, "clip_s": 12.3456789, "afd": 60.0},
                       settings={"strength": 0.6, "clips": 2, "mode": "v2v"},
                       per_clip=[{"temp_c": 0.4}, {"temp_c": 0.6}])
    text = rep.to_text()
    assert text == MetricReport(dict(reversed(list(rep.values.items()))), rep.settings, rep.per_clip).to_text()
    assert text.splitlines()[:4] == ["# egocrash metric report v1", "afd\t60.000000", "clip_s\t12.345679",
                                     "temp_c\t0.500000"]
    back = MetricReport.from_text(text)
    assert back.settings == {"strength": 0.6, "clips": 2, "mode": "v2v"}
    assert back.per_clip == [{"temp_c": 0.4}, {"temp_c": 0.6}]
    assert back.to_text() == text
