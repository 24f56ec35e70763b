import json
import math

import numpy as np
import pytest

from semidet.augment import ViewTransform, affine_identity, affine_translate
from semidet.geometry import BBox, Detection
from semidet.pseudo import (
    PseudoConfig,
    adso,
    build_pseudo_set,
    confidence_filter,
    fusion_box,
    fusion_box_detailed,
    fusion_similarity,
)

from oracles import literal_fusion


def _view(w=800, h=1000, m=None):
    return ViewTransform(m if m is not None else affine_identity(), w, h)


def _det(x1, y1, x2, y2, score=0.8):
    return Detection(BBox(x1, y1, x2, y2), score)


# ----------------------------------------------------------- confidence filter


def test_filter_boundary_inclusive():
    dets = [_det(0, 0, 10, 10, s) for s in (0.4, 0.5, 0.9)]
    kept = confidence_filter(dets, 0.5)
    assert [d.score for d in kept] == [0.5, 0.9]


def test_filter_sigma_near_zero_keeps_positive_scores():
    dets = [_det(0, 0, 10, 10, s) for s in (0.1, 0.7)]
    assert confidence_filter(dets, 1e-9) == dets


def test_filter_empty_input():
    assert confidence_filter([], 0.5) == []


def test_filter_rejects_bad_sigma():
    with pytest.raises(ValueError):
        confidence_filter([], 0.0)


# ------------------------------------------------------------------------ adso


def test_adso_pivot_continuity():
    assert adso(0.7, 0.7) == pytest.approx(0.7, abs=1e-15)
    # bracketing the pivot from both sides
    assert adso(0.7 - 1e-10, 0.7) == pytest.approx(0.7, abs=1e-9)
    assert adso(0.7 + 1e-10, 0.7) == pytest.approx(0.7, abs=1e-9)


def test_adso_identity_branch():
    assert adso(0.9, 0.7) == 0.9
    assert adso(0.75, 0.7) == 0.75


def test_adso_sine_branch_05():
    expected = 0.7 * math.sin((math.pi / 2) * (0.5 - 0.7) / 0.7) + 0.7
    got = adso(0.5, 0.7)
    assert got == pytest.approx(expected, abs=1e-15)
    assert got == pytest.approx(0.396281, abs=1e-6)


def test_adso_monotone_continuous_and_below_identity():
    xs = np.linspace(1e-6, 0.999999, 5001)
    ys = np.array([adso(float(x), 0.7) for x in xs])
    assert np.all(np.diff(ys) >= -1e-12)  # non-decreasing
    assert np.all(np.abs(np.diff(ys)) < 1e-2)  # no jumps on this grid
    below = xs < 0.7
    assert np.all(ys[below] <= xs[below] + 1e-12)
    assert np.all(ys[~below] == xs[~below])
    assert np.all((ys > 0) & (ys <= 1))


def test_adso_domain_errors():
    with pytest.raises(ValueError):
        adso(0.0, 0.7)
    with pytest.raises(ValueError):
        adso(1.5, 0.7)
    with pytest.raises(ValueError):
        adso(0.5, 1.0)


# ----------------------------------------------------------- fusion similarity


def test_similarity_zero_for_same_box():
    v = _view()
    b = BBox(10, 10, 30, 30)
    assert fusion_similarity(b, b, v) == 0.0


def test_similarity_hand_values():
    v = _view(800, 1000)
    a = BBox(90, 90, 110, 110)  # center (100, 100)
    b = BBox(96, 98, 116, 118)  # center (106, 108)
    assert fusion_similarity(a, b, v) == pytest.approx(100 / 1800, abs=1e-12)
    c = BBox(94, 93, 114, 113)  # center (104, 103)
    assert fusion_similarity(a, c, v) == pytest.approx(25 / 1800, abs=1e-12)


def test_similarity_rejects_bad_view():
    with pytest.raises(ValueError):
        fusion_similarity(BBox(0, 0, 1, 1), BBox(0, 0, 1, 1), _view(0, 100))


# ----------------------------------------------------------------- fusion box


def test_fusion_two_identical_boxes_merge_to_one():
    v = _view()
    dets = [_det(10, 10, 30, 30, 0.9), _det(10, 10, 30, 30, 0.6)]
    out = fusion_box(dets, 0.01, v)
    assert out == [BBox(10, 10, 30, 30)]


def test_fusion_worked_example_merge():
    # centers 5px apart in an 800x1000 view: xi ~ 0.0139 < 0.05
    v = _view(800, 1000)
    dets = [_det(90, 90, 110, 110, 0.8), _det(95, 94, 113, 112, 0.7)]
    out = fusion_box(dets, 0.05, v)
    assert out == [BBox(90, 90, 113, 112)]


def test_fusion_worked_example_no_merge():
    # centers (100,100) and (106,108): xi ~ 0.0556 >= 0.05
    v = _view(800, 1000)
    dets = [_det(90, 90, 110, 110, 0.8), _det(96, 98, 116, 118, 0.7)]
    out = fusion_box(dets, 0.05, v)
    assert out == [BBox(90, 90, 110, 110), BBox(96, 98, 116, 118)]


def test_fusion_single_box_passthrough():
    v = _view()
    dets = [_det(1, 2, 3, 4, 0.9)]
    out, flags = fusion_box_detailed(dets, 0.05, v)
    assert out == dets and flags == [False]


def test_fusion_merged_score_is_max():
    v = _view()
    dets = [_det(10, 10, 30, 30, 0.55), _det(11, 11, 31, 31, 0.95)]
    out, flags = fusion_box_detailed(dets, 0.05, v)
    assert len(out) == 1 and flags == [True]
    assert out[0].score == 0.95


def test_fusion_requires_positive_mu():
    with pytest.raises(ValueError):
        fusion_box([], 0.0, _view())


def test_fusion_matches_literal_transcription_1000():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n = int(rng.integers(0, 31))
        w = int(rng.integers(100, 1200))
        h = int(rng.integers(100, 1200))
        v = _view(w, h)
        xy = rng.uniform(0, min(w, h) * 0.8, size=(n, 2))
        wh = rng.uniform(4, 60, size=(n, 2))
        scores = rng.uniform(0.5, 1.0, size=n)
        mu = float(rng.uniform(0.001, 0.15))
        dets = [
            _det(x, y, x + bw, y + bh, float(s))
            for (x, y), (bw, bh), s in zip(xy, wh, scores)
        ]
        got, _ = fusion_box_detailed(dets, mu, v)
        ref = literal_fusion(
            [d.box.as_tuple() for d in dets], [d.score for d in dets], mu, w + h
        )
        got_set = [(d.box.as_tuple(), d.score) for d in got]
        assert got_set == ref, f"trial {trial}: mismatch"


def test_fusion_properties():
    rng = np.random.default_rng(1)
    v = _view(500, 500)
    for _ in range(200):
        n = int(rng.integers(1, 15))
        xy = rng.uniform(0, 400, size=(n, 2))
        wh = rng.uniform(5, 50, size=(n, 2))
        dets = [
            _det(x, y, x + bw, y + bh, float(s))
            for (x, y), (bw, bh), s in zip(xy, wh, rng.uniform(0.5, 1, size=n))
        ]
        out = fusion_box(dets, 0.02, v)
        assert len(out) <= n
        # every output box contains at least one input box
        for ob in out:
            assert any(
                ob.x1 <= d.box.x1 and ob.y1 <= d.box.y1
                and ob.x2 >= d.box.x2 and ob.y2 >= d.box.y2
                for d in dets
            )


def test_fusion_mu_to_zero_is_identity_for_distinct_centers():
    v = _view(500, 500)
    dets = [_det(0, 0, 10, 10, 0.9), _det(20, 0, 30, 10, 0.8), _det(0, 20, 10, 30, 0.7)]
    out = fusion_box(dets, 1e-12, v)
    assert out == [d.box for d in dets]


# ------------------------------------------------------------ build_pseudo_set


def _cfg(**kw):
    return PseudoConfig(**kw)


def test_build_empty_when_nothing_above_sigma():
    v = _view(128, 128)
    dets = [_det(10, 10, 30, 30, 0.2), _det(40, 40, 60, 60, 0.49)]
    ps = build_pseudo_set(dets, v, v, _cfg())
    assert ps.cls_branch == [] and ps.reg_branch == []


def test_build_single_detection_identity_branches():
    v = _view(128, 128)
    dets = [_det(10, 10, 30, 30, 0.8)]
    ps = build_pseudo_set(dets, v, v, _cfg())
    assert len(ps.cls_branch) == 1
    det, w = ps.cls_branch[0]
    assert det.box == BBox(10, 10, 30, 30)
    assert w == 0.8  # identity branch of the reweighting
    assert ps.reg_branch == [BBox(10, 10, 30, 30)]


def test_build_adso_disabled_unit_weights():
    v = _view(128, 128)
    dets = [_det(10, 10, 30, 30, 0.55), _det(60, 60, 90, 90, 0.9)]
    ps = build_pseudo_set(dets, v, v, _cfg(adso_enabled=False))
    assert [w for _, w in ps.cls_branch] == [1.0, 1.0]


def test_build_fusion_disabled_keeps_all():
    v = _view(128, 128)
    dets = [_det(10, 10, 30, 30, 0.8), _det(11, 11, 31, 31, 0.7)]
    ps_on = build_pseudo_set(dets, v, v, _cfg())
    ps_off = build_pseudo_set(dets, v, v, _cfg(fusion_enabled=False))
    assert len(ps_on.reg_branch) == 1
    assert len(ps_off.reg_branch) == 2
    # classification branch unaffected by fusion
    assert len(ps_on.cls_branch) == len(ps_off.cls_branch) == 2


def test_build_maps_to_student_view():
    t_view = _view(128, 128)
    s_view = _view(128, 128, affine_translate(5.0, 3.0))
    dets = [_det(10, 10, 30, 30, 0.8)]
    ps = build_pseudo_set(dets, t_view, s_view, _cfg())
    det, _ = ps.cls_branch[0]
    assert det.box == BBox(15.0, 13.0, 35.0, 33.0)
    assert ps.reg_branch[0] == BBox(15.0, 13.0, 35.0, 33.0)


def test_build_weights_follow_surviving_boxes():
    # first detection maps off-view and is dropped; weights must realign
    t_view = _view(128, 128)
    s_view = _view(128, 128, affine_translate(125.5, 0.0))
    dets = [_det(2, 2, 7, 7, 0.55), _det(1, 40, 21, 60, 0.9)]
    ps = build_pseudo_set(dets, t_view, s_view, _cfg())
    assert len(ps.cls_branch) == 1
    det, w = ps.cls_branch[0]
    assert w == 0.9


def test_pseudo_set_json_serializable():
    v = _view(128, 128)
    dets = [_det(10, 10, 30, 30, 0.8), _det(11, 11, 31, 31, 0.7)]
    ps = build_pseudo_set(dets, v, v, _cfg())
    blob = json.dumps(ps.to_json_dict())
    parsed = json.loads(blob)
    assert parsed["sigma"] == 0.5 and parsed["mu"] == 0.05 and parsed["r_i"] == 0.7
    assert len(parsed["cls_branch"]) == 2
    assert parsed["cls_branch"][0]["weight"] == pytest.approx(0.8)
    assert len(parsed["reg_branch"]) == 1
    assert parsed["reg_branch"][0]["fused"] is True
