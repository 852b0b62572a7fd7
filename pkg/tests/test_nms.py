import pytest
from hypothesis import given, settings, strategies as st

from detensemble.errors import ValidationError
from detensemble.geometry import iou
from detensemble.nms import NmsConfig, nms_fuse

from conftest import det


def test_single_detection_is_identity():
    d = det(0, 0, 5, 5)
    assert nms_fuse([d]) == [d]


def test_overlapping_box_suppressed():
    b1 = det(0, 0, 10, 10, 0.9, 0)
    b2 = det(1, 1, 11, 11, 0.8, 1)
    b3 = det(20, 20, 30, 30, 0.7, 2)
    # overlap 9*9=81, union 100+100-81=119
    assert iou(b1.box, b2.box) == pytest.approx(81 / 119)
    assert nms_fuse([b2, b3, b1]) == [b1, b3]


def test_classes_are_independent():
    a = det(0, 0, 10, 10, 0.9, class_id=0)
    b = det(0, 0, 10, 9, 0.8, class_id=1)
    assert iou(a.box, b.box) == pytest.approx(0.9)
    assert nms_fuse([a, b]) == [a, b]


def test_threshold_is_strict():
    a = det(0, 0, 10, 10, 0.9)
    b = det(0, 0, 10, 5, 0.8)  # iou exactly 0.5
    assert nms_fuse([a, b], NmsConfig(0.5)) == [a, b]


def test_tie_break_by_detector_id():
    a = det(0, 0, 10, 10, 0.8, detector_id=2)
    b = det(0, 0, 10, 10, 0.8, detector_id=1)
    assert nms_fuse([a, b]) == [b]


def test_config_validation():
    with pytest.raises(ValidationError):
        NmsConfig(0.0)


detections = st.lists(
    st.builds(lambda x, y, w, h, s, c, d: det(x, y, x + w, y + h, s, d, c),
              st.integers(0, 40), st.integers(0, 40), st.integers(1, 20), st.integers(1, 20),
              st.floats(0, 1), st.integers(0, 1), st.integers(0, 2)),
    max_size=25)


@settings(max_examples=200)
@given(detections, st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_properties(dets, thr):
    cfg = NmsConfig(thr)
    out = nms_fuse(dets, cfg)
    assert all(d in dets for d in out)
    for i, a in enumerate(out):
        for b in out[i + 1:]:
            if a.class_id == b.class_id:
                assert iou(a.box, b.box) <= thr
    for c in {d.class_id for d in dets}:
        top = max(d.score for d in dets if d.class_id == c)
        assert any(d.class_id == c and d.score == top for d in out)
    assert nms_fuse(out, cfg) == out
