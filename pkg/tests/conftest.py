import pytest

from detensemble.dataset import Detection, GroundTruthBox
from detensemble.geometry import BoundingBox

ACCEPTANCE_LINES: list[str] = []


def det(x1, y1, x2, y2, score=0.9, detector_id=0, class_id=0, image_id="im0", recovered=False):
    return Detection(BoundingBox(x1, y1, x2, y2), class_id, score, detector_id, image_id, recovered)


def gt(x1, y1, x2, y2, class_id=0, image_id="im0"):
    return GroundTruthBox(BoundingBox(x1, y1, x2, y2), class_id, image_id)


@pytest.fixture
def record_criterion():
    """Record a pass/fail line for the acceptance summary, then assert."""
    def _record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
