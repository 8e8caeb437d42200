import numpy as np
import pytest

from msdetr.losses import GroundTruth
from msdetr.validation import check_images, check_targets


def test_single_image_promoted():
    out = check_images(np.zeros((3, 8, 8), dtype=np.uint8))
    assert out.shape == (1, 3, 8, 8) and out.dtype == np.float64


@pytest.mark.parametrize("x, err, match", [
    (np.zeros((2, 1, 8, 8)), ValueError, "shape"),
    (np.zeros((0, 3, 8, 8)), ValueError, "no images"),
    (np.full((1, 3, 8, 8), np.nan), ValueError, "NaN"),
    (np.array([["a"]]), TypeError, "numeric"),
])
def test_bad_images(x, err, match):
    with pytest.raises(err, match=match):
        check_images(x)


def test_divisor_enforced():
    with pytest.raises(ValueError, match="multiples of 16"):
        check_images(np.zeros((1, 3, 24, 32)), divisor=16)


def test_target_forms_accepted():
    b = np.array([[0.5, 0.5, 0.2, 0.2]])
    ys = check_targets([GroundTruth(b, [1]), {"boxes": b, "labels": [2]}, (b, [0])], 3, 5)
    assert all(isinstance(g, GroundTruth) for g in ys)
    assert [int(g.labels[0]) for g in ys] == [1, 2, 0]


def test_empty_target_allowed():
    (g,) = check_targets([{"boxes": np.zeros((0, 4)), "labels": []}])
    assert len(g) == 0


@pytest.mark.parametrize("t, match", [
    ({"boxes": [[0.5, 0.5, 0.2, 0.2]]}, "lacks key"),
    ({"boxes": [[1.5, 0.5, 0.2, 0.2]], "labels": [0]}, "centres"),
    ({"boxes": [[0.5, 0.5, 0.0, 0.2]], "labels": [0]}, "width"),
    ({"boxes": [[0.5, np.inf, 0.2, 0.2]], "labels": [0]}, "finite"),
    ({"boxes": [[0.5, 0.5, 0.2, 0.2]], "labels": [7]}, "labels"),
])
def test_bad_targets(t, match):
    with pytest.raises(ValueError, match=match):
        check_targets([t], n_classes=5)


def test_target_count_mismatch():
    with pytest.raises(ValueError, match="2 targets for 3"):
        check_targets([{"boxes": np.zeros((0, 4)), "labels": []}] * 2, 3)


def test_unknown_target_type():
    with pytest.raises(TypeError, match="target 0"):
        check_targets([42])
