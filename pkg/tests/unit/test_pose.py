import math

import numpy as np
import pytest

from scenepose.core.pose import (EmptyInputError, InvalidQuaternionError, Pose, PoseError, Quaternion,
                                 canonicalize, canonicalize_array, median_errors, normalize, orientation_error_deg,
                                 pose_error, position_error)


@pytest.fixture()
def random_unit_quaternions():
    """Generates normalized quaternions with both signs of w"""
    rng = np.random.default_rng(3)
    values = rng.normal(size=(50, 4))
    return [normalize(Quaternion.from_array(v)) for v in values]


def _close(q: Quaternion, expected, tol=1e-12):
    return np.allclose(q.as_array(), expected, atol=tol)


def test_normalize_examples():
    assert _close(normalize(Quaternion(2, 0, 0, 0)), [1, 0, 0, 0])
    assert _close(normalize(Quaternion(1, 0, 0, 0)), [1, 0, 0, 0])
    assert _close(normalize(Quaternion(1, 1, 1, 1)), [0.5, 0.5, 0.5, 0.5])


def test_normalize_rejects_zero():
    with pytest.raises(InvalidQuaternionError):
        normalize(Quaternion(0, 0, 0, 0))


def test_normalize_scale_invariant(random_unit_quaternions):
    for q in random_unit_quaternions:
        scaled = Quaternion(*(3.7 * q.as_array()))
        assert np.allclose(normalize(scaled).as_array(), normalize(q).as_array(), atol=1e-12)
        assert abs(normalize(scaled).norm() - 1.0) <= 1e-9


def test_canonicalize_examples():
    assert _close(canonicalize(Quaternion(-1, 0, 0, 0)), [1, 0, 0, 0])
    assert _close(canonicalize(Quaternion(0, -1, 0, 0)), [0, 1, 0, 0])
    assert _close(canonicalize(Quaternion(0.5, 0.5, 0.5, 0.5)), [0.5, 0.5, 0.5, 0.5])


def test_canonicalize_idempotent(random_unit_quaternions):
    for q in random_unit_quaternions:
        once = canonicalize(q)
        assert canonicalize(once) == once
        assert once.w >= 0


def test_canonicalize_array_matches_scalar(random_unit_quaternions):
    batch = np.stack([q.as_array() for q in random_unit_quaternions])
    expected = np.stack([canonicalize(q).as_array() for q in random_unit_quaternions])
    assert np.array_equal(canonicalize_array(batch), expected)


def test_position_error_examples():
    assert position_error((0, 0, 0), (0, 0, 0)) == 0
    assert position_error((1, 2, 3), (1, 2, 3)) == 0
    assert position_error((0, 0, 0), (3, 4, 0)) == 5


def test_position_error_triangle_inequality():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b, c = rng.normal(size=(3, 3))
        assert position_error(a, c) <= position_error(a, b) + position_error(b, c) + 1e-12


def test_orientation_error_examples():
    identity = Quaternion(1, 0, 0, 0)
    quarter = Quaternion(math.cos(math.pi / 4), math.sin(math.pi / 4), 0, 0)
    assert orientation_error_deg(identity, identity) == 0
    assert orientation_error_deg(quarter, identity) == pytest.approx(90.0, abs=1e-9)
    assert orientation_error_deg(-identity, identity) == 0


def test_orientation_error_properties(random_unit_quaternions):
    for q, r in zip(random_unit_quaternions, reversed(random_unit_quaternions)):
        assert orientation_error_deg(q, q) == 0
        assert orientation_error_deg(q, -q) == 0
        assert orientation_error_deg(q, r) == orientation_error_deg(r, q)
        assert 0.0 <= orientation_error_deg(q, r) <= 180.0


def test_orientation_error_exactly_zero_for_same_rotation():
    rng = np.random.default_rng(11)
    for values in rng.normal(size=(1000, 4)):
        q = normalize(Quaternion.from_array(values))
        assert orientation_error_deg(q, q) == 0
        assert orientation_error_deg(q, -q) == 0
        assert orientation_error_deg(Quaternion(*(2.5 * q.as_array())), q) < 1e-12


def test_orientation_error_small_angles():
    for degrees in (1e-4, 0.01, 1.0, 179.0):
        half = math.radians(degrees) / 2
        rotated = Quaternion(math.cos(half), 0.0, 0.0, math.sin(half))
        assert orientation_error_deg(rotated, Quaternion(1, 0, 0, 0)) == pytest.approx(degrees, rel=1e-9)
    opposite = Quaternion(0, 1, 0, 0)
    assert orientation_error_deg(opposite, Quaternion(1, 0, 0, 0)) == pytest.approx(180.0, abs=1e-9)


def test_orientation_error_rejects_zero():
    with pytest.raises(InvalidQuaternionError):
        orientation_error_deg(Quaternion(0, 0, 0, 0), Quaternion(1, 0, 0, 0))


def test_pose_is_stored_canonical():
    pose = Pose.from_arrays([1, 2, 3], [-2, 0, 0, 0])
    assert pose.orientation == Quaternion(1.0, 0.0, 0.0, 0.0)
    assert pose.position == (1.0, 2.0, 3.0)


def test_pose_error():
    estimate = Pose.from_arrays([0, 0, 0], [1, 0, 0, 0])
    truth = Pose.from_arrays([3, 4, 0], [-1, 0, 0, 0])
    error = pose_error(estimate, truth)
    assert error.position_err == 5
    assert error.orientation_err == 0


def test_median_errors():
    assert median_errors([PoseError(1, 10)]) == PoseError(1, 10)
    assert median_errors([PoseError(1, 1), PoseError(3, 3), PoseError(2, 2)]) == PoseError(2, 2)
    assert median_errors([PoseError(1, 1), PoseError(2, 4)]) == PoseError(1, 1)


def test_median_errors_empty():
    with pytest.raises(EmptyInputError):
        median_errors([])


def test_pose_error_validation():
    with pytest.raises(ValueError):
        PoseError(-1.0, 0.0)
    with pytest.raises(ValueError):
        PoseError(0.0, 181.0)
