import numpy as np
import pytest

from actdiff.layout import ProblemDims, assemble_batch, assemble_x0, decode_actions, impose_conditions


@pytest.fixture
def dims():
    return ProblemDims(T=3, A=4, C=2, O=5)


def test_assemble_shape_and_blocks(dims):
    o_s, o_g = np.arange(5.0), -np.arange(5.0)
    x = assemble_x0(1, [3, 0, 2], o_s, o_g, dims)
    assert x.shape == (3, 11)
    np.testing.assert_array_equal(x[:, dims.task_slice], [[0, 1]] * 3)
    np.testing.assert_array_equal(x[:, dims.action_slice], np.eye(4)[[3, 0, 2]])
    np.testing.assert_array_equal(x[0, dims.obs_slice], o_s)
    np.testing.assert_array_equal(x[2, dims.obs_slice], o_g)
    np.testing.assert_array_equal(x[1, dims.obs_slice], np.zeros(5))
    np.testing.assert_array_equal(decode_actions(x, dims), [3, 0, 2])


@pytest.mark.parametrize("c,acts", [(2, [0, 0, 0]), (-1, [0, 0, 0]), (0, [0, 4, 0]), (0, [0, 1])])
def test_assemble_rejects_bad_labels(dims, c, acts):
    with pytest.raises(ValueError):
        assemble_x0(c, acts, np.zeros(5), np.zeros(5), dims)


def test_assemble_rejects_bad_observation_dim(dims):
    with pytest.raises(ValueError):
        assemble_x0(0, [0, 1, 2], np.zeros(4), np.zeros(5), dims)


@pytest.mark.parametrize("kw", [dict(T=1, A=2, C=2, O=2), dict(T=3, A=0, C=2, O=2), dict(T=3, A=2, C=2, O=-1)])
def test_dims_validation(kw):
    with pytest.raises(ValueError):
        ProblemDims(**kw)


def test_decode_tie_break_and_shift_invariance():
    dims = ProblemDims(T=2, A=4, C=1, O=1)
    x = np.zeros((2, 6))
    x[0, 1:5] = [0.1, 0.9, 0.9, 0.2]
    x[1, 1:5] = [0.3, -0.2, 0.5, 0.4]
    np.testing.assert_array_equal(decode_actions(x, dims), [1, 2])
    x[1, 1:5] += 7.0
    np.testing.assert_array_equal(decode_actions(x, dims), [1, 2])


def test_impose_conditions_overwrites(dims):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 11))
    o_s, o_g = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    before = x[..., dims.action_slice].copy()
    impose_conditions(x, [0, 1], o_s, o_g, dims)
    ref = assemble_batch([0, 1], [[0, 0, 0], [1, 1, 1]], o_s, o_g, dims)
    np.testing.assert_array_equal(x[..., dims.task_slice], ref[..., dims.task_slice])
    np.testing.assert_array_equal(x[..., dims.obs_slice], ref[..., dims.obs_slice])
    np.testing.assert_array_equal(x[..., dims.action_slice], before)
