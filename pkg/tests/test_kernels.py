import os
import subprocess
import sys

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from terracost import _jit, kernels

grids = arrays(np.float32, st.tuples(st.integers(2, 9), st.integers(2, 9)), elements=st.floats(-100, 100, width=32))


def both(f):
    """The compiled kernel and the same source run by the interpreter."""
    return f, getattr(f, "py_func", f)


@given(grids, st.data())
def test_bilinear_paths_agree(data, draw):
    h, w = data.shape
    n = draw.draw(st.integers(1, 30))
    rows = np.array(draw.draw(st.lists(st.floats(0, h - 1), min_size=n, max_size=n)))
    cols = np.array(draw.draw(st.lists(st.floats(0, w - 1), min_size=n, max_size=n)))
    ref = kernels.bilinear_numpy(data, rows, cols)
    for f in both(kernels.bilinear_loop):
        assert np.allclose(f(data, rows, cols), ref, rtol=1e-12, atol=1e-9)


@given(grids, st.data())
def test_nearest_paths_agree(data, draw):
    h, w = data.shape
    rows = np.array(draw.draw(st.lists(st.floats(0, h - 1), min_size=5, max_size=5)))
    cols = np.array(draw.draw(st.lists(st.floats(0, w - 1), min_size=5, max_size=5)))
    ref = kernels.nearest_numpy(data, rows, cols)
    for f in both(kernels.nearest_loop):
        assert np.array_equal(f(data, rows, cols), ref)


def test_nearest_ties_round_down():
    data = np.array([[1, 2], [3, 4]], np.float32)
    assert kernels.nearest_numpy(data, np.array([0.5]), np.array([0.5]))[0] == 1


@given(st.integers(1, 3), st.integers(3, 9), st.integers(1, 4), st.sampled_from([1, 3]), st.sampled_from([1, 2]))
def test_im2col_col2im_paths_agree(n, side, c, k, stride):
    rng = np.random.default_rng(side * 31 + c)
    x = rng.standard_normal((n, side, side, c))
    if side < k:
        return
    ref = kernels.im2col_numpy(x, k, stride)
    for f in both(kernels.im2col_loop):
        assert np.array_equal(f(x, k, stride), ref)
    cols = rng.standard_normal(ref.shape)
    back = kernels.col2im_numpy(cols, side, side, stride)
    for f in both(kernels.col2im_loop):
        assert np.allclose(f(cols, side, side, stride), back, rtol=1e-12, atol=1e-12)


@given(st.integers(3, 7), st.integers(1, 3), st.sampled_from([1, 2]))
def test_col2im_is_adjoint_of_im2col(side, c, stride):
    # <im2col(x), y> == <x, col2im(y)> for every x, y
    rng = np.random.default_rng(side + 7 * c)
    x = rng.standard_normal((2, side, side, c))
    cols = kernels.im2col_numpy(x, 3, stride)
    y = rng.standard_normal(cols.shape)
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x * kernels.col2im_numpy(y, side, side, stride)))
    assert np.isclose(lhs, rhs, rtol=1e-10)


def test_backend_flag_selects_fallback():
    env = dict(os.environ, TERRACOST_DISABLE_JIT="1")
    code = "from terracost import _jit, kernels; print(_jit.backend(), kernels.bilinear is kernels.bilinear_numpy)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]
    assert _jit.backend() in ("numba", "numpy")
