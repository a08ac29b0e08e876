import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egoaco import kernels

shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 20), st.integers(1, 20),
                   st.sampled_from([1, 3, 5]))


@given(shapes, st.integers(0, 2**31 - 1))
def test_backends_agree(shape, seed):
    B, C, O, H, W, k = shape
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((B, C, H, W)), rng.standard_normal((O, C, k, k)), rng.standard_normal(O)
    g = rng.standard_normal((B, O, H, W))
    f_np, b_np = kernels.get_kernels("numpy")
    f_nb, b_nb = kernels.get_kernels("numba")
    np.testing.assert_allclose(f_nb(x, w, b), f_np(x, w, b), atol=1e-10)
    for got, want in zip(b_nb(x, w, g), b_np(x, w, g)):
        np.testing.assert_allclose(got, want, atol=1e-10)


@pytest.mark.parametrize("H", [4, 16, 32])
def test_both_numba_paths_agree_with_numpy(rng, H):
    # 16x16 and larger maps take the per-sample path
    x, w, b = rng.standard_normal((2, 3, H, H)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    g = rng.standard_normal((2, 4, H, H))
    np.testing.assert_allclose(kernels.conv2d_forward_numba(x, w, b), kernels.conv2d_forward_numpy(x, w, b), atol=1e-10)
    gx, gw, gb = kernels.conv2d_backward_numba(x, w, g, need_x=False)
    assert gx is None
    np.testing.assert_allclose(gw, kernels.conv2d_backward_numpy(x, w, g)[1], atol=1e-10)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_kernels("cuda")


@pytest.mark.parametrize("flag", ["numpy", "numba"])
def test_environment_flag_selects_backend(flag):
    env = {**os.environ, "EGOACO_KERNELS": flag}
    out = subprocess.run([sys.executable, "-c", "from egoaco import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == flag


def test_bad_environment_flag_fails_at_import():
    env = {**os.environ, "EGOACO_KERNELS": "fortran"}
    out = subprocess.run([sys.executable, "-c", "import egoaco.kernels"], env=env, capture_output=True, text=True)
    assert out.returncode != 0 and "EGOACO_KERNELS" in out.stderr
