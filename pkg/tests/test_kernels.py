import os
import subprocess
import sys

import pytest

from dcss import kernels


def backend_with(env_value):
    env = dict(os.environ, DCSS_DISABLE_NUMBA=env_value)
    code = "from dcss import kernels; print(kernels.backend_name())"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True).stdout.strip()


def test_env_flag_forces_numpy_path():
    assert backend_with("1") == "numpy"


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not available")
def test_numba_is_default_when_installed():
    assert backend_with("") == "numba"


@pytest.mark.parametrize("size,k,stride,pad,expect", [(5, 3, 1, 1, 5), (5, 3, 2, 1, 3), (7, 1, 2, 0, 4)])
def test_output_size(size, k, stride, pad, expect):
    assert kernels.output_size(size, k, stride, pad) == expect


def test_output_size_rejects_partial_windows():
    with pytest.raises(ValueError):
        kernels.output_size(4, 3, 2, 1)
    with pytest.raises(ValueError):
        kernels.output_size(2, 5, 1, 0)
