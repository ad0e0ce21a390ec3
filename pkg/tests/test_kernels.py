import os
import subprocess
import sys

import numpy as np
import pytest

from sessalign import kernels

needs_compiled = pytest.mark.skipif(kernels.compiled_backend is None, reason="extension not built")


def _case(rng):
    T, V = int(rng.integers(1, 30)), int(rng.integers(2, 8))
    z = rng.normal(size=(T, V))
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    L = int(rng.integers(0, 6))
    return lp, np.asarray(rng.integers(1, V, size=L), dtype=np.int64)


@needs_compiled
def test_compiled_ctc_matches_fallback():
    rng = np.random.default_rng(0)
    for _ in range(100):
        lp, tgt = _case(rng)
        a = kernels.compiled_backend.ctc_forward_backward(lp, tgt)
        b = kernels.python_backend.ctc_forward_backward(lp, tgt)
        if np.isinf(b[0]):
            assert a[0] == b[0]
            continue
        assert a[0] == pytest.approx(b[0], abs=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)


@needs_compiled
def test_compiled_edit_table_matches_fallback():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = np.asarray(rng.integers(0, 4, size=rng.integers(0, 12)), dtype=np.int64)
        b = np.asarray(rng.integers(0, 4, size=rng.integers(0, 12)), dtype=np.int64)
        np.testing.assert_array_equal(kernels.compiled_backend.edit_table(a, b),
                                      kernels.python_backend.edit_table(a, b))


def test_pure_python_flag_forces_fallback():
    env = dict(os.environ, SESSALIGN_PURE_PYTHON="1")
    code = ("from sessalign import kernels, ctc, metrics; import numpy as np;"
            "assert kernels.BACKEND == 'python' and kernels.compiled_backend is None;"
            "print(metrics.edit_distance('abc', 'abd').distance,"
            " round(ctc.ctc_loss(np.log(np.full((3, 2), 0.5)), [1])[0], 12))")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    assert out == ["1", "0.287682072452"]
