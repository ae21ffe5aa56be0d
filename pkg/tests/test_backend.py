import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccdc import _backend, _pykernels as py
from ccdc.ops import PATTERNS

ck = pytest.importorskip("ccdc._ckernels", reason="compiled kernels not built")

patterns = st.sampled_from([p.offsets for p in PATTERNS.values()])


@given(st.integers(0, 2**32 - 1), patterns, st.integers(1, 3), st.integers(1, 9), st.integers(1, 9),
       st.sampled_from([1, 2]), st.sampled_from([0, 1]), st.sampled_from([np.float32, np.float64]))
def test_gather_scatter_bit_identical(seed, offs, c, h, w, stride, pad, dtype):
    if h + 2 * pad < 3 or w + 2 * pad < 3:
        return
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, c, h, w)).astype(dtype)
    a, b = py.gather_taps(x, offs, stride, pad), ck.gather_taps(x, offs, stride, pad)
    assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    d = r.normal(size=a.shape).astype(dtype)
    a, b = py.scatter_taps(d, offs, stride, pad, h, w), ck.scatter_taps(d, offs, stride, pad, h, w)
    assert a.shape == (2, c, h, w) and a.tobytes() == b.tobytes()


@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 9), st.booleans(),
       st.sampled_from([np.float32, np.float64]))
def test_maxpool_bit_identical(seed, h, w, ties, dtype):
    r = np.random.default_rng(seed)
    x = r.integers(0, 3, size=(2, 2, h, w)) if ties else r.normal(size=(2, 2, h, w))
    x = x.astype(dtype)
    (oa, ia), (ob, ib) = py.maxpool_forward(x), ck.maxpool_forward(x)
    assert oa.tobytes() == ob.tobytes() and np.array_equal(ia, ib)
    d = r.normal(size=oa.shape).astype(dtype)
    assert py.maxpool_backward(d, ia, h, w).tobytes() == ck.maxpool_backward(d, ib, h, w).tobytes()


def test_compiled_backend_selected_by_default():
    if os.environ.get("CCDC_PURE_PYTHON", "") in ("", "0"):
        assert _backend.BACKEND == "cython"


SCRIPT = """
import json
from ccdc import _backend
from ccdc.data import AugConfig
from ccdc.network import preset
from ccdc.train import DataConfig, TrainerConfig, train
r = train(preset("dc-cdn", "tiny"), DataConfig(n_train=8, n_dev=4, n_test=4), AugConfig(),
          TrainerConfig(epochs=1, batch_size=4), 0)
print(json.dumps({"backend": _backend.BACKEND, "history": r.history}))
"""


def test_training_identical_across_backends():
    def run(pure):
        env = {**os.environ, "CCDC_PURE_PYTHON": "1" if pure else "0"}
        out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
        return json.loads(out.stdout)

    a, b = run(False), run(True)
    assert (a["backend"], b["backend"]) == ("cython", "python")
    assert a["history"] == b["history"]
