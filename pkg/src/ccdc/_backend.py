"""Pick the compiled kernels when available, else the numpy fallback.

Set ``CCDC_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("CCDC_PURE_PYTHON", "") not in ("", "0"):
    from ccdc import _pykernels as kernels
    BACKEND = "python"
else:
    try:
        from ccdc import _ckernels as kernels
        BACKEND = "cython"
    except ImportError:
        from ccdc import _pykernels as kernels
        BACKEND = "python"

gather_taps = kernels.gather_taps
scatter_taps = kernels.scatter_taps
maxpool_forward = kernels.maxpool_forward
maxpool_backward = kernels.maxpool_backward
