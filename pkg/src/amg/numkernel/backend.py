"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions in ``_kernels_py`` are used. Set ``AMG_PURE_PYTHON=1`` to
force the fallback.

Even with the extension loaded, the masked softmax forward stays on numpy:
its vectorized ``exp`` beats the scalar compiled loop at sequence lengths
above ~40 (see ``benchmarks/bench_kernels.py``).
"""
import os
from types import SimpleNamespace

from . import _kernels_py

KERNELS = ("softmax_masked_fwd", "softmax_masked_bwd", "layer_norm_fwd", "layer_norm_bwd",
           "lcs_length")
NUMPY_PREFERRED = ("softmax_masked_fwd",)

if os.environ.get("AMG_PURE_PYTHON", "") not in ("", "0"):
    _ext = None
else:
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
if _ext is None:
    kernels = _kernels_py
else:
    kernels = SimpleNamespace(**{
        name: getattr(_kernels_py if name in NUMPY_PREFERRED else _ext, name) for name in KERNELS})
