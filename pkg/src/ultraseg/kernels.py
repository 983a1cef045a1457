"""Backend selection for the hot kernels.

The compiled extension ``ultraseg._ckernels`` is used when it imports;
otherwise the numpy fallback is. Setting ``USEG_KERNELS=python`` before
import forces the fallback. ``use_backend`` switches at runtime, which the
benchmarks and the backend-equivalence tests rely on.
"""

import contextlib
import os

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

NAMES = (
    "im2col", "col2im", "dw_forward", "dw_backward",
    "gelu_forward", "gelu_backward", "maxpool2_forward", "maxpool2_backward",
    "upsample2_forward", "upsample2_backward", "channel_affine", "edt_sq",
)

_BACKENDS = {"python": _fallback}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels


def available():
    return tuple(_BACKENDS)


def _bind(name):
    impl = _BACKENDS[name]
    g = globals()
    for fn in NAMES:
        g[fn] = getattr(impl, fn, getattr(_fallback, fn))
    g["BACKEND"] = name


def set_backend(name):
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available()}")
    _bind(name)


@contextlib.contextmanager
def use_backend(name):
    prev = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


BACKEND = "python"
_requested = os.environ.get("USEG_KERNELS", "").strip().lower()
if _requested == "python" or _ckernels is None:
    _bind("python")
else:
    _bind("compiled")
