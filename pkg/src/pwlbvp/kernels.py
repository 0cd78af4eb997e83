"""Backend selection for the hot numeric kernels.

``PWLBVP_BACKEND`` picks the implementation: ``numba`` (jitted, default when
numba imports cleanly), ``numpy`` (pure-numpy fallback) or ``auto``. The two
backends share tie-break semantics (first-occurrence argmin) and agree to
float precision; summation order may differ in the last ulp. Within one
backend every run is deterministic. See ``benchmarks/bench_kernels.py`` for a
speed comparison.
"""

import os

from . import _kernels_numpy

_BACKENDS = {"numpy": _kernels_numpy}
_active = _kernels_numpy


def _load_numba():
    from . import _kernels_numba

    _BACKENDS["numba"] = _kernels_numba
    return _kernels_numba


def use(name: str):
    """Select the kernel backend by name ('numpy' or 'numba')."""
    global _active
    name = name.strip().lower()
    if name == "numpy":
        _active = _kernels_numpy
    elif name == "numba":
        _active = _BACKENDS.get("numba") or _load_numba()
    else:
        raise ValueError(f"unknown kernel backend {name!r}; expected 'numpy' or 'numba'")
    return _active


def active():
    """Return the currently selected kernel module."""
    return _active


def _init_from_env():
    global _active
    req = os.environ.get("PWLBVP_BACKEND", "auto").strip().lower()
    if req in ("", "auto"):
        try:
            _active = _load_numba()
        except ImportError:
            _active = _kernels_numpy
    else:
        use(req)


_init_from_env()
