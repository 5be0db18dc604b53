"""Kernel backend selection.

Two interchangeable backends provide the hot numeric kernels: a compiled
Cython extension (``_ckern``) and a pure NumPy fallback (``pyback``).  The
compiled one is preferred when importable; ``QF_KERNELS`` overrides:

    QF_KERNELS=python    force the NumPy backend
    QF_KERNELS=compiled  require the extension (ImportError if missing)
    QF_KERNELS=auto      default behaviour

``get()`` returns the active backend module; ``use()`` switches it at
runtime (used by the parity tests and the benchmark).
"""

from __future__ import annotations

import os

from . import pyback

_BACKENDS = {"python": pyback}

try:
    from . import _ckern

    _BACKENDS["compiled"] = _ckern
except ImportError:
    _ckern = None

_requested = os.environ.get("QF_KERNELS", "auto").lower()
if _requested == "compiled" and "compiled" not in _BACKENDS:
    raise ImportError(
        "QF_KERNELS=compiled but the compiled kernel extension is not built; "
        "run `python setup.py build_ext --inplace` or reinstall the package"
    )
if _requested in ("auto", ""):
    _active = _BACKENDS.get("compiled", pyback)
elif _requested in _BACKENDS:
    _active = _BACKENDS[_requested]
else:
    raise ValueError(f"QF_KERNELS must be auto, python or compiled, got {_requested!r}")


def available() -> list[str]:
    return sorted(_BACKENDS)


def get():
    """The active kernel backend module."""
    return _active


def use(name: str) -> None:
    """Switch the active backend ('python' or 'compiled')."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available()}")
    _active = _BACKENDS[name]
