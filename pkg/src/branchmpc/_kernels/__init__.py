"""Batched combinators for the scan executor.

The compiled module is used when it was built; otherwise, or when
``BRANCHMPC_PURE_PYTHON=1`` is set, the numpy implementation is selected.
Both expose ``combine_bwd`` and ``combine_fwd`` over stacks of shape
``(m, ...)``; :func:`get_backend` returns either by name for comparisons.
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name=None):
    """Return the kernel module ``name`` (default: the active one)."""
    if name is None:
        return _active
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"kernel backend {name!r} not available; have {available_backends()}"
        ) from None


def set_backend(name):
    """Switch the process-wide kernel backend; returns the previous name."""
    global _active
    prev = _active.BACKEND
    _active = get_backend(name)
    return prev


if os.environ.get("BRANCHMPC_PURE_PYTHON") == "1" or _ckernels is None:
    _active = _pykernels
else:
    _active = _ckernels


def combine_bwd(*args):
    return _active.combine_bwd(*args)


def combine_fwd(*args):
    return _active.combine_fwd(*args)
