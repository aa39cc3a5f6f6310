"""Kernel backend selection.

The compiled Cython extension is used when it imports; otherwise, or when
``SEGNLME_PURE_PYTHON=1`` is set, the numpy fallback is used.  Both expose
``sweep`` and ``block_loglik`` with identical signatures.
"""

import importlib
import os

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    BACKENDS["cython"] = importlib.import_module("segnlme._kernels")
except ImportError:  # extension not built
    pass


def _select():
    if os.environ.get("SEGNLME_PURE_PYTHON", "") not in ("", "0"):
        return "python"
    return "cython" if "cython" in BACKENDS else "python"


BACKEND = _select()
impl = BACKENDS[BACKEND]


def get(name=None):
    """Kernel module by name (``"cython"`` or ``"python"``); default is the active one."""
    if name is None:
        return impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ImportError(f"kernel backend {name!r} is not available") from None
