"""Backend selection for the hot loops (split search, tree traversal).

The compiled module is preferred; ``DDX_PURE_PYTHON=1`` forces the NumPy
fallback.
"""
import os

from . import _pykernels

if os.environ.get("DDX_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

best_split = _impl.best_split
apply_tree = _impl.apply_tree
impurity = _impl.impurity

__all__ = ["BACKEND", "best_split", "apply_tree", "impurity"]
