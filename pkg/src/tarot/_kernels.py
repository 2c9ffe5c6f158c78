"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set TAROT_PURE_PYTHON=1 to force the fallback.  Both backends produce
identical results for the same inputs; the extension is only faster.
"""

from __future__ import annotations

import os

from . import _core_py

if os.environ.get("TAROT_PURE_PYTHON"):
    _impl = _core_py
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _core_py

BACKEND: str = _impl.BACKEND
lse_rows = _impl.lse_rows
cost_rows = _impl.cost_rows
row_sums = _impl.row_sums
