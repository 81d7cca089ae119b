"""Word-level Levenshtein distance and alignment.

The dynamic program runs in the compiled ``dualqe._ext.editdist`` module when
it was built, otherwise in the pure-Python fallback.  Set
``DUALQE_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _editdist_py

BACKEND = "python"
_kernel = _editdist_py
if os.environ.get("DUALQE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ext import editdist as _compiled
    except ImportError:
        pass
    else:
        _kernel = _compiled
        BACKEND = "cython"


def _codes(a, b):
    table = {}
    ca = np.fromiter((table.setdefault(t, len(table)) for t in a), dtype=np.int64, count=len(a))
    cb = np.fromiter((table.setdefault(t, len(table)) for t in b), dtype=np.int64, count=len(b))
    if _kernel is _editdist_py:
        return ca.tolist(), cb.tolist()
    return ca, cb


def levenshtein(a, b, kernel=None):
    """Minimum number of substitutions, insertions and deletions turning ``a`` into ``b``."""
    k = kernel or _kernel
    ca, cb = _codes(a, b)
    if k is _editdist_py:
        return k.levenshtein(list(ca), list(cb))
    return int(k.levenshtein(np.asarray(ca, dtype=np.int64), np.asarray(cb, dtype=np.int64)))


def align(hyp, ref, kernel=None):
    """Minimum-cost alignment of ``hyp`` against ``ref``.

    Returns a list of ``(op, i, j)`` in left-to-right order with ``op`` one of
    ``"match"``, ``"sub"``, ``"ins"`` (extra hyp token ``i``) and ``"del"``
    (ref token ``j`` missing from hyp).  Ties prefer match/sub, then ins, then del.
    """
    k = kernel or _kernel
    ca, cb = _codes(hyp, ref)
    if k is _editdist_py:
        d = k.distance_table(list(ca), list(cb))
    else:
        d = k.distance_table(np.asarray(ca, dtype=np.int64), np.asarray(cb, dtype=np.int64))
    i, j = len(hyp), len(ref)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ca[i - 1] == cb[j - 1]
            if d[i, j] == d[i - 1, j - 1] + (0 if same else 1):
                ops.append(("match" if same else "sub", i - 1, j - 1))
                i -= 1
                j -= 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(("ins", i - 1, j))
            i -= 1
            continue
        ops.append(("del", i, j - 1))
        j -= 1
    ops.reverse()
    return ops
