"""Associative scans over stacked elements.

An element is a tuple of arrays sharing a leading axis (the sequence) and
possibly further batch axes. ``op(a, b)`` combines two such tuples
elementwise along the leading axis, ``a`` being the earlier segment.

The ``"blelloch"`` method uses the work-efficient up-sweep/down-sweep schedule:
pairs are reduced level by level, the half-length problem is solved
recursively, then the even positions are filled in. Each level is a single
batched ``op`` call, which is what a data-parallel backend would execute.
Arbitrary lengths are handled without padding.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Element = tuple
Operator = Callable[[Element, Element], Element]


def _take(elems, sl):
    return tuple(e[sl] for e in elems)


def _blelloch(op: Operator, elems: Element) -> Element:
    n = elems[0].shape[0]
    if n < 2:
        return elems
    # up-sweep: reduce adjacent pairs
    reduced = op(_take(elems, slice(0, n - 1, 2)), _take(elems, slice(1, n, 2)))
    odd = _blelloch(op, reduced)
    # down-sweep: prefix of each pair combined with the next even element
    if n % 2 == 0:
        even = op(_take(odd, slice(0, -1)), _take(elems, slice(2, n, 2)))
    else:
        even = op(odd, _take(elems, slice(2, n, 2)))
    out = []
    for e, ev, od in zip(elems, even, odd):
        res = np.empty((n,) + ev.shape[1:], dtype=np.result_type(ev, e))
        res[0] = e[0]
        res[2::2] = ev
        res[1::2] = od
        out.append(res)
    return tuple(out)


def _sequential(op: Operator, elems: Element) -> Element:
    n = elems[0].shape[0]
    if n == 0:
        return elems
    out = [np.empty_like(e) for e in elems]
    acc = _take(elems, slice(0, 1))
    for o, a in zip(out, acc):
        o[0] = a[0]
    for t in range(1, n):
        acc = op(acc, _take(elems, slice(t, t + 1)))
        for o, a in zip(out, acc):
            o[t] = a[0]
    return tuple(out)


_METHODS = {"blelloch": _blelloch, "sequential": _sequential}


def associative_scan(
    op: Operator,
    elems: Sequence[np.ndarray],
    reverse: bool = False,
    method: str = "blelloch",
) -> Element:
    """All prefix combinations ``e0 op e1 op ... op et`` for every ``t``.

    With ``reverse=True`` the suffix combinations ``et op ... op e_{n-1}``
    are returned instead, still in the original order.
    """
    try:
        run = _METHODS[method]
    except KeyError:
        raise ValueError(f"unknown scan method {method!r}; choose from {sorted(_METHODS)}") from None
    elems = tuple(np.asarray(e) for e in elems)
    if not reverse:
        return run(op, elems)
    flipped = _take(elems, slice(None, None, -1))
    out = run(lambda a, b: op(b, a), flipped)
    return _take(out, slice(None, None, -1))
