"""Deterministic random-stream derivation.

Every random draw in the package flows through a generator obtained from
:func:`substream`, keyed by a master seed plus context tags (seed index,
round number, purpose string, entity id).  Each tag tuple maps to an
independent counter-based Philox stream, so work items can run in any
order, or in parallel, without changing results.
"""

import hashlib

import numpy as np


def substream(*tags):
    """Return a ``numpy.random.Generator`` that is a pure function of the tags.

    Tags may be ints, strings, or (nested) sequences of those.  The encoding
    is injective: distinct tag tuples can never produce the same stream key.
    """
    h = hashlib.sha256()
    for tag in _flatten(tags):
        if isinstance(tag, (bool, float)):
            raise TypeError(f"stream tags must be ints or strings, got {tag!r}")
        if isinstance(tag, (int, np.integer)):
            h.update(b"i" + int(tag).to_bytes(16, "big", signed=True))
        elif isinstance(tag, str):
            raw = tag.encode("utf-8")
            h.update(b"s" + len(raw).to_bytes(4, "big") + raw)
        else:
            raise TypeError(f"stream tags must be ints or strings, got {tag!r}")
    key = np.frombuffer(h.digest()[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _flatten(tags):
    for tag in tags:
        if isinstance(tag, (tuple, list)):
            yield from _flatten(tag)
        else:
            yield tag
