"""Cell values: numbers, strings, booleans, and the missing-value marker.

A cell holds ``None`` (missing), ``bool``, ``float``, or ``str``. Numbers are
always carried as 64-bit floats; integral floats render without a decimal
point. ``bool`` must be tested before ``float`` everywhere because ``bool``
subclasses ``int``.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Union

Value = Union[None, bool, float, str]

_TAG_NULL = b"\x00"
_TAG_BOOL = b"\x01"
_TAG_NUM = b"\x02"
_TAG_STR = b"\x03"


def is_null(v: Value) -> bool:
    return v is None


def is_number(v: Value) -> bool:
    return isinstance(v, float) and not isinstance(v, bool)


def coerce_number(v: Union[int, float]) -> float:
    return float(v)


def render_value(v: Value) -> str:
    """Display form: missing renders empty, integral numbers without '.0'."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if v == int(v) and abs(v) < 1e16:
            return str(int(v))
        return repr(v)
    return v


def encode_value(v: Value) -> bytes:
    """Canonical byte encoding: a type tag followed by the value bytes.

    Used for stable hashing; two values encode identically iff they compare
    equal under cell equality.
    """
    if v is None:
        return _TAG_NULL
    if isinstance(v, bool):
        return _TAG_BOOL + (b"\x01" if v else b"\x00")
    if isinstance(v, float):
        return _TAG_NUM + struct.pack(">d", v)
    if isinstance(v, str):
        raw = v.encode("utf-8")
        return _TAG_STR + len(raw).to_bytes(4, "big") + raw
    raise TypeError(f"unsupported cell value: {v!r}")


def values_equal(a: Value, b: Value) -> bool:
    """Cell equality: missing equals missing, otherwise type-and-value equality."""
    if a is None or b is None:
        return a is None and b is None
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    return type(a) is type(b) and a == b


def hash_values(values: tuple) -> int:
    """Stable 64-bit hash over a tuple of cell values.

    Collisions are possible; callers must confirm with a raw value comparison.
    """
    h = hashlib.blake2b(digest_size=8)
    for v in values:
        h.update(encode_value(v))
    return int.from_bytes(h.digest(), "big")


def sort_key(v: Value) -> tuple:
    """Total order over cell values for deterministic tie-breaking.

    Missing sorts first, then booleans, numbers, strings.
    """
    if v is None:
        return (0, 0)
    if isinstance(v, bool):
        return (1, v)
    if isinstance(v, float):
        return (2, v)
    return (3, v)
