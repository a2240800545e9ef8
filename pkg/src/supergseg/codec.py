"""Encoding helpers for bulk arrays embedded in JSON documents.

Bulk tensors are stored as base64 little-endian float32; everything else in a
document stays plain JSON. Arrays are promoted back to float64 on load.
"""

from __future__ import annotations

import base64

import numpy as np

from .errors import ParseError


def encode_f32(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return base64.b64encode(a.tobytes()).decode("ascii")


def decode_f32(text: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise ParseError(f"bad base64 payload: {exc}") from None
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ParseError(
            f"payload holds {len(raw)} bytes, expected {expected} "
            f"for shape {tuple(shape)}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def f32_clean(arr: np.ndarray) -> np.ndarray:
    """Round-trip an array through float32 so a later save/load is bit-exact."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)
