"""Adam updates and the exponential learning-rate schedule."""

from __future__ import annotations

import logging

import numpy as np

from .codec import decode_f32, encode_f32
from .errors import ParseError

log = logging.getLogger(__name__)

OPT_SCHEMA = "supergseg-opt/1"


def lr_schedule(step: int, total: int, lr_initial: float, lr_final: float) -> float:
    """Geometric interpolation from ``lr_initial`` at step 0 to ``lr_final`` at ``total``."""
    if total <= 0:
        return lr_initial
    frac = step / total
    return lr_initial * (lr_final / lr_initial) ** frac


class Adam:
    """Standard Adam with bias correction; beta=(0.9, 0.999), eps=1e-8.

    ``step`` mutates the parameter arrays in place and returns False without
    touching anything if any gradient is non-finite.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> bool:
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                log.warning("rejecting optimizer step: non-finite gradient for %r", key)
                return False
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            p = params[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def to_doc(self) -> dict:
        doc = {"schema": OPT_SCHEMA, "t": self.t, "m": {}, "v": {}, "shapes": {}}
        for key, arr in self.m.items():
            doc["m"][key] = encode_f32(arr)
            doc["v"][key] = encode_f32(self.v[key])
            doc["shapes"][key] = list(arr.shape)
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "Adam":
        if doc.get("schema") != OPT_SCHEMA:
            raise ParseError(f"not an optimizer state document: {doc.get('schema')!r}")
        opt = cls()
        opt.t = int(doc["t"])
        for key, shape in doc["shapes"].items():
            opt.m[key] = decode_f32(doc["m"][key], tuple(shape))
            opt.v[key] = decode_f32(doc["v"][key], tuple(shape))
        return opt


def namespaced(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Key a parameter dict under ``prefix.`` so several nets share one optimizer."""
    return {f"{prefix}.{k}": v for k, v in params.items()}
