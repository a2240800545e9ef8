"""Small dense MLPs with hand-written reverse-mode gradients.

All decoders and relevancy nets in this project are one-hidden-layer
perceptrons at desk scale, so layers are plain float64 matmuls and the
backward pass is spelled out instead of pulling in an autograd framework.
"""

from __future__ import annotations

import numpy as np

from .codec import decode_f32, encode_f32
from .errors import ConfigError

Params = dict[str, np.ndarray]


class TinyMLP:
    """Fully connected net: ReLU after every layer except the last.

    ``dims`` lists layer widths input-first, e.g. ``[35, 32, 16]`` for one
    hidden layer of 32. ``zero_last`` zeroes the final layer so the net starts
    as a constant map (useful when the initial output must be symmetric).
    ``last_bias`` seeds the final bias vector, broadcast if scalar.
    """

    def __init__(
        self,
        dims: list[int],
        rng: np.random.Generator | None = None,
        zero_last: bool = False,
        last_bias: float | np.ndarray | None = None,
    ):
        if len(dims) < 2:
            raise ConfigError(f"need at least input and output dims, got {dims}")
        rng = rng or np.random.default_rng(0)
        self.dims = list(int(d) for d in dims)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            last = i == len(self.dims) - 2
            if last and zero_last:
                w = np.zeros((din, dout))
            else:
                w = rng.standard_normal((din, dout)) * np.sqrt(2.0 / din)
            b = np.zeros(dout)
            if last and last_bias is not None:
                b = b + np.asarray(last_bias, dtype=np.float64)
                if b.shape != (dout,):
                    raise ConfigError(
                        f"last_bias shape {np.shape(last_bias)} incompatible with output dim {dout}"
                    )
            self.weights.append(w)
            self.biases.append(b)

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward(x, want_cache=False)
        return y

    def forward(self, x: np.ndarray, want_cache: bool = True):
        """Run the net on rows of ``x``; returns (output, cache-for-backward)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dims[0]:
            raise ConfigError(
                f"input has {x.shape[1]} features, net expects {self.dims[0]}"
            )
        inputs = []
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        cache = inputs if want_cache else None
        return h, cache

    def backward(self, d_out: np.ndarray, cache) -> tuple[np.ndarray, Params]:
        """Backprop ``d_out`` through a cached forward pass.

        Returns the gradient w.r.t. the input rows and a dict of parameter
        gradients keyed like :meth:`params`.
        """
        grads: Params = {}
        d = np.asarray(d_out, dtype=np.float64)
        n_layers = len(self.weights)
        for i in range(n_layers - 1, -1, -1):
            x_in = cache[i]
            if i < n_layers - 1:
                # ReLU mask from the layer's own pre-activation, recomputed
                pre = x_in @ self.weights[i] + self.biases[i]
                d = d * (pre > 0.0)
            grads[f"w{i}"] = x_in.T @ d
            grads[f"b{i}"] = d.sum(axis=0)
            d = d @ self.weights[i].T
        return d, grads

    def params(self) -> Params:
        out: Params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def to_doc(self) -> dict:
        doc = {"dims": self.dims}
        for key, arr in self.params().items():
            doc[key] = encode_f32(arr)
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "TinyMLP":
        net = cls(doc["dims"])
        for i in range(len(net.weights)):
            net.weights[i] = decode_f32(doc[f"w{i}"], net.weights[i].shape)
            net.biases[i] = decode_f32(doc[f"b{i}"], net.biases[i].shape)
        return net


def relu_backward_check_eps() -> float:
    """Step size used by the finite-difference tests; kept here so tests and
    docs agree on one value."""
    return 1e-4
