"""Stage-3 distillation: per-center language features served through rendering.

Each cluster center owns a small latent vector; a decoder maps latent plus
center position to a unit embedding. Gaussians inherit the embedding of their
anchor's hard-assigned center, the rasterizer blends those into a language
map, and a cosine loss against per-instance target embeddings trains only the
latents and the decoder. Text queries score centers by cosine and let the
selected centers vote for instances.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .codec import decode_f32, encode_f32
from .errors import ConfigError, ContractError, ParseError
from .mlp import TinyMLP
from .optim import Adam, lr_schedule, namespaced
from .rasterizer import BlendState, blend_gradient, render_channels

log = logging.getLogger(__name__)

LANG_SCHEMA = "supergseg-lang/1"
NORM_EPS = 1e-12


@dataclass
class Stage3Config:
    iterations: int = 500
    lr_initial: float = 0.01
    lr_final: float = 0.001
    latent_dim: int = 32
    seed: int = 0


class EmbeddingVocabulary:
    """Ordered label -> unit vector table."""

    def __init__(self, entries: dict[str, np.ndarray], dim: int):
        self.dim = dim
        self.labels = list(entries)
        self.matrix = np.stack([np.asarray(entries[k], dtype=np.float64)
                                for k in self.labels]) if entries else np.zeros((0, dim))
        if entries:
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ConfigError("vocabulary vectors must be unit-norm")

    def __len__(self):
        return len(self.labels)

    def vector(self, label: str) -> np.ndarray:
        return self.matrix[self.labels.index(label)]

    def to_doc(self) -> dict:
        return {"dim": self.dim,
                "entries": {k: self.matrix[i].tolist() for i, k in enumerate(self.labels)}}

    @classmethod
    def from_doc(cls, doc: dict) -> "EmbeddingVocabulary":
        entries = {k: np.asarray(v, dtype=np.float64)
                   for k, v in doc["entries"].items()}
        return cls(entries, int(doc["dim"]))

    @classmethod
    def load(cls, path) -> "EmbeddingVocabulary":
        try:
            doc = json.loads(open(path, "rb").read().decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed vocabulary at byte offset {exc.pos}") from None
        return cls.from_doc(doc)


class LanguageField:
    """Per-center latents plus the decoder that maps them to unit embeddings."""

    def __init__(self, n_centers: int, lang_dim: int, cfg: Stage3Config,
                 hidden: int = 32):
        rng = np.random.default_rng(cfg.seed)
        self.latents = 0.1 * rng.standard_normal((n_centers, cfg.latent_dim))
        self.decoder = TinyMLP([cfg.latent_dim + 3, hidden, lang_dim], rng=rng)
        self.lang_dim = lang_dim
        self._cache_decoded: np.ndarray | None = None

    @property
    def n_centers(self) -> int:
        return self.latents.shape[0]

    def decode_all(self, center_x: np.ndarray, want_cache: bool = False):
        """Unit embeddings for every center; optionally caches for backward."""
        inp = np.concatenate([self.latents, center_x], axis=1)
        raw, cache = self.decoder.forward(inp, want_cache=want_cache)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        unit = raw / np.maximum(norms, NORM_EPS)
        self._cache_decoded = unit
        if want_cache:
            return unit, (cache, unit, norms)
        return unit

    def decoded(self, center_x: np.ndarray) -> np.ndarray:
        if self._cache_decoded is None or self._cache_decoded.shape[0] != self.n_centers:
            self.decode_all(center_x)
        return self._cache_decoded

    def backward(self, d_unit: np.ndarray, caches):
        cache, unit, norms = caches
        inner = np.sum(d_unit * unit, axis=1, keepdims=True)
        d_raw = (d_unit - unit * inner) / np.maximum(norms, NORM_EPS)
        d_inp, grads = self.decoder.backward(d_raw, cache)
        d_latent = d_inp[:, : self.latents.shape[1]]
        return d_latent, grads

    def to_doc(self) -> dict:
        return {"schema": LANG_SCHEMA,
                "count": self.n_centers,
                "latent_dim": self.latents.shape[1],
                "lang_dim": self.lang_dim,
                "latents": encode_f32(self.latents),
                "decoder": self.decoder.to_doc()}

    @classmethod
    def from_doc(cls, doc: dict) -> "LanguageField":
        if doc.get("schema") != LANG_SCHEMA:
            raise ParseError(f"not a language field document: {doc.get('schema')!r}")
        cfg = Stage3Config(latent_dim=int(doc["latent_dim"]))
        field_ = cls(int(doc["count"]), int(doc["lang_dim"]), cfg)
        field_.latents = decode_f32(doc["latents"], field_.latents.shape)
        field_.decoder = TinyMLP.from_doc(doc["decoder"])
        field_._cache_decoded = None
        return field_


def decode_language(field_: LanguageField, center_x: np.ndarray, index: int) -> np.ndarray:
    """Unit embedding of one center."""
    return field_.decode_all(center_x)[index]


def gaussian_language_values(decoded: np.ndarray, hard: np.ndarray,
                             anchor_of_gauss: np.ndarray) -> np.ndarray:
    """Per-Gaussian embedding rows: each Gaussian inherits its anchor's center."""
    if np.any(hard < 0):
        raise ContractError("hard assignment incomplete: run clustering first")
    return decoded[hard[anchor_of_gauss]]


def render_language_map(state: BlendState, decoded: np.ndarray, hard: np.ndarray,
                        anchor_of_gauss: np.ndarray) -> np.ndarray:
    return render_channels(state, gaussian_language_values(decoded, hard, anchor_of_gauss))


def cosine_loss(rendered: np.ndarray, target: np.ndarray, valid: np.ndarray):
    """Mean (1 - cosine) over valid pixels; zero-norm rendered pixels are
    skipped and counted. Returns (loss, d_loss/d_rendered, skipped)."""
    if rendered.shape != target.shape:
        raise ContractError("rendered and target language maps differ in shape")
    h, w, d = rendered.shape
    flat_r = rendered.reshape(-1, d)
    flat_t = target.reshape(-1, d)
    vmask = valid.reshape(-1).astype(bool)
    norms_r = np.linalg.norm(flat_r, axis=1)
    norms_t = np.linalg.norm(flat_t, axis=1)
    ok = vmask & (norms_r > NORM_EPS) & (norms_t > NORM_EPS)
    skipped = int(vmask.sum() - ok.sum())
    grad = np.zeros_like(flat_r)
    count = int(ok.sum())
    if count == 0:
        return 0.0, grad.reshape(h, w, d), skipped
    r = flat_r[ok]
    t = flat_t[ok] / norms_t[ok, None]
    rn = norms_r[ok, None]
    unit_r = r / rn
    cos = np.sum(unit_r * t, axis=1)
    loss = float(np.mean(1.0 - cos))
    d_r = -(t - cos[:, None] * unit_r) / rn / count
    grad[ok] = d_r
    return loss, grad.reshape(h, w, d), skipped


@dataclass
class LanguageViewTarget:
    state: BlendState
    target: np.ndarray     # (H, W, D) per-pixel supervision embedding
    valid: np.ndarray      # (H, W) bool


def train_stage3(field_: LanguageField, center_x: np.ndarray, hard: np.ndarray,
                 anchor_of_gauss: np.ndarray, views: list[LanguageViewTarget],
                 cfg: Stage3Config):
    """Adam over center latents and the decoder; everything else frozen."""
    if not views:
        raise ConfigError("stage-3 training needs at least one view")
    params = {"latents": field_.latents}
    params.update(namespaced("dec", field_.decoder.params()))
    opt = Adam()
    history = []
    gauss_center = hard[anchor_of_gauss]
    for it in range(cfg.iterations):
        view = views[it % len(views)]
        decoded, caches = field_.decode_all(center_x, want_cache=True)
        values = decoded[gauss_center]
        img = render_channels(view.state, values)
        loss, d_img, skipped = cosine_loss(img, view.target, view.valid)
        d_values = blend_gradient(view.state, d_img)
        d_decoded = np.zeros_like(decoded)
        np.add.at(d_decoded, gauss_center, d_values)
        d_latent, dec_grads = field_.backward(d_decoded, caches)
        grads = {"latents": d_latent}
        grads.update(namespaced("dec", dec_grads))
        lr = lr_schedule(it, cfg.iterations, cfg.lr_initial, cfg.lr_final)
        opt.step(params, grads, lr)
        history.append({"step": it, "l_lang": loss, "skipped": skipped, "lr": lr})
    field_.decode_all(center_x)   # refresh the cache after the last update
    return history


def text_query_3d(query_vec: np.ndarray, decoded: np.ndarray,
                  instance_labels: np.ndarray, top_m: int | None = None):
    """Vote instances by the most query-similar centers.

    Selects the top centers by cosine with the query (default count S/20, at
    least 1), then scores each instance by selected/total center count.
    Returns (selected center ids, relevancy per instance, winning instance).
    """
    query = np.asarray(query_vec, dtype=np.float64)
    norm = np.linalg.norm(query)
    if norm < NORM_EPS:
        raise ContractError("query vector must be non-zero")
    if abs(norm - 1.0) > 1e-6:
        raise ContractError("query vector must be unit-norm")
    eligible = np.flatnonzero(instance_labels >= 0)
    if eligible.size == 0:
        raise ContractError("no labeled centers to query")
    s = decoded.shape[0]
    if top_m is None:
        top_m = max(1, s // 20)
    top_m = min(top_m, eligible.size)
    sims = decoded[eligible] @ query
    order = np.lexsort((eligible, -sims))
    selected = np.sort(eligible[order[:top_m]])

    labels = np.unique(instance_labels[instance_labels >= 0])
    totals = {int(l): int(np.sum(instance_labels == l)) for l in labels}
    counts = {int(l): 0 for l in labels}
    for sg in selected:
        counts[int(instance_labels[sg])] += 1
    relevancy = {l: counts[l] / totals[l] for l in counts}
    winner = min(((-r, l) for l, r in relevancy.items()))[1]
    return selected, relevancy, winner


def semantic_map(vocab: EmbeddingVocabulary, rendered: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over label cosines; zero-norm pixels stay -1."""
    if len(vocab) == 0:
        raise ContractError("vocabulary is empty")
    h, w, d = rendered.shape
    flat = rendered.reshape(-1, d)
    norms = np.linalg.norm(flat, axis=1)
    out = np.full(h * w, -1, dtype=np.int32)
    ok = norms > NORM_EPS
    sims = (flat[ok] / norms[ok, None]) @ vocab.matrix.T
    out[ok] = sims.argmax(axis=1)
    return out.reshape(h, w)
