"""Scene model: anchors, decoder MLPs, cameras, and scene persistence.

A scene is a sparse set of anchor points. Each anchor carries a geometry
feature, a segmentation feature, a scaling factor, and a fixed number of
learnable offsets; small decoder MLPs turn those features into renderable
Gaussians on demand. Geometry (positions, scales, rotations, opacities) is
frozen once a scene exists; training only touches colors, segmentation
features, and the MLPs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .codec import decode_f32, encode_f32
from .errors import ConfigError, DomainError, ParseError
from .mlp import TinyMLP

SCENE_SCHEMA = "supergseg-scene/1"

# Decoder heads keyed by what they emit. alpha/color/rot/scale read the
# geometry feature; inst/hier read the segmentation feature concatenated with
# the anchor position.
GEOMETRY_HEADS = ("alpha", "color", "rot", "scale")
FEATURE_HEADS = ("inst", "hier")

SCALE_MIN = 1e-4
SCALE_MAX = 1e2


@dataclass
class SceneConfig:
    k_spawn: int = 5
    geom_dim: int = 32
    seg_dim: int = 32
    feat_dim: int = 16
    hidden_dim: int = 32
    lang_dim: int = 16

    def head_dims(self, head: str) -> tuple[int, int]:
        out_per_spawn = {"alpha": 1, "color": 3, "rot": 4, "scale": 3,
                         "inst": self.feat_dim, "hier": self.feat_dim}[head]
        in_dim = self.geom_dim if head in GEOMETRY_HEADS else self.seg_dim + 3
        return in_dim, self.k_spawn * out_per_spawn


@dataclass
class Camera:
    """Pinhole camera; ``r`` maps world to camera coordinates, ``t`` translates."""

    fx: float
    fy: float
    cx: float
    cy: float
    r: np.ndarray
    t: np.ndarray
    width: int
    height: int
    tag: str = "train"

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if np.linalg.norm(self.r.T @ self.r - np.eye(3)) >= 1e-6:
            raise ConfigError("camera rotation is not orthonormal")

    def to_camera_space(self, x: np.ndarray) -> np.ndarray:
        return x @ self.r.T + self.t


def look_at_camera(eye, target, up, fx, fy, width, height, tag="train") -> Camera:
    """Build a camera at ``eye`` looking toward ``target`` (+z into the scene)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    # Orthonormalize so serialized cameras stay within the 1e-6 gate.
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    return Camera(fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  r=r, t=-r @ eye, width=width, height=height, tag=tag)


@dataclass
class Anchor:
    """One sparse scene point; ``offsets`` spawn k Gaussians scaled by ``l``."""

    id: int
    x: np.ndarray
    f_g: np.ndarray
    f_s: np.ndarray
    l: float
    offsets: np.ndarray

    def __post_init__(self):
        if self.l <= 0:
            raise DomainError(f"anchor scaling factor must be positive, got {self.l}")
        for name in ("x", "f_g", "f_s", "offsets"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"anchor field {name} contains non-finite values")


@dataclass
class NeuralGaussian:
    mu: np.ndarray
    s: np.ndarray
    q: np.ndarray
    alpha: float
    c: np.ndarray
    g: np.ndarray
    h: np.ndarray
    anchor_id: int


@dataclass
class GaussianSet:
    """Packed attributes for every spawned Gaussian in anchor-major order."""

    mu: np.ndarray       # (N, 3)
    cov: np.ndarray      # (N, 3, 3)
    alpha: np.ndarray    # (N,)
    color: np.ndarray    # (N, 3)
    g: np.ndarray        # (N, feat)
    h: np.ndarray        # (N, feat)
    anchor_id: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.mu.shape[0]


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions; rows of ``q`` are normalized."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    safe = norm[:, 0] > 1e-12
    unit = np.where(safe[:, None], q / np.maximum(norm, 1e-12),
                    np.array([1.0, 0.0, 0.0, 0.0]))
    w, x, y, z = unit[:, 0], unit[:, 1], unit[:, 2], unit[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def build_covariance(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Covariance R S S^T R^T from per-axis scales and a quaternion.

    Accepts a single (3,) / (4,) pair or batched (N, 3) / (N, 4) arrays.
    """
    s_arr = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if np.any(s_arr <= 0):
        raise DomainError("covariance scales must be positive")
    r = quat_to_rotation(q)
    m = r * s_arr[:, None, :]          # columns of R scaled: R @ diag(s)
    cov = m @ np.transpose(m, (0, 2, 1))
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))  # kill asymmetry from rounding
    if np.asarray(s).ndim == 1:
        return cov[0]
    return cov


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Scene:
    """Anchors + decoders + cameras. Anchor arrays are packed, ids are 0..n-1."""

    def __init__(self, config: SceneConfig, x, f_g, f_s, l, offsets,
                 decoders: dict[str, TinyMLP], cameras: list[Camera]):
        self.config = config
        self.x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        n = self.x.shape[0]
        self.f_g = np.asarray(f_g, dtype=np.float64).reshape(n, config.geom_dim)
        self.f_s = np.asarray(f_s, dtype=np.float64).reshape(n, config.seg_dim)
        self.l = np.asarray(l, dtype=np.float64).reshape(n)
        self.offsets = np.asarray(offsets, dtype=np.float64).reshape(n, config.k_spawn, 3)
        self.decoders = decoders
        self.cameras = cameras
        if np.any(self.l <= 0):
            raise DomainError("anchor scaling factors must be positive")
        for head in GEOMETRY_HEADS + FEATURE_HEADS:
            if head not in decoders:
                raise ConfigError(f"missing decoder head {head!r}")
            want = config.head_dims(head)
            got = (decoders[head].in_dim, decoders[head].out_dim)
            if want != got:
                raise ConfigError(f"decoder {head!r} has dims {got}, config requires {want}")

    @property
    def n_anchors(self) -> int:
        return self.x.shape[0]

    @property
    def n_gaussians(self) -> int:
        return self.n_anchors * self.config.k_spawn

    def anchor(self, i: int) -> Anchor:
        return Anchor(id=i, x=self.x[i], f_g=self.f_g[i], f_s=self.f_s[i],
                      l=float(self.l[i]), offsets=self.offsets[i])

    def feature_inputs(self) -> np.ndarray:
        """Rows fed to the inst/hier heads: segmentation feature next to position."""
        return np.concatenate([self.f_s, self.x], axis=1)

    def spawn_means(self) -> np.ndarray:
        """Anchor position plus offsets scaled by the per-anchor factor."""
        mu = self.x[:, None, :] + self.offsets * self.l[:, None, None]
        return mu.reshape(-1, 3)

    def spawn_geometry(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Means, covariances, and opacities for all Gaussians (frozen per scene)."""
        k = self.config.k_spawn
        n = self.n_anchors
        alpha = sigmoid(self.decoders["alpha"](self.f_g)).reshape(n * k)
        scales = np.clip(np.exp(self.decoders["scale"](self.f_g)),
                         SCALE_MIN, SCALE_MAX).reshape(n * k, 3)
        quats = self.decoders["rot"](self.f_g).reshape(n * k, 4)
        cov = build_covariance(scales, quats)
        return self.spawn_means(), cov, alpha

    def decode_colors(self) -> np.ndarray:
        return sigmoid(self.decoders["color"](self.f_g)).reshape(-1, 3)

    def decode_features(self) -> tuple[np.ndarray, np.ndarray]:
        inp = self.feature_inputs()
        d = self.config.feat_dim
        g = self.decoders["inst"](inp).reshape(-1, d)
        h = self.decoders["hier"](inp).reshape(-1, d)
        return g, h

    def spawn_all(self) -> GaussianSet:
        mu, cov, alpha = self.spawn_geometry()
        color = self.decode_colors()
        g, h = self.decode_features()
        anchor_id = np.repeat(np.arange(self.n_anchors), self.config.k_spawn)
        return GaussianSet(mu=mu, cov=cov, alpha=alpha, color=color, g=g, h=h,
                           anchor_id=anchor_id)


def spawn_neural_gaussians(anchor: Anchor, decoders: dict[str, TinyMLP]) -> list[NeuralGaussian]:
    """Decode one anchor into its k Gaussians.

    Means are exactly the anchor position plus offsets scaled by the anchor
    factor; attribute heads run on the anchor's features.
    """
    k = anchor.offsets.shape[0]
    f_g = anchor.f_g[None, :]
    feat_in = np.concatenate([anchor.f_s, anchor.x])[None, :]
    for head, inp in (("alpha", f_g), ("color", f_g), ("rot", f_g), ("scale", f_g),
                      ("inst", feat_in), ("hier", feat_in)):
        net = decoders.get(head)
        if net is None or net.in_dim != inp.shape[1]:
            raise ConfigError(f"decoder {head!r} missing or incompatible with anchor features")

    alpha = sigmoid(decoders["alpha"](f_g)).reshape(k)
    color = sigmoid(decoders["color"](f_g)).reshape(k, 3)
    quats = decoders["rot"](f_g).reshape(k, 4)
    scales = np.clip(np.exp(decoders["scale"](f_g)), SCALE_MIN, SCALE_MAX).reshape(k, 3)
    g = decoders["inst"](feat_in).reshape(k, -1)
    h = decoders["hier"](feat_in).reshape(k, -1)

    mu = anchor.x[None, :] + anchor.offsets * anchor.l
    out = []
    for i in range(k):
        q = quats[i]
        norm = np.linalg.norm(q)
        q = q / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0, 0.0])
        out.append(NeuralGaussian(mu=mu[i], s=scales[i], q=q, alpha=float(alpha[i]),
                                  c=color[i], g=g[i], h=h[i], anchor_id=anchor.id))
    return out


def _camera_to_doc(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "r": cam.r.reshape(-1).tolist(), "t": cam.t.tolist(),
            "width": cam.width, "height": cam.height, "tag": cam.tag}


def _camera_from_doc(doc: dict) -> Camera:
    return Camera(fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
                  r=np.array(doc["r"]).reshape(3, 3), t=np.array(doc["t"]),
                  width=int(doc["width"]), height=int(doc["height"]),
                  tag=doc.get("tag", "train"))


def scene_to_doc(scene: Scene) -> dict:
    cfg = scene.config
    n = scene.n_anchors
    return {
        "schema": SCENE_SCHEMA,
        "config": {"k_spawn": cfg.k_spawn, "geom_dim": cfg.geom_dim,
                   "seg_dim": cfg.seg_dim, "feat_dim": cfg.feat_dim,
                   "hidden_dim": cfg.hidden_dim, "lang_dim": cfg.lang_dim},
        "anchors": {
            "count": n,
            "x": encode_f32(scene.x),
            "f_g": encode_f32(scene.f_g),
            "f_s": encode_f32(scene.f_s),
            "l": encode_f32(scene.l),
            "offsets": encode_f32(scene.offsets),
        },
        "decoders": {head: scene.decoders[head].to_doc()
                     for head in GEOMETRY_HEADS + FEATURE_HEADS},
        "cameras": [_camera_to_doc(c) for c in scene.cameras],
    }


def scene_from_doc(doc: dict) -> Scene:
    if doc.get("schema") != SCENE_SCHEMA:
        raise ParseError(f"not a scene document: schema={doc.get('schema')!r}")
    c = doc["config"]
    cfg = SceneConfig(k_spawn=int(c["k_spawn"]), geom_dim=int(c["geom_dim"]),
                      seg_dim=int(c["seg_dim"]), feat_dim=int(c["feat_dim"]),
                      hidden_dim=int(c["hidden_dim"]), lang_dim=int(c["lang_dim"]))
    a = doc["anchors"]
    n = int(a["count"])
    decoders = {head: TinyMLP.from_doc(doc["decoders"][head])
                for head in GEOMETRY_HEADS + FEATURE_HEADS}
    cameras = [_camera_from_doc(d) for d in doc["cameras"]]
    return Scene(cfg,
                 x=decode_f32(a["x"], (n, 3)),
                 f_g=decode_f32(a["f_g"], (n, cfg.geom_dim)),
                 f_s=decode_f32(a["f_s"], (n, cfg.seg_dim)),
                 l=decode_f32(a["l"], (n,)),
                 offsets=decode_f32(a["offsets"], (n, cfg.k_spawn, 3)),
                 decoders=decoders, cameras=cameras)


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_doc(scene), fh)


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed scene file at byte offset {exc.pos}: {exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"scene file is not UTF-8 at byte offset {exc.start}") from None
    try:
        return scene_from_doc(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"scene document missing or mistyped field: {exc}") from None
