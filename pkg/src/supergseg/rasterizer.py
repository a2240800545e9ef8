"""CPU splatting: projection, front-to-back alpha blending, gradient replay.

The blending weight of a Gaussian at a pixel depends only on frozen geometry
(means, covariances, opacities, camera), so each view's weights are computed
once into a `BlendState` and kept as a sparse pixel-by-Gaussian matrix.
Rendering any channel stack is then a sparse matmul, and the gradient of a
loss w.r.t. per-Gaussian channel values is the transposed matmul — blending
is linear in the channel values.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ContractError, ParseError
from .scene import Camera, GaussianSet, Scene

log = logging.getLogger(__name__)

# Shared blending policy. The naive reference loop in the tests applies the
# same constants; keep them in one place so both paths stay in lockstep.
COV2D_REG = 0.3           # added to the projected covariance diagonal, pixel^2
CONTRIB_CUTOFF = 1.0 / 255.0   # contributions below this are skipped entirely
TERMINATION = 1e-4        # stop blending a pixel once transmittance drops below
ZNEAR = 0.01              # camera-space near plane, world units
RADIUS_SIGMA = 3.5        # footprint radius in sigma; wide enough that every
                          # contribution at or above the cutoff falls inside

_warned_singular = False


@dataclass
class Splat2D:
    mean2d: np.ndarray    # (2,) pixel coordinates
    cov2d: np.ndarray     # (2, 2) projected covariance, unregularized
    depth: float
    gaussian_index: int


@dataclass
class FeatureImage:
    """Row-major float image with an arbitrary channel count."""

    width: int
    height: int
    channels: int
    data: np.ndarray      # (height, width, channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FeatureImage":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, data=arr)


@dataclass
class BlendState:
    """Replayable record of one view's blending.

    ``pixel``/``gauss``/``weight`` list every surviving contribution sorted by
    pixel then front-to-back; ``matrix`` is the same data as a CSR matrix of
    shape (height*width, n_gaussians); ``t_remaining`` is the per-pixel
    transmittance left after blending.
    """

    width: int
    height: int
    n_gaussians: int
    pixel: np.ndarray
    gauss: np.ndarray
    weight: np.ndarray
    t_remaining: np.ndarray
    matrix: sparse.csr_matrix

    def contributor_starts(self) -> np.ndarray:
        """Indices into the pair arrays where each pixel's list begins."""
        if self.pixel.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(np.diff(self.pixel, prepend=-1))


def _project_arrays(mu: np.ndarray, cov: np.ndarray, cam: Camera):
    """Vectorized projection of world-space Gaussians to the image plane."""
    p = mu @ cam.r.T + cam.t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = np.where(z > 0, 1.0 / np.where(z == 0, 1.0, z), 0.0)
    mean2d = np.stack([cam.fx * x * inv_z + cam.cx,
                       cam.fy * y * inv_z + cam.cy], axis=1)
    # Jacobian of the pinhole map at the mean, times the world-to-camera rotation.
    n = mu.shape[0]
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = cam.fx * inv_z
    j[:, 0, 2] = -cam.fx * x * inv_z**2
    j[:, 1, 1] = cam.fy * inv_z
    j[:, 1, 2] = -cam.fy * y * inv_z**2
    jw = j @ cam.r
    cov2d = jw @ cov @ np.transpose(jw, (0, 2, 1))
    return mean2d, cov2d, z


def _footprint_radius(cov2d_reg: np.ndarray) -> np.ndarray:
    a = cov2d_reg[..., 0, 0]
    b = cov2d_reg[..., 0, 1]
    c = cov2d_reg[..., 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_max = mid + disc
    return RADIUS_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))


def project_gaussian(mu, cov, cam: Camera, gaussian_index: int = 0) -> Splat2D | None:
    """Project one Gaussian; returns None when culled (behind the near plane
    or with its whole footprint outside the image)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(1, 3)
    cov = np.asarray(cov, dtype=np.float64).reshape(1, 3, 3)
    mean2d, cov2d, z = _project_arrays(mu, cov, cam)
    if z[0] <= ZNEAR:
        return None
    reg = cov2d[0] + COV2D_REG * np.eye(2)
    r = _footprint_radius(reg[None])[0]
    mx, my = mean2d[0]
    if mx + r < 0 or mx - r > cam.width - 1 or my + r < 0 or my - r > cam.height - 1:
        return None
    return Splat2D(mean2d=mean2d[0], cov2d=cov2d[0], depth=float(z[0]),
                   gaussian_index=gaussian_index)


def evaluate_contribution(splat: Splat2D, alpha: float, u) -> float:
    """Opacity-weighted Gaussian falloff at pixel ``u``.

    The projected covariance is regularized before inversion; a covariance
    still singular after regularization skips the contributor (logged once).
    """
    global _warned_singular
    a = splat.cov2d[0, 0] + COV2D_REG
    b = splat.cov2d[0, 1]
    c = splat.cov2d[1, 1] + COV2D_REG
    det = a * c - b * b
    if det <= 1e-12:
        if not _warned_singular:
            log.warning("skipping contributor with singular projected covariance")
            _warned_singular = True
        return 0.0
    dx = u[0] - splat.mean2d[0]
    dy = u[1] - splat.mean2d[1]
    quad = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return float(alpha * np.exp(-0.5 * max(quad, 0.0)))


def depth_sort(splats: list[Splat2D]) -> np.ndarray:
    """Indices ordering splats by ascending depth, ties by lower gaussian index."""
    if not splats:
        return np.empty(0, dtype=np.int64)
    depth = np.array([s.depth for s in splats])
    gidx = np.array([s.gaussian_index for s in splats])
    return np.lexsort((gidx, depth))


def compute_blend_state(mu, cov, alpha, cam: Camera) -> BlendState:
    """Project, sort, and blend all Gaussians for one view.

    Per pixel, contributions run front to back: weight = transmittance *
    contribution, transmittance *= (1 - contribution); contributions below
    the cutoff are skipped and blending stops once transmittance falls under
    the termination threshold.
    """
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    n_total = mu.shape[0]
    w_img, h_img = cam.width, cam.height
    n_pix = w_img * h_img

    def empty_state() -> BlendState:
        return BlendState(
            width=w_img, height=h_img, n_gaussians=n_total,
            pixel=np.empty(0, dtype=np.int64), gauss=np.empty(0, dtype=np.int64),
            weight=np.empty(0), t_remaining=np.ones(n_pix),
            matrix=sparse.csr_matrix((n_pix, n_total)))

    if n_total == 0:
        return empty_state()

    mean2d, cov2d, z = _project_arrays(mu, cov, cam)
    reg_a = cov2d[:, 0, 0] + COV2D_REG
    reg_b = cov2d[:, 0, 1]
    reg_c = cov2d[:, 1, 1] + COV2D_REG
    det = reg_a * reg_c - reg_b * reg_b
    radius = _footprint_radius(np.stack(
        [np.stack([reg_a, reg_b], -1), np.stack([reg_b, reg_c], -1)], -2))

    x0 = np.ceil(mean2d[:, 0] - radius)
    x1 = np.floor(mean2d[:, 0] + radius)
    y0 = np.ceil(mean2d[:, 1] - radius)
    y1 = np.floor(mean2d[:, 1] + radius)
    x0 = np.clip(x0, 0, w_img - 1)
    x1 = np.clip(x1, 0, w_img - 1)
    y0 = np.clip(y0, 0, h_img - 1)
    y1 = np.clip(y1, 0, h_img - 1)

    keep = (z > ZNEAR) & (det > 1e-12) & (alpha >= CONTRIB_CUTOFF)
    keep &= (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= w_img - 1)
    keep &= (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= h_img - 1)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return empty_state()

    # Front-to-back order, ties broken by the lower Gaussian index.
    order = idx[np.lexsort((idx, z[idx]))]
    ox0 = x0[order].astype(np.int64)
    ox1 = x1[order].astype(np.int64)
    oy0 = y0[order].astype(np.int64)
    oy1 = y1[order].astype(np.int64)
    widths = ox1 - ox0 + 1
    heights = oy1 - oy0 + 1
    counts = widths * heights
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    total = int(counts.sum())

    gs = np.repeat(np.arange(order.size), counts)
    rel = np.arange(total) - offsets[gs]
    px = ox0[gs] + rel % widths[gs]
    py = oy0[gs] + rel // widths[gs]

    dx = px - mean2d[order][gs, 0]
    dy = py - mean2d[order][gs, 1]
    ia = reg_a[order][gs]
    ib = reg_b[order][gs]
    ic = reg_c[order][gs]
    idet = det[order][gs]
    quad = (ic * dx * dx - 2.0 * ib * dx * dy + ia * dy * dy) / idet
    o = alpha[order][gs] * np.exp(-0.5 * np.maximum(quad, 0.0))

    m = o >= CONTRIB_CUTOFF
    gs = gs[m]
    o = o[m]
    pix = (py[m] * w_img + px[m]).astype(np.int64)

    sort_idx = np.lexsort((gs, pix))
    pix = pix[sort_idx]
    gs = gs[sort_idx]
    o = o[sort_idx]

    t = np.ones(n_pix)
    weight = np.zeros(o.size)
    if o.size:
        starts = np.flatnonzero(np.diff(pix, prepend=-1))
        seg_len = np.diff(np.append(starts, pix.size))
        max_len = int(seg_len.max())
        for j in range(max_len):
            sel = starts[seg_len > j] + j
            p = pix[sel]
            oo = o[sel]
            t_now = t[p]
            active = t_now >= TERMINATION
            weight[sel] = np.where(active, t_now * oo, 0.0)
            t[p] = np.where(active, t_now * (1.0 - oo), t_now)

    live = weight > 0.0
    pix = pix[live]
    gauss = order[gs[live]]
    weight = weight[live]
    matrix = sparse.csr_matrix((weight, (pix, gauss)), shape=(n_pix, n_total))
    return BlendState(width=w_img, height=h_img, n_gaussians=n_total,
                      pixel=pix, gauss=gauss, weight=weight,
                      t_remaining=t, matrix=matrix)


def blend_state_for(gaussians: GaussianSet, cam: Camera) -> BlendState:
    return compute_blend_state(gaussians.mu, gaussians.cov, gaussians.alpha, cam)


def render_channels(state: BlendState, values: np.ndarray) -> np.ndarray:
    """Blend per-Gaussian channel rows into an image. Linear in ``values``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != state.n_gaussians:
        raise ContractError(
            f"value rows {values.shape[0]} != gaussians {state.n_gaussians}")
    flat = state.matrix @ values
    return flat.reshape(state.height, state.width, values.shape[1])


def blend_gradient(state: BlendState, d_image: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`render_channels`: per-Gaussian channel gradients."""
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.ndim == 2:
        d_image = d_image[:, :, None]
    if d_image.shape[:2] != (state.height, state.width):
        raise ContractError(
            f"gradient image is {d_image.shape[:2]}, state is "
            f"{(state.height, state.width)}")
    flat = d_image.reshape(state.height * state.width, -1)
    return state.matrix.T @ flat


def render(scene: Scene, cam: Camera, channels=("color", "instance", "hier"),
           state: BlendState | None = None,
           gaussians: GaussianSet | None = None):
    """Render the requested channel stacks for one view.

    Returns (dict of FeatureImage keyed by channel name, BlendState). Pass a
    cached ``state`` to skip re-projection when geometry has not changed.
    """
    if gaussians is None:
        gaussians = scene.spawn_all()
    if state is None:
        state = blend_state_for(gaussians, cam)
    sources = {"color": gaussians.color, "instance": gaussians.g,
               "hier": gaussians.h}
    unknown = [ch for ch in channels if ch not in sources]
    if unknown:
        raise ContractError(f"unknown channels {unknown}; expected subset of "
                            f"{sorted(sources)}")
    images = {}
    for ch in channels:
        images[ch] = FeatureImage.from_array(render_channels(state, sources[ch]))
    return images, state


def selection_mask(state: BlendState, selected: np.ndarray,
                   min_cover: float = 0.5) -> np.ndarray:
    """Binary coverage of a Gaussian selection for one view.

    A pixel is covered when the selected Gaussians carry the majority of its
    blended weight and the pixel is substantially covered at all
    (total weight >= ``min_cover``, which keeps fringe halos out).
    """
    selected = np.asarray(selected, dtype=bool)
    if selected.shape[0] != state.n_gaussians:
        raise ContractError("selection length does not match gaussian count")
    n_pix = state.height * state.width
    if state.pixel.size == 0:
        return np.zeros((state.height, state.width), dtype=bool)
    totals = np.bincount(state.pixel, weights=state.weight, minlength=n_pix)
    sel_pairs = selected[state.gauss]
    sel_weight = np.bincount(state.pixel[sel_pairs],
                             weights=state.weight[sel_pairs], minlength=n_pix)
    mask = (totals >= min_cover) & (sel_weight > 0.5 * totals)
    return mask.reshape(state.height, state.width)


SGFI_MAGIC = b"SGFI"


def write_feature_image(img: FeatureImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", SGFI_MAGIC, img.width, img.height,
                             img.channels))
        fh.write(np.ascontiguousarray(img.data, dtype="<f4").tobytes())


def read_feature_image(path) -> FeatureImage:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ParseError(f"feature image truncated at byte offset {len(raw)}: "
                         "header needs 16 bytes")
    magic, w, h, c = struct.unpack_from("<4sIII", raw, 0)
    if magic != SGFI_MAGIC:
        raise ParseError(f"bad magic {magic!r} at byte offset 0")
    expected = 16 + w * h * c * 4
    if len(raw) != expected:
        raise ParseError(f"feature image payload ends at byte offset {len(raw)}, "
                         f"expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64)
    return FeatureImage(width=w, height=h, channels=c,
                        data=data.reshape(h, w, c))


def write_ppm(img: FeatureImage, path) -> None:
    """8-bit binary PPM export for 3-channel images."""
    if img.channels != 3:
        raise ContractError(f"PPM export needs 3 channels, got {img.channels}")
    u8 = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())
