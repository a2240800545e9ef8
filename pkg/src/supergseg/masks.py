"""Mask ingestion, overlap decomposition, patch correlation, and instances.

A view's binary masks may overlap; pixels are regrouped into patches, the
maximal sets of pixels covered by an identical set of masks. Patch pairs get
an integer correlation (how many masks cover both), which orders each patch's
level sets from most to least related. Patches grouped under their largest
covering mask become non-overlapping instances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import IngestError, ParseError

MASK_MAGIC = b"SGMK"
PATCH_MAGIC = b"SGPM"
INSTANCE_MAGIC = b"SGIM"

PATCH_CAP = 4096


@dataclass
class MaskSet:
    view_id: int
    masks: np.ndarray    # (M, H, W) bool

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise IngestError(f"mask stack must be (M, H, W), got {self.masks.shape}")
        empties = np.flatnonzero(~self.masks.any(axis=(1, 2)))
        if empties.size:
            raise IngestError(f"masks {empties.tolist()} contain no pixels")


@dataclass
class PatchDecomposition:
    patch_map: np.ndarray              # (H, W) int32, -1 outside every mask
    patch_masksets: list[np.ndarray]   # per patch: sorted covering mask indices
    corr: np.ndarray                   # (P, P) int64 shared-mask counts
    levels: list[list[np.ndarray]]     # per patch: patch-index sets, nearest level first
    instance_map: np.ndarray           # (H, W) int32
    instance_of_patch: np.ndarray      # (P,) int32
    instance_owner_mask: np.ndarray    # (n_instances,) mask index defining each instance

    @property
    def n_patches(self) -> int:
        return len(self.patch_masksets)

    @property
    def n_instances(self) -> int:
        return len(self.instance_owner_mask)


def decompose_to_patches(masks: MaskSet) -> tuple[np.ndarray, list[np.ndarray]]:
    """Partition pixels by their covering-mask set.

    Two pixels share a patch id iff exactly the same masks cover both. Ids
    count up in row-major first-occurrence order; uncovered pixels get -1.
    """
    m, h, w = masks.masks.shape
    flat = masks.masks.reshape(m, h * w).T          # (HW, M)
    covered = flat.any(axis=1)
    packed = np.packbits(flat, axis=1)
    keys = np.ascontiguousarray(packed).view(
        np.dtype((np.void, packed.shape[1])))[:, 0]
    _, first_idx, inverse = np.unique(keys, return_index=True, return_inverse=True)

    # renumber: covered keys only, ordered by first occurrence in the scan
    key_covered = covered[first_idx]
    order = np.argsort(first_idx[key_covered], kind="stable")
    ids = np.full(first_idx.size, -1, dtype=np.int32)
    ids[np.flatnonzero(key_covered)[order]] = np.arange(order.size, dtype=np.int32)
    patch_flat = ids[inverse]

    n_patches = int(order.size)
    if n_patches > PATCH_CAP:
        raise IngestError(
            f"{n_patches} patches exceed the {PATCH_CAP} cap; supply coarser masks")
    reps = first_idx[key_covered][order]
    patch_masksets = [np.flatnonzero(flat[r]) for r in reps]
    return patch_flat.reshape(h, w), patch_masksets


def correlation_matrix(patch_masksets: list[np.ndarray], n_masks: int | None = None) -> np.ndarray:
    """corr[p, q] = number of masks covering both patch p and patch q."""
    p = len(patch_masksets)
    if n_masks is None:
        n_masks = max((int(s.max()) + 1 for s in patch_masksets if s.size), default=0)
    inc = np.zeros((p, n_masks), dtype=np.int64)
    for i, s in enumerate(patch_masksets):
        inc[i, s] = 1
    return inc @ inc.T


def level_sets(p: int, corr: np.ndarray) -> list[np.ndarray]:
    """Patch index sets around patch p, strongest correlation first.

    Distinct positive correlation values of row p define the levels; the
    first level contains p itself (its self-correlation is its mask count).
    """
    row = corr[p]
    positive = np.flatnonzero(row > 0)
    values = np.unique(row[positive])[::-1]
    return [positive[row[positive] == v] for v in values]


def all_level_sets(corr: np.ndarray) -> list[list[np.ndarray]]:
    return [level_sets(p, corr) for p in range(corr.shape[0])]


def group_instances(patch_masksets: list[np.ndarray], masks: MaskSet,
                    patch_map: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assign each patch to its largest-area covering mask.

    Patches sharing that owner mask share an instance id; ids count up by
    first patch occurrence. Area ties go to the lower mask index.
    """
    areas = masks.masks.sum(axis=(1, 2))
    owner = np.empty(len(patch_masksets), dtype=np.int64)
    for i, s in enumerate(patch_masksets):
        best = s[np.argmax(areas[s])]  # argmax takes the first (lowest) on ties
        owner[i] = best
    uniq_owner, inst_of_patch = np.unique(owner, return_inverse=True)
    # reorder instance ids by first patch occurrence
    first = np.array([np.argmax(inst_of_patch == k) for k in range(uniq_owner.size)])
    order = np.argsort(first, kind="stable")
    remap = np.empty(order.size, dtype=np.int32)
    remap[order] = np.arange(order.size, dtype=np.int32)
    inst_of_patch = remap[inst_of_patch].astype(np.int32)
    owner_of_instance = uniq_owner[order]

    instance_map = np.full(patch_map.shape, -1, dtype=np.int32)
    covered = patch_map >= 0
    instance_map[covered] = inst_of_patch[patch_map[covered]]
    return instance_map, inst_of_patch, owner_of_instance


def build_decomposition(masks: MaskSet) -> PatchDecomposition:
    patch_map, patch_masksets = decompose_to_patches(masks)
    corr = correlation_matrix(patch_masksets, n_masks=masks.masks.shape[0])
    levels = all_level_sets(corr)
    instance_map, inst_of_patch, owner = group_instances(patch_masksets, masks, patch_map)
    return PatchDecomposition(patch_map=patch_map, patch_masksets=patch_masksets,
                              corr=corr, levels=levels, instance_map=instance_map,
                              instance_of_patch=inst_of_patch,
                              instance_owner_mask=owner)


def write_mask_set(masks: np.ndarray, path) -> None:
    masks = np.asarray(masks, dtype=bool)
    m, h, w = masks.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", MASK_MAGIC, w, h, m))
        for i in range(m):
            fh.write(np.packbits(masks[i].reshape(-1)).tobytes())


def read_mask_set(path, view_id: int = 0) -> MaskSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ParseError(f"mask file truncated at byte offset {len(raw)}")
    magic, w, h, m = struct.unpack_from("<4sIII", raw, 0)
    if magic != MASK_MAGIC:
        raise ParseError(f"bad magic {magic!r} at byte offset 0")
    stride = (w * h + 7) // 8
    expected = 16 + m * stride
    if len(raw) != expected:
        raise ParseError(f"mask payload ends at byte offset {len(raw)}, expected {expected}")
    out = np.empty((m, h, w), dtype=bool)
    for i in range(m):
        chunk = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=16 + i * stride)
        bits = np.unpackbits(chunk)[: w * h]
        out[i] = bits.reshape(h, w).astype(bool)
    return MaskSet(view_id=view_id, masks=out)


def write_id_map(ids: np.ndarray, path, magic: bytes) -> None:
    ids = np.asarray(ids, dtype="<i4")
    h, w = ids.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", magic, w, h))
        fh.write(ids.tobytes())


def read_id_map(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise ParseError(f"id map truncated at byte offset {len(raw)}")
    got, w, h = struct.unpack_from("<4sII", raw, 0)
    if got != magic:
        raise ParseError(f"bad magic {got!r} at byte offset 0, expected {magic!r}")
    expected = 12 + w * h * 4
    if len(raw) != expected:
        raise ParseError(f"id map payload ends at byte offset {len(raw)}, expected {expected}")
    return np.frombuffer(raw, dtype="<i4", offset=12).reshape(h, w).astype(np.int32)
