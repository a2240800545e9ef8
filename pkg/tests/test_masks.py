import numpy as np
import pytest

from supergseg.errors import IngestError, ParseError
from supergseg.masks import (INSTANCE_MAGIC, MaskSet, PATCH_MAGIC,
                             build_decomposition, correlation_matrix,
                             decompose_to_patches, group_instances, level_sets,
                             read_id_map, read_mask_set, write_id_map,
                             write_mask_set)

from oracles import naive_correlation, naive_decompose


def rect_mask(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def test_maskset_rejects_empty_mask():
    with pytest.raises(IngestError):
        MaskSet(view_id=0, masks=np.zeros((1, 4, 4), dtype=bool))


def test_two_disjoint_masks_two_patches():
    masks = MaskSet(0, np.stack([rect_mask(8, 8, 0, 3, 0, 3),
                                 rect_mask(8, 8, 5, 8, 5, 8)]))
    pm, sets = decompose_to_patches(masks)
    assert len(sets) == 2
    assert set(np.unique(pm).tolist()) == {-1, 0, 1}
    assert [s.tolist() for s in sets] == [[0], [1]]


def test_nested_masks_decompose():
    outer = rect_mask(8, 8, 0, 6, 0, 6)
    inner = rect_mask(8, 8, 2, 4, 2, 4)
    pm, sets = decompose_to_patches(MaskSet(0, np.stack([outer, inner])))
    assert len(sets) == 2
    assert [s.tolist() for s in sets] == [[0], [0, 1]]  # scan hits A\B first
    corr = correlation_matrix(sets, 2)
    assert corr[0, 1] == 1 and corr[0, 0] == 1 and corr[1, 1] == 2


@pytest.mark.parametrize("seed", range(6))
def test_decompose_matches_pixel_keying_oracle(seed):
    rng = np.random.default_rng(seed)
    h = w = 32
    masks = []
    for _ in range(6):
        y0, x0 = rng.integers(0, h - 4, 2)
        y1 = y0 + rng.integers(3, h - y0)
        x1 = x0 + rng.integers(3, w - x0)
        masks.append(rect_mask(h, w, y0, y1, x0, x1))
    ms = MaskSet(0, np.stack(masks))
    pm, sets = decompose_to_patches(ms)
    opm, osets = naive_decompose(ms.masks)
    assert np.array_equal(pm, opm)
    assert len(sets) == len(osets)
    for a, b in zip(sets, osets):
        assert np.array_equal(a, b)
    corr = correlation_matrix(sets, 6)
    assert np.array_equal(corr, naive_correlation(osets))
    assert np.array_equal(corr, corr.T)
    for p in range(len(sets)):
        assert corr[p, p] == sets[p].size


def test_patch_partition_and_refinement():
    rng = np.random.default_rng(99)
    h = w = 24
    masks = [rect_mask(h, w, *sorted(rng.integers(0, h, 2).tolist()) or (0, 1),
                       *sorted(rng.integers(0, w, 2).tolist()) or (0, 1))
             for _ in range(4)]
    masks = [m if m.any() else rect_mask(h, w, 0, 2, 0, 2) for m in masks]
    ms = MaskSet(0, np.stack(masks))
    pm, sets = decompose_to_patches(ms)
    covered = ms.masks.any(axis=0)
    # partition: covered pixels have an id, uncovered are -1
    assert np.all((pm >= 0) == covered)
    sizes = np.bincount(pm[pm >= 0])
    assert sizes.sum() + (~covered).sum() == h * w
    # refinement: no patch straddles a mask boundary
    for pid in range(len(sets)):
        where = pm == pid
        for m in ms.masks:
            inside = m[where]
            assert inside.all() or not inside.any()


def test_level_sets_isolated_patch():
    corr = np.array([[2, 0], [0, 1]])
    lv = level_sets(0, corr)
    assert len(lv) == 1 and lv[0].tolist() == [0]


def test_level_sets_nesting_chain():
    # three masks A > B > C; patches: A\B, B\C, C
    h = w = 12
    a = rect_mask(h, w, 0, 12, 0, 12)
    b = rect_mask(h, w, 2, 10, 2, 10)
    c = rect_mask(h, w, 4, 8, 4, 8)
    pm, sets = decompose_to_patches(MaskSet(0, np.stack([a, b, c])))
    corr = correlation_matrix(sets, 3)
    # patch index 2 is C (covering set size 3)
    p_c = max(range(3), key=lambda p: sets[p].size)
    lv = level_sets(p_c, corr)
    assert len(lv) == 3
    assert [corr[p_c, l[0]] for l in lv] == [3, 2, 1]


def test_level_sets_distinct_value_grouping():
    corr = np.array([[4, 4, 2], [4, 4, 2], [2, 2, 4]])
    lv = level_sets(0, corr)
    assert len(lv) == 2
    assert lv[0].tolist() == [0, 1] and lv[1].tolist() == [2]


def test_level_monotonicity_random():
    rng = np.random.default_rng(3)
    for _ in range(20):
        sets = [np.sort(rng.choice(8, size=rng.integers(1, 5), replace=False))
                for _ in range(6)]
        corr = correlation_matrix(sets, 8)
        for p in range(6):
            lv = level_sets(p, corr)
            vals = [corr[p, l[0]] for l in lv]
            assert all(a > b for a, b in zip(vals, vals[1:]))


def test_group_instances_disjoint_and_nested():
    h = w = 10
    m1 = rect_mask(h, w, 0, 4, 0, 4)
    m2 = rect_mask(h, w, 6, 10, 6, 10)
    ms = MaskSet(0, np.stack([m1, m2]))
    pm, sets = decompose_to_patches(ms)
    imap, iop, owner = group_instances(sets, ms, pm)
    assert np.array_equal(imap >= 0, m1 | m2)
    assert len(owner) == 2

    outer = rect_mask(h, w, 0, 8, 0, 8)
    inner = rect_mask(h, w, 2, 5, 2, 5)
    ms = MaskSet(0, np.stack([outer, inner]))
    pm, sets = decompose_to_patches(ms)
    imap, iop, owner = group_instances(sets, ms, pm)
    assert len(owner) == 1 and np.all(iop == 0)
    assert np.array_equal(imap == 0, outer)


def test_group_instances_recovers_generator_labels(tiny_bundle):
    for v in range(2):
        ms = MaskSet(v, tiny_bundle.masks[v])
        d = build_decomposition(ms)
        assert np.array_equal(d.instance_map, tiny_bundle.gt_instance[v])


def test_mask_file_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    masks = rng.random((4, 9, 13)) > 0.6
    masks[:, 0, 0] = True  # keep every mask non-empty
    p = tmp_path / "v.sgmk"
    write_mask_set(masks, p)
    back = read_mask_set(p)
    assert np.array_equal(back.masks, masks)


def test_mask_file_bad_magic(tmp_path):
    p = tmp_path / "v.sgmk"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ParseError, match="magic"):
        read_mask_set(p)


def test_id_map_roundtrip(tmp_path):
    ids = np.arange(20, dtype=np.int32).reshape(4, 5) - 1
    p = tmp_path / "m.sgpm"
    write_id_map(ids, p, PATCH_MAGIC)
    assert np.array_equal(read_id_map(p, PATCH_MAGIC), ids)
    with pytest.raises(ParseError):
        read_id_map(p, INSTANCE_MAGIC)


def test_dimension_mismatch_rejected():
    with pytest.raises(IngestError):
        MaskSet(0, np.zeros((2, 3), dtype=bool))
