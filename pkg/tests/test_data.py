import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskaug import data as D
from taskaug.errors import DegenerateVolume, InsufficientSubjects, ShapeMismatch


def percentile_oracle(values, q):
    """Linear-interpolated percentile from the sorted sample."""
    v = np.sort(np.ravel(values))
    pos = q / 100 * (v.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, v.size - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_normalize_uses_whole_volume_percentiles(seed):
    r = np.random.default_rng(seed)
    vol = r.gamma(2.0, 100.0, size=(3, 7, 5))
    out = D.normalize_volume(vol)
    p2, p98 = percentile_oracle(vol, 2), percentile_oracle(vol, 98)
    np.testing.assert_allclose(out, (vol - p2) / (p98 - p2), rtol=1e-5, atol=1e-5)


def test_constant_volume_is_degenerate():
    with pytest.raises(DegenerateVolume):
        D.normalize_volume(np.full((2, 4, 4), 7.0))


@pytest.mark.parametrize("n,size", [(10, 6), (6, 10), (7, 4), (4, 7), (5, 5)])
def test_crop_or_pad_keeps_centre(n, size):
    a = np.arange(n * n).reshape(n, n) + 1
    out = D.crop_or_pad(a, size)
    assert out.shape == (size, size)
    if n >= size:
        s = (n - size) // 2
        np.testing.assert_array_equal(out, a[s:s + size, s:s + size])
    else:
        b = (size - n) // 2
        np.testing.assert_array_equal(out[b:b + n, b:b + n], a)
        assert out.sum() == a.sum()


def test_resample_identity_spacing():
    r = np.random.default_rng(0)
    img = r.random((12, 12)).astype(np.float32)
    lab = r.integers(0, 4, (12, 12))
    out_img, out_lab = D.resample_slice(img, lab, (2.0, 2.0), 2.0, 12)
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_lab, lab)


def test_resample_linear_ramp_is_exact_inside():
    # bilinear interpolation reproduces linear functions at pixel-centre coordinates
    h = w = 20
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = (0.5 * yy + 0.25 * xx).astype(np.float32)
    out, _ = D.resample_slice(img, np.zeros((h, w)), (1.0, 1.0), 0.5, 40)
    o = np.arange(40)
    src = (o + 0.5) / 2.0 - 0.5
    expected = 0.5 * src[:, None] + 0.25 * src[None, :]
    inner = slice(1, 39)
    np.testing.assert_allclose(out[inner, inner], expected[inner, inner], atol=1e-5)


def test_resample_labels_nearest_and_upsampling_replicates():
    lab = np.array([[0, 1], [2, 3]])
    _, out = D.resample_slice(np.zeros((2, 2)), lab, (2.0, 2.0), 1.0, 4)
    np.testing.assert_array_equal(out, np.kron(lab, np.ones((2, 2), int)))
    with pytest.raises(ShapeMismatch):
        D.resample_slice(np.zeros((2, 2)), np.zeros((3, 3)), (1, 1), 1.0, 2)


def test_preprocess_volume_shapes(raw_records):
    rec = D.preprocess_volume(raw_records[0], 2.0, 48)
    assert rec.image.shape == rec.labels.shape == (raw_records[0].n_slices, 48, 48)
    assert rec.in_plane_spacing == (2.0, 2.0)
    assert set(np.unique(rec.labels)) <= {0, 1, 2, 3}


def test_volume_record_validation():
    with pytest.raises(ShapeMismatch):
        D.VolumeRecord("a", "NOR", np.zeros((2, 4, 4)), np.zeros((2, 4, 5), np.uint8), (1, 1), 5.0)


def test_split_quotas_disjoint_and_deterministic(tiny_records):
    s1 = D.make_split(tiny_records, 7)
    s2 = D.make_split(tiny_records, 7)
    assert s1 == s2
    assert len(s1.test_ids) == 20 and len(s1.unlabelled_ids) == 25
    assert len(s1.labelled_pool_ids) == 10 and len(s1.val_ids) == 2
    roles = [s1.test_ids, s1.val_ids, s1.labelled_pool_ids, s1.unlabelled_ids]
    flat = [i for r in roles for i in r]
    assert len(flat) == len(set(flat))
    for g in D.GROUPS:
        assert sum(s1.groups[i] == g for i in s1.test_ids) == 4
        assert sum(s1.groups[i] == g for i in s1.unlabelled_ids) == 5
        assert sum(s1.groups[i] == g for i in s1.labelled_pool_ids) == 2
    assert D.make_split(tiny_records, 8) != s1


def test_split_requires_enough_subjects(tiny_records):
    with pytest.raises(InsufficientSubjects):
        D.make_split(tiny_records[:40], 0)


def test_labelled_subsets(tiny_split):
    one = D.sample_labelled_subset(tiny_split, 1, 0)
    assert len(one) == 1 and one[0] in tiny_split.labelled_pool_ids
    three = D.sample_labelled_subset(tiny_split, 3, 2)
    assert len({tiny_split.groups[i] for i in three}) == 3
    assert three == D.sample_labelled_subset(tiny_split, 3, 2)
    picks = {tuple(D.sample_labelled_subset(tiny_split, 1, k)) for k in range(10)}
    assert len(picks) > 1
    with pytest.raises(ValueError):
        D.sample_labelled_subset(tiny_split, 2, 0)


def test_split_file_roundtrip(tiny_split, tmp_path):
    path = tmp_path / "split.txt"
    D.write_split(tiny_split, path)
    assert "test:" in path.read_text()
    assert D.read_split(path) == tiny_split


def test_record_roundtrip(raw_records, tmp_path):
    rec = raw_records[0]
    D.save_record(rec, tmp_path / "r.npz")
    back = D.load_record(tmp_path / "r.npz")
    np.testing.assert_array_equal(back.image, rec.image)
    np.testing.assert_array_equal(back.labels, rec.labels)
    assert back.subject_id == rec.subject_id and back.group == rec.group
    assert back.meta["geometry"] == rec.meta["geometry"]


def write_nifti(path, data, pixdim, gz=False):
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    dims = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", header, 40, *dims)
    code = {np.dtype("float32"): 16, np.dtype("uint8"): 2, np.dtype("int16"): 4}[data.dtype]
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *pixdim, *[1.0] * (7 - len(pixdim)))
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    raw = bytes(header) + b"\x00" * 4 + data.tobytes(order="F")
    path.write_bytes(gzip.compress(raw) if gz else raw)


@pytest.mark.parametrize("gz", [False, True])
def test_read_nifti(tmp_path, gz):
    data = np.random.default_rng(0).random((5, 6, 3)).astype(np.float32)
    path = tmp_path / ("v.nii.gz" if gz else "v.nii")
    write_nifti(path, data, (1.25, 1.5, 8.0), gz)
    back, pixdim = D.read_nifti(path)
    np.testing.assert_array_equal(back, data)
    assert pixdim == (1.25, 1.5, 8.0)


def test_read_acdc_subject_folder(tmp_path):
    subj = tmp_path / "patient001"
    subj.mkdir()
    (subj / "Info.cfg").write_text("ED: 1\nES: 12\nGroup: DCM\n")
    img = np.random.default_rng(0).random((6, 5, 2)).astype(np.float32)
    lab = np.random.default_rng(1).integers(0, 4, (6, 5, 2)).astype(np.uint8)
    write_nifti(subj / "patient001_frame12.nii.gz", img, (1.5, 1.5, 10.0), gz=True)
    write_nifti(subj / "patient001_frame12_gt.nii.gz", lab, (1.5, 1.5, 10.0), gz=True)
    (rec,) = D.ingest_directory(tmp_path, "ES")
    assert rec.group == "DCM" and rec.n_slices == 2
    np.testing.assert_array_equal(rec.image[1], img[:, :, 1])
    np.testing.assert_array_equal(rec.labels[0], lab[:, :, 0])
    assert rec.in_plane_spacing == (1.5, 1.5) and rec.slice_thickness == 10.0


def phantom_oracle(geometry, k, n_slices, i, j, shape, spacing):
    """Independent point-wise re-render of one phantom pixel."""
    h, w = shape
    y = (i - (h - 1) / 2) * spacing - geometry["center_mm"][0]
    x = (j - (w - 1) / 2) * spacing - geometry["center_mm"][1]
    a = np.radians(geometry["angle_deg"])
    # rotate the point into the heart frame
    u = np.cos(a) * x + np.sin(a) * y
    v = np.cos(a) * y - np.sin(a) * x
    f = 1.0 - geometry["apex_shrink"] * (k / max(n_slices - 1, 1)) ** 1.5
    e = geometry["ellipticity"]
    rho = np.hypot(u / (1 + e), v / (1 - e))
    r_endo = geometry["lv_radius"] * f
    r_epi = (geometry["lv_radius"] + geometry["wall"]) * f
    if rho <= r_endo:
        return 3
    if rho <= r_epi:
        return 2
    s = geometry["rv_scale"] * f * f
    if ((u - 0.7 * r_epi) / (r_epi * s)) ** 2 + (v / (1.4 * r_epi * s)) ** 2 <= 1.0:
        return 1
    return 0


def test_phantom_labels_match_analytic_oracle(raw_records):
    from taskaug.segmentation import dice_per_structure

    rec = raw_records[4]
    s = rec.in_plane_spacing[0]
    oracle = np.array([[[phantom_oracle(rec.meta["geometry"], k, rec.n_slices, i, j,
                                        rec.labels.shape[1:], s)
                         for j in range(rec.labels.shape[2])]
                        for i in range(rec.labels.shape[1])]
                       for k in range(rec.n_slices)])
    assert all(v == 1.0 for v in dice_per_structure(rec.labels, oracle).values())


def test_synthetic_dataset_properties():
    recs = D.make_synthetic_dataset(15, seed=0, matrix=48)
    assert [r.group for r in recs[:5]] == list(D.GROUPS)
    again = D.make_synthetic_dataset(15, seed=0, matrix=48)
    np.testing.assert_array_equal(recs[7].image, again[7].image)
    for rec in recs:
        mid = rec.labels[rec.n_slices // 2]
        assert set(np.unique(mid)) == {0, 1, 2, 3}
        assert rec.image.min() >= 0
    with pytest.raises(ValueError):
        D.make_synthetic_dataset(5, 0)


def test_slice_batch_and_provenance():
    prov = D.Provenance("s1", 2)
    assert not prov.is_generated
    assert prov.with_step("affine").lineage == ("affine",)
    assert prov.with_step("affine").with_step("gd").is_generated
    batch = D.SliceBatch(np.zeros((2, 4, 4, 1)), D.one_hot(np.zeros((2, 4, 4), int)),
                         [prov, prov.with_step("gi")])
    assert len(batch.subset([1])) == 1
    assert len(D.SliceBatch.concat([batch, batch])) == 4
    with pytest.raises(ShapeMismatch):
        D.SliceBatch(np.zeros((2, 4, 4, 1)), np.zeros((2, 4, 4, 3)), [prov, prov])
