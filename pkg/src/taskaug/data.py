"""Volume ingestion, normalization, resampling, splits and synthetic phantoms.

Volumes are stored slice-first: ``image[s, y, x]``.  Labels use the integer
codes 0=background, 1=RV, 2=Myo, 3=LV throughout the package.
"""

from __future__ import annotations

import gzip
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateVolume, InsufficientSubjects, ShapeMismatch

log = logging.getLogger(__name__)

N_CLASSES = 4
STRUCTURES = {"RV": 1, "Myo": 2, "LV": 3}
GROUPS = ("NOR", "MINF", "DCM", "HCM", "RV")
TARGET_SPACING = 1.367
TARGET_SIZE = 224

# per-group quotas: test, unlabelled, labelled pool
TEST_PER_GROUP = 4
UNLABELLED_PER_GROUP = 5
POOL_PER_GROUP = 2
N_VAL = 2


@dataclass
class VolumeRecord:
    subject_id: str
    group: str
    image: np.ndarray
    labels: np.ndarray
    in_plane_spacing: tuple[float, float] = (TARGET_SPACING, TARGET_SPACING)
    slice_thickness: float = 10.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        labels = np.asarray(self.labels)
        if self.image.ndim != 3:
            raise ShapeMismatch(f"image must be 3D (slices, H, W), got {self.image.shape}")
        if labels.shape != self.image.shape:
            raise ShapeMismatch(
                f"labels {labels.shape} do not match image {self.image.shape}")
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("labels must be integer valued")
        labels = labels.astype(np.uint8)
        if labels.size and labels.max() >= N_CLASSES:
            raise ValueError(f"label values must lie in 0..{N_CLASSES - 1}")
        self.labels = labels
        self.in_plane_spacing = tuple(float(s) for s in self.in_plane_spacing)

    @property
    def n_slices(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class Provenance:
    """Where a training slice came from and what was done to it."""

    subject_id: str
    slice_index: int
    lineage: tuple[str, ...] = ()

    def with_step(self, step: str) -> "Provenance":
        return Provenance(self.subject_id, self.slice_index, self.lineage + (step,))

    @property
    def is_generated(self) -> bool:
        return any(step in GENERATED_STEPS for step in self.lineage)


# transforms that turn a slice into an "augmentation image" for batch accounting;
# affine is excluded since every real slice in an augmented batch receives it
GENERATED_STEPS = frozenset({"elastic", "intensity", "gd", "gi", "mixup"})


@dataclass
class SliceBatch:
    images: np.ndarray          # (B, H, W, 1)
    labels_onehot: np.ndarray   # (B, H, W, 4)
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels_onehot = np.asarray(self.labels_onehot, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[-1] != 1:
            raise ShapeMismatch(f"images must be (B, H, W, 1), got {self.images.shape}")
        if self.labels_onehot.shape != self.images.shape[:3] + (N_CLASSES,):
            raise ShapeMismatch(
                f"labels {self.labels_onehot.shape} incompatible with images {self.images.shape}")
        if not self.provenance:
            self.provenance = [Provenance("?", i) for i in range(len(self))]
        if len(self.provenance) != len(self):
            raise ShapeMismatch("one provenance entry per slice is required")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index) -> "SliceBatch":
        index = np.asarray(index, dtype=int)
        return SliceBatch(self.images[index], self.labels_onehot[index],
                          [self.provenance[i] for i in index])

    @staticmethod
    def concat(batches) -> "SliceBatch":
        batches = [b for b in batches if len(b)]
        return SliceBatch(np.concatenate([b.images for b in batches]),
                          np.concatenate([b.labels_onehot for b in batches]),
                          [p for b in batches for p in b.provenance])


@dataclass
class DatasetSplit:
    test_ids: list
    val_ids: list
    labelled_pool_ids: list
    unlabelled_ids: list
    rng_seed: int
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        roles = [self.test_ids, self.val_ids, self.labelled_pool_ids, self.unlabelled_ids]
        ids = [i for role in roles for i in role]
        if len(ids) != len(set(ids)):
            raise ValueError("split roles must be pairwise disjoint")


def one_hot(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(n_classes)).astype(np.float32)


def normalize_volume(image: np.ndarray) -> np.ndarray:
    """Rescale so the 2nd/98th percentiles of the whole volume map to 0/1."""
    image = np.asarray(image, dtype=np.float64)
    p2, p98 = np.percentile(image, [2, 98])
    if p98 - p2 < 1e-12:
        raise DegenerateVolume(f"percentile spread {p98 - p2:g} too small to normalize")
    return ((image - p2) / (p98 - p2)).astype(np.float32)


def crop_or_pad(array: np.ndarray, size: int) -> np.ndarray:
    """Center-crop or zero-pad the last two axes to ``size`` x ``size``."""
    out = array
    for axis in (-2, -1):
        n = out.shape[axis]
        if n > size:
            start = (n - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, size - n - before)
            out = np.pad(out, pad)
    return out


def _resample_coords(n_in: int, n_out: int, factor: float) -> np.ndarray:
    # pixel centres stay aligned: output centre o sits at input (o + 0.5) / f - 0.5
    return (np.arange(n_out) + 0.5) / factor - 0.5


def resample_slice(image_slice, labels_slice, spacing, target_spacing=TARGET_SPACING,
                   size=TARGET_SIZE):
    """Resample one slice to ``target_spacing`` and crop/pad to ``size``.

    The image uses bilinear interpolation, labels use nearest neighbour.
    """
    image_slice = np.asarray(image_slice, dtype=np.float32)
    labels_slice = np.asarray(labels_slice)
    if image_slice.shape != labels_slice.shape:
        raise ShapeMismatch("image and label slices differ in shape")
    sy, sx = (float(s) for s in spacing)
    if sy <= 0 or sx <= 0:
        raise ValueError("spacing must be positive")
    fy, fx = sy / target_spacing, sx / target_spacing
    h, w = image_slice.shape
    out_h, out_w = max(1, int(round(h * fy))), max(1, int(round(w * fx)))
    if (out_h, out_w) == (h, w) and np.isclose(fy, 1.0) and np.isclose(fx, 1.0):
        img, lab = image_slice, labels_slice
    else:
        yy = _resample_coords(h, out_h, fy)
        xx = _resample_coords(w, out_w, fx)
        grid = np.meshgrid(yy, xx, indexing="ij")
        img = ndimage.map_coordinates(image_slice, grid, order=1, mode="nearest")
        # nearest neighbour for labels: round the source coordinate
        iy = np.clip(np.floor(yy + 0.5).astype(int), 0, h - 1)
        ix = np.clip(np.floor(xx + 0.5).astype(int), 0, w - 1)
        lab = labels_slice[np.ix_(iy, ix)]
    return crop_or_pad(img, size).astype(np.float32), crop_or_pad(lab, size).astype(np.uint8)


def preprocess_volume(record: VolumeRecord, target_spacing=TARGET_SPACING, size=TARGET_SIZE,
                      bias_correct=None) -> VolumeRecord:
    """Normalize then resample every slice of a subject.

    ``bias_correct`` is an optional callable applied to the raw volume first;
    N4 correction is expected to be performed externally and plugged in here.
    """
    image = record.image if bias_correct is None else bias_correct(record.image)
    image = normalize_volume(image)
    slices = [resample_slice(image[k], record.labels[k], record.in_plane_spacing,
                             target_spacing, size) for k in range(record.n_slices)]
    return VolumeRecord(
        subject_id=record.subject_id, group=record.group,
        image=np.stack([s[0] for s in slices]), labels=np.stack([s[1] for s in slices]),
        in_plane_spacing=(target_spacing, target_spacing),
        slice_thickness=record.slice_thickness, meta=dict(record.meta))


def _sorted_by_group(subjects):
    by_group = {}
    for rec in sorted(subjects, key=lambda r: r.subject_id):
        by_group.setdefault(rec.group, []).append(rec.subject_id)
    return by_group


def make_split(subjects, seed: int) -> DatasetSplit:
    """Group-balanced test / val / labelled pool / unlabelled split."""
    by_group = _sorted_by_group(subjects)
    quota = TEST_PER_GROUP + UNLABELLED_PER_GROUP + POOL_PER_GROUP
    if len(by_group) != len(GROUPS):
        raise InsufficientSubjects(
            f"expected {len(GROUPS)} groups, found {sorted(by_group)}")
    short = {g: len(ids) for g, ids in by_group.items() if len(ids) < quota}
    if short:
        raise InsufficientSubjects(f"groups below quota of {quota}: {short}")
    rng = np.random.default_rng(seed)
    test, unlabelled, pool, rest = [], [], [], []
    groups = {}
    for g in sorted(by_group):
        ids = list(rng.permutation(by_group[g]))
        test += ids[:TEST_PER_GROUP]
        unlabelled += ids[TEST_PER_GROUP:TEST_PER_GROUP + UNLABELLED_PER_GROUP]
        pool += ids[TEST_PER_GROUP + UNLABELLED_PER_GROUP:quota]
        rest += ids[quota:]
        groups.update({i: g for i in ids})
    if len(rest) < N_VAL:
        raise InsufficientSubjects(f"need {N_VAL} leftover subjects for validation, have {len(rest)}")
    val = list(rng.choice(sorted(rest), size=N_VAL, replace=False))
    ids = test + val + pool + unlabelled
    return DatasetSplit(test_ids=[str(i) for i in test], val_ids=[str(i) for i in val],
                        labelled_pool_ids=[str(i) for i in pool],
                        unlabelled_ids=[str(i) for i in unlabelled], rng_seed=int(seed),
                        groups={str(i): groups[i] for i in ids})


def sample_labelled_subset(split: DatasetSplit, n_labelled: int, run_index: int) -> list:
    """Draw the labelled training subjects for one run from the labelled pool.

    With three subjects, each comes from a different group.
    """
    if n_labelled not in (1, 3):
        raise ValueError("n_labelled must be 1 or 3")
    rng = np.random.default_rng([split.rng_seed, run_index, n_labelled])
    pool = sorted(split.labelled_pool_ids)
    if n_labelled == 1:
        return [str(rng.choice(pool))]
    by_group = {}
    for sid in pool:
        by_group.setdefault(split.groups[sid], []).append(sid)
    chosen_groups = rng.choice(sorted(by_group), size=n_labelled, replace=False)
    return [str(rng.choice(by_group[g])) for g in chosen_groups]


def write_split(split: DatasetSplit, path) -> None:
    lines = ["# dataset split: one role per line, space-separated subject ids",
             f"seed: {split.rng_seed}",
             "test: " + " ".join(split.test_ids),
             "val: " + " ".join(split.val_ids),
             "labelled_pool: " + " ".join(split.labelled_pool_ids),
             "unlabelled: " + " ".join(split.unlabelled_ids),
             "groups: " + " ".join(f"{k}={v}" for k, v in sorted(split.groups.items()))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> DatasetSplit:
    fields = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.split()
    return DatasetSplit(
        test_ids=fields["test"], val_ids=fields["val"],
        labelled_pool_ids=fields["labelled_pool"], unlabelled_ids=fields["unlabelled"],
        rng_seed=int(fields["seed"][0]),
        groups=dict(kv.split("=", 1) for kv in fields.get("groups", [])))


def save_record(record: VolumeRecord, path) -> None:
    np.savez_compressed(
        path, image=record.image, labels=record.labels,
        in_plane_spacing=np.asarray(record.in_plane_spacing),
        slice_thickness=np.asarray(record.slice_thickness),
        subject_id=np.asarray(record.subject_id), group=np.asarray(record.group),
        meta=np.asarray(json.dumps(record.meta)))


def load_record(path) -> VolumeRecord:
    with np.load(path) as f:
        return VolumeRecord(
            subject_id=str(f["subject_id"]), group=str(f["group"]),
            image=f["image"], labels=f["labels"],
            in_plane_spacing=tuple(f["in_plane_spacing"].tolist()),
            slice_thickness=float(f["slice_thickness"]),
            meta=json.loads(str(f["meta"])))


def load_records(directory) -> list:
    return [load_record(p) for p in sorted(Path(directory).glob("*.npz"))]


# --- minimal NIfTI-1 reading -------------------------------------------------

_NIFTI_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 256: "i1", 512: "u2",
                 768: "u4"}


def read_nifti(path):
    """Read a single-file NIfTI-1 volume (optionally gzipped).

    Returns ``(data, pixdim)`` where ``data`` is indexed ``[x, y, z, ...]``
    and ``pixdim`` holds the voxel sizes of the spatial axes.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise ValueError(f"{path}: not a NIfTI-1 file")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"unsupported NIfTI datatype {datatype}")
    shape = tuple(dim[1:1 + dim[0]])
    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * slope + inter
    return np.asarray(data), tuple(float(p) for p in pixdim[1:1 + min(dim[0], 3)])


def read_acdc_subject(subject_dir, phase: str = "ES") -> VolumeRecord:
    """Load one ACDC patient folder (``Info.cfg`` plus frame NIfTI files)."""
    subject_dir = Path(subject_dir)
    info = {}
    for line in (subject_dir / "Info.cfg").read_text().splitlines():
        key, _, value = line.partition(":")
        info[key.strip()] = value.strip()
    frame = int(info[phase.upper()])
    stem = f"{subject_dir.name}_frame{frame:02d}"
    image, pixdim = read_nifti(_first_existing(subject_dir, stem))
    labels, _ = read_nifti(_first_existing(subject_dir, stem + "_gt"))
    # NIfTI is (x, y, z); store slices first
    return VolumeRecord(
        subject_id=subject_dir.name, group=info.get("Group", "NOR"),
        image=np.transpose(image, (2, 0, 1)).astype(np.float32),
        labels=np.transpose(np.rint(labels), (2, 0, 1)).astype(np.uint8),
        in_plane_spacing=(pixdim[0], pixdim[1]), slice_thickness=pixdim[2],
        meta={"phase": phase.upper(), "frame": frame})


def _first_existing(directory, stem):
    for suffix in (".nii.gz", ".nii"):
        path = directory / (stem + suffix)
        if path.exists():
            return path
    raise FileNotFoundError(directory / (stem + ".nii.gz"))


def ingest_directory(input_dir, phase: str = "ES") -> list:
    """Read raw subjects from ACDC-style folders or ``.npz`` record files."""
    input_dir = Path(input_dir)
    records = [read_acdc_subject(d, phase) for d in sorted(input_dir.iterdir())
               if d.is_dir() and (d / "Info.cfg").exists()]
    for path in sorted(input_dir.glob("*.npz")):
        records.append(_load_raw_npz(path, phase))
    return records


def _load_raw_npz(path, phase):
    with np.load(path) as f:
        keys = set(f.files)
    key = f"image_{phase.lower()}"
    if key not in keys:
        return load_record(path)
    with np.load(path) as f:
        return VolumeRecord(
            subject_id=str(f["subject_id"]) if "subject_id" in keys else Path(path).stem,
            group=str(f["group"]), image=f[key], labels=f[f"labels_{phase.lower()}"],
            in_plane_spacing=tuple(f["in_plane_spacing"].tolist()),
            slice_thickness=float(f["slice_thickness"]), meta={"phase": phase.upper()})


# --- synthetic phantoms ------------------------------------------------------

# group-typical geometry in mm: LV cavity radius, myocardial wall, RV size factor
_GROUP_SHAPE = {
    "NOR": (17.0, 8.0, 1.0),
    "MINF": (20.0, 6.0, 1.0),
    "DCM": (25.0, 6.0, 1.0),
    "HCM": (12.0, 13.0, 0.9),
    "RV": (16.0, 8.0, 1.5),
}


def phantom_geometry(rng, group):
    lv_r, wall, rv_scale = _GROUP_SHAPE[group]
    return {
        "center_mm": rng.normal(0.0, 6.0, size=2).tolist(),
        "angle_deg": float(180.0 + rng.normal(0.0, 20.0)),
        "lv_radius": float(lv_r * rng.uniform(0.85, 1.15)),
        "wall": float(wall * rng.uniform(0.85, 1.15)),
        "ellipticity": float(rng.uniform(0.0, 0.15)),
        "rv_scale": float(rv_scale * rng.uniform(0.85, 1.15)),
        "apex_shrink": float(rng.uniform(0.4, 0.6)),
    }


def _slice_scale(k, n_slices, shrink):
    return 1.0 - shrink * (k / max(n_slices - 1, 1)) ** 1.5


def phantom_labels(geometry, n_slices, shape, spacing):
    """Render the label volume of a phantom from its geometry (mm units)."""
    h, w = shape
    sy, sx = spacing
    yy = (np.arange(h) - (h - 1) / 2) * sy - geometry["center_mm"][0]
    xx = (np.arange(w) - (w - 1) / 2) * sx - geometry["center_mm"][1]
    y, x = np.meshgrid(yy, xx, indexing="ij")
    th = np.deg2rad(geometry["angle_deg"])
    # u points from LV towards the RV, v across it
    u = x * np.cos(th) + y * np.sin(th)
    v = -x * np.sin(th) + y * np.cos(th)
    e = geometry["ellipticity"]
    labels = np.zeros((n_slices, h, w), dtype=np.uint8)
    for k in range(n_slices):
        f = _slice_scale(k, n_slices, geometry["apex_shrink"])
        r_endo = geometry["lv_radius"] * f
        r_epi = (geometry["lv_radius"] + geometry["wall"]) * f
        rho = np.sqrt((u / (1 + e)) ** 2 + (v / (1 - e)) ** 2)
        endo = rho <= r_endo
        epi = rho <= r_epi
        rv_f = geometry["rv_scale"] * f ** 2
        rv_c = r_epi * 0.7
        rv = ((u - rv_c) / (r_epi * 1.0 * rv_f + 1e-9)) ** 2 + \
             (v / (r_epi * 1.4 * rv_f + 1e-9)) ** 2 <= 1.0
        lab = labels[k]
        lab[rv & ~epi] = 1
        lab[epi & ~endo] = 2
        lab[endo] = 3
    return labels


def make_synthetic_dataset(n_subjects: int, seed: int, matrix: int = 96,
                           spacing_range=(1.6, 2.4), n_slices_range=(6, 9)) -> list:
    """Nested-ellipse cardiac phantoms spread over the five pseudo-groups.

    The LV cavity is an ellipse, the myocardium the ring around it and the RV
    an adjacent crescent.  Intensities are raw scanner-like units with a bias
    field and noise so that normalization and resampling have work to do.
    """
    if n_subjects < 12:
        raise ValueError("need at least 12 subjects")
    root = np.random.SeedSequence(seed)
    records = []
    for i, child in enumerate(root.spawn(n_subjects)):
        rng = np.random.default_rng(child)
        group = GROUPS[i % len(GROUPS)]
        geometry = phantom_geometry(rng, group)
        spacing = float(rng.uniform(*spacing_range))
        n_slices = int(rng.integers(n_slices_range[0], n_slices_range[1] + 1))
        labels = phantom_labels(geometry, n_slices, (matrix, matrix), (spacing, spacing))
        image = _render_intensity(rng, labels, spacing)
        records.append(VolumeRecord(
            subject_id=f"synth{i:03d}", group=group, image=image, labels=labels,
            in_plane_spacing=(spacing, spacing),
            slice_thickness=float(rng.uniform(5.0, 10.0)),
            meta={"geometry": geometry, "synthetic": True}))
    return records


def _render_intensity(rng, labels, spacing):
    s, h, w = labels.shape
    tissue = {0: 0.35, 1: 0.85, 2: 0.25, 3: 0.95}
    means = {c: m + rng.normal(0.0, 0.05) for c, m in tissue.items()}
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=(s, h, w)), sigma=(0, 3, 3))
    texture *= 0.08 / (texture.std() + 1e-9)
    image = np.zeros((s, h, w))
    for c, m in means.items():
        image[labels == c] = m
    image[labels == 0] += texture[labels == 0]
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    body = (yy / 0.95) ** 2 + (xx / 0.85) ** 2 <= 1.0
    image[:, ~body] = 0.02
    image = ndimage.gaussian_filter(image, sigma=(0, 0.7, 0.7))
    slope = rng.normal(0.0, 0.15, size=2)
    bias = 1.0 + slope[0] * yy + slope[1] * xx
    image = image * bias + rng.normal(0.0, 0.03, size=image.shape)
    scale = rng.uniform(200.0, 800.0)
    return (np.abs(image) * scale).astype(np.float32)
