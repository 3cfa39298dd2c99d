"""Hand-crafted augmentation baselines: affine, random elastic, intensity, Mixup.

Every augmenter takes a :class:`~taskaug.data.SliceBatch` and a seed (an int
or a ``numpy.random.Generator``) and returns a new batch.  Geometric transforms
warp the one-hot labels with the same map as the image and then restore the
per-pixel simplex, assigning out-of-view pixels to background.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import SliceBatch
from .errors import ShapeMismatch
from .warp import warp_bilinear, warp_labels

AFFINE_MODES = ("identity", "rotate_small", "scale", "rotate_45N", "flip_x")


@dataclass(frozen=True)
class AffineParams:
    mode: str = "identity"
    angle_deg: float = 0.0
    scale_factor: float = 1.0
    n_quarter: int = 0   # multiples of 45 degrees, 0..8

    def __post_init__(self):
        if self.mode not in AFFINE_MODES:
            raise ValueError(f"unknown affine mode {self.mode!r}")
        if not -15.0 <= self.angle_deg <= 15.0:
            raise ValueError("angle_deg must lie in [-15, 15]")
        if not 0.9 <= self.scale_factor <= 1.1:
            raise ValueError("scale_factor must lie in [0.9, 1.1]")
        if not 0 <= self.n_quarter <= 8:
            raise ValueError("n_quarter must lie in 0..8")


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.2

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("Mixup alpha must be positive")


def sample_affine_params(rng) -> AffineParams:
    # one of five outcomes: leave as is, or one of the four transforms
    mode = AFFINE_MODES[int(rng.integers(0, 5))]
    if mode == "rotate_small":
        return AffineParams(mode, angle_deg=float(rng.uniform(-15.0, 15.0)))
    if mode == "scale":
        return AffineParams(mode, scale_factor=float(rng.uniform(0.9, 1.1)))
    if mode == "rotate_45N":
        return AffineParams(mode, n_quarter=int(rng.integers(0, 9)))
    return AffineParams(mode)


def _matrix_transform(array, matrix, order=1):
    """Apply ``in = M (out - c) + c`` about the image centre, zero outside."""
    h, w = array.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    return ndimage.affine_transform(array, matrix, offset=offset, order=order,
                                    mode="constant", cval=0.0)


def _rotation_matrix(angle_deg):
    # positive angles turn the content counter-clockwise on screen (row 0 at top)
    t = np.deg2rad(angle_deg)
    return np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])


def _restore_simplex(labels):
    missing = np.clip(1.0 - labels.sum(-1), 0.0, None)
    labels = labels.copy()
    labels[..., 0] += missing
    return labels / np.maximum(labels.sum(-1, keepdims=True), 1e-8)


def apply_affine(image, labels_onehot, params: AffineParams):
    """Transform one ``(H, W)`` image and its ``(H, W, C)`` one-hot labels."""
    image = np.asarray(image, dtype=np.float32)
    labels_onehot = np.asarray(labels_onehot, dtype=np.float32)
    if params.mode == "identity":
        return image.copy(), labels_onehot.copy()
    if params.mode == "flip_x":
        return image[:, ::-1].copy(), labels_onehot[:, ::-1].copy()
    if params.mode == "rotate_45N":
        angle = 45.0 * params.n_quarter
        square = image.shape[0] == image.shape[1]
        if params.n_quarter % 2 == 0 and square:
            # quarter turns are exact index permutations
            k = (params.n_quarter // 2) % 4
            return (np.rot90(image, k).copy(), np.rot90(labels_onehot, k, axes=(0, 1)).copy())
        matrix = _rotation_matrix(angle)
    elif params.mode == "rotate_small":
        matrix = _rotation_matrix(params.angle_deg)
    else:
        matrix = np.eye(2) / params.scale_factor
    return transform_pair(image, labels_onehot, matrix)


def transform_pair(image, labels_onehot, matrix):
    out_img = _matrix_transform(image, matrix)
    out_lab = np.stack([_matrix_transform(labels_onehot[..., c], matrix)
                        for c in range(labels_onehot.shape[-1])], axis=-1)
    return out_img.astype(np.float32), _restore_simplex(out_lab).astype(np.float32)


def affine_augment(batch: SliceBatch, rng_seed, params=None) -> SliceBatch:
    """Per slice, pick identity or one of the four affine transforms uniformly.

    ``params`` may supply an explicit :class:`AffineParams` per slice.
    """
    rng = np.random.default_rng(rng_seed)
    if params is None:
        params = [sample_affine_params(rng) for _ in range(len(batch))]
    images, labels = [], []
    for k, p in enumerate(params):
        img, lab = apply_affine(batch.images[k, ..., 0], batch.labels_onehot[k], p)
        images.append(img[..., None])
        labels.append(lab)
    return SliceBatch(np.stack(images), np.stack(labels),
                      [prov.with_step("affine") for prov in batch.provenance])


def elastic_field(coarse, shape) -> np.ndarray:
    """Upscale a coarse ``(h, w, 2)`` displacement grid to ``shape`` bicubically."""
    coarse = torch.as_tensor(np.asarray(coarse, dtype=np.float64)).permute(2, 0, 1)[None]
    dense = F.interpolate(coarse, size=tuple(shape), mode="bicubic", align_corners=True)
    return dense[0].permute(1, 2, 0).numpy()


def random_elastic(batch: SliceBatch, sigma: float, rng_seed, grid=(3, 3)) -> SliceBatch:
    """Warp each slice by a bicubically upsampled Gaussian 3x3x2 displacement grid."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(rng_seed)
    shape = batch.images.shape[1:3]
    fields = np.stack([elastic_field(rng.normal(0.0, sigma, size=tuple(grid) + (2,)), shape)
                       for _ in range(len(batch))])
    images = warp_bilinear(batch.images.astype(np.float64), fields)
    labels = warp_labels(batch.labels_onehot.astype(np.float64), fields)
    return SliceBatch(images, labels, [p.with_step("elastic") for p in batch.provenance])


def adjust_contrast_brightness(image, c, b):
    mean = image.mean()
    return (image - mean) * c + mean + b


def random_intensity(batch: SliceBatch, rng_seed, c_range=(0.8, 1.2),
                     b_range=(-0.1, 0.1)) -> SliceBatch:
    """Per-slice contrast scaling about the mean followed by a brightness shift."""
    rng = np.random.default_rng(rng_seed)
    images = np.empty_like(batch.images)
    for k in range(len(batch)):
        c = rng.uniform(*c_range)
        b = rng.uniform(*b_range)
        images[k] = adjust_contrast_brightness(batch.images[k].astype(np.float64), c, b)
    return SliceBatch(images, batch.labels_onehot.copy(),
                      [p.with_step("intensity") for p in batch.provenance])


def sample_mixup_lambda(rng, alpha, size):
    lam = rng.beta(alpha, alpha, size=size)
    # keep lambda inside [0, 1)
    while np.any(lam >= 1.0):
        redo = lam >= 1.0
        lam[redo] = rng.beta(alpha, alpha, size=int(redo.sum()))
    return lam


def mixup(batch_a: SliceBatch, batch_b: SliceBatch, cfg: MixupConfig = MixupConfig(),
          rng_seed=None, lam=None) -> SliceBatch:
    """Convex combination of paired slices and their (soft) labels.

    ``lam`` overrides the Beta draw; a scalar applies to every pair.
    """
    if batch_a.images.shape != batch_b.images.shape:
        raise ShapeMismatch(f"{batch_a.images.shape} vs {batch_b.images.shape}")
    if lam is None:
        lam = sample_mixup_lambda(np.random.default_rng(rng_seed), cfg.alpha, len(batch_a))
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float32), (len(batch_a),))[:, None, None, None]
    images = lam * batch_a.images + (1 - lam) * batch_b.images
    labels = lam * batch_a.labels_onehot + (1 - lam) * batch_b.labels_onehot
    return SliceBatch(images, labels, [p.with_step("mixup") for p in batch_a.provenance])
