"""
Hand-crafted augmentations
==========================

Affine, random elastic, contrast/brightness and Mixup applied to one slice,
with the label simplex checked after each transform.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from taskaug import classic_augment as ca
from taskaug.data import Provenance, SliceBatch, make_synthetic_dataset, one_hot, preprocess_volume

out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

recs = [preprocess_volume(r, 2.0, 64) for r in make_synthetic_dataset(12, seed=1)]
rec_a, rec_b = recs[0], recs[3]


def as_batch(rec, n=1):
    k = rec.n_slices // 2
    return SliceBatch(np.repeat(rec.image[k][None, :, :, None], n, 0),
                      np.repeat(one_hot(rec.labels[k])[None], n, 0),
                      [Provenance(rec.subject_id, k)] * n)


a, b = as_batch(rec_a), as_batch(rec_b)
views = {
    "input": a,
    "rotate 10": ca.affine_augment(a, 0, [ca.AffineParams("rotate_small", angle_deg=10.0)]),
    "rotate 135": ca.affine_augment(a, 0, [ca.AffineParams("rotate_45N", n_quarter=3)]),
    "scale 1.1": ca.affine_augment(a, 0, [ca.AffineParams("scale", scale_factor=1.1)]),
    "elastic": ca.random_elastic(a, sigma=10.0 * 64 / 224, rng_seed=4),
    "intensity": ca.random_intensity(a, 2),
    "mixup 0.7": ca.mixup(a, b, lam=0.7),
}

fig, axes = plt.subplots(2, len(views), figsize=(2 * len(views), 4.2))
for col, (name, batch) in enumerate(views.items()):
    simplex_err = np.abs(batch.labels_onehot.sum(-1) - 1).max()
    print(f"{name:>10}: lineage {batch.provenance[0].lineage}, simplex error {simplex_err:.1e}")
    axes[0, col].imshow(batch.images[0, ..., 0], cmap="gray", vmin=0, vmax=1.2)
    axes[0, col].set_title(name, fontsize=9)
    # soft labels shown as expected class index
    axes[1, col].imshow(batch.labels_onehot[0] @ np.arange(4), cmap="viridis", vmin=0, vmax=3)
for ax in axes.flat:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "classic_augmentations.png", dpi=90)
print("wrote", out / "classic_augmentations.png")
