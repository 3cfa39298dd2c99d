"""
Learning deformation and intensity generators
=============================================

Trains both generators jointly with a discriminator and a segmenter on one
labelled phantom, then draws samples with different noise vectors.  The
mean absolute generator output is logged every iteration; with the magnitude
incentive switched on it keeps growing.

Pass ``--iterations N`` to shorten or lengthen the run (default 300).
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from taskaug.data import make_split, make_synthetic_dataset, preprocess_volume, \
    sample_labelled_subset
from taskaug.experiment import plot_generator_samples
from taskaug.training import TrainingData, desk_config, train_augmentor_joint
from taskaug.warp import warp_bilinear

parser = argparse.ArgumentParser()
parser.add_argument("--iterations", type=int, default=300)
args = parser.parse_args()

out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

cfg = desk_config(iterations=args.iterations)
records = [preprocess_volume(r, cfg.target_spacing, cfg.image_size)
           for r in make_synthetic_dataset(60, seed=0)]
split = make_split(records, 0)
data = TrainingData.from_split(records, split, sample_labelled_subset(split, 1, 0))
print("labelled subject:", data.labelled[0].subject_id)

rec = data.labelled[0]
image = torch.as_tensor(rec.image[rec.n_slices // 2])[None, :, :, None].repeat(6, 1, 1, 1)
z = torch.as_tensor(np.random.default_rng(0).standard_normal((6, cfg.z_dim)), dtype=torch.float32)

for kind in ("deformation", "intensity"):
    result = train_augmentor_joint(kind, data, cfg)
    trace = [r["mean_abs_output"] for r in result.history]
    print(f"{kind}: mean |output| {trace[0]:.3f} -> {trace[-1]:.3f}, "
          f"final D loss {result.history[-1]['d_loss']:.4f}")
    with torch.no_grad():
        generated = result.generator(image, z)
        samples = warp_bilinear(image, generated) if kind == "deformation" else image + generated
    path = plot_generator_samples(image[0, ..., 0].numpy(), list(samples[..., 0].numpy()),
                                  out / f"samples_{kind}.png", title=kind)
    print("wrote", path)
