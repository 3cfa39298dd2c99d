"""U-Net segmenter, weighted cross-entropy and Dice."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import STRUCTURES
from .errors import ShapeMismatch
from .generative import conv_bn_relu

DEFAULT_CLASS_WEIGHTS = (0.1, 0.3, 0.3, 0.3)


class UNet(nn.Module):
    """Four-level encoder/decoder with skip concatenations.

    Encoder block ``i`` (two 3x3 convs) feeds decoder block ``4 - i``.  A
    bottleneck pair of convs sits at the coarsest level; each decoder block
    concatenates the skip features, applies two 3x3 convs and upsamples
    bilinearly by 2, except the last one which feeds the 1x1 logit layer.
    """

    def __init__(self, widths=(64, 128, 256, 512), n_classes=4):
        super().__init__()
        self.encoder = nn.ModuleList()
        ch = 1
        for w in widths:
            self.encoder.append(nn.Sequential(*conv_bn_relu(ch, w), *conv_bn_relu(w, w)))
            ch = w
        self.bottleneck = nn.Sequential(*conv_bn_relu(ch, 2 * ch), *conv_bn_relu(2 * ch, ch))
        self.decoder = nn.ModuleList()
        for w in reversed(widths):
            self.decoder.append(nn.Sequential(*conv_bn_relu(ch + w, w), *conv_bn_relu(w, w)))
            ch = w
        self.logits = nn.Conv2d(ch, n_classes, kernel_size=1)
        self.depth = len(widths)

    def forward_nchw(self, x):
        if x.shape[-1] % 2 ** self.depth or x.shape[-2] % 2 ** self.depth:
            raise ShapeMismatch(f"spatial size must be divisible by {2 ** self.depth}")
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = F.interpolate(self.bottleneck(x), scale_factor=2, mode="bilinear", align_corners=False)
        for k, block in enumerate(self.decoder):
            x = block(torch.cat([x, skips.pop()], dim=1))
            if k < self.depth - 1:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.logits(x)

    def forward(self, images):
        """``(B, H, W, 1)`` images -> ``(B, H, W, 4)`` logits."""
        if images.ndim != 4 or images.shape[-1] != 1:
            raise ShapeMismatch(f"expected (B, H, W, 1) images, got {tuple(images.shape)}")
        return self.forward_nchw(images.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


@dataclass(frozen=True)
class ClassWeights:
    w: tuple = DEFAULT_CLASS_WEIGHTS

    def __post_init__(self):
        if len(self.w) != 4 or any(v < 0 for v in self.w):
            raise ValueError("class weights must be 4 non-negative values")


def weighted_cross_entropy(logits, target_onehot, weights=ClassWeights(), include_background=True):
    """Pixel-averaged class-weighted cross-entropy against (soft) one-hot targets.

    Channels are the last axis.  With ``include_background=False`` the
    background term is dropped.
    """
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target_onehot, dtype=logits.dtype)
    if logits.shape != target.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    w = torch.tensor(weights.w if isinstance(weights, ClassWeights) else weights,
                     dtype=logits.dtype)
    if not include_background:
        w = torch.cat([w.new_zeros(1), w[1:]])
    per_pixel = -(w * target * F.log_softmax(logits, dim=-1)).sum(-1)
    return per_pixel.mean()


def dice_score(pred_labels, gt_labels, structure) -> float:
    """Dice of one structure between two hard label volumes; 1.0 if both are empty."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    code = STRUCTURES[structure] if isinstance(structure, str) else int(structure)
    p = pred == code
    g = gt == code
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def dice_per_structure(pred_labels, gt_labels) -> dict:
    return {name: dice_score(pred_labels, gt_labels, name) for name in STRUCTURES}


@torch.no_grad()
def predict_volume(net: UNet, image_volume, batch_size=16) -> np.ndarray:
    """Hard labels for a ``(S, H, W)`` volume by slice-wise argmax."""
    was_training = net.training
    net.eval()
    out = []
    vol = torch.as_tensor(np.asarray(image_volume, dtype=np.float32))
    for start in range(0, vol.shape[0], batch_size):
        logits = net(vol[start:start + batch_size, :, :, None])
        out.append(logits.argmax(-1).numpy().astype(np.uint8))
    net.train(was_training)
    return np.concatenate(out)


def save_segmenter(net: UNet, path, widths):
    torch.save({"widths": list(widths), "state_dict": net.state_dict()}, path)


def load_segmenter(path) -> UNet:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    net = UNet(tuple(ckpt["widths"]))
    net.load_state_dict(ckpt["state_dict"])
    return net.eval()
