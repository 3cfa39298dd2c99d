"""Differentiable dense warping and additive intensity masks.

Displacement fields are channel-last ``(H, W, 2)`` (or ``(B, H, W, 2)``) in
pixel units with components ``(dy, dx)``.  Warping is backward: the output at
pixel ``p`` is the bilinear sample of the input at ``p + v(p)``.  Samples that
fall outside the grid read zeros.

All functions accept numpy arrays or torch tensors and return the same kind.
Torch inputs keep their autograd graph.
"""

import numpy as np
import torch

from .errors import ShapeMismatch


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.from_numpy(np.array(x, dtype=np.float64)), False


def _restore(out, was_tensor, like):
    if was_tensor:
        return out
    dtype = like.dtype if np.issubdtype(np.asarray(like).dtype, np.floating) else np.float64
    return out.detach().cpu().numpy().astype(dtype)


def warp_nchw(image: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Warp a ``(B, C, H, W)`` tensor by a ``(B, H, W, 2)`` field."""
    b, c, h, w = image.shape
    if field.shape != (b, h, w, 2):
        raise ShapeMismatch(f"field {tuple(field.shape)} does not match image {tuple(image.shape)}")
    field = field.to(image.dtype)
    gy, gx = torch.meshgrid(torch.arange(h, dtype=image.dtype),
                            torch.arange(w, dtype=image.dtype), indexing="ij")
    y = gy + field[..., 0]
    x = gx + field[..., 1]
    y0 = torch.floor(y)
    x0 = torch.floor(x)
    wy = y - y0
    wx = x - x0
    y0 = y0.long()
    x0 = x0.long()
    flat = image.reshape(b, c, h * w)
    out = 0
    for dy, wgt_y in ((0, 1 - wy), (1, wy)):
        for dx, wgt_x in ((0, 1 - wx), (1, wx)):
            yi = y0 + dy
            xi = x0 + dx
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, h * w)
            vals = torch.gather(flat, 2, idx.expand(b, c, h * w)).reshape(b, c, h, w)
            weight = (wgt_y * wgt_x * inside.to(image.dtype)).unsqueeze(1)
            out = out + vals * weight
    return out


def _to_nchw(image, field):
    """Normalize layouts to (B, C, H, W) / (B, H, W, 2); return an undo function."""
    if field.ndim == 3:
        if image.ndim == 2:
            return image[None, None], field[None], lambda o: o[0, 0]
        if image.ndim == 3:
            return image.permute(2, 0, 1)[None], field[None], lambda o: o[0].permute(1, 2, 0)
    elif field.ndim == 4:
        if image.ndim == 3:
            return image[:, None], field, lambda o: o[:, 0]
        if image.ndim == 4:
            return image.permute(0, 3, 1, 2), field, lambda o: o.permute(0, 2, 3, 1)
    raise ShapeMismatch(f"cannot pair image {tuple(image.shape)} with field {tuple(field.shape)}")


def warp_bilinear(image, field):
    """Backward-warp ``image`` (HxW, HxWxC, BxHxW or BxHxWxC) by ``field``."""
    img, img_t = _as_tensor(image)
    fld, _ = _as_tensor(field)
    if fld.shape[-1] != 2:
        raise ShapeMismatch("field must end in a (dy, dx) axis of size 2")
    x, f, undo = _to_nchw(img, fld)
    if x.shape[-2:] != f.shape[1:3]:
        raise ShapeMismatch(f"field grid {tuple(f.shape[1:3])} != image grid {tuple(x.shape[-2:])}")
    return _restore(undo(warp_nchw(x, f)), img_t, image)


def renormalize_labels(labels, channel_dim: int = -1, eps: float = 1e-8):
    """Push missing probability mass to background, then rescale to sum 1."""
    total = labels.sum(dim=channel_dim, keepdim=True)
    missing = torch.clamp(1.0 - total, min=0.0)
    background = labels.narrow(channel_dim, 0, 1) + missing
    labels = torch.cat([background, labels.narrow(channel_dim, 1, labels.shape[channel_dim] - 1)],
                       dim=channel_dim)
    return labels / labels.sum(dim=channel_dim, keepdim=True).clamp_min(eps)


def warp_labels(labels_onehot, field):
    """Warp every one-hot channel by ``field`` and restore the per-pixel simplex.

    Probability mass that leaves the field of view is assigned to background.
    """
    lab, lab_t = _as_tensor(labels_onehot)
    if lab.ndim not in (3, 4):
        raise ShapeMismatch("labels must be (H, W, C) or (B, H, W, C)")
    warped = warp_bilinear(lab, field)
    return _restore(renormalize_labels(warped), lab_t, labels_onehot)


def apply_intensity(image, mask):
    """Add an intensity mask to an image; a trailing singleton channel may differ."""
    img, img_t = _as_tensor(image)
    msk, _ = _as_tensor(mask)
    if img.shape != msk.shape:
        if img.shape == msk.shape + (1,):
            msk = msk.unsqueeze(-1)
        elif msk.shape == img.shape + (1,):
            msk = msk.squeeze(-1)
        else:
            raise ShapeMismatch(f"mask {tuple(msk.shape)} does not match image {tuple(img.shape)}")
    return _restore(img + msk.to(img.dtype), img_t, image)


def field_l1_magnitude(field_or_mask):
    """Sum of absolute values; its negation is the magnitude incentive."""
    if isinstance(field_or_mask, torch.Tensor):
        return field_or_mask.abs().sum()
    return float(np.abs(np.asarray(field_or_mask, dtype=np.float64)).sum())
