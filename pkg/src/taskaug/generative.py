"""Conditional augmentation generators, the image discriminator and GAN losses.

Two generator kinds share one architecture and differ only in the last layer:

* ``"deformation"`` outputs a two-channel displacement field ``(dy, dx)``
  that is applied to image and one-hot labels by bilinear warping;
* ``"intensity"`` outputs a tanh-capped additive mask; labels are untouched.

Networks take and return channel-last tensors, ``(B, H, W, C)``.
"""

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .warp import field_l1_magnitude, warp_labels, warp_nchw

KINDS = ("deformation", "intensity")
LOG_FLOOR = math.log(1e-12)
REAL = 1   # discriminator logit index for "real"


def conv_bn_relu(c_in, c_out, kernel=3):
    return [nn.Conv2d(c_in, c_out, kernel, padding=kernel // 2, bias=False),
            nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "deformation"
    image_size: int = 224
    z_dim: int = 100
    x_widths: tuple = (16, 16)
    z_widths: tuple = (64, 64, 32, 32, 16)
    common_widths: tuple = (32, 32, 16)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if len(self.x_widths) != 2 or len(self.z_widths) != 5 or len(self.common_widths) != 3:
            raise ValueError("expected 2 image, 5 noise and 3+1 common conv layers")
        if self.image_size % 32:
            raise ValueError("image_size must be divisible by 32 (five 2x upsamplings)")
        if self.x_widths[-1] != self.z_widths[-1]:
            raise ValueError("image and noise branches must end with equal widths")


class ConditionalGenerator(nn.Module):
    """Maps an image and a noise vector to a deformation field or intensity mask."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        c = config
        self.seed_size = c.image_size // 32
        x_layers, ch = [], 1
        for w in c.x_widths:
            x_layers += conv_bn_relu(ch, w)
            ch = w
        self.subnet_x = nn.Sequential(*x_layers)

        self.fc = nn.Linear(c.z_dim, c.z_widths[0] * self.seed_size ** 2, bias=False)
        self.fc_bn = nn.BatchNorm1d(c.z_widths[0] * self.seed_size ** 2)
        z_layers, ch = [], c.z_widths[0]
        for w in c.z_widths:
            z_layers.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
            z_layers += conv_bn_relu(ch, w)
            ch = w
        self.subnet_z = nn.Sequential(*z_layers)

        common, ch = [], c.x_widths[-1] + c.z_widths[-1]
        for w in c.common_widths:
            common += conv_bn_relu(ch, w)
            ch = w
        self.subnet_common = nn.Sequential(*common)
        self.head = nn.Conv2d(ch, 2 if c.kind == "deformation" else 1, kernel_size=1)

    @property
    def kind(self):
        return self.config.kind

    def forward(self, images, z):
        """``images`` (B, H, W, 1), ``z`` (B, z_dim) -> (B, H, W, 2 or 1)."""
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (size, size, 1):
            raise ShapeMismatch(f"expected (B, {size}, {size}, 1) images, got {tuple(images.shape)}")
        if z.shape != (images.shape[0], self.config.z_dim):
            raise ShapeMismatch(f"expected z of shape (B, {self.config.z_dim})")
        fx = self.subnet_x(images.permute(0, 3, 1, 2))
        h = F.relu(self.fc_bn(self.fc(z)))
        h = h.view(-1, self.config.z_widths[0], self.seed_size, self.seed_size)
        fz = self.subnet_z(h)
        out = self.head(self.subnet_common(torch.cat([fx, fz], dim=1)))
        if self.kind == "intensity":
            out = torch.tanh(out)
        return out.permute(0, 2, 3, 1)


class Discriminator(nn.Module):
    """Five strided 5x5 conv layers followed by three dense layers, 2 logits."""

    def __init__(self, image_size=224, widths=(16, 32, 64, 128, 128), dense=(128, 64)):
        super().__init__()
        if image_size % 32:
            raise ValueError("image_size must be divisible by 32")
        layers, ch = [], 1
        for w in widths:
            layers += [nn.Conv2d(ch, w, 5, stride=2, padding=2, bias=False),
                       nn.BatchNorm2d(w), nn.LeakyReLU(0.2, inplace=True)]
            ch = w
        self.features = nn.Sequential(*layers)
        n = ch * (image_size // 32) ** 2
        self.classifier = nn.Sequential(
            nn.Linear(n, dense[0]), nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(dense[0], dense[1]), nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(dense[1], 2))
        self.image_size = image_size

    def forward(self, images):
        h = self.features(images.permute(0, 3, 1, 2))
        return self.classifier(h.flatten(1))


@dataclass(frozen=True)
class AugmentorLossWeights:
    lambda_adv: float = 1.0
    lambda_big: float = 1e-3

    @classmethod
    def ablation(cls):
        return cls(0.0, 0.0)


def _log_probs(logits):
    return torch.clamp(F.log_softmax(logits, dim=-1), min=LOG_FLOOR)


def magnitude(field_or_mask):
    """L1 norm per sample, averaged over the batch for 4D ``(B, H, W, C)`` input."""
    if field_or_mask.ndim == 4:
        return field_or_mask.abs().flatten(1).sum(1).mean()
    return field_l1_magnitude(field_or_mask)


def generator_loss(d_fake_logits, field_or_mask, weights=AugmentorLossWeights()):
    """Adversarial term on generated images plus the negative-L1 magnitude incentive."""
    d_fake_logits = torch.as_tensor(d_fake_logits)
    field_or_mask = torch.as_tensor(field_or_mask)
    loss = torch.zeros((), dtype=field_or_mask.dtype)
    if weights.lambda_adv:
        # log(1 - D(G)) == log p_fake for a two-way softmax
        loss = loss + weights.lambda_adv * _log_probs(d_fake_logits)[:, 1 - REAL].mean()
    if weights.lambda_big:
        loss = loss - weights.lambda_big * magnitude(field_or_mask)
    return loss


def discriminator_loss(d_real_logits, d_fake_logits):
    d_real_logits = torch.as_tensor(d_real_logits)
    d_fake_logits = torch.as_tensor(d_fake_logits)
    return -_log_probs(d_real_logits)[:, REAL].mean() - _log_probs(d_fake_logits)[:, 1 - REAL].mean()


def _batched(x):
    x = torch.as_tensor(x, dtype=torch.float32) if not isinstance(x, torch.Tensor) else x
    return x


def generator_forward(net: ConditionalGenerator, image, z):
    """Run a generator on one ``(H, W)`` image or a ``(B, H, W, 1)`` batch.

    Single inputs return an ``(H, W, 2)`` field or an ``(H, W)`` mask.
    """
    image = _batched(image)
    z = _batched(z).to(image.dtype)
    if image.ndim == 2:
        out = net(image[None, :, :, None], z.reshape(1, -1))[0]
        return out if net.kind == "deformation" else out[..., 0]
    return net(image, z)


def synthesize_pair(net: ConditionalGenerator, image, labels_onehot, z, return_field=False):
    """Generate an augmented (image, labels) pair from a labelled one.

    Accepts a single ``(H, W)`` image with ``(H, W, C)`` labels or batches
    ``(B, H, W, 1)`` / ``(B, H, W, C)``.
    """
    out = generator_forward(net, image, z)
    image = _batched(image)
    if net.kind == "intensity":
        new_image = image + out.to(image.dtype)
        result = (new_image, labels_onehot)
    else:
        labels = _batched(labels_onehot)
        single = image.ndim == 2
        img = image[None, None] if single else image.permute(0, 3, 1, 2)
        fld = out[None] if single else out
        warped = warp_nchw(img, fld)
        warped = warped[0, 0] if single else warped.permute(0, 2, 3, 1)
        result = (warped, warp_labels(labels, out))
    return result + (out,) if return_field else result


def save_generator(net: ConditionalGenerator, path):
    torch.save({"config": asdict(net.config), "state_dict": net.state_dict()}, path)


def load_generator(path) -> ConditionalGenerator:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in ckpt["config"].items()}
    net = ConditionalGenerator(GeneratorConfig(**cfg))
    net.load_state_dict(ckpt["state_dict"])
    return net.eval()
