"""Two-phase training: learn augmentation generators, then retrain a segmenter.

Phase 1 (:func:`train_augmentor_joint`) alternates a discriminator step with
a joint generator + segmenter step on labelled and generated pairs.  The
discriminator sees real slices from labelled and unlabelled subjects.

Phase 2 (:func:`train_segmenter_augmented`) freezes the generators, starts a
fresh segmenter and trains it on batches that are half affine-augmented real
slices and half augmentation slices, keeping the checkpoint with the best
validation Dice.
"""

from __future__ import annotations

import copy
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import classic_augment as ca
from .data import STRUCTURES, Provenance, SliceBatch, VolumeRecord, one_hot
from .errors import EmptySplit, NonFiniteLoss
from .generative import (AugmentorLossWeights, ConditionalGenerator, Discriminator,
                         GeneratorConfig, discriminator_loss, generator_loss, synthesize_pair)
from .segmentation import ClassWeights, UNet, dice_per_structure, predict_volume, \
    weighted_cross_entropy

log = logging.getLogger(__name__)

AUGMENTORS = ("gd", "gi", "gd+gi")
BASELINES = ("affine", "elastic", "intensity", "mixup")

AUG_MODES = {
    "none": ((), ()),
    "affine": ((), ("affine",)),
    "elastic": ((), ("affine", "elastic")),
    "intensity": ((), ("affine", "intensity")),
    "gd": (("gd",), ("affine",)),
    "gi": (("gi",), ("affine",)),
    "gd+gi": (("gd", "gi", "gd+gi"), ("affine",)),
    "mixup": ((), ("affine", "mixup")),
    "gd+gi+mixup": (("gd", "gi", "gd+gi"), ("affine", "mixup")),
}


@dataclass
class TrainConfig:
    batch_size: int = 20
    iterations: int = 10000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_adv: float = 1.0
    lambda_big: float = 1e-3
    val_interval: int = 100
    seed: int = 0
    augmentor_set: tuple = ()
    baseline_set: tuple = ("affine",)
    d_steps: int = 1
    image_size: int = 224
    target_spacing: float = 1.367
    class_weights: tuple = (0.1, 0.3, 0.3, 0.3)
    unet_widths: tuple = (64, 128, 256, 512)
    gen_x_widths: tuple = (16, 16)
    gen_z_widths: tuple = (64, 64, 32, 32, 16)
    gen_common_widths: tuple = (32, 32, 16)
    z_dim: int = 100
    disc_widths: tuple = (16, 32, 64, 128, 128)
    disc_dense: tuple = (128, 64)
    elastic_sigma: float = 10.0
    intensity_c_range: tuple = (0.8, 1.2)
    intensity_b_range: tuple = (-0.1, 0.1)
    mixup_alpha: float = 0.2
    dump_dir: str = ""

    def __post_init__(self):
        for name in ("batch_size", "iterations", "val_interval", "d_steps"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be a positive integer")
        self.augmentor_set = tuple(self.augmentor_set)
        self.baseline_set = tuple(self.baseline_set)
        unknown = set(self.augmentor_set) - set(AUGMENTORS) | set(self.baseline_set) - set(BASELINES)
        if unknown:
            raise ValueError(f"unknown augmentation names {sorted(unknown)}")

    @property
    def loss_weights(self):
        return AugmentorLossWeights(self.lambda_adv, self.lambda_big)

    def with_aug_mode(self, mode: str) -> "TrainConfig":
        augmentors, baselines = AUG_MODES[mode]
        return replace(self, augmentor_set=augmentors, baseline_set=baselines)

    def generator_config(self, kind) -> GeneratorConfig:
        return GeneratorConfig(kind=kind, image_size=self.image_size, z_dim=self.z_dim,
                               x_widths=self.gen_x_widths, z_widths=self.gen_z_widths,
                               common_widths=self.gen_common_widths)


def desk_config(**overrides) -> TrainConfig:
    """Reduced grid and widths for single-CPU runs on the synthetic phantoms."""
    cfg = TrainConfig(
        batch_size=10, iterations=500, val_interval=50, image_size=64, target_spacing=2.0,
        unet_widths=(8, 16, 32, 64), gen_x_widths=(8, 8), gen_z_widths=(32, 32, 16, 16, 8),
        gen_common_widths=(16, 16, 8), disc_widths=(8, 16, 32, 32, 32), disc_dense=(64, 32),
        elastic_sigma=10.0 * 64 / 224)
    return replace(cfg, **overrides)


# --- config files ------------------------------------------------------------

# dotted keys used by the augmentation settings
_ALIASES = {
    "aug.elastic.sigma": "elastic_sigma",
    "aug.intensity.c_range": "intensity_c_range",
    "aug.intensity.b_range": "intensity_b_range",
    "aug.mixup.alpha": "mixup_alpha",
}


def _parse_value(text, default):
    text = text.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if default and isinstance(default[0], (int, float)):
            return tuple(type(default[0])(p) for p in parts)
        return tuple(parts)
    return type(default)(text)


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"{f.name}={_format_value(getattr(cfg, f.name))}")
    lines.append(f"aug.affine.enabled={'affine' in cfg.baseline_set}")
    for key, name in _ALIASES.items():
        lines.append(f"{key}={_format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    updates = {}
    affine = None
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed config line: {line!r}")
        key = key.strip()
        if key == "aug.affine.enabled":
            affine = _parse_value(value, True)
            continue
        name = _ALIASES.get(key, key)
        if not hasattr(cfg, name):
            raise ValueError(f"unknown config key {key!r}")
        updates[name] = _parse_value(value, getattr(cfg, name))
    cfg = replace(cfg, **updates)
    if affine is not None:
        rest = tuple(b for b in cfg.baseline_set if b != "affine")
        cfg = replace(cfg, baseline_set=(("affine",) if affine else ()) + rest)
    return cfg


def load_config(path, base=None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


# --- data containers ---------------------------------------------------------


@dataclass
class SliceSet:
    """All 2D slices of a list of volumes, flattened for random access."""

    images: np.ndarray      # (N, H, W, 1)
    labels: np.ndarray      # (N, H, W) hard labels
    provenance: list

    @classmethod
    def from_records(cls, records) -> "SliceSet":
        records = list(records)
        if not records:
            return cls(np.zeros((0, 1, 1, 1), np.float32), np.zeros((0, 1, 1), np.uint8), [])
        images = np.concatenate([r.image for r in records])[..., None]
        labels = np.concatenate([r.labels for r in records])
        prov = [Provenance(r.subject_id, k) for r in records for k in range(r.n_slices)]
        return cls(images.astype(np.float32), labels, prov)

    def __len__(self):
        return self.images.shape[0]

    def batch(self, index) -> SliceBatch:
        index = np.asarray(index, dtype=int)
        return SliceBatch(self.images[index], one_hot(self.labels[index]),
                          [self.provenance[i] for i in index])


@dataclass
class TrainingData:
    labelled: list
    unlabelled: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @classmethod
    def from_split(cls, records, split, labelled_ids):
        by_id = {r.subject_id: r for r in records}
        return cls(labelled=[by_id[i] for i in labelled_ids],
                   unlabelled=[by_id[i] for i in split.unlabelled_ids if i in by_id],
                   val=[by_id[i] for i in split.val_ids if i in by_id],
                   test=[by_id[i] for i in split.test_ids if i in by_id])


@dataclass
class RngStreams:
    init_seed: int
    data: np.random.Generator
    aug: np.random.Generator
    z: np.random.Generator


def make_rng_streams(seed) -> RngStreams:
    """Independent streams for network init, data order, augmentation and noise."""
    init, data, aug, z = np.random.SeedSequence(seed).spawn(4)
    return RngStreams(int(init.generate_state(1)[0]), np.random.default_rng(data),
                      np.random.default_rng(aug), np.random.default_rng(z))


def init_network(factory, init_seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return factory()


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def _tensor(x):
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)


def _check_finite(losses: dict, batch, nets: dict, cfg: TrainConfig, iteration: int):
    if all(math.isfinite(v) for v in losses.values()):
        return
    dump_dir = Path(cfg.dump_dir or tempfile.gettempdir())
    path = dump_dir / f"nonfinite_iter{iteration}_{int(time.time())}.npz"
    norms = {f"{name}.{p}": float(t.detach().norm()) for name, net in nets.items()
             for p, t in net.named_parameters()}
    try:
        dump_dir.mkdir(parents=True, exist_ok=True)
        np.savez(path, images=batch.images, labels=batch.labels_onehot,
                 param_norm_names=np.array(list(norms)), param_norms=np.array(list(norms.values())))
    except OSError:
        path = None
    raise NonFiniteLoss(f"non-finite loss at iteration {iteration}: {losses}", dump_path=path)


# --- validation --------------------------------------------------------------


def mean_foreground_dice(pred_volume, gt_volume) -> float:
    scores = dice_per_structure(pred_volume, gt_volume)
    return float(np.mean([scores[s] for s in STRUCTURES]))


def validate(net, val_records, predictor=None) -> float:
    """Mean over volumes of the mean Dice over RV, Myo and LV."""
    predictor = predictor or (lambda rec: predict_volume(net, rec.image))
    scores = [mean_foreground_dice(predictor(rec), rec.labels) for rec in val_records]
    return float(np.mean(scores))


# --- phase 1 -----------------------------------------------------------------


@dataclass
class AugmentorResult:
    generator: ConditionalGenerator
    history: list
    probe_magnitude_start: float
    probe_magnitude_end: float


def mean_abs_output(generator, images, z) -> float:
    """Mean |output| on a fixed probe batch, using batch statistics.

    Runs on a copy so running statistics of the real generator are untouched.
    """
    probe = copy.deepcopy(generator).train()
    with torch.no_grad():
        return float(probe(_tensor(images), _tensor(z)).abs().mean())


def train_augmentor_joint(kind: str, data: TrainingData, cfg: TrainConfig,
                          callback=None) -> AugmentorResult:
    """Jointly train a generator of ``kind`` with a discriminator and a segmenter.

    Only the generator is returned; the co-trained segmenter and
    discriminator are discarded.
    """
    if not data.labelled:
        raise EmptySplit("no labelled subjects")
    if not data.unlabelled:
        raise EmptySplit("no unlabelled subjects")
    streams = make_rng_streams([cfg.seed, 1 if kind == "deformation" else 2])
    labelled = SliceSet.from_records(data.labelled)
    pool = SliceSet.from_records(list(data.labelled) + list(data.unlabelled))

    gen = init_network(lambda: ConditionalGenerator(cfg.generator_config(kind)), streams.init_seed)
    disc = init_network(lambda: Discriminator(cfg.image_size, cfg.disc_widths, cfg.disc_dense),
                        streams.init_seed + 1)
    seg = init_network(lambda: UNet(cfg.unet_widths), streams.init_seed + 2)
    opt_g = make_optimizer(gen.parameters(), cfg)
    opt_d = make_optimizer(disc.parameters(), cfg)
    opt_s = make_optimizer(seg.parameters(), cfg)
    weights = cfg.loss_weights
    class_weights = ClassWeights(tuple(cfg.class_weights))

    n_real = math.ceil(cfg.batch_size / 2)
    n_gen = cfg.batch_size // 2
    probe_idx = streams.data.integers(0, len(labelled), size=max(n_gen, 2))
    probe_z = streams.z.standard_normal((len(probe_idx), cfg.z_dim))
    probe_start = mean_abs_output(gen, labelled.images[probe_idx], probe_z)

    history = []
    for it in range(cfg.iterations):
        real = labelled.batch(streams.data.integers(0, len(labelled), size=n_real))
        src = labelled.batch(streams.data.integers(0, len(labelled), size=n_gen))
        z = _tensor(streams.z.standard_normal((n_gen, cfg.z_dim)))
        fake_img, fake_lab, out = synthesize_pair(
            gen, _tensor(src.images), _tensor(src.labels_onehot), z, return_field=True)

        for _ in range(cfg.d_steps):
            disc_real = pool.batch(streams.data.integers(0, len(pool), size=n_gen))
            d_loss = discriminator_loss(disc(_tensor(disc_real.images)), disc(fake_img.detach()))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

        images = torch.cat([_tensor(real.images), fake_img])
        targets = torch.cat([_tensor(real.labels_onehot), fake_lab])
        s_loss = weighted_cross_entropy(seg(images), targets, class_weights, include_background=True)
        g_loss = generator_loss(disc(fake_img), out, weights)
        opt_g.zero_grad()
        opt_s.zero_grad()
        (s_loss + g_loss).backward()
        opt_g.step()
        opt_s.step()

        record = {"iteration": it, "d_loss": d_loss.item(), "s_loss": s_loss.item(),
                  "g_loss": g_loss.item(), "mean_abs_output": float(out.detach().abs().mean())}
        _check_finite({k: v for k, v in record.items() if k.endswith("loss")},
                      SliceBatch.concat([real, src]), {"G": gen, "D": disc, "S": seg}, cfg, it)
        history.append(record)
        if callback is not None:
            callback(record)
        if it % max(cfg.val_interval, 1) == 0:
            log.info("%s it %d: D %.4f S %.4f G %.4f |out| %.3f", kind, it, record["d_loss"],
                     record["s_loss"], record["g_loss"], record["mean_abs_output"])

    probe_end = mean_abs_output(gen, labelled.images[probe_idx], probe_z)
    gen.eval()
    for p in gen.parameters():
        p.requires_grad_(False)
    return AugmentorResult(gen, history, probe_start, probe_end)


# --- phase 2 -----------------------------------------------------------------


def _freeze(generators):
    frozen = {}
    for name, gen in (generators or {}).items():
        gen.eval()
        for p in gen.parameters():
            p.requires_grad_(False)
        frozen[name] = gen
    return frozen


def _normalize_generators(generators):
    if generators is None:
        return {}
    if isinstance(generators, dict):
        return dict(generators)
    return {g.kind: g for g in generators}


@torch.no_grad()
def generate_from(category: str, generators: dict, batch: SliceBatch, z_rng, z_dim) -> SliceBatch:
    """Apply ``gd``, ``gi`` or the chained ``gd+gi`` generator(s) to a batch."""
    images = _tensor(batch.images)
    labels = _tensor(batch.labels_onehot)
    steps = {"gd": ("deformation",), "gi": ("intensity",),
             "gd+gi": ("deformation", "intensity")}[category]
    for kind in steps:
        z = _tensor(z_rng.standard_normal((len(batch), z_dim)))
        images, labels = synthesize_pair(generators[kind], images, labels, z)
    tags = {"deformation": "gd", "intensity": "gi"}
    prov = batch.provenance
    for kind in steps:
        prov = [p.with_step(tags[kind]) for p in prov]
    return SliceBatch(images.numpy(), torch.as_tensor(labels).numpy(), prov)


def _augmentation_slices(sources: SliceBatch, slices: SliceSet, generators, cfg, streams):
    """Build the generated half of a phase-2 batch from raw labelled sources."""
    baselines = set(cfg.baseline_set)
    categories = list(cfg.augmentor_set)
    if "mixup" in baselines:
        pool = ["original", "affine"] + categories if categories else ["original"]
        first = _draw_from_pool(pool, sources, generators, cfg, streams)
        partners = slices.batch(streams.data.integers(0, len(slices), size=len(sources)))
        second = _draw_from_pool(pool, partners, generators, cfg, streams)
        return ca.mixup(first, second, ca.MixupConfig(cfg.mixup_alpha), streams.aug)
    parts = []
    if categories:
        parts.append(("generated", None))
    if "elastic" in baselines:
        parts.append(("elastic", None))
    if "intensity" in baselines:
        parts.append(("intensity", None))
    if len(parts) != 1:
        raise ValueError(f"ambiguous augmentation setup {cfg.augmentor_set} / {cfg.baseline_set}")
    kind = parts[0][0]
    if kind == "elastic":
        return ca.random_elastic(sources, cfg.elastic_sigma, streams.aug)
    if kind == "intensity":
        return ca.random_intensity(sources, streams.aug, cfg.intensity_c_range,
                                   cfg.intensity_b_range)
    return _draw_from_pool(categories, sources, generators, cfg, streams)


def _draw_from_pool(pool, sources: SliceBatch, generators, cfg, streams) -> SliceBatch:
    """Transform each source slice by a category drawn uniformly from ``pool``."""
    choice = streams.aug.integers(0, len(pool), size=len(sources))
    out = [None] * len(sources)
    for c, category in enumerate(pool):
        idx = np.flatnonzero(choice == c)
        if not len(idx):
            continue
        part = sources.subset(idx)
        if category == "original":
            pass
        elif category == "affine":
            part = ca.affine_augment(part, streams.aug)
        else:
            part = generate_from(category, generators, part, streams.z, cfg.z_dim)
        for j, k in enumerate(idx):
            out[k] = part.subset([j])
    return SliceBatch.concat(out)


def build_phase2_batch(slices: SliceSet, generators: dict, cfg: TrainConfig,
                       streams: RngStreams) -> SliceBatch:
    """Sample one training batch according to the configured augmentation."""
    bs = cfg.batch_size
    sampled = slices.batch(streams.data.integers(0, len(slices), size=bs))
    affine = "affine" in cfg.baseline_set
    generated = bool(cfg.augmentor_set) or bool(set(cfg.baseline_set) - {"affine"})
    if not generated:
        return ca.affine_augment(sampled, streams.aug) if affine else sampled
    n_real = math.ceil(bs / 2)
    real = sampled.subset(range(n_real))
    if affine:
        real = ca.affine_augment(real, streams.aug)
    sources = sampled.subset(range(n_real, bs))
    return SliceBatch.concat([real, _augmentation_slices(sources, slices, generators, cfg, streams)])


@dataclass
class TrainState:
    iteration: int = 0
    best_val_dice: float = -1.0
    best_iteration: int = -1
    best_state: dict | None = None
    val_history: list = field(default_factory=list)
    loss_history: list = field(default_factory=list)

    def observe(self, iteration, dice, net):
        self.val_history.append((iteration, dice))
        if dice > self.best_val_dice:
            self.best_val_dice = dice
            self.best_iteration = iteration
            self.best_state = copy.deepcopy(net.state_dict())


@dataclass
class SegmenterResult:
    net: UNet
    state: TrainState

    @property
    def best_val_dice(self):
        return self.state.best_val_dice


def train_segmenter_augmented(generators, data: TrainingData, cfg: TrainConfig,
                              batch_callback=None) -> SegmenterResult:
    """Train a freshly initialized segmenter with frozen generators.

    Background is excluded from the loss.  Validation runs every
    ``cfg.val_interval`` iterations and after the last one; the returned
    network carries the best validation checkpoint.
    """
    if not data.labelled:
        raise EmptySplit("no labelled subjects")
    generators = _freeze(_normalize_generators(generators))
    needed = {"gd": ["deformation"], "gi": ["intensity"], "gd+gi": ["deformation", "intensity"]}
    missing = {k for a in cfg.augmentor_set for k in needed[a]} - set(generators)
    if missing:
        raise ValueError(f"augmentor_set needs generators {sorted(missing)}")
    streams = make_rng_streams([cfg.seed, 0])
    slices = SliceSet.from_records(data.labelled)
    net = init_network(lambda: UNet(cfg.unet_widths), streams.init_seed)
    opt = make_optimizer(net.parameters(), cfg)
    class_weights = ClassWeights(tuple(cfg.class_weights))
    state = TrainState()

    for it in range(cfg.iterations):
        state.iteration = it
        batch = build_phase2_batch(slices, generators, cfg, streams)
        if batch_callback is not None:
            batch_callback(it, batch)
        net.train()
        loss = weighted_cross_entropy(net(_tensor(batch.images)), _tensor(batch.labels_onehot),
                                      class_weights, include_background=False)
        opt.zero_grad()
        loss.backward()
        opt.step()
        _check_finite({"seg_loss": loss.item()}, batch, {"S": net}, cfg, it)
        state.loss_history.append(loss.item())
        last = it == cfg.iterations - 1
        if data.val and ((it + 1) % cfg.val_interval == 0 or last):
            dice = validate(net, data.val)
            state.observe(it + 1, dice, net)
            log.info("seg it %d: loss %.4f val dice %.4f (best %.4f @ %d)", it + 1, loss.item(),
                     dice, state.best_val_dice, state.best_iteration)
    if state.best_state is not None:
        net.load_state_dict(state.best_state)
    net.eval()
    return SegmenterResult(net, state)


def train_method(mode: str, data: TrainingData, cfg: TrainConfig, reg=True, callback=None):
    """Run both phases for one augmentation mode; returns (segmenter result, generators)."""
    cfg = cfg.with_aug_mode(mode)
    if not reg:
        cfg = replace(cfg, lambda_adv=0.0, lambda_big=0.0)
    kinds = set()
    for a in cfg.augmentor_set:
        kinds.update({"gd": ["deformation"], "gi": ["intensity"],
                      "gd+gi": ["deformation", "intensity"]}[a])
    generators = {}
    for kind in sorted(kinds):
        generators[kind] = train_augmentor_joint(kind, data, cfg, callback).generator
    return train_segmenter_augmented(generators, data, cfg), generators
