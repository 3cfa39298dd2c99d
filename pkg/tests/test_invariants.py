"""Cross-module invariants that do not belong to a single unit file."""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from taskaug import classic_augment as ca
from taskaug.data import Provenance, SliceBatch, normalize_volume, one_hot
from taskaug.experiment import RunResult, run_matrix, summarize, wilcoxon_signed_rank
from taskaug.generative import (ConditionalGenerator, Discriminator, GeneratorConfig,
                                discriminator_loss, synthesize_pair)
from taskaug.segmentation import UNet, dice_score, weighted_cross_entropy
from taskaug.training import train_augmentor_joint, train_method, validate
from taskaug.warp import warp_bilinear, warp_labels

from conftest import tiny_config

SMALL_GEN = dict(image_size=32, z_dim=6, x_widths=(4, 4), z_widths=(8, 8, 4, 4, 4),
                 common_widths=(4, 4, 4))


def disc_labels(size=32, radius=9.0, centre=(15.5, 15.5)):
    yy, xx = np.mgrid[:size, :size]
    r = np.hypot(yy - centre[0], xx - centre[1])
    return np.select([r < radius * 0.5, r < radius * 0.75, r < radius], [3, 2, 1], 0)


# --- data --------------------------------------------------------------------


@given(st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_normalize_ignores_affine_rescaling(scale, offset, seed):
    x = np.random.default_rng(seed).random((4, 8, 8))
    np.testing.assert_allclose(normalize_volume(scale * x + offset), normalize_volume(x),
                               atol=1e-6)


# --- warp --------------------------------------------------------------------


def test_warp_there_and_back_recovers_smooth_image():
    yy, xx = np.mgrid[:96, :96] / 96.0
    image = np.sin(2 * np.pi * yy) * np.cos(2 * np.pi * xx)
    rng = np.random.default_rng(0)
    coarse = rng.uniform(-1, 1, (3, 3, 2))
    field = ca.elastic_field(coarse / np.abs(coarse).max(), (96, 96))
    back = warp_bilinear(warp_bilinear(image, field), -field)
    interior = (slice(4, -4), slice(4, -4))
    assert np.abs(back - image)[interior].max() < 1e-2


def test_warp_labels_commutes_with_channel_permutation(rng):
    labels = one_hot(rng.integers(0, 4, (2, 12, 12)))
    field = rng.normal(0, 2, (2, 12, 12, 2))
    perm = [0, 3, 1, 2]
    np.testing.assert_allclose(warp_labels(labels[..., perm], field),
                               warp_labels(labels, field)[..., perm], atol=1e-12)


# --- classic augmentation ----------------------------------------------------


def label_batch(rng, n=3, size=16):
    labels = one_hot(rng.integers(0, 4, (n, size, size)))
    return SliceBatch(rng.random((n, size, size, 1)), labels,
                      [Provenance(f"s{i}", i) for i in range(n)])


def test_geometric_augmenters_move_labels_like_images(rng):
    batch = label_batch(rng)
    # background differs by design outside the view (zero-fill vs background-fill)
    for channel in (1, 2, 3):
        # feed one label channel through the image path
        as_image = SliceBatch(batch.labels_onehot[..., channel:channel + 1],
                              batch.labels_onehot, batch.provenance)
        for augment in (lambda b: ca.random_elastic(b, 2.0, 9),
                        lambda b: ca.affine_augment(b, 9)):
            out = augment(as_image)
            np.testing.assert_allclose(out.images[..., 0], out.labels_onehot[..., channel],
                                       atol=1e-6)


def test_augmenters_are_deterministic_given_seed(rng):
    batch = label_batch(rng)
    for augment in (lambda s: ca.affine_augment(batch, s),
                    lambda s: ca.random_elastic(batch, 3.0, s),
                    lambda s: ca.random_intensity(batch, s),
                    lambda s: ca.mixup(batch, batch.subset([2, 1, 0]), rng_seed=s)):
        a, b = augment(4), augment(4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels_onehot, b.labels_onehot)


def test_elastic_field_overshoot_bound():
    rng = np.random.default_rng(1)
    for _ in range(20):
        coarse = rng.normal(0, 10, (3, 3, 2))
        dense = ca.elastic_field(coarse, (224, 224))
        assert dense.shape == (224, 224, 2)
        assert np.abs(dense).max() <= 1.5 * np.abs(coarse).max()


@given(st.floats(0.5, 1.5), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_contrast_alone_preserves_mean(c, seed):
    img = np.random.default_rng(seed).random((6, 6))
    assert ca.adjust_contrast_brightness(img, c, 0.0).mean() == pytest.approx(img.mean(), abs=1e-6)


def test_contrast_brightness_on_known_slice():
    img = np.arange(16, dtype=float).reshape(4, 4) / 15
    expected = (img - img.mean()) * 0.8 + img.mean() + 0.1
    np.testing.assert_allclose(ca.adjust_contrast_brightness(img, 0.8, 0.1), expected)


def test_mixup_lambda_is_symmetric_about_half():
    alpha = ca.MixupConfig().alpha
    lam = ca.sample_mixup_lambda(np.random.default_rng(0), alpha, 10_000)
    var = 1 / (4 * (2 * alpha + 1))
    assert abs(lam.mean() - 0.5) < 3 * math.sqrt(var / lam.size)


# --- generators and discriminator -------------------------------------------


def test_generator_is_deterministic_in_inference_mode():
    torch.manual_seed(0)
    gen = ConditionalGenerator(GeneratorConfig(kind="deformation", **SMALL_GEN)).eval()
    x, z = torch.rand(2, 32, 32, 1), torch.randn(2, 6)
    torch.testing.assert_close(gen(x, z), gen(x, z), rtol=0, atol=0)


def test_deformed_labels_match_independent_warp():
    torch.manual_seed(3)
    gen = ConditionalGenerator(GeneratorConfig(kind="deformation", **SMALL_GEN)).eval()
    labels = disc_labels()
    image = torch.as_tensor(labels / 3.0, dtype=torch.float32)
    onehot = torch.as_tensor(one_hot(labels), dtype=torch.float32)
    with torch.no_grad():
        _, warped, field = synthesize_pair(gen, image, onehot, torch.randn(6) * 3,
                                           return_field=True)
    field = field.numpy().astype(np.float64) * 4  # exaggerate to make the check meaningful
    warped = warp_labels(onehot.numpy().astype(np.float64), field)
    yy, xx = np.mgrid[:32, :32].astype(float)
    coords = [yy + field[..., 0], xx + field[..., 1]]
    oracle = np.stack([ndimage.map_coordinates(one_hot(labels)[..., c].astype(float), coords,
                                               order=1, cval=float(c == 0))
                       for c in range(4)], -1).argmax(-1)
    pred = warped.argmax(-1)
    for structure in (1, 2, 3):
        assert dice_score(pred, oracle, structure) >= 0.95


def test_task_loss_reaches_deformation_generator():
    torch.manual_seed(0)
    gen = ConditionalGenerator(GeneratorConfig(kind="deformation", **SMALL_GEN))
    seg = UNet((4, 4, 8, 8))
    labels = torch.as_tensor(one_hot(np.stack([disc_labels()] * 2)), dtype=torch.float32)
    images = labels[..., 1:].sum(-1, keepdim=True)
    img, lab = synthesize_pair(gen, images, labels, torch.randn(2, 6))
    weighted_cross_entropy(seg(img), lab).backward()
    norm = sum(p.grad.norm() ** 2 for p in gen.parameters() if p.grad is not None)
    assert norm > 0


def test_discriminator_loss_ignores_real_batch_order():
    torch.manual_seed(0)
    disc = Discriminator(32, (4, 4, 4, 4, 4), (8, 8)).eval()
    real_a, real_b, fake = torch.rand(3, 32, 32, 1), torch.rand(3, 32, 32, 1), torch.rand(3, 32, 32, 1)
    with torch.no_grad():
        ab = discriminator_loss(disc(torch.cat([real_a, real_b])), disc(fake))
        ba = discriminator_loss(disc(torch.cat([real_b, real_a])), disc(fake))
    torch.testing.assert_close(ab, ba)


# --- segmentation ------------------------------------------------------------


@given(st.integers(0, 1000), st.floats(-20, 20))
@settings(max_examples=30, deadline=None)
def test_cross_entropy_ignores_per_pixel_logit_shift(seed, shift):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 5, 5, 4, generator=g, dtype=torch.float64)
    target = torch.nn.functional.one_hot(torch.randint(0, 4, (2, 5, 5), generator=g), 4).double()
    offset = shift * torch.rand(2, 5, 5, 1, generator=g, dtype=torch.float64)
    torch.testing.assert_close(weighted_cross_entropy(logits + offset, target),
                               weighted_cross_entropy(logits, target), atol=1e-6, rtol=0)


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_dice_symmetric_and_slice_order_free(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, (5, 6, 6)), rng.integers(0, 4, (5, 6, 6))
    perm = rng.permutation(5)
    for s in (1, 2, 3):
        assert dice_score(a, b, s) == dice_score(b, a, s) == dice_score(a[perm], b[perm], s)


def test_unet_translation_probe(capsys):
    torch.manual_seed(0)
    net = UNet((4, 4, 8, 8)).eval()
    image = torch.zeros(1, 128, 128, 1)
    image[0, 30:60, 30:60] = 1.0
    with torch.no_grad():
        out = net(image)[0, ..., 1]
        moved = net(torch.roll(image, 32, dims=2))[0, ..., 1]
    corr = np.corrcoef(out[:, :64].flatten(), moved[:, 32:96].flatten())[0, 1]
    # conv nets are only approximately equivariant; report, no strict bound
    print(f"unet translation correlation {corr:.3f}")
    assert np.isfinite(corr)


# --- training ----------------------------------------------------------------


def test_phase1_smoke_run_grows_deformation(tiny_data):
    result = train_augmentor_joint("deformation", tiny_data, tiny_config(iterations=50))
    assert len(result.history) == 50
    for record in result.history:
        assert all(math.isfinite(record[k]) for k in ("d_loss", "s_loss", "g_loss"))
    assert result.probe_magnitude_end > result.probe_magnitude_start


def test_identical_seeds_give_identical_trajectories(tiny_data):
    cfg = tiny_config(iterations=4, seed=5)
    first, _ = train_method("gd", tiny_data, cfg)
    second, _ = train_method("gd", tiny_data, cfg)
    assert first.state.val_history == second.state.val_history
    assert first.state.loss_history == second.state.loss_history


def test_validate_perfect_and_empty_predictors(tiny_records):
    records = tiny_records[:3]
    assert validate(None, records, predictor=lambda rec: rec.labels) == 1.0
    assert validate(None, records, predictor=lambda rec: np.zeros_like(rec.labels)) == 0.0


def test_validate_half_correct_matches_counting(tiny_records):
    rec = tiny_records[0]
    half = rec.labels.copy()
    half[..., : half.shape[-1] // 2] = 0
    expected = []
    for s in (1, 2, 3):
        p, g = half == s, rec.labels == s
        expected.append(2 * (p & g).sum() / (p.sum() + g.sum()) if g.any() else 1.0)
    assert validate(None, [rec], predictor=lambda r: half) == pytest.approx(np.mean(expected))


# --- statistics and the run matrix -------------------------------------------


def test_wilcoxon_eight_pair_hand_example():
    # |d| ranks 1..8 with ranks 1 and 2 negative: W+ = 33, and exactly five sign
    # patterns ({}, {1}, {2}, {3}, {1,2}) have a negative rank sum <= 3
    d = np.array([-1, -2, 3, 4, 5, 6, 7, 8]) * 0.01
    res = wilcoxon_signed_rank(d)
    assert res.statistic == 33
    assert res.p_value == pytest.approx(2 * 5 / 256, abs=1e-15)


@given(st.integers(6, 40), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_uniform_improvement_is_significant(n, seed):
    base = np.random.default_rng(seed).random(n) * 0.8
    assert wilcoxon_signed_rank(base + 0.1, base).p_value < 0.05


def test_summarize_is_order_free():
    rng = np.random.default_rng(0)
    runs = [RunResult(m, 1, s, r, dice={k: list(rng.random(3)) for k in ("RV", "Myo", "LV")},
                      subject_ids=["a", "b", "c"])
            for m in ("aug_a_gd_gi", "aug_a") for s in range(2) for r in range(3)]
    pairs = [("aug_a_gd_gi", "aug_a")]
    shuffled = [runs[i] for i in rng.permutation(len(runs))]
    assert summarize(runs, pairs) == summarize(shuffled, pairs)


def test_desk_matrix_runs_end_to_end(tiny_records, tiny_split):
    results = run_matrix(["aug_none"], tiny_records, tiny_split, tiny_config(iterations=2), 1)
    assert len(results) == 15 and all(r.ok for r in results)
    for r in results:
        for values in r.dice.values():
            assert len(values) == len(tiny_split.test_ids)
            assert all(0.0 <= v <= 1.0 for v in values)
