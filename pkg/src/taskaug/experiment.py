"""Run matrix, paired significance testing and result tables/figures.

Each method is trained for every (labelled subset, restart) pair and scored
by per-subject Dice on the test subjects.  Runs are persisted one JSON file
each, so an interrupted matrix resumes where it stopped.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import STRUCTURES, sample_labelled_subset
from .errors import UnpairedRuns
from .segmentation import dice_per_structure, predict_volume
from .training import TrainConfig, TrainingData, train_method

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Method:
    method_id: str
    label: str
    aug_mode: str
    regularized: bool = True


METHODS = {m.method_id: m for m in [
    Method("aug_none", "Aug_none", "none"),
    Method("aug_a", "Aug_A", "affine"),
    Method("aug_a_rd", "Aug_A,RD", "elastic"),
    Method("aug_a_gd", "Aug_A,GD(adv=1,big=1e-3)", "gd"),
    Method("aug_a_gd_noreg", "Aug_A,GD(adv=0,big=0)", "gd", regularized=False),
    Method("aug_a_ri", "Aug_A,RI", "intensity"),
    Method("aug_a_gi", "Aug_A,GI(adv=1,big=1e-3)", "gi"),
    Method("aug_a_gi_noreg", "Aug_A,GI(adv=0,big=0)", "gi", regularized=False),
    Method("aug_a_gd_gi", "Aug_A,GD,GI(adv=1,big=1e-3)", "gd+gi"),
    Method("aug_a_mixup", "Aug_A,Mixup", "mixup"),
    Method("aug_a_gd_gi_mixup", "Aug_A,GD,GI,Mixup", "gd+gi+mixup"),
]}

# comparisons marked in the results table: method -> baseline
DEFAULT_BASELINE_PAIRS = [
    ("aug_a_gd", "aug_a_rd"), ("aug_a_gd_noreg", "aug_a_rd"),
    ("aug_a_gi", "aug_a_ri"), ("aug_a_gi_noreg", "aug_a_ri"),
    ("aug_a_gd_gi", "aug_a_mixup"),
]
BASELINE_MARKERS = {"aug_a_rd": "*", "aug_a_ri": "+", "aug_a_mixup": "#"}


@dataclass
class RunResult:
    method_id: str
    n_labelled: int
    subset_index: int
    restart_index: int
    dice: dict = field(default_factory=dict)          # structure -> per-subject list
    subject_ids: list = field(default_factory=list)
    labelled_ids: list = field(default_factory=list)
    best_val_dice: float = float("nan")
    status: str = "ok"
    error: str = ""

    @property
    def key(self):
        return (self.method_id, self.n_labelled, self.subset_index, self.restart_index)

    @property
    def ok(self):
        return self.status == "ok"

    def filename(self):
        return (f"{self.method_id}__nl{self.n_labelled}__s{self.subset_index}"
                f"__r{self.restart_index}.json")

    def save(self, out_dir):
        path = Path(out_dir) / self.filename()
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def load_results(directory) -> list:
    return [RunResult.load(p) for p in sorted(Path(directory).glob("*__nl*__s*__r*.json"))]


def run_seed(base_seed: int, restart_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, restart_index]).generate_state(1)[0])


def default_trainer(method: Method, data: TrainingData, cfg: TrainConfig):
    result, generators = train_method(method.aug_mode, data, cfg, reg=method.regularized)
    return result.net, result.best_val_dice, generators


def evaluate_on_test(net, test_records):
    dice = {s: [] for s in STRUCTURES}
    preds = {}
    for rec in test_records:
        pred = predict_volume(net, rec.image)
        preds[rec.subject_id] = pred
        for s, v in dice_per_structure(pred, rec.labels).items():
            dice[s].append(float(v))
    return dice, preds


def run_matrix(methods, records, split, cfg: TrainConfig, n_labelled: int, out_dir=None,
               n_subsets: int = 5, n_restarts: int = 3, trainer=default_trainer,
               save_predictions: bool = False) -> list:
    """Train and test every method over ``n_subsets`` x ``n_restarts`` runs.

    The subset index selects the labelled subjects; the restart index seeds
    network initialization and data order.  With ``out_dir`` set, finished
    runs are written as they complete and reloaded instead of recomputed.
    Failed runs are recorded with ``status="failed"`` and a warning.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    test_records = [r for r in records if r.subject_id in set(split.test_ids)]
    results = []
    for method_id in methods:
        method = METHODS[method_id] if isinstance(method_id, str) else method_id
        for subset in range(n_subsets):
            labelled_ids = sample_labelled_subset(split, n_labelled, subset)
            for restart in range(n_restarts):
                run = RunResult(method.method_id, n_labelled, subset, restart,
                                labelled_ids=list(labelled_ids))
                path = out_dir / run.filename() if out_dir is not None else None
                if path is not None and path.exists():
                    previous = RunResult.load(path)
                    if previous.ok:
                        results.append(previous)
                        continue
                data = TrainingData.from_split(records, split, labelled_ids)
                run_cfg = replace(cfg, seed=run_seed(cfg.seed, restart))
                try:
                    net, val_dice, generators = trainer(method, data, run_cfg)
                    run.dice, preds = evaluate_on_test(net, test_records)
                    run.subject_ids = [r.subject_id for r in test_records]
                    run.best_val_dice = float(val_dice)
                    if save_predictions and out_dir is not None and subset == 0 and restart == 0:
                        _save_artifacts(out_dir, run, test_records, preds, data, generators)
                except Exception as exc:  # recorded, excluded from summaries
                    run.status = "failed"
                    run.error = f"{type(exc).__name__}: {exc}"
                    warnings.warn(f"run {run.key} failed: {run.error}")
                if out_dir is not None:
                    run.save(out_dir)
                results.append(run)
    return results


def _save_artifacts(out_dir, run, test_records, preds, data, generators):
    import torch

    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    stem = run.filename()[:-5]
    arrays = {}
    for rec in test_records:
        k = rec.n_slices // 2
        arrays[f"{rec.subject_id}__image"] = rec.image[k]
        arrays[f"{rec.subject_id}__gt"] = rec.labels[k]
        arrays[f"{rec.subject_id}__pred"] = preds[rec.subject_id][k]
    np.savez_compressed(pred_dir / f"{stem}.npz", **arrays)
    if not generators:
        return
    sample_dir = out_dir / "samples"
    sample_dir.mkdir(exist_ok=True)
    rec = data.labelled[0]
    image = torch.as_tensor(rec.image[rec.n_slices // 2][None, :, :, None]).repeat(6, 1, 1, 1)
    rng = np.random.default_rng(0)
    for kind, gen in generators.items():
        z = torch.as_tensor(rng.standard_normal((6, gen.config.z_dim)), dtype=torch.float32)
        with torch.no_grad():
            out = gen(image, z)
            if kind == "deformation":
                from .warp import warp_bilinear
                generated = warp_bilinear(image, out)
            else:
                generated = image + out
        np.savez_compressed(sample_dir / f"{stem}__{kind}.npz",
                            input=image[0, ..., 0].numpy(), generated=generated[..., 0].numpy())


# --- statistics --------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float   # sum of ranks of positive differences
    p_value: float
    n: int
    n_zero: int


def wilcoxon_signed_rank(x, y=None, decimals: int = 12) -> WilcoxonResult:
    """Two-sided exact Wilcoxon signed-rank test with Pratt zero handling.

    Zero differences take part in ranking and are then dropped.  The null
    distribution of the positive rank sum is computed exactly (ranks may be
    half-integers under ties).  Differences are rounded to ``decimals``
    places so floating-point noise does not break ties.
    """
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        d = d - np.asarray(y, dtype=np.float64)
    d = np.round(d, decimals)
    n = d.size
    nonzero = d != 0
    n_zero = int(n - nonzero.sum())
    if n == 0 or not nonzero.any():
        return WilcoxonResult(0.0, 1.0, n, n_zero)
    ranks = rankdata(np.abs(d))
    r = ranks[nonzero]
    t_plus = float(r[d[nonzero] > 0].sum())
    doubled = np.rint(2 * r).astype(np.int64)
    dist = np.zeros(int(doubled.sum()) + 1)
    dist[0] = 1.0
    for k in doubled:
        shifted = np.zeros_like(dist)
        shifted[k:] = dist[:-k] if k else dist
        dist = 0.5 * dist + 0.5 * shifted
    t2 = int(round(2 * t_plus))
    lower = dist[:t2 + 1].sum()
    upper = dist[t2:].sum()
    p = min(1.0, 2.0 * min(lower, upper))
    return WilcoxonResult(t_plus, float(p), n, n_zero)


@dataclass
class MethodSummary:
    method_id: str
    n_labelled: int
    means: dict                      # structure -> mean Dice
    n_runs: int
    significance: dict = field(default_factory=dict)   # baseline -> structure -> dict


def _paired_values(runs, structure, pairing):
    values = {}
    for run in runs:
        if pairing == "run":
            values[(run.subset_index, run.restart_index)] = float(np.mean(run.dice[structure]))
        else:
            for sid, v in zip(run.subject_ids, run.dice[structure]):
                values[(run.subset_index, run.restart_index, sid)] = float(v)
    return values


def summarize(results, baseline_pairs=(), pairing: str = "subject", alpha: float = 0.05) -> list:
    """Mean Dice per method and paired Wilcoxon tests against baselines.

    ``pairing="subject"`` pairs per-subject-per-run values; ``"run"`` pairs
    per-run means.
    """
    if pairing not in ("subject", "run"):
        raise ValueError("pairing must be 'subject' or 'run'")
    groups = {}
    for run in results:
        if not run.ok:
            warnings.warn(f"excluding failed run {run.key}: {run.error}")
            continue
        groups.setdefault((run.method_id, run.n_labelled), []).append(run)
    summaries = []
    for (method_id, n_l), runs in sorted(groups.items()):
        runs = sorted(runs, key=lambda r: (r.subset_index, r.restart_index))
        means = {s: float(np.mean([v for r in runs for v in r.dice[s]])) for s in STRUCTURES}
        summary = MethodSummary(method_id, n_l, means, len(runs))
        for method, baseline in baseline_pairs:
            if method != method_id or (baseline, n_l) not in groups:
                continue
            base_runs = groups[(baseline, n_l)]
            summary.significance[baseline] = {}
            for s in STRUCTURES:
                a = _paired_values(runs, s, pairing)
                b = _paired_values(base_runs, s, pairing)
                if set(a) != set(b):
                    raise UnpairedRuns(f"{method_id} vs {baseline}: pairing keys differ")
                keys = sorted(a)
                res = wilcoxon_signed_rank([a[k] for k in keys], [b[k] for k in keys])
                diff = float(np.mean([a[k] - b[k] for k in keys]))
                summary.significance[baseline][s] = {
                    "p_value": res.p_value, "significant": res.p_value < alpha,
                    "mean_difference": diff, "n_pairs": len(keys)}
        summaries.append(summary)
    return summaries


# --- reporting ---------------------------------------------------------------

TABLE_COLUMNS = [(n, s) for n in (1, 3) for s in STRUCTURES]


def _method_order(ids):
    known = [m for m in METHODS if m in ids]
    return known + sorted(set(ids) - set(known))


def table_rows(summaries):
    by_key = {(s.method_id, s.n_labelled): s for s in summaries}
    rows = []
    for method_id in _method_order({s.method_id for s in summaries}):
        values, marks = [], []
        for n, struct in TABLE_COLUMNS:
            s = by_key.get((method_id, n))
            values.append(s.means[struct] if s else float("nan"))
            mark = ""
            if s:
                for base, per_struct in s.significance.items():
                    res = per_struct.get(struct)
                    if res and res["significant"] and res["mean_difference"] > 0:
                        mark += BASELINE_MARKERS.get(base, "^")
            marks.append(mark)
        rows.append((method_id, values, marks))
    return rows


def format_table(summaries) -> str:
    rows = table_rows(summaries)
    labels = [METHODS[m].label if m in METHODS else m for m, _, _ in rows]
    width = max([len(label) for label in labels] + [6])
    header = f"{'Method':<{width}} | " + " | ".join(f"{s:>8} N_L={n}"[-13:]
                                                  for n, s in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for label, (_, values, marks) in zip(labels, rows):
        cells = [("  n/a" if np.isnan(v) else f"{v:.3f}") + (m or "") for v, m in zip(values, marks)]
        lines.append(f"{label:<{width}} | " + " | ".join(f"{c:>13}" for c in cells))
    lines.append("markers: significant improvement (p < 0.05) over "
                 + ", ".join(f"{mk} {b}" for b, mk in BASELINE_MARKERS.items()))
    return "\n".join(lines) + "\n"


def write_table_csv(summaries, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method"] + [f"nl{n}_{s}" for n, s in TABLE_COLUMNS])
        for method_id, values, _ in table_rows(summaries):
            writer.writerow([method_id] + ["" if np.isnan(v) else f"{v:.6f}" for v in values])


def write_significance_csv(summaries, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "n_labelled", "baseline", "structure", "mean_difference",
                         "p_value", "significant", "n_pairs"])
        for s in summaries:
            for base, per_struct in s.significance.items():
                for struct, res in per_struct.items():
                    writer.writerow([s.method_id, s.n_labelled, base, struct,
                                     f"{res['mean_difference']:.6f}", f"{res['p_value']:.6g}",
                                     res["significant"], res["n_pairs"]])


def plot_segmentation_panel(image, gt, predictions: dict, path):
    """Input | ground truth | one column per method."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = 2 + len(predictions)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
    axes[0].imshow(image, cmap="gray")
    axes[0].set_title("input", fontsize=8)
    panels = [("ground truth", gt)] + list(predictions.items())
    for ax, (title, lab) in zip(axes[1:], panels):
        ax.imshow(image, cmap="gray")
        ax.imshow(np.ma.masked_equal(lab, 0), cmap="viridis", vmin=0, vmax=3, alpha=0.6)
        ax.set_title(METHODS[title].label if title in METHODS else title, fontsize=7)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_generator_samples(image, generated, path, title=""):
    """Input image followed by a row of generated transformations."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = 1 + len(generated)
    fig, axes = plt.subplots(1, n, figsize=(1.8 * n, 2.1))
    for ax, img in zip(axes, [image] + list(generated)):
        ax.imshow(img, cmap="gray")
        ax.axis("off")
    axes[0].set_title("input", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def emit_report(summaries, out_dir, panels=(), sample_sheets=()) -> list:
    """Write the results table (CSV and text), p-values and figures.

    ``panels`` items are dicts with ``name``, ``image``, ``gt`` and
    ``predictions`` (method -> label map); ``sample_sheets`` items carry
    ``name``, ``image`` and ``generated`` (list of images).
    """
    if not summaries:
        raise ValueError("no summaries to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    write_table_csv(summaries, out_dir / "table.csv")
    (out_dir / "table.txt").write_text(format_table(summaries))
    write_significance_csv(summaries, out_dir / "significance.csv")
    written += [out_dir / "table.csv", out_dir / "table.txt", out_dir / "significance.csv"]
    fig_dir = out_dir / "figures"
    if panels or sample_sheets:
        fig_dir.mkdir(exist_ok=True)
    for panel in panels:
        written.append(plot_segmentation_panel(panel["image"], panel["gt"], panel["predictions"],
                                               fig_dir / f"panel_{panel['name']}.png"))
    for sheet in sample_sheets:
        written.append(plot_generator_samples(sheet["image"], sheet["generated"],
                                              fig_dir / f"samples_{sheet['name']}.png",
                                              sheet.get("title", "")))
    return written


def collect_figures(run_dir, max_subjects: int = 3):
    """Gather panels and sample sheets saved by ``run_matrix(save_predictions=True)``."""
    run_dir = Path(run_dir)
    panels = {}
    for path in sorted((run_dir / "predictions").glob("*.npz")):
        method_id = path.stem.split("__")[0]
        n_l = path.stem.split("__")[1]
        with np.load(path) as f:
            subjects = sorted({k.split("__")[0] for k in f.files})[:max_subjects]
            for sid in subjects:
                entry = panels.setdefault((n_l, sid), {
                    "name": f"{n_l}_{sid}", "image": f[f"{sid}__image"], "gt": f[f"{sid}__gt"],
                    "predictions": {}})
                entry["predictions"][method_id] = f[f"{sid}__pred"]
    sheets = []
    for path in sorted((run_dir / "samples").glob("*.npz")):
        with np.load(path) as f:
            sheets.append({"name": path.stem, "image": f["input"], "generated": list(f["generated"]),
                           "title": path.stem})
    return list(panels.values()), sheets


# --- reference values ----------------------------------------------------------


def load_table1_reference() -> dict:
    """Published mean Dice per method: ``{label: {(n_labelled, structure): value}}``."""
    text = resources.files("taskaug").joinpath("data/table1_reference.csv").read_text()
    table = {}
    for row in csv.DictReader(io.StringIO(text)):
        table[row["method"]] = {(n, s): float(row[f"nl{n}_{s}"]) for n, s in TABLE_COLUMNS}
    return table
