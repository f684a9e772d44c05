"""Metrics, ablation and transfer harnesses, and modulation-vector export."""
import csv
import itertools
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .gradcore import no_grad, softmax
from .metatrain import train, train_baseline, train_with_frozen_modulator
from .modulator import WeightHashSpec, build_modulator

log = logging.getLogger(__name__)

__all__ = [
    "MetricsReport", "evaluate", "report_from_predictions", "predict",
    "ablation_matrix", "summarize_cells", "export_modulation_vectors", "class_mean_separation",
    "transfer_experiment", "write_report_csv", "write_rows_csv", "modulator_spec_for",
]


@dataclass
class MetricsReport:
    top1_error: float
    per_class_recall: np.ndarray
    mean_recall: float
    confusion: np.ndarray
    predicted_histogram: np.ndarray
    n: int

    @property
    def num_classes(self):
        return len(self.per_class_recall)


def predict(net, params, x, batch_size=1000):
    """Argmax of the plain (never modulated) logits; ties go to the lowest class."""
    preds = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            logits = net.forward(params, x[lo:lo + batch_size]).data
            preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.empty(0, np.int64)


def report_from_predictions(y_true, y_pred, num_classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise ValueError("cannot evaluate on an empty set")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    rows = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(rows > 0, np.diag(conf) / np.maximum(rows, 1), np.nan)
    # classes absent from the test set have undefined recall and are left out of the mean
    mean_recall = float(np.nanmean(recall)) if np.isfinite(recall).any() else float("nan")
    return MetricsReport(
        top1_error=1.0 - np.trace(conf) / conf.sum(),
        per_class_recall=recall,
        mean_recall=mean_recall,
        confusion=conf,
        predicted_histogram=conf.sum(axis=0) / conf.sum(),
        n=int(conf.sum()),
    )


def evaluate(net, params, test_set, num_classes=None):
    c = num_classes or net.num_classes
    return report_from_predictions(test_set.y, predict(net, params, test_set.x), c)


def write_report_csv(report, out_dir, manifest_id=""):
    """Writes report.csv (summary), per_class.csv and confusion.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["top1_error", repr(float(report.top1_error))])
        w.writerow(["mean_recall", repr(float(report.mean_recall))])
        w.writerow(["n", report.n])
        w.writerow(["manifest_id", manifest_id])
    with open(out / "per_class.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "test_count", "recall", "predicted_fraction"])
        for k in range(report.num_classes):
            w.writerow([k, int(report.confusion[k].sum()), repr(float(report.per_class_recall[k])),
                        repr(float(report.predicted_histogram[k]))])
    with open(out / "confusion.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true\\pred"] + list(range(report.num_classes)))
        for k, row in enumerate(report.confusion):
            w.writerow([k] + row.tolist())
    return out / "report.csv"


def write_rows_csv(rows, path, columns=None):
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


# -- ablation ------------------------------------------------------------

ABLATION_COLUMNS = ["sites", "constraint", "seed", "status", "top1_error", "mean_recall", "error"]


def ablation_matrix(bundle, net, mod_template, base_cfg, site_subsets, constraint_modes=("full",),
                    seeds=(0,), out_csv=None):
    """Train one model per (site subset, constraint, seed) and record its test metrics.

    ``mod_template`` supplies everything but the sites and constraint. An
    empty subset is the baseline row. A failing cell is recorded with
    status "failed" and the matrix carries on.
    """
    rows = []
    for subset, mode, seed in itertools.product(site_subsets, constraint_modes, seeds):
        subset = tuple(subset)
        if not subset and mode != constraint_modes[0]:
            continue
        row = {"sites": "+".join(subset) or "baseline", "constraint": mode if subset else "-", "seed": seed}
        try:
            cfg = replace(base_cfg, seed=seed, active_sites=list(subset))
            if subset:
                spec = modulator_spec_for(net, subset, mod_template, constraint=mode)
                res = train(bundle, net, build_modulator(spec, bundle.train.ids), cfg)
            else:
                res = train_baseline(bundle, net, cfg)
            rep = evaluate(net, res.params, bundle.test, bundle.num_classes)
            row.update(status="ok", top1_error=float(rep.top1_error), mean_recall=rep.mean_recall, error="")
        except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the matrix
            row.update(status="failed", top1_error=float("nan"), mean_recall=float("nan"),
                       error=f"{type(exc).__name__}: {exc}")
            log.warning("ablation cell %s/%s seed %s failed", row["sites"], row["constraint"], seed, exc_info=True)
        rows.append(row)
    if out_csv is not None:
        write_rows_csv(rows, out_csv, ABLATION_COLUMNS)
    return rows


def summarize_cells(rows, key=("sites", "constraint"), metric="top1_error"):
    """Mean and population std of ``metric`` per cell over seeds (failed runs excluded)."""
    groups = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault(tuple(r[k] for k in key), []).append(r[metric])
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}


# -- transfer ------------------------------------------------------------

TRANSFER_METHODS = ("baseline", "mfm", "transfer")


def transfer_experiment(source_bundle, target_bundles, net, mod_spec, cfg, seeds=(0, 1, 2, 3, 4),
                        source_modulators=None):
    """Learn a modulator on the source task, then compare on every target task:
    plain training, MFM with its own modulator, and training under the frozen
    source modulator.

    ``target_bundles`` maps a label (e.g. the imbalance factor) to a bundle,
    or to a callable ``seed -> bundle``. Returns ``(summary rows, raw rows)``.
    """
    raw = []
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        src = source_bundle(seed) if callable(source_bundle) else source_bundle
        if src.num_classes != mod_spec.input_dim:
            raise ValueError("source class count must equal the modulator input size")
        if source_modulators is not None:
            src_mod, src_phi = source_modulators[seed]
        else:
            src_mod = build_modulator(mod_spec)
            src_phi = train(src, net, src_mod, run_cfg).phi
        for label, tgt in target_bundles.items():
            tgt = tgt(seed) if callable(tgt) else tgt
            if tgt.num_classes != src.num_classes:
                raise ValueError("source and target class counts must match")
            runs = {
                "baseline": lambda: train_baseline(tgt, net, run_cfg),
                "mfm": lambda: train(tgt, net, build_modulator(mod_spec), run_cfg),
                "transfer": lambda: train_with_frozen_modulator(tgt, net, (src_mod, src_phi), run_cfg),
            }
            for method in TRANSFER_METHODS:
                rep = evaluate(net, runs[method]().params, tgt.test, tgt.num_classes)
                raw.append({"target": label, "method": method, "seed": seed,
                            "top1_error": float(rep.top1_error), "mean_recall": rep.mean_recall})
    summary = []
    for label in target_bundles:
        for method in TRANSFER_METHODS:
            sel = [r for r in raw if r["target"] == label and r["method"] == method]
            err = np.array([r["top1_error"] for r in sel])
            mr = np.array([r["mean_recall"] for r in sel])
            summary.append({
                "target": label, "method": method, "seeds": len(sel),
                "top1_error_mean": float(err.mean()), "top1_error_std": float(err.std()),
                "mean_recall_mean": float(mr.mean()), "mean_recall_std": float(mr.std()),
            })
    return summary, raw


# -- modulation vector export ---------------------------------------------

def export_modulation_vectors(net, params, modulator, phi, dataset, site, out_csv=None, batch_size=1000):
    """Per-sample gamma/beta at ``site`` computed from each sample's soft label.

    Returns ``(ids, labels, gamma [N, C], beta [N, C])`` and optionally
    writes them as CSV (header: sample_id, label, <site>.gamma[i]..., <site>.beta[i]...).
    """
    names = [n for n, _ in modulator.spec.sites]
    if site not in names:
        raise ValueError(f"site {site!r} is not modulated; modulator sites are {names}")
    gammas, betas = [], []
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            x = dataset.x[lo:lo + batch_size]
            soft = softmax(net.forward(params, x), axis=1).data
            mp = modulator.emit(phi, soft, dataset.ids[lo:lo + batch_size])[site]
            gammas.append(mp.gamma.data)
            betas.append(mp.beta.data)
    gamma = np.concatenate(gammas)
    beta = np.concatenate(betas)
    if out_csv is not None:
        c = gamma.shape[1]
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "label"] + [f"{site}.gamma[{i}]" for i in range(c)]
                       + [f"{site}.beta[{i}]" for i in range(c)])
            for i in range(len(dataset)):
                w.writerow([int(dataset.ids[i]), int(dataset.y[i])] + [repr(float(v)) for v in gamma[i]]
                           + [repr(float(v)) for v in beta[i]])
    return dataset.ids.copy(), dataset.y.copy(), gamma, beta


def class_mean_separation(vectors, labels):
    """Smallest pairwise distance between class means divided by the mean within-class RMS spread."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means = np.stack([vectors[labels == k].mean(axis=0) for k in classes])
    spread = np.mean([np.sqrt(((vectors[labels == k] - means[i]) ** 2).sum(axis=1).mean())
                      for i, k in enumerate(classes)])
    dists = [np.linalg.norm(means[i] - means[j]) for i in range(len(classes)) for j in range(i + 1, len(classes))]
    min_dist = float(min(dists)) if dists else 0.0
    return {"min_mean_distance": min_dist, "within_spread": float(spread),
            "ratio": min_dist / spread if spread > 0 else float("inf")}


def modulator_spec_for(net, sites, template, constraint=None):
    """Copy of ``template`` aimed at ``sites`` of ``net``; a hashing layer is re-drawn for the new width."""
    sites = tuple((s, net.sites[s]) for s in sites)
    wh = template.wh
    if wh is not None:
        wh = WeightHashSpec.create(sum(c for _, c in sites), wh.gamma.m, wh.beta.m, wh.seed)
    return replace(template, sites=sites, wh=wh, constraint=constraint or template.constraint)

