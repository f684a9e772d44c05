"""Command-line entry point: ``mfm <subcommand>``.

Subcommands: synthesize, train, eval, ablate, transfer, export-mods.
Every command takes ``--set section.key=value`` overrides on top of its
config file, logs the resolved config, and writes it next to its outputs.
If a command fails, whatever it wrote is renamed with a ``.failed`` suffix
and the exit code is nonzero.
"""
import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, parse_config, serialize_config
from .datagen import (
    LongTailSpec, TestProfile, build_longtail, build_test_set, extract_meta, load_bundle, load_idx,
    make_synthetic_gaussians, save_bundle, DatasetBundle,
)
from .evaluation import (
    ablation_matrix, evaluate, export_modulation_vectors, summarize_cells, transfer_experiment,
    write_report_csv, write_rows_csv,
)
from .metatrain import NonFiniteLossError, train, train_baseline, train_with_frozen_modulator
from .modulator import ModulatorSpec, WeightHashSpec, build_modulator, load_modulator
from .nets import build_lenet, build_mlp, load_classifier

log = logging.getLogger("mfm")


def _config(args):
    if getattr(args, "config", None):
        return load_config(args.config, args.set or ())
    return parse_config("", args.set or ())


# -- builders shared by subcommands --------------------------------------

def make_bundle(dcfg):
    spec = LongTailSpec(dcfg.num_classes, dcfg.n_max, dcfg.imbalance_factor, dcfg.seed)
    if dcfg.source == "synthetic":
        return make_synthetic_gaussians(
            dcfg.num_classes, dcfg.dim, spec, dcfg.separation, test_per_class=dcfg.test_per_class,
            strategy=dcfg.meta_strategy, meta_per_class=dcfg.meta_per_class, rotation=dcfg.rotation,
        )
    src = load_idx(dcfg.train_images, dcfg.train_labels)
    test = load_idx(dcfg.test_images, dcfg.test_labels)
    return bundle_from_sources(src, test, dcfg)


def bundle_from_sources(src, test, dcfg):
    """Long-tailed bundle from an already loaded image pool and test split."""
    spec = LongTailSpec(dcfg.num_classes, dcfg.n_max, dcfg.imbalance_factor, dcfg.seed)
    if dcfg.meta_strategy == "meta":
        # meta samples come from outside the long-tailed split, so take them first
        spare, meta = extract_meta(src, "meta", dcfg.meta_per_class, dcfg.num_classes, dcfg.seed)
        train_set = build_longtail(spare, spec)
    else:
        train_set = build_longtail(src, spec)
        train_set, meta = extract_meta(train_set, "development", dcfg.meta_per_class, dcfg.num_classes, dcfg.seed)
    prov = {"source": "idx", "spec": asdict(spec), "train_images": dcfg.train_images,
            "test_images": dcfg.test_images, "meta_strategy": dcfg.meta_strategy,
            "meta_per_class": dcfg.meta_per_class}
    return DatasetBundle(train_set, meta, test, dcfg.num_classes, prov)


def make_net(mcfg, bundle):
    shape = bundle.train.x.shape[1:]
    if mcfg.arch == "lenet":
        return build_lenet(bundle.num_classes, image_size=shape[-1])
    return build_mlp(int(np.prod(shape)), list(mcfg.hidden), bundle.num_classes)


def make_modulator_spec(modcfg, net, num_classes, seed=0):
    sites = modcfg.sites or [list(net.sites)[-1]]
    unknown = [s for s in sites if s not in net.sites]
    if unknown:
        raise ConfigError(f"[modulator] sites {unknown} not in net sites {list(net.sites)}")
    widths = tuple((s, net.sites[s]) for s in sites)
    wh = None
    if modcfg.wh:
        wh = WeightHashSpec.create(sum(c for _, c in widths), modcfg.wh_dim, modcfg.wh_dim, modcfg.wh_seed)
    return ModulatorSpec(num_classes, widths, kind=modcfg.kind, hidden_dim=modcfg.hidden_dim,
                         variant=modcfg.variant, constraint=modcfg.constraint, wh=wh, seed=seed)


# -- output handling -----------------------------------------------------

@contextlib.contextmanager
def _outputs(path, args=None):
    """Yield the output dir; on any failure move it aside to ``<path>.failed``.

    On success the exact invocation is recorded in ``invocation.json``.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        yield out
        if args is not None:
            inv = {"argv": getattr(args, "argv", None), "version": __version__}
            (out / "invocation.json").write_text(json.dumps(inv, indent=2) + "\n")
    except BaseException:
        if out.exists():
            failed = out.with_name(out.name + ".failed")
            if failed.exists():
                shutil.rmtree(failed)
            out.rename(failed)
        raise


def _write_config(out, cfg):
    text = serialize_config(cfg)
    (out / "config.ini").write_text(text)
    log.info("resolved config:\n%s", text)


def _checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- subcommands ---------------------------------------------------------

def cmd_synthesize(args):
    cfg = _config(args)
    bundle = make_bundle(cfg.data)
    with _outputs(args.out, args) as out:
        _write_config(out, cfg)
        manifest = save_bundle(bundle, out)
    print(f"wrote bundle {out} (manifest sha256 {_checksum(manifest)[:16]}) counts={bundle.class_counts['train']}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    if args.dry_run:
        print(serialize_config(cfg), end="")
        return 0
    bundle = load_bundle(args.data)
    net = make_net(cfg.model, bundle)
    mode = args.mode
    with _outputs(args.out, args) as out:
        _write_config(out, cfg)
        if mode == "baseline":
            res = train_baseline(bundle, net, cfg.train, out_dir=out)
        elif mode == "mfm":
            spec = make_modulator_spec(cfg.modulator, net, bundle.num_classes, cfg.train.seed)
            tcfg = replace(cfg.train, active_sites=[n for n, _ in spec.sites])
            res = train(bundle, net, build_modulator(spec, bundle.train.ids), tcfg, out_dir=out)
        elif mode.startswith("frozen:"):
            res = train_with_frozen_modulator(bundle, net, mode.split(":", 1)[1], cfg.train, out_dir=out)
        else:
            raise ConfigError(f"--mode must be mfm, baseline or frozen:PATH, got {mode!r}")
    last = res.manifest.log[-1] if res.manifest.log else {}
    print(f"trained ({mode}) {len(res.manifest.log)} steps, final train_loss={last.get('train_loss')}; outputs in {out}")
    return 0


def _test_profile_set(bundle, ecfg, profile_kind, seed):
    counts = bundle.test.class_counts(bundle.num_classes)
    n_max = ecfg.test_n_max or int(counts.min())
    prof = TestProfile(profile_kind, ecfg.test_imbalance_factor, n_max, seed=seed)
    return build_test_set(bundle.test, prof, bundle.num_classes)


def cmd_eval(args):
    cfg = _config(args)
    net, params = load_classifier(args.checkpoint)
    bundle = load_bundle(args.data)
    test = _test_profile_set(bundle, cfg.eval, args.test_profile or cfg.eval.test_profile, cfg.data.seed)
    report = evaluate(net, params, test, bundle.num_classes)
    manifest_id = ""
    mpath = Path(args.checkpoint).with_name("manifest.json")
    if mpath.exists():
        manifest_id = _checksum(mpath)[:16]
    with _outputs(args.out, args) as out:
        _write_config(out, cfg)
        write_report_csv(report, out, manifest_id)
    print(f"top1_error={report.top1_error:.4f} mean_recall={report.mean_recall:.4f} n={report.n}")
    return 0


def cmd_export_mods(args):
    net, params = load_classifier(args.classifier)
    modulator, phi = load_modulator(args.modulator)
    bundle = load_bundle(args.data)
    ds = getattr(bundle, args.split)
    with _outputs(args.out, args) as out:
        export_modulation_vectors(net, params, modulator, phi, ds, args.site, out / f"modulation_{args.site}.csv")
    print(f"exported {len(ds)} rows for site {args.site} to {out}")
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    bundle = load_bundle(args.data)
    net = make_net(cfg.model, bundle)
    sites = list(net.sites)
    subsets = [[]] + [[s] for s in sites] + ([sites] if len(sites) > 1 else [])
    if args.subsets:
        subsets = [[s for s in chunk.split(",") if s] for chunk in args.subsets.split(";")]
    template = make_modulator_spec(replace(cfg.modulator, sites=[sites[-1]]), net, bundle.num_classes)
    with _outputs(args.out, args) as out:
        _write_config(out, cfg)
        rows = ablation_matrix(bundle, net, template, cfg.train, subsets, tuple(args.constraints.split(",")),
                               tuple(cfg.eval.seeds), out / "ablation.csv")
        summary = [{"sites": k[0], "constraint": k[1], "top1_error_mean": m, "top1_error_std": s, "seeds": n}
                   for k, (m, s, n) in summarize_cells(rows).items()]
        write_rows_csv(summary, out / "ablation_summary.csv")
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"ablation: {len(rows)} runs, {failed} failed; results in {out}")
    return 0


def cmd_transfer(args):
    cfg = _config(args)
    d, e = cfg.data, cfg.eval
    if args.source:
        source = load_bundle(args.source)
        targets = {}
        for item in args.target or []:
            label, path = item.split("=", 1)
            targets[label] = load_bundle(path)
    else:
        def source(seed):
            return make_bundle(replace(d, imbalance_factor=e.transfer_source_if, seed=seed))

        targets = {}
        for IF in e.transfer_target_ifs:
            targets[f"IF{IF:g}"] = (lambda s, IF=IF: make_bundle(
                replace(d, imbalance_factor=IF, seed=s + 1000, rotation=d.rotation + e.transfer_rotation)))
    probe = source(0) if callable(source) else source
    net = make_net(cfg.model, probe)
    spec = make_modulator_spec(cfg.modulator, net, probe.num_classes)
    tcfg = replace(cfg.train, active_sites=[n for n, _ in spec.sites])
    with _outputs(args.out, args) as out:
        _write_config(out, cfg)
        summary, raw = transfer_experiment(source, targets, net, spec, tcfg, tuple(e.seeds))
        write_rows_csv(summary, out / "transfer.csv")
        write_rows_csv(raw, out / "transfer_raw.csv")
    for r in summary:
        print(f"{r['target']:>8} {r['method']:>9}  err {r['top1_error_mean']:.4f}±{r['top1_error_std']:.4f}"
              f"  mean_recall {r['mean_recall_mean']:.4f}±{r['mean_recall_std']:.4f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mfm", description="Meta feature modulation for long-tailed classification")
    p.add_argument("--version", action="version", version=f"mfm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", "-c", help="INI experiment config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    sp = sub.add_parser("synthesize", help="build a dataset bundle")
    common(sp)
    sp.add_argument("out")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("train", help="train a classifier (mfm, baseline, or frozen:MODULATOR)")
    common(sp)
    sp.add_argument("data", nargs="?")
    sp.add_argument("out", nargs="?")
    sp.add_argument("--mode", default="mfm")
    sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a classifier checkpoint")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("out")
    sp.add_argument("--test-profile", choices=["uniform", "test1", "test2"])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="site / constraint ablation matrix")
    common(sp)
    sp.add_argument("data")
    sp.add_argument("out")
    sp.add_argument("--subsets", help="';'-separated site lists, e.g. 'h1;h2;h1,h2;' (empty = baseline)")
    sp.add_argument("--constraints", default="full,beta_zero,gamma_one")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("transfer", help="cross-task modulator transfer")
    common(sp)
    sp.add_argument("out")
    sp.add_argument("--source", help="source bundle dir (default: synthesize from config)")
    sp.add_argument("--target", action="append", metavar="LABEL=DIR")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("export-mods", help="export per-sample gamma/beta vectors")
    sp.add_argument("classifier")
    sp.add_argument("modulator")
    sp.add_argument("data")
    sp.add_argument("out")
    sp.add_argument("--site", required=True)
    sp.add_argument("--split", default="test", choices=["train", "meta", "test"])
    sp.set_defaults(func=cmd_export_mods)
    return p


def _limit_threads():
    n = os.environ.get("MFM_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train" and not args.dry_run and (args.data is None or args.out is None):
        print("mfm train: data and out are required unless --dry-run", file=sys.stderr)
        return 2
    try:
        with _limit_threads():
            return args.func(args)
    except ConfigError as exc:
        print(f"mfm {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, NonFiniteLossError) as exc:
        print(f"mfm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
