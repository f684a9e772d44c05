import csv
import hashlib
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from mfm.cli import main
from mfm.config import ConfigError, parse_config, serialize_config
from mfm.datagen import LongTailSpec, TestProfile as Profile, build_test_set, class_count_profile, load_bundle
from mfm.datagen import load_idx
from mfm.evaluation import evaluate
from mfm.nets import load_classifier

SMALL = ["--set", "data.test_per_class=30", "--set", "data.num_classes=10", "--set", "data.n_max=500",
         "--set", "data.imbalance_factor=100"]
FAST = ["--set", "train.epochs=1", "--set", "train.batch_n=100", "--set", "model.hidden=[16]"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "bundle"
    assert main(["synthesize", str(out)] + SMALL) == 0
    return out


def test_synthesize_counts_and_determinism(bundle_dir, tmp_path):
    man = json.loads((bundle_dir / "manifest.json").read_text())
    assert man["class_counts"]["train"] == class_count_profile(LongTailSpec(10, 500, 100))
    assert man["class_counts"]["test"] == [30] * 10
    again = tmp_path / "again"
    assert main(["synthesize", str(again)] + SMALL) == 0
    assert sha(again / "manifest.json") == sha(bundle_dir / "manifest.json")
    assert sha(again / "train.mfmd") == sha(bundle_dir / "train.mfmd")
    assert (again / "config.ini").exists() and (again / "invocation.json").exists()


def test_invalid_imbalance_factor_exits_nonzero(tmp_path, capsys):
    code = main(["synthesize", str(tmp_path / "b"), "--set", "data.imbalance_factor=0.5"])
    assert code != 0
    assert "imbalance_factor" in capsys.readouterr().err
    assert not (tmp_path / "b").exists()


def test_dry_run_prints_resolved_config(capsys, tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text("[train]\nalpha = 0.2\nepochs = 7\n")
    assert main(["train", "--dry-run", "-c", str(ini), "--set", "train.epochs=3"]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.train.alpha == 0.2 and cfg.train.epochs == 3


def test_unknown_key_is_config_error(tmp_path, capsys):
    assert main(["train", "--dry-run", "--set", "train.alhpa=0.1"]) == 2
    assert "alhpa" in capsys.readouterr().err


def test_baseline_then_mfm_then_eval(bundle_dir, tmp_path, capsys):
    base, mfm = tmp_path / "base", tmp_path / "mfm"
    assert main(["train", str(bundle_dir), str(base), "--mode", "baseline"] + FAST) == 0
    assert main(["train", str(bundle_dir), str(mfm), "--mode", "mfm"] + FAST) == 0
    mb = json.loads((base / "manifest.json").read_text())
    mm = json.loads((mfm / "manifest.json").read_text())
    assert mb["mode"] == "baseline" and mm["mode"] == "mfm"
    assert len(mb["log"]) == len(mm["log"]) > 0
    assert not (base / "modulator.mfmm").exists() and (mfm / "modulator.mfmm").exists()
    rows = list(csv.DictReader(open(mfm / "metrics.csv")))
    assert len(rows) == len(mm["log"])

    # eval a baseline checkpoint: no modulator involved, two profiles, library equivalence
    reports = {}
    for prof in ("uniform", "test1"):
        out = tmp_path / f"eval_{prof}"
        assert main(["eval", str(base / "classifier.mfmc"), str(bundle_dir), str(out), "--test-profile", prof]) == 0
        reports[prof] = dict(csv.reader(open(out / "report.csv")))
    assert reports["uniform"]["n"] != reports["test1"]["n"]
    assert reports["uniform"]["manifest_id"] == sha(base / "manifest.json")[:16]

    net, params = load_classifier(base / "classifier.mfmc")
    b = load_bundle(bundle_dir)
    test1 = build_test_set(b.test, Profile("test1", 10.0, 30, seed=0), 10)
    lib = evaluate(net, params, test1, 10)
    assert float(reports["test1"]["top1_error"]) == lib.top1_error
    assert float(reports["test1"]["mean_recall"]) == lib.mean_recall

    # export-mods mirrors the trained modulator
    out = tmp_path / "mods"
    assert main(["export-mods", str(mfm / "classifier.mfmc"), str(mfm / "modulator.mfmm"), str(bundle_dir),
                 str(out), "--site", "h1"]) == 0
    lines = (out / "modulation_h1.csv").read_text().splitlines()
    assert len(lines) == 1 + 300


def test_frozen_class_mismatch_is_clear_error(bundle_dir, tmp_path, capsys):
    two = tmp_path / "two"
    assert main(["synthesize", str(two), "--set", "data.num_classes=2", "--set", "data.n_max=100",
                 "--set", "data.imbalance_factor=10", "--set", "data.test_per_class=10"]) == 0
    src = tmp_path / "src"
    assert main(["train", str(two), str(src), "--mode", "mfm"] + FAST) == 0
    capsys.readouterr()
    out = tmp_path / "frozen"
    code = main(["train", str(bundle_dir), str(out), "--mode", f"frozen:{src / 'modulator.mfmm'}"] + FAST)
    assert code == 1
    assert "2-class" in capsys.readouterr().err
    assert not out.exists() and (tmp_path / "frozen.failed").exists()


def test_ablate_and_transfer_small(bundle_dir, tmp_path):
    two = tmp_path / "two"
    assert main(["synthesize", str(two), "--set", "data.num_classes=2", "--set", "data.n_max=200",
                 "--set", "data.imbalance_factor=20", "--set", "data.test_per_class=20"]) == 0
    out = tmp_path / "abl"
    assert main(["ablate", str(two), str(out), "--subsets", ";h1;h2", "--constraints", "full",
                 "--set", "model.hidden=[8,8]", "--set", "eval.seeds=[0]", "--set", "train.epochs=1"]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["sites"] for r in rows] == ["baseline", "h1", "h2"]
    out = tmp_path / "tr"
    assert main(["transfer", str(out), "--set", "data.num_classes=2", "--set", "data.n_max=400",
                 "--set", "data.test_per_class=20", "--set", "eval.seeds=[0]", "--set", "train.epochs=1",
                 "--set", "eval.transfer_target_ifs=[10]", "--set", "model.hidden=[8]"]) == 0
    methods = [r["method"] for r in csv.DictReader(open(out / "transfer.csv"))]
    assert methods == ["baseline", "mfm", "transfer"]


def test_config_round_trip():
    cfg = parse_config("[model]\nhidden = [8, 4]\n[train]\nschedule = [[5, 0.01]]\n[eval]\nseeds = [1, 2]\n")
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert again.model.hidden == [8, 4] and again.train.schedule == [(5, 0.01)]
    for bad in ("[nope]\nx = 1\n", "[train]\nepochs = many\n", "[data]\nmeta_strategy = both\n"):
        with pytest.raises(ConfigError):
            parse_config(bad)


def test_failed_output_is_renamed(bundle_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", str(tmp_path / "missing"), str(out), "--mode", "baseline"]) == 1
    assert not out.exists() and not (tmp_path / "run.failed").exists()
    assert main(["train", str(bundle_dir), str(out), "--set", 'modulator.sites=["zz"]']) == 2
    assert not out.exists() and (tmp_path / "run.failed" / "config.ini").exists()


def test_console_script_runs(tmp_path):
    exe = shutil.which("mfm")
    cmd = [exe] if exe else [sys.executable, "-m", "mfm.cli"]
    res = subprocess.run(cmd + ["train", "--dry-run", "--set", "train.seed=4"], capture_output=True, text=True,
                         env={"MFM_THREADS": "1", "PATH": "/usr/bin:/bin"}, timeout=60)
    assert res.returncode == 0, res.stderr
    assert "seed = 4" in res.stdout
    np.testing.assert_equal(parse_config(res.stdout).train.seed, 4)


def test_lenet_pipeline_on_idx_pool(tmp_path):
    from mfm.cli import bundle_from_sources
    from mfm.config import DataConfig
    from mfm.metatrain import TrainConfig, train
    from mfm.modulator import ModulatorSpec, NetworkModulator
    from mfm.nets import build_lenet
    from test_datagen import write_fake_fashion_mnist

    root = write_fake_fashion_mnist(tmp_path / "fm", n_train=600, n_test=100)
    pool = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    test = load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    b = bundle_from_sources(pool, test, DataConfig(source="idx", num_classes=10, n_max=40, imbalance_factor=10,
                                                   meta_strategy="development", meta_per_class=4))
    assert b.class_counts["train"][0] == 40 and b.class_counts["train"][-1] == 4
    net = build_lenet(10)
    mod = NetworkModulator(ModulatorSpec(10, (("fc1", 84),), hidden_dim=16))
    res = train(b, net, mod, TrainConfig(alpha=0.01, eta=0.001, max_iters=2, batch_n=20, dtype="float32"))
    assert len(res.manifest.log) == 2 and mod.calls > 0
    rep = evaluate(net, res.params, b.test, 10)
    assert rep.confusion.sum() == 100
