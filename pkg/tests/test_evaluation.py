import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfm.datagen import LabeledDataset, LongTailSpec, make_synthetic_gaussians
from mfm.evaluation import (
    ablation_matrix,
    class_mean_separation,
    evaluate,
    export_modulation_vectors,
    predict,
    report_from_predictions,
    summarize_cells,
    transfer_experiment,
    write_report_csv,
)
from mfm.gradcore import Tensor
from mfm.metatrain import TrainConfig, train, train_baseline, train_with_frozen_modulator
from mfm.modulator import ModulatorSpec, NetworkModulator
from mfm.nets import build_mlp


def counting_oracle(y, p, c):
    conf = [[0] * c for _ in range(c)]
    for t, q in zip(y, p):
        conf[t][q] += 1
    total = len(y)
    correct = sum(conf[k][k] for k in range(c))
    recall = [conf[k][k] / sum(conf[k]) if sum(conf[k]) else float("nan") for k in range(c)]
    present = [r for r in recall if r == r]
    hist = [sum(conf[k][j] for k in range(c)) / total for j in range(c)]
    return conf, 1 - correct / total, recall, sum(present) / len(present), hist


def test_perfect_and_constant_predictors():
    y = np.repeat(np.arange(10), 7)
    r = report_from_predictions(y, y, 10)
    assert r.top1_error == 0 and (r.per_class_recall == 1).all()
    assert (r.confusion == np.diag(np.full(10, 7))).all()
    r = report_from_predictions(y, np.zeros_like(y), 10)
    assert r.top1_error == pytest.approx(0.9)
    assert r.per_class_recall.tolist() == [1] + [0] * 9
    assert r.mean_recall == pytest.approx(0.1)
    assert r.predicted_histogram.tolist() == [1] + [0] * 9


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=80))
def test_report_matches_counting_oracle(c, pairs):
    y = np.array([a % c for a, _ in pairs])
    p = np.array([b % c for _, b in pairs])
    r = report_from_predictions(y, p, c)
    conf, err, recall, mu, hist = counting_oracle(y, p, c)
    assert r.confusion.tolist() == conf
    assert r.top1_error == pytest.approx(err, abs=1e-15)
    np.testing.assert_array_equal(r.per_class_recall, np.array(recall))
    assert r.mean_recall == pytest.approx(mu, abs=1e-15)
    np.testing.assert_allclose(r.predicted_histogram, hist, atol=1e-15)
    rows = r.confusion.sum(axis=1)
    for k in range(c):
        if rows[k]:
            assert r.per_class_recall[k] == r.confusion[k, k] / rows[k]
    assert rows.tolist() == np.bincount(y, minlength=c).tolist()
    assert r.predicted_histogram.sum() == pytest.approx(1.0)


@pytest.mark.invariant
def test_evaluate_on_random_net_matches_oracle_and_never_modulates():
    rng = np.random.default_rng(0)
    net = build_mlp(3, [5], 4)
    params = net.init_params(7)
    ds = LabeledDataset(rng.standard_normal((200, 3)), rng.integers(0, 4, 200), np.arange(200))
    mod = NetworkModulator(ModulatorSpec(4, (("h1", 5),), hidden_dim=3))
    rep = evaluate(net, params, ds, 4)
    assert mod.calls == 0
    logits = np.maximum(ds.x @ params["fc1.weight"].data + params["fc1.bias"].data, 0) @ params["out.weight"].data
    pred = np.argmax(logits + params["out.bias"].data, axis=1)
    conf, err, *_ = counting_oracle(ds.y, pred, 4)
    assert rep.confusion.tolist() == conf and rep.top1_error == pytest.approx(err)


def test_argmax_ties_go_to_lowest_class():
    net = build_mlp(2, [2], 3)
    p = net.init_params(0)
    p["out.weight"] = Tensor(np.zeros((2, 3)))
    p["out.bias"] = Tensor(np.array([1.0, 1.0, 0.0]))
    assert predict(net, p, np.ones((4, 2))).tolist() == [0, 0, 0, 0]


def test_report_csv_files(tmp_path):
    r = report_from_predictions([0, 1, 1, 2], [0, 1, 0, 2], 3)
    write_report_csv(r, tmp_path, manifest_id="abc")
    rows = list(csv.reader(open(tmp_path / "report.csv")))
    assert rows[0] == ["metric", "value"] and ["manifest_id", "abc"] in rows
    per = list(csv.DictReader(open(tmp_path / "per_class.csv")))
    assert [float(r_["recall"]) for r_ in per] == [1.0, 0.5, 1.0]
    conf = list(csv.reader(open(tmp_path / "confusion.csv")))
    assert conf[2] == ["1", "1", "1", "0"]


def _bundle(seed=0, IF=20, n_max=200, rotation=0.0):
    return make_synthetic_gaussians(2, 2, LongTailSpec(2, n_max, IF, seed=seed), 2.0, test_per_class=100,
                                    rotation=rotation)


CFG = TrainConfig(epochs=2, batch_n=50, alpha=0.1, eta=0.1)


def test_ablation_matrix_baseline_row_and_failed_cells(tmp_path):
    b = _bundle()
    net = build_mlp(2, [6, 6], 2)
    tmpl = ModulatorSpec(2, (("h1", 6),), hidden_dim=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = ablation_matrix(b, net, tmpl, CFG, [(), ("h1",), ("h2",), ("h9",)],
                               ("full", "beta_zero"), seeds=(0, 1), out_csv=tmp_path / "abl.csv")
    base = [r for r in rows if r["sites"] == "baseline"]
    assert len(base) == 2
    for r in base:
        res = train_baseline(b, net, TrainConfig(**{**CFG.__dict__, "seed": r["seed"]}))
        assert r["top1_error"] == evaluate(net, res.params, b.test, 2).top1_error
    failed = [r for r in rows if r["status"] == "failed"]
    assert {r["sites"] for r in failed} == {"h9"} and len(failed) == 4
    assert all("KeyError" in r["error"] for r in failed)
    ok = [r for r in rows if r["status"] == "ok"]
    assert len(ok) == 2 + 2 * 2 * 2
    summary = summarize_cells(rows)
    assert summary[("h1", "full")][2] == 2
    text = (tmp_path / "abl.csv").read_text().splitlines()
    assert text[0] == "sites,constraint,seed,status,top1_error,mean_recall,error"
    assert len(text) == 1 + len(rows)


def test_export_identity_rows_and_identical_soft_labels(tmp_path):
    net = build_mlp(2, [5], 2)
    params = net.init_params(0)
    mod = NetworkModulator(ModulatorSpec(2, (("h1", 5),), hidden_dim=4))
    x = np.array([[0.1, 0.2], [0.1, 0.2], [1.0, -1.0]])
    ds = LabeledDataset(x, [0, 0, 1], [5, 6, 7])
    ids, labels, g, beta = export_modulation_vectors(net, params, mod, mod.init_params(), ds, "h1",
                                                     out_csv=tmp_path / "v.csv")
    np.testing.assert_allclose(g, 1, atol=1e-15)
    assert (beta == 0).all() and ids.tolist() == [5, 6, 7]
    phi = mod.init_params()
    phi["fc2.weight"] = Tensor(np.random.default_rng(0).normal(size=phi["fc2.weight"].shape))
    _, _, g, beta = export_modulation_vectors(net, params, mod, phi, ds, "h1")
    np.testing.assert_array_equal(g[0], g[1])
    np.testing.assert_array_equal(beta[0], beta[1])
    header = (tmp_path / "v.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["sample_id", "label", "h1.gamma[0]"] and header[-1] == "h1.beta[4]"
    with pytest.raises(ValueError):
        export_modulation_vectors(net, params, mod, phi, ds, "h2")


def test_trained_modulation_vectors_group_by_class():
    b = make_synthetic_gaussians(2, 2, LongTailSpec(2, 1000, 100, seed=0), 2.0, test_per_class=200)
    net = build_mlp(2, [32], 2)
    mod = NetworkModulator(ModulatorSpec(2, (("h1", 32),), hidden_dim=16))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = train(b, net, mod, TrainConfig(epochs=10, alpha=0.1, eta=0.1))
    _, labels, g, beta = export_modulation_vectors(net, res.params, mod, res.phi, b.test, "h1")
    stats = class_mean_separation(np.concatenate([g, beta], axis=1), labels)
    assert stats["min_mean_distance"] > 0.05
    assert stats["ratio"] > 0.5


def test_transfer_self_consistency_and_baseline_column():
    src = _bundle(seed=1, IF=50)
    net = build_mlp(2, [6], 2)
    spec = ModulatorSpec(2, (("h1", 6),), hidden_dim=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        summary, raw = transfer_experiment(src, {"self": src}, net, spec, CFG, seeds=(0, 1))
        for seed in (0, 1):
            cfg = TrainConfig(**{**CFG.__dict__, "seed": seed})
            own = train(src, net, NetworkModulator(spec), cfg)
            frozen = train_with_frozen_modulator(src, net, (own.modulator, own.phi), cfg)
            base = train_baseline(src, net, cfg)
            row = {r["method"]: r for r in raw if r["seed"] == seed}
            assert row["transfer"]["top1_error"] == evaluate(net, frozen.params, src.test, 2).top1_error
            assert row["baseline"]["top1_error"] == evaluate(net, base.params, src.test, 2).top1_error
            assert row["mfm"]["top1_error"] == evaluate(net, own.params, src.test, 2).top1_error
    assert {(s["target"], s["method"]) for s in summary} == {("self", m) for m in ("baseline", "mfm", "transfer")}
    assert all(s["seeds"] == 2 for s in summary)
    with pytest.raises(ValueError):
        transfer_experiment(src, {"x": src}, net, ModulatorSpec(3, (("h1", 6),)), CFG, seeds=(0,))
