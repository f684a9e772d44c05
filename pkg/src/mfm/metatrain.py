"""Online one-loop bilevel training of a classifier and its feature modulator.

Per step, on a training batch and a class-balanced meta batch:

  (a) plain forward -> soft labels (held constant)
  (b) modulated forward -> training loss
  (c) virtual step  w_hat(phi) = w - lr * grad_w(training loss), kept on the graph
  (d) meta loss = plain cross-entropy of the meta batch under w_hat(phi)
  (e) phi <- phi - eta * grad_phi(meta loss)
  (f) modulated forward again with the new phi (now a constant) and a real
      SGD update of w with momentum and weight decay

The virtual step is plain SGD; momentum and weight decay only enter (f).
"""
import csv
import json
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcore as gc
from .gradcore import ParamSet, Tensor, backward, no_grad, virtual_sgd_step
from .modulator import load_modulator, save_modulator
from .nets import save_classifier

__all__ = [
    "TrainConfig", "RunManifest", "TrainResult", "MetaSampler", "NonFiniteLossError",
    "DimensionMismatchError", "TrainingIOError", "SGDMomentum",
    "train_step", "meta_gradient", "train", "train_baseline", "train_with_frozen_modulator",
    "thread_count",
]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, msg, diagnostics, partial=None):
        super().__init__(f"{msg}: {json.dumps(diagnostics, default=float)}")
        self.diagnostics = diagnostics
        self.partial = partial


class DimensionMismatchError(ValueError):
    pass


class TrainingIOError(OSError):
    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


@dataclass
class TrainConfig:
    batch_n: int = 100
    batch_m: int = 0  # 0 -> c * min(10, meta samples per class)
    alpha: float = 0.01
    schedule: list = field(default_factory=list)  # [(epoch, lr), ...]
    eta: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 1
    max_iters: int = 0  # 0 -> unlimited
    seed: int = 0
    meta_grad: str = "exact"
    fd_eps: float = 0.01
    active_sites: list = field(default_factory=list)  # empty -> every site of the modulator
    checkpoint_every: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.schedule = [tuple(p) for p in self.schedule]
        if not self.alpha >= 0 or not self.eta >= 0:
            raise ValueError("alpha and eta must be non-negative")
        if self.batch_n < 1 or self.batch_m < 0:
            raise ValueError("batch sizes must be positive")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")
        if self.meta_grad not in ("exact", "first_order"):
            raise ValueError(f"meta_grad must be exact or first_order, got {self.meta_grad!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def lr_at(self, epoch):
        lr = self.alpha
        for e, v in self.schedule:
            if epoch >= e:
                lr = v
        return lr


@dataclass
class RunManifest:
    mode: str
    config: dict
    provenance: dict
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_clock: float = 0.0
    threads: int = 1
    code_version: str = __version__

    def append(self, **row):
        if self.log and row["step"] <= self.log[-1]["step"]:
            raise ValueError("manifest steps must strictly increase")
        self.log.append(row)

    def to_json(self):
        return asdict(self)


@dataclass
class TrainResult:
    net: object
    params: ParamSet
    modulator: object
    phi: ParamSet
    manifest: RunManifest

    def __iter__(self):
        return iter((self.net, self.params, self.modulator, self.phi, self.manifest))


def thread_count():
    return int(os.environ.get("MFM_THREADS", "0") or 0) or (os.cpu_count() or 1)


class SGDMomentum:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {}

    def step(self, params, grads, lr):
        out = ParamSet()
        for name, w in params.items():
            d = grads[name].data + self.weight_decay * w.data
            if self.momentum:
                buf = self.buf.get(name)
                buf = d.copy() if buf is None else self.momentum * buf + d
                self.buf[name] = buf
                d = buf
            out[name] = Tensor(w.data - lr * d)
        return out


class MetaSampler:
    """Class-stratified round-robin over the meta set.

    Classes are visited in a fixed cycle; each class serves samples from its
    own seeded shuffle and reshuffles when exhausted. A batch whose size is a
    multiple of the number of classes is therefore exactly balanced.
    """

    def __init__(self, labels, num_classes, batch_m, seed=0):
        self.rng = np.random.default_rng([int(seed), 21])
        self.pools = [np.flatnonzero(np.asarray(labels) == k) for k in range(num_classes)]
        self.classes = [k for k, p in enumerate(self.pools) if len(p)]
        if not self.classes:
            raise ValueError("meta set is empty")
        self.batch_m = batch_m
        self.queues = {k: [] for k in self.classes}
        self.cursor = 0

    def _pop(self, k):
        if not len(self.queues[k]):
            self.queues[k] = list(self.pools[k][self.rng.permutation(len(self.pools[k]))])
        return self.queues[k].pop(0)

    def next(self):
        out = []
        for _ in range(self.batch_m):
            k = self.classes[self.cursor % len(self.classes)]
            self.cursor += 1
            out.append(self._pop(k))
        return np.asarray(out, dtype=np.int64)


def _ce(net, params, x, y, mods=None):
    return gc.cross_entropy(net.forward(params, x, mods), y)


def _soft_labels(net, params, x):
    with no_grad():
        return gc.softmax(net.forward(params, x), axis=1).data


def meta_gradient(net, modulator, w, phi, train_batch, meta_batch, lr, soft=None, mode="exact", fd_eps=0.01):
    """Gradient of the meta loss at ``w_hat(phi)`` with respect to ``phi``.

    ``mode="exact"`` differentiates through the virtual step.
    ``mode="first_order"`` replaces the Hessian-vector product with a central
    difference of phi-gradients at ``w +/- eps * v``, where ``v`` is the meta
    gradient at ``w_hat``; only first-order backward passes are needed.
    Returns ``(grad ParamSet, training loss, meta loss)``.
    """
    x, y, ids = train_batch
    xm, ym = meta_batch
    if soft is None:
        soft = _soft_labels(net, w, x)
    w_leaf = w.detached(requires_grad=True)
    phi_leaf = phi.detached(requires_grad=True)
    loss = _ce(net, w_leaf, x, y, modulator.emit(phi_leaf, soft, ids))
    if mode == "exact":
        gw = backward(loss, w_leaf, create_graph=True)
        w_hat = virtual_sgd_step(w_leaf, gw, lr)
        meta_loss = _ce(net, w_hat, xm, ym)
        return backward(meta_loss, phi_leaf), loss.item(), meta_loss.item()

    gw = backward(loss, w_leaf)
    w_hat = ParamSet({k: Tensor(w[k].data - lr * gw[k].data, requires_grad=True) for k in w})
    meta_loss = _ce(net, w_hat, xm, ym)
    v = backward(meta_loss, w_hat)
    vnorm = math.sqrt(sum(float((g.data ** 2).sum()) for g in v.values()))
    if vnorm == 0 or lr == 0:
        return ParamSet({k: Tensor(np.zeros_like(t.data)) for k, t in phi.items()}), loss.item(), meta_loss.item()
    eps = fd_eps / vnorm

    def grad_phi_at(sign):
        ws = ParamSet({k: Tensor(w[k].data + sign * eps * v[k].data) for k in w})
        p = phi.detached(requires_grad=True)
        return backward(_ce(net, ws, x, y, modulator.emit(p, soft, ids)), p)

    gp, gm = grad_phi_at(+1.0), grad_phi_at(-1.0)
    grads = ParamSet({k: Tensor(-lr * (gp[k].data - gm[k].data) / (2 * eps)) for k in phi})
    return grads, loss.item(), meta_loss.item()


def _finite_or_raise(vals, grads=None, partial=None):
    if all(math.isfinite(v) for v in vals.values()):
        return
    diag = dict(vals)
    if grads:
        diag["grad_norms"] = {k: float(np.sqrt((g.data.astype(np.float64) ** 2).sum())) for k, g in grads.items()}
    raise NonFiniteLossError("non-finite loss", diag, partial)


def train_step(net, modulator, w, phi, train_batch, meta_batch, cfg, lr=None, optimizer=None, update_phi=True):
    """One step of the alternating update. Returns ``(w', phi', log dict)``.

    With ``update_phi=False`` phi is held fixed (frozen transfer) and no
    meta batch is needed.
    """
    lr = cfg.alpha if lr is None else lr
    optimizer = optimizer or SGDMomentum(cfg.momentum, cfg.weight_decay)
    x, y, ids = train_batch
    soft = _soft_labels(net, w, x)
    if not np.isfinite(soft).all():
        raise NonFiniteLossError("non-finite soft labels", {
            "train_loss": float("nan"), "meta_loss": float("nan"),
            "bad_rows": int((~np.isfinite(soft)).any(axis=1).sum()),
        })
    meta_loss = float("nan")
    if update_phi:
        gphi, _, meta_loss = meta_gradient(net, modulator, w, phi, train_batch, meta_batch, lr, soft,
                                           cfg.meta_grad, cfg.fd_eps)
        _finite_or_raise({"meta_loss": meta_loss}, gphi)
        phi = ParamSet({k: Tensor(phi[k].data - cfg.eta * gphi[k].data) for k in phi})
    w_leaf = w.detached(requires_grad=True)
    with no_grad():
        mods = modulator.emit(phi, soft, ids)
    loss = _ce(net, w_leaf, x, y, mods)
    grads = backward(loss, w_leaf)
    _finite_or_raise({"train_loss": loss.item(), "meta_loss": meta_loss}
                     if update_phi else {"train_loss": loss.item()}, grads)
    w = optimizer.step(w, grads, lr)
    return w, phi, {"train_loss": loss.item(), "meta_loss": meta_loss}


def _baseline_step(net, w, batch, lr, optimizer):
    x, y, _ = batch
    w_leaf = w.detached(requires_grad=True)
    loss = _ce(net, w_leaf, x, y)
    grads = backward(loss, w_leaf)
    _finite_or_raise({"train_loss": loss.item()}, grads)
    return optimizer.step(w, grads, lr), {"train_loss": loss.item(), "meta_loss": float("nan")}


def _cast(params, dtype):
    return ParamSet({k: Tensor(v.data, dtype=dtype) for k, v in params.items()})


def _check_compat(net, modulator, num_classes):
    spec = modulator.spec
    if spec.kind == "network" and spec.input_dim != num_classes:
        raise DimensionMismatchError(
            f"modulator expects {spec.input_dim}-class soft labels, task has {num_classes} classes"
        )
    sites = net.sites
    for name, width in spec.sites:
        if name not in sites:
            raise DimensionMismatchError(f"modulator site {name!r} not in net sites {list(sites)}")
        if sites[name] != width:
            raise DimensionMismatchError(f"site {name!r}: modulator width {width}, net width {sites[name]}")


def train(bundle, net, modulator=None, cfg=None, *, params=None, phi=None, mode="mfm", out_dir=None):
    """Run ``cfg.epochs`` epochs of seeded mini-batch training.

    mode is "mfm" (meta-learn phi), "frozen" (phi fixed) or "baseline"
    (no modulation at all). Returns a TrainResult.
    """
    cfg = cfg or TrainConfig()
    if mode not in ("mfm", "frozen", "baseline"):
        raise ValueError(f"unknown mode {mode!r}")
    dtype = np.dtype(cfg.dtype)
    c = bundle.num_classes
    params = _cast(params if params is not None else net.init_params(cfg.seed, dtype), dtype)
    if mode != "baseline":
        if modulator is None:
            raise ValueError(f"mode {mode!r} needs a modulator")
        _check_compat(net, modulator, c)
        if cfg.active_sites and sorted(cfg.active_sites) != sorted(n for n, _ in modulator.spec.sites):
            raise DimensionMismatchError(
                f"active_sites {cfg.active_sites} differ from modulator sites {modulator.spec.sites}"
            )
        phi = _cast(phi if phi is not None else modulator.init_params(cfg.seed, dtype), dtype)
    train_set, meta_set = bundle.train, bundle.meta
    sampler = None
    if mode == "mfm":
        counts = meta_set.class_counts(c)
        if len(meta_set) == 0:
            raise ValueError("meta set is empty")
        if len(set(counts[counts > 0].tolist())) > 1 or (counts == 0).any():
            warnings.warn(f"meta set is not class-balanced: {counts.tolist()}")
        batch_m = cfg.batch_m or c * min(10, int(counts.max()))
        sampler = MetaSampler(meta_set.y, c, batch_m, cfg.seed)

    manifest = RunManifest(mode, asdict(cfg), dict(bundle.provenance), threads=thread_count())
    out = Path(out_dir) if out_dir is not None else None
    optimizer = SGDMomentum(cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([int(cfg.seed), 17])
    xs = train_set.x.astype(dtype, copy=False)
    xm_all = meta_set.x.astype(dtype, copy=False)
    t0 = time.perf_counter()
    step = 0

    def partial():
        manifest.wall_clock = time.perf_counter() - t0
        return TrainResult(net, params, modulator, phi, manifest)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(len(train_set))
        for lo in range(0, len(perm), cfg.batch_n):
            if cfg.max_iters and step >= cfg.max_iters:
                break
            idx = perm[lo:lo + cfg.batch_n]
            batch = (xs[idx], train_set.y[idx], train_set.ids[idx])
            try:
                if mode == "baseline":
                    params, log = _baseline_step(net, params, batch, lr, optimizer)
                else:
                    mb = None
                    if sampler is not None:
                        j = sampler.next()
                        mb = (xm_all[j], meta_set.y[j])
                    params, phi, log = train_step(net, modulator, params, phi, batch, mb, cfg, lr,
                                                  optimizer, update_phi=(mode == "mfm"))
            except NonFiniteLossError as exc:
                exc.partial = partial()
                raise
            step += 1
            manifest.append(step=step, epoch=epoch, lr=lr, **log)
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _write_outputs(out, partial(), tag=f"epoch{epoch + 1:04d}")
    result = partial()
    if out is not None:
        _write_outputs(out, result)
    return result


def _write_outputs(out, result, tag=None):
    try:
        out.mkdir(parents=True, exist_ok=True)
        suffix = f".{tag}" if tag else ""
        cls_path = out / f"classifier{suffix}.mfmc"
        save_classifier(cls_path, result.net, result.params)
        paths = [cls_path.name]
        if result.modulator is not None and result.phi is not None:
            mod_path = out / f"modulator{suffix}.mfmm"
            save_modulator(mod_path, result.modulator, result.phi)
            paths.append(mod_path.name)
        if tag:
            result.manifest.checkpoints.append({"tag": tag, "files": paths})
        with open(out / "metrics.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["step", "epoch", "train_loss", "meta_loss", "lr"])
            for r in result.manifest.log:
                wr.writerow([r["step"], r["epoch"], repr(r["train_loss"]), repr(r["meta_loss"]), repr(r["lr"])])
        (out / "manifest.json").write_text(json.dumps(result.manifest.to_json(), indent=2, default=str) + "\n")
    except OSError as exc:
        raise TrainingIOError(f"failed writing run outputs to {out}: {exc}", result) from exc


def train_baseline(bundle, net, cfg=None, *, params=None, out_dir=None):
    """Plain ERM with the same optimizer, schedule and batch order as ``train``."""
    return train(bundle, net, None, cfg, params=params, mode="baseline", out_dir=out_dir)


def train_with_frozen_modulator(bundle, net, modulator_checkpoint, cfg=None, *, params=None, out_dir=None):
    """Train a fresh classifier while a pre-trained modulator (never updated) modulates it.

    ``modulator_checkpoint`` is a checkpoint path or a ``(modulator, phi)`` pair.
    """
    if isinstance(modulator_checkpoint, (str, Path)):
        modulator, phi = load_modulator(modulator_checkpoint)
    else:
        modulator, phi = modulator_checkpoint
    return train(bundle, net, modulator, cfg, params=params, phi=phi, mode="frozen", out_dir=out_dir)
