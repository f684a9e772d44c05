"""Per-sample modulation parameters: a modulator MLP on soft labels, or a table.

The network variant maps a soft label through ``linear -> relu -> linear``
to one raw vector per sample. The vector is halved into a gamma block and a
beta block (each laid out site by site, in site order), optionally passed
through a fixed weight-hashing expansion, and then squashed per variant:

    paper_default      gamma = C * softmax(raw),  beta = raw
    film               gamma = 1 + raw,           beta = raw
    channel_attention  gamma = sigmoid(raw),      beta = 0
    gated              gamma = softmax(raw),      beta = 0

The output layer starts at zero, so paper_default and film begin as the
identity modulation (gamma = 1, beta = 0).
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import gradcore as gc
from .ckpt import CheckpointError, read_checkpoint, write_checkpoint
from .gradcore import ParamSet, ShapeError, Tensor
from .nets import ModulationParams

__all__ = [
    "HashSide", "WeightHashSpec", "ModulatorSpec", "NetworkModulator", "TabularModulator",
    "weight_hash_expand", "weight_hash_backward", "weight_hash_matrix", "hash_expand",
    "modulate_from_softlabel", "tabular_lookup", "build_modulator",
    "save_modulator", "load_modulator", "SoftLabelError",
]

MODULATOR_MAGIC = b"MFMM"
VARIANTS = ("paper_default", "film", "channel_attention", "gated")
CONSTRAINTS = ("full", "beta_zero", "gamma_one")


class SoftLabelError(ValueError):
    pass


# -- weight hashing ------------------------------------------------------

@dataclass(frozen=True)
class HashSide:
    """One hashing map from R^m to R^d: theta[i] = x[kappa[i]] * zeta[i]."""

    m: int
    kappa: tuple
    zeta: tuple

    @property
    def d(self):
        return len(self.kappa)


def weight_hash_expand(x, side):
    x = np.asarray(x)
    if x.shape[-1] != side.m:
        raise ShapeError("weight_hash_expand", x.shape, (side.m,))
    return x[..., np.asarray(side.kappa)] * np.asarray(side.zeta, dtype=x.dtype)


def weight_hash_backward(dtheta, side):
    """Transpose of the hashing map: dx[j] = sum over kappa[i] == j of zeta[i] * dtheta[i]."""
    dtheta = np.asarray(dtheta)
    if dtheta.shape[-1] != side.d:
        raise ShapeError("weight_hash_backward", dtheta.shape, (side.d,))
    signed = dtheta * np.asarray(side.zeta, dtype=dtheta.dtype)
    out = np.zeros(dtheta.shape[:-1] + (side.m,), dtype=dtheta.dtype)
    np.add.at(out, (..., np.asarray(side.kappa)), signed)
    return out


def weight_hash_matrix(side):
    """The fixed dense [d, m] matrix the hashing map is equivalent to."""
    W = np.zeros((side.d, side.m))
    W[np.arange(side.d), np.asarray(side.kappa)] = np.asarray(side.zeta)
    return W


def hash_expand(x, side):
    """Differentiable expansion (backward is the transpose map, and vice versa)."""
    def bw(g):
        return (_hash_reduce(g, side),)

    return Tensor._node(weight_hash_expand(x.data, side), (x,), bw, "hash_expand")


def _hash_reduce(g, side):
    return Tensor._node(weight_hash_backward(g.data, side), (g,), lambda h: (hash_expand(h, side),), "hash_reduce")


@dataclass(frozen=True)
class WeightHashSpec:
    gamma: HashSide
    beta: HashSide
    seed: int = 0

    @classmethod
    def create(cls, d, m_gamma=256, m_beta=256, seed=0):
        """kappa uniform over [0, m), zeta uniform over {+1, -1}, from a dedicated generator."""
        rng = np.random.default_rng([int(seed), 11])

        def side(m):
            kappa = rng.integers(0, m, size=d)
            zeta = rng.choice(np.array([-1, 1]), size=d)
            return HashSide(int(m), tuple(int(k) for k in kappa), tuple(int(z) for z in zeta))

        return cls(side(m_gamma), side(m_beta), int(seed))

    def to_json(self):
        return {
            "seed": self.seed,
            "gamma": {"m": self.gamma.m, "kappa": list(self.gamma.kappa), "zeta": list(self.gamma.zeta)},
            "beta": {"m": self.beta.m, "kappa": list(self.beta.kappa), "zeta": list(self.beta.zeta)},
        }

    @classmethod
    def from_json(cls, d):
        def side(s):
            return HashSide(int(s["m"]), tuple(s["kappa"]), tuple(s["zeta"]))

        return cls(side(d["gamma"]), side(d["beta"]), int(d.get("seed", 0)))


# -- specs ---------------------------------------------------------------

@dataclass(frozen=True)
class ModulatorSpec:
    input_dim: int
    sites: tuple
    kind: str = "network"
    hidden_dim: int = 100
    variant: str = "paper_default"
    constraint: str = "full"
    wh: WeightHashSpec = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple((str(n), int(c)) for n, c in self.sites))
        if self.kind not in ("network", "tabular"):
            raise ValueError(f"unknown modulator kind {self.kind!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"unknown constraint {self.constraint!r}; choose from {CONSTRAINTS}")
        if not self.sites:
            raise ValueError("modulator needs at least one site")
        if self.wh is not None and (self.wh.gamma.d != self.total_channels or self.wh.beta.d != self.total_channels):
            raise ValueError("weight-hash expanded dims must equal the summed site widths")

    @property
    def total_channels(self):
        return sum(c for _, c in self.sites)

    @property
    def raw_dim(self):
        if self.wh is not None:
            return self.wh.gamma.m + self.wh.beta.m
        return 2 * self.total_channels

    def to_json(self):
        d = asdict(self)
        d["sites"] = [list(s) for s in self.sites]
        d["wh"] = self.wh.to_json() if self.wh is not None else None
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["sites"] = tuple(tuple(s) for s in d["sites"])
        d["wh"] = WeightHashSpec.from_json(d["wh"]) if d.get("wh") else None
        return cls(**d)


def _squash(spec, gamma_raw, beta_raw):
    """Apply the variant's activation per site and the ablation clamp."""
    out = {}
    off = 0
    n = gamma_raw.shape[0]
    for name, c in spec.sites:
        g = gamma_raw[:, off:off + c]
        b = beta_raw[:, off:off + c]
        off += c
        if spec.variant == "paper_default":
            g = gc.softmax(g, axis=1) * float(c)
        elif spec.variant == "film":
            g = g + 1.0  # offset rather than a bias init so identity survives weight hashing
        elif spec.variant == "channel_attention":
            g = gc.sigmoid(g)
            b = Tensor(np.zeros((n, c), dtype=g.dtype))
        elif spec.variant == "gated":
            g = gc.softmax(g, axis=1)
            b = Tensor(np.zeros((n, c), dtype=g.dtype))
        if spec.constraint == "beta_zero":
            b = Tensor(np.zeros((n, c), dtype=g.dtype))
        elif spec.constraint == "gamma_one":
            g = Tensor(np.ones((n, c), dtype=g.dtype))
        out[name] = ModulationParams(g, b)
    return out


def _check_soft_labels(soft, input_dim):
    soft = np.asarray(soft.data if isinstance(soft, Tensor) else soft)
    if soft.ndim != 2 or soft.shape[1] != input_dim:
        raise SoftLabelError(f"soft labels must be [batch, {input_dim}], got {soft.shape}")
    if (soft < 0).any() or not np.allclose(soft.sum(axis=1), 1.0, rtol=0, atol=1e-5):
        raise SoftLabelError("soft labels must be non-negative and sum to 1")
    return soft


class NetworkModulator:
    """Soft label -> (gamma, beta) per site through a one-hidden-layer MLP."""

    def __init__(self, spec):
        if spec.kind != "network":
            raise ValueError("NetworkModulator needs kind='network'")
        self.spec = spec
        self.calls = 0

    def init_params(self, seed=None, dtype=np.float64):
        s = self.spec
        rng = np.random.default_rng([int(s.seed if seed is None else seed), 13])
        bound = np.sqrt(6.0 / s.input_dim)
        return ParamSet({
            "fc1.weight": Tensor(rng.uniform(-bound, bound, (s.input_dim, s.hidden_dim)), dtype=dtype),
            "fc1.bias": Tensor(np.zeros(s.hidden_dim), dtype=dtype),
            "fc2.weight": Tensor(np.zeros((s.hidden_dim, s.raw_dim)), dtype=dtype),
            "fc2.bias": Tensor(np.zeros(s.raw_dim), dtype=dtype),
        })

    def raw(self, params, soft):
        h = gc.relu(soft @ params["fc1.weight"] + params["fc1.bias"])
        return h @ params["fc2.weight"] + params["fc2.bias"]

    def emit(self, params, soft_labels, sample_ids=None):
        self.calls += 1
        s = self.spec
        soft = _check_soft_labels(soft_labels, s.input_dim)
        dtype = params["fc1.weight"].dtype
        raw = self.raw(params, Tensor(soft, dtype=dtype))
        if s.wh is not None:
            mg = s.wh.gamma.m
            gamma_raw = hash_expand(raw[:, :mg], s.wh.gamma)
            beta_raw = hash_expand(raw[:, mg:], s.wh.beta)
        else:
            d = s.total_channels
            gamma_raw, beta_raw = raw[:, :d], raw[:, d:]
        return _squash(s, gamma_raw, beta_raw)


class TabularModulator:
    """One learnable (gamma, beta) row per training sample, keyed by sample id."""

    def __init__(self, spec, sample_ids):
        if spec.kind != "tabular":
            raise ValueError("TabularModulator needs kind='tabular'")
        self.spec = spec
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        if len(np.unique(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample ids must be unique")
        self._order = np.argsort(self.sample_ids, kind="stable")
        self._sorted = self.sample_ids[self._order]
        self.calls = 0

    def init_params(self, seed=None, dtype=np.float64):
        n, d = len(self.sample_ids), self.spec.total_channels
        return ParamSet({"gamma": Tensor(np.zeros((n, d)), dtype=dtype), "beta": Tensor(np.zeros((n, d)), dtype=dtype)})

    def rows(self, sample_ids):
        ids = np.asarray(sample_ids, dtype=np.int64)
        pos = np.searchsorted(self._sorted, ids)
        bad = (pos >= len(self._sorted)) | (self._sorted[np.minimum(pos, len(self._sorted) - 1)] != ids)
        if bad.any():
            raise KeyError(f"unknown sample ids {ids[bad][:5].tolist()}")
        return self._order[pos]

    def emit(self, params, soft_labels=None, sample_ids=None):
        self.calls += 1
        if sample_ids is None:
            raise ValueError("tabular modulator needs sample ids")
        rows = self.rows(sample_ids)
        return _squash(self.spec, params["gamma"][rows], params["beta"][rows])


def build_modulator(spec, sample_ids=None):
    if spec.kind == "tabular":
        return TabularModulator(spec, sample_ids)
    return NetworkModulator(spec)


def modulate_from_softlabel(modulator, params, soft_labels):
    return modulator.emit(params, soft_labels)


def tabular_lookup(table, params, sample_ids):
    return table.emit(params, None, sample_ids)


def save_modulator(path, modulator, params):
    header = {"spec": modulator.spec.to_json(), "layout": "gamma-block-then-beta-block, site order"}
    if isinstance(modulator, TabularModulator):
        header["sample_ids"] = modulator.sample_ids.tolist()
    write_checkpoint(path, MODULATOR_MAGIC, header, params)


def load_modulator(path, dtype=np.float64):
    header, params = read_checkpoint(path, MODULATOR_MAGIC, dtype)
    spec = ModulatorSpec.from_json(header["spec"])
    mod = build_modulator(spec, header.get("sample_ids"))
    expect = {k: v.shape for k, v in mod.init_params().items()}
    if {k: v.shape for k, v in params.items()} != expect:
        raise CheckpointError(f"{path}: modulator parameter shapes do not match its spec")
    return mod, params
