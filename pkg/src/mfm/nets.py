"""Classifier networks with named modulation sites.

A network is an immutable layer list plus a separate ParamSet, so the same
spec can be run with the real weights ``w`` or with virtually stepped
weights ``w - lr * g`` during the meta update.

A ``site`` layer marks where a feature map may be modulated. Sites sit after
a layer's nonlinearity; for conv features gamma/beta are per channel and
broadcast over spatial positions. The final classifier layer is never a
site.
"""
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .ckpt import CheckpointError, read_checkpoint, write_checkpoint
from .gradcore import ParamSet, ShapeError, Tensor

__all__ = [
    "ClassifierNet", "ModulationParams", "build_lenet", "build_mlp",
    "forward_plain", "forward_modulated", "modulate", "save_classifier", "load_classifier",
]

CLASSIFIER_MAGIC = b"MFMC"


@dataclass
class ModulationParams:
    """Per-sample scale and shift for one site, each shaped [batch, C_site]."""

    gamma: Tensor
    beta: Tensor


def modulate(h, mp):
    """``gamma * h + beta`` channel-wise (conv) or neuron-wise (dense)."""
    g, b = mp.gamma, mp.beta
    if g.shape != b.shape or g.ndim != 2 or g.shape[0] != h.shape[0] or g.shape[1] != h.shape[1]:
        raise ShapeError("modulate", h.shape, g.shape, b.shape)
    if h.ndim == 4:
        n, c = g.shape
        g = g.reshape(n, c, 1, 1)
        b = b.reshape(n, c, 1, 1)
    elif h.ndim != 2:
        raise ShapeError("modulate", h.shape, detail="expected [N, C] or [N, C, H, W] features")
    return h * g + b


@dataclass(frozen=True)
class ClassifierNet:
    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = "net"

    @property
    def sites(self):
        """Ordered {site name: channel count}."""
        return {L["name"]: L["channels"] for L in self.layers if L["kind"] == "site"}

    def param_shapes(self):
        shapes = {}
        for L in self.layers:
            if L["kind"] == "conv":
                shapes[L["name"] + ".weight"] = (L["out"], L["in"], L["k"], L["k"])
                shapes[L["name"] + ".bias"] = (L["out"],)
            elif L["kind"] == "linear":
                shapes[L["name"] + ".weight"] = (L["in"], L["out"])
                shapes[L["name"] + ".bias"] = (L["out"],)
        return shapes

    def num_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def init_params(self, seed=0, dtype=np.float64):
        """He-uniform weights drawn in sorted name order, zero biases."""
        rng = np.random.default_rng([int(seed), 7])
        params = ParamSet()
        for name, shape in sorted(self.param_shapes().items()):
            if name.endswith(".bias"):
                arr = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                bound = np.sqrt(6.0 / fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(arr, dtype=dtype)
        return params

    def to_json(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [dict(L) for L in self.layers],
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            tuple(dict(L) for L in d["layers"]), tuple(d["input_shape"]), d["num_classes"], d.get("name", "net")
        )

    def forward(self, params, x, mods=None):
        """Logits [batch, c]; ``mods`` maps site name -> ModulationParams.

        Sites absent from ``mods`` (or all of them when ``mods`` is None)
        are skipped entirely.
        """
        if not isinstance(x, Tensor):
            dtype = next(iter(params.values())).dtype if params else np.float64
            x = Tensor(np.asarray(x), dtype=dtype)
        expect = tuple(self.input_shape)
        if x.ndim == len(expect) and len(expect) == 3 and expect[0] == 1:
            x = x.reshape((x.shape[0],) + expect)
        if tuple(x.shape[1:]) != expect:
            raise ShapeError("forward", x.shape, expect, detail=f"{self.name} input")
        if mods:
            unknown = set(mods) - set(self.sites)
            if unknown:
                raise ValueError(f"unknown modulation sites {sorted(unknown)}; net has {list(self.sites)}")
        h = x
        for L in self.layers:
            kind = L["kind"]
            if kind == "conv":
                h = gc.conv2d(h, params[L["name"] + ".weight"], params[L["name"] + ".bias"],
                              stride=L.get("stride", 1), pad=L.get("pad", 0))
            elif kind == "linear":
                h = h @ params[L["name"] + ".weight"] + params[L["name"] + ".bias"]
            elif kind == "relu":
                h = gc.relu(h)
            elif kind == "maxpool":
                h = gc.max_pool2d(h, L["k"])
            elif kind == "avgpool":
                h = gc.avg_pool2d(h, L["k"])
            elif kind == "gap":
                h = gc.global_avg_pool(h)
            elif kind == "flatten":
                h = h.reshape(h.shape[0], -1)
            elif kind == "site":
                if h.shape[1] != L["channels"]:
                    raise ShapeError("site", h.shape, detail=f"site {L['name']} declares {L['channels']} channels")
                if mods and L["name"] in mods:
                    h = modulate(h, mods[L["name"]])
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return h


def forward_plain(net, params, x):
    return net.forward(params, x, None)


def forward_modulated(net, params, x, mods):
    return net.forward(params, x, mods)


def build_mlp(input_dim, hidden, num_classes):
    """Dense ReLU net; hidden layer i gets site ``h{i}``."""
    if not hidden:
        raise ValueError("hidden must be non-empty")
    layers, prev = [], input_dim
    for i, width in enumerate(hidden, 1):
        layers += [
            {"kind": "linear", "name": f"fc{i}", "in": prev, "out": width},
            {"kind": "relu"},
            {"kind": "site", "name": f"h{i}", "channels": width},
        ]
        prev = width
    layers.append({"kind": "linear", "name": "out", "in": prev, "out": num_classes})
    return ClassifierNet(tuple(layers), (input_dim,), num_classes, name="mlp")


def build_lenet(num_classes=10, in_channels=1, image_size=28, widths=(6, 16, 120, 84)):
    """LeNet variant whose last conv is 3x3 followed by global average pooling.

    Sites: conv1, conv2, conv3 (each after its ReLU, before pooling) and fc1.
    """
    c1, c2, c3, f1 = widths
    layers = (
        {"kind": "conv", "name": "conv1", "in": in_channels, "out": c1, "k": 5, "pad": 2},
        {"kind": "relu"},
        {"kind": "site", "name": "conv1", "channels": c1},
        {"kind": "maxpool", "k": 2},
        {"kind": "conv", "name": "conv2", "in": c1, "out": c2, "k": 5, "pad": 0},
        {"kind": "relu"},
        {"kind": "site", "name": "conv2", "channels": c2},
        {"kind": "maxpool", "k": 2},
        {"kind": "conv", "name": "conv3", "in": c2, "out": c3, "k": 3, "pad": 0},
        {"kind": "relu"},
        {"kind": "site", "name": "conv3", "channels": c3},
        {"kind": "gap"},
        {"kind": "linear", "name": "fc1", "in": c3, "out": f1},
        {"kind": "relu"},
        {"kind": "site", "name": "fc1", "channels": f1},
        {"kind": "linear", "name": "fc2", "in": f1, "out": num_classes},
    )
    if image_size % 4:
        raise ValueError("image_size must be divisible by 4")
    if (image_size // 2 - 4) % 2 or image_size // 4 - 2 < 3:
        raise ValueError(f"image_size {image_size} leaves no room for the 3x3 conv")
    return ClassifierNet(layers, (in_channels, image_size, image_size), num_classes, name="lenet")


def save_classifier(path, net, params):
    write_checkpoint(path, CLASSIFIER_MAGIC, {"arch": net.to_json()}, params)


def load_classifier(path, dtype=np.float64):
    header, params = read_checkpoint(path, CLASSIFIER_MAGIC, dtype)
    net = ClassifierNet.from_json(header["arch"])
    expect = net.param_shapes()
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != {k: tuple(v) for k, v in expect.items()}:
        raise CheckpointError(f"{path}: parameter shapes do not match the architecture")
    return net, params
