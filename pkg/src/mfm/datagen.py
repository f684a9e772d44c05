"""Long-tailed splits, meta/development sets, test profiles and dataset I/O.

Every sample carries an integer identity (its index in the source pool).
Identities survive every transformation so disjointness and sharing between
train and meta splits can be checked exactly.
"""
import gzip
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "LongTailSpec", "LabeledDataset", "DatasetBundle", "TestProfile",
    "class_count_profile", "build_longtail", "extract_meta", "test_profile_counts",
    "build_test_set", "make_synthetic_gaussians", "load_idx", "load_fashion_mnist", "fashion_mnist_paths",
    "save_bundle", "load_bundle", "write_split", "read_split",
    "IdxFormatError", "BadMagicError", "TruncatedFileError", "CountMismatchError",
    "InsufficientSamplesError",
]


class InsufficientSamplesError(ValueError):
    pass


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    n_max: int
    imbalance_factor: float
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if not self.imbalance_factor >= 1:
            raise ValueError(f"imbalance_factor must be >= 1, got {self.imbalance_factor}")


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.x) == len(self.y) == len(self.ids)):
            raise ValueError("x, y and ids must have equal length")

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], self.ids[idx])

    def class_counts(self, num_classes):
        return np.bincount(self.y, minlength=num_classes).astype(np.int64)


@dataclass
class DatasetBundle:
    train: LabeledDataset
    meta: LabeledDataset
    test: LabeledDataset
    num_classes: int
    provenance: dict = field(default_factory=dict)

    @property
    def class_counts(self):
        return {
            split: getattr(self, split).class_counts(self.num_classes).tolist()
            for split in ("train", "meta", "test")
        }


@dataclass(frozen=True)
class TestProfile:
    kind: str = "uniform"
    imbalance_factor: float = 10.0
    n_max: int = 100
    truncate: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "test1", "test2"):
            raise ValueError(f"unknown test profile kind {self.kind!r}")


def class_count_profile(spec):
    """Exponentially decaying per-class counts ``n_max * IF**(-k/(c-1))``, rounded down.

    A 1e-9 guard keeps exact integers such as 1000 * 10**-1 from flooring to 99.
    """
    c = spec.num_classes
    counts = [
        int(math.floor(spec.n_max * spec.imbalance_factor ** (-k / (c - 1)) + 1e-9))
        for k in range(c)
    ]
    if min(counts) < 1:
        raise ValueError(
            f"profile has an empty class: n_max={spec.n_max}, IF={spec.imbalance_factor} gives {counts}"
        )
    return counts


def _rng(seed, *stream):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *stream])


def _take_per_class(source, counts, rng, what):
    """First ``counts[k]`` of a seeded shuffle of each class, then a seeded shuffle of the union."""
    picked = []
    for k, n in enumerate(counts):
        idx = np.flatnonzero(source.y == k)
        if len(idx) < n:
            raise InsufficientSamplesError(
                f"{what}: class {k} has {len(idx)} samples, {n} required"
            )
        picked.append(idx[rng.permutation(len(idx))[:n]])
    order = np.concatenate(picked) if picked else np.empty(0, np.int64)
    return source.subset(order[rng.permutation(len(order))])


def build_longtail(source, spec):
    return _take_per_class(source, class_count_profile(spec), _rng(spec.seed, 1), "build_longtail")


def extract_meta(train, strategy, per_class, num_classes=None, seed=0):
    """Split a balanced meta set off ``train`` or duplicate a development set from it.

    strategy="meta" removes ``per_class`` samples of every class from the
    training set. strategy="development" copies ``min(per_class, n_k)``
    samples per class and leaves the training set as it was.
    Returns ``(train', meta)``.
    """
    if per_class < 1:
        raise ValueError("per_class must be positive")
    c = num_classes if num_classes is not None else int(train.y.max()) + 1
    rng = _rng(seed, 2)
    counts = train.class_counts(c)
    meta_idx = []
    for k in range(c):
        idx = np.flatnonzero(train.y == k)
        idx = idx[rng.permutation(len(idx))]
        if strategy == "meta":
            if counts[k] <= per_class:
                raise InsufficientSamplesError(
                    f"extract_meta: class {k} has {counts[k]} samples, needs more than {per_class}"
                )
            meta_idx.append(idx[:per_class])
        elif strategy == "development":
            meta_idx.append(idx[: min(per_class, counts[k])])
        else:
            raise ValueError(f"unknown meta strategy {strategy!r}")
    meta_idx = np.concatenate(meta_idx)
    meta = train.subset(np.sort(meta_idx))
    if strategy == "meta":
        keep = np.setdiff1d(np.arange(len(train)), meta_idx)
        train = train.subset(keep)
    return train, meta


def test_profile_counts(profile, num_classes):
    """Per-class counts for a test profile.

    test1 reverses an exponential profile and sets its ``truncate`` largest
    entries to the profile maximum; test2 applies a seeded permutation.
    """
    if profile.kind == "uniform":
        return [profile.n_max] * num_classes
    base = class_count_profile(LongTailSpec(num_classes, profile.n_max, profile.imbalance_factor))
    if profile.kind == "test1":
        rev = base[::-1]
        t = min(profile.truncate, num_classes)
        return rev[: num_classes - t] + [max(rev)] * t
    perm = _rng(profile.seed, 3).permutation(num_classes)
    return [base[p] for p in perm]


def build_test_set(source, profile, num_classes=None):
    c = num_classes if num_classes is not None else int(source.y.max()) + 1
    counts = test_profile_counts(profile, c)
    return _take_per_class(source, counts, _rng(profile.seed, 4), f"build_test_set[{profile.kind}]")


def _class_centers(c, dim, radius, rng):
    if dim == 2:
        ang = 2 * np.pi * np.arange(c) / c
        return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if c <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, c)))
        return radius * q.T
    u = rng.standard_normal((c, dim))
    return radius * u / np.linalg.norm(u, axis=1, keepdims=True)


def make_synthetic_gaussians(
    c, dim, spec, separation, *, test_per_class=500, strategy="development",
    meta_per_class=20, rotation=0.0, dtype=np.float64,
):
    """Long-tailed isotropic Gaussian classes with a balanced test split.

    Centers sit at ``separation / 2`` from the origin, so for two classes
    ``separation`` is the distance between the centers. ``rotation`` (radians,
    2-D only) turns the whole configuration to make a related but distinct
    task.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if spec.num_classes != c:
        raise ValueError("spec.num_classes must equal c")
    rng = _rng(spec.seed, 5)
    centers = _class_centers(c, dim, separation / 2.0, rng)
    if rotation and dim == 2:
        r = np.array([[math.cos(rotation), -math.sin(rotation)], [math.sin(rotation), math.cos(rotation)]])
        centers = centers @ r.T
    counts = class_count_profile(spec)
    extra = meta_per_class if strategy == "meta" else 0
    xs, ys = [], []
    for k in range(c):
        n = counts[k] + extra + test_per_class
        xs.append(centers[k] + rng.standard_normal((n, dim)))
        ys.append(np.full(n, k))
    pool_x = np.concatenate(xs).astype(dtype)
    pool_y = np.concatenate(ys)
    pool = LabeledDataset(pool_x, pool_y, np.arange(len(pool_y)))

    test_idx, rest_idx = [], []
    for k in range(c):
        idx = np.flatnonzero(pool_y == k)
        test_idx.append(idx[:test_per_class])
        rest_idx.append(idx[test_per_class:])
    test = pool.subset(np.concatenate(test_idx))
    train = pool.subset(np.concatenate(rest_idx))
    # under strategy="meta" each class is drawn `extra` larger so the profile survives the split
    train = _take_per_class(train, [n + extra for n in counts], _rng(spec.seed, 6), "synthetic")
    train, meta = extract_meta(train, strategy, meta_per_class, c, seed=spec.seed)
    prov = {
        "source": "synthetic_gaussians",
        "spec": asdict(spec),
        "profile": counts,
        "profile_total": int(sum(counts)),
        "profile_min": int(min(counts)),
        "dim": dim,
        "separation": separation,
        "rotation": rotation,
        "centers": centers.tolist(),
        "meta_strategy": strategy,
        "meta_per_class": meta_per_class,
        "test_per_class": test_per_class,
    }
    return DatasetBundle(train, meta, test, c, prov)


# -- IDX reader ----------------------------------------------------------

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndim, path):
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header needs {header}")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise TruncatedFileError(f"{path}: payload {len(raw) - header} bytes, header declares {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path, dtype=np.float32):
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels come back scaled to [0, 1] with shape [N, rows, cols]; sample
    identities are the file positions.
    """
    images = _parse_idx(_read_bytes(images_path), _IDX_IMAGES, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), _IDX_LABELS, 1, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(dtype) / dtype(255.0)
    return LabeledDataset(x, labels.astype(np.int64), np.arange(len(labels)))


FASHION_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60000),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10000),
}


def _find(directory, name):
    for ext in ("", ".gz"):
        path = Path(directory) / (name + ext)
        if path.exists():
            return path
    raise FileNotFoundError(f"{Path(directory) / name}[.gz] not found")


def fashion_mnist_paths(directory):
    """The four IDX paths under ``directory`` (plain or gzipped), keyed by split."""
    return {split: (_find(directory, img), _find(directory, lab))
            for split, (img, lab, _) in FASHION_MNIST_FILES.items()}


def load_fashion_mnist(directory, dtype=np.float32):
    """Load both Fashion-MNIST splits and check them against the published sizes.

    Returns (train, test). Raises CountMismatchError if a split does not have
    the expected sample count, 28x28 images, or labels in 0..9.
    """
    out = []
    for split, (img, lab) in fashion_mnist_paths(directory).items():
        ds = load_idx(img, lab, dtype=dtype)
        expected = FASHION_MNIST_FILES[split][2]
        if len(ds) != expected or ds.x.shape[1:] != (28, 28):
            raise CountMismatchError(f"Fashion-MNIST {split}: got {ds.x.shape}, expected ({expected}, 28, 28)")
        if ds.y.min() < 0 or ds.y.max() > 9:
            raise CountMismatchError(f"Fashion-MNIST {split}: labels outside 0..9")
        out.append(ds)
    return tuple(out)


# -- bundle persistence --------------------------------------------------

SPLIT_MAGIC = b"MFMD"
SPLIT_VERSION = 1
_DTYPE_F32 = 1


def write_split(path, ds):
    """Binary split file: magic, version, dtype tag, shape, float32 data, u32 labels, u32 ids (LE)."""
    x = np.ascontiguousarray(ds.x, dtype="<f4")
    with open(path, "wb") as f:
        f.write(SPLIT_MAGIC)
        f.write(struct.pack("<III", SPLIT_VERSION, _DTYPE_F32, x.ndim))
        f.write(struct.pack("<" + "I" * x.ndim, *x.shape))
        f.write(x.tobytes())
        f.write(np.asarray(ds.y, dtype="<u4").tobytes())
        f.write(np.asarray(ds.ids, dtype="<u4").tobytes())


def read_split(path):
    raw = Path(path).read_bytes()
    if raw[:4] != SPLIT_MAGIC:
        raise ValueError(f"{path}: not an MFMD split file")
    version, tag, ndim = struct.unpack_from("<III", raw, 4)
    if version != SPLIT_VERSION or tag != _DTYPE_F32:
        raise ValueError(f"{path}: unsupported version {version} / dtype tag {tag}")
    off = 16
    shape = struct.unpack_from("<" + "I" * ndim, raw, off)
    off += 4 * ndim
    n = int(np.prod(shape))
    x = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
    off += 4 * n
    y = np.frombuffer(raw, dtype="<u4", count=shape[0], offset=off)
    off += 4 * shape[0]
    ids = np.frombuffer(raw, dtype="<u4", count=shape[0], offset=off)
    return LabeledDataset(x.astype(np.float64), y.astype(np.int64), ids.astype(np.int64))


def save_bundle(bundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "meta", "test"):
        write_split(out / f"{split}.mfmd", getattr(bundle, split))
    manifest = {
        "format": "mfm-bundle",
        "version": 1,
        "num_classes": bundle.num_classes,
        "class_counts": bundle.class_counts,
        "provenance": bundle.provenance,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


def load_bundle(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    splits = {s: read_split(path / f"{s}.mfmd") for s in ("train", "meta", "test")}
    bundle = DatasetBundle(num_classes=manifest["num_classes"], provenance=manifest["provenance"], **splits)
    if bundle.class_counts != manifest["class_counts"]:
        raise ValueError(f"{path}: class counts disagree with manifest")
    return bundle
