"""Dataset readers, image grids, experiment configuration and CSV output.

MNIST is read from IDX files (gzip accepted), CIFAR-10 from its binary
batches. Pixels become float64 in [0, 1] as ``v / 255``.
"""
from __future__ import annotations

import csv
import dataclasses
import gzip
import hashlib
import json
import math
import typing
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig
from .defenses import DefenseConfig

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise DataFormatError(f"label {self.labels.max()} >= class count {self.num_classes}")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        prov = dict(self.provenance, indices=idx.tolist())
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, prov)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header, expected at least 4 bytes, got {len(raw)}")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataFormatError(f"{path}: truncated or oversized file, expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    data = header + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(path, labels_path=None, split: str = "train") -> Dataset:
    """MNIST from an images IDX file plus labels file, or from a directory holding both."""
    path = Path(path)
    if path.is_dir():
        prefix = "train" if split == "train" else "t10k"
        images_path = _find(path, f"{prefix}-images-idx3-ubyte")
        labels_path = _find(path, f"{prefix}-labels-idx1-ubyte")
    else:
        images_path = path
        if labels_path is None:
            raise ValueError("labels_path is required when path is an images file")
    imgs = read_idx(images_path, IDX_IMAGES)
    labs = read_idx(labels_path, IDX_LABELS)
    if len(imgs) != len(labs):
        raise DataFormatError(f"count mismatch: {len(imgs)} images vs {len(labs)} labels")
    return Dataset(imgs[:, None].astype(np.float64) / 255.0, labs.astype(np.int64), 10,
                   {"images": str(images_path), "labels": str(labels_path),
                    "sha256": sha256_file(images_path), "labels_sha256": sha256_file(labels_path)})


def load_cifar10(paths) -> Dataset:
    """CIFAR-10 binary batch file(s): records of 1 label byte + 3072 pixel bytes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels, sums = [], [], []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(
                f"{p}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
        sums.append(sha256_file(p))
    return Dataset(np.concatenate(images), np.concatenate(labels), 10,
                   {"files": [str(p) for p in paths], "sha256": sums})


def bundled_mnist(cache_dir, test_size: int = 1000, seed: int = 0) -> Path:
    """Write IDX files for the 5,000-image MNIST sample shipped with mlxtend.

    The sample is shuffled once with ``seed`` and split into train/t10k
    files under ``cache_dir``; the directory is returned for :func:`load_mnist`.
    """
    cache_dir = Path(cache_dir)
    done = cache_dir / "train-images-idx3-ubyte"
    if not done.exists():
        try:
            from mlxtend.data import mnist_data
        except ImportError as exc:  # pragma: no cover - depends on the environment
            raise RuntimeError("bundled MNIST needs the optional 'mlxtend' package") from exc
        X, y = mnist_data()
        order = np.random.default_rng(seed).permutation(len(X))
        X = X[order].reshape(-1, 28, 28).astype(np.uint8)
        y = y[order].astype(np.uint8)
        cache_dir.mkdir(parents=True, exist_ok=True)
        write_idx(cache_dir / "t10k-images-idx3-ubyte", X[:test_size])
        write_idx(cache_dir / "t10k-labels-idx1-ubyte", y[:test_size])
        write_idx(cache_dir / "train-labels-idx1-ubyte", y[test_size:])
        write_idx(done, X[test_size:])
    return cache_dir


def downscale(images: np.ndarray, size: int) -> np.ndarray:
    """Average-pool to ``size``x``size``, zero-padding evenly to a multiple of ``size`` first."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    if h == size and w == size:
        return images.copy()
    target = size * math.ceil(max(h, w) / size)
    ph, pw = target - h, target - w
    padded = np.pad(images, ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    k = target // size
    return padded.reshape(n, c, size, k, size, k).mean(axis=(3, 5))


# ---------------------------------------------------------------- images

def _quantise(batch: np.ndarray) -> np.ndarray:
    if batch.min() < 0.0 or batch.max() > 1.0:
        warnings.warn("pixels outside [0, 1] were clamped", stacklevel=3)
    return np.round(np.clip(batch, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image_grid(batch, path, separator: int = 2) -> Path:
    """Tile (n, c, h, w) images row-major into one binary PGM (c=1) or PPM (c=3)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    n, c, h, w = batch.shape
    if c not in (1, 3):
        raise ValueError(f"images must have 1 or 3 channels, got {c}")
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    H = rows * h + (rows - 1) * separator
    W = cols * w + (cols - 1) * separator
    grid = np.full((H, W, c), 255, dtype=np.uint8)
    q = _quantise(batch)
    for i in range(n):
        r, cc = divmod(i, cols)
        y0, x0 = r * (h + separator), cc * (w + separator)
        grid[y0:y0 + h, x0:x0 + w] = q[i].transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    path = Path(path)
    try:
        path.write_bytes(magic + f"\n{W} {H}\n255\n".encode() + grid.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image grid to {path}: {exc}") from exc
    return path


def read_pnm(path) -> np.ndarray:
    """Binary PGM/PPM as (channels, H, W) uint8."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, W, H, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataFormatError(f"{path}: unsupported PNM header")
    c = 1 if magic == b"P5" else 3
    data = raw[len(raw) - W * H * c:]
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W, c).transpose(2, 0, 1)


# ---------------------------------------------------------------- config

CONFIG_VERSION = 1


@dataclass
class ModelConfig:
    arch: str = "mlp2"
    hidden: int = 64
    seed: int = 0
    init: str = "uniform"
    checkpoint: str | None = None


@dataclass
class ThreatModel:
    bn_sharing: bool = False
    grant_signs: bool = True


@dataclass
class DataConfig:
    name: str = "mnist-bundled"
    path: str | None = None
    split: str = "train"
    n_private: int = 16
    indices: list[int] | None = None
    resolution: int | None = 8
    subset_seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 0
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    lr_step_epochs: int = 50
    lr_gamma: float = 0.1
    test_size: int | None = None


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    threat: ThreatModel = field(default_factory=ThreatModel)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    batch_size: int = 1
    seed: int = 0
    output_dir: str = "runs/default"
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.attack.bn_mode == "exact" and not self.threat.bn_sharing:
            raise ConfigError("bn_mode 'exact' requires threat.bn_sharing")


class ConfigError(ValueError):
    pass


def _from_dict(cls, data, where="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = _from_dict(hint, value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


# ---------------------------------------------------------------- csv

def write_csv(path, rows, header=None) -> Path:
    rows = list(rows)
    if header is None:
        header = list(rows[0]) if rows else []
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return path


def write_loss_csv(path, trajectory: np.ndarray) -> Path:
    header = ["iteration", "grad_match", "tv", "bn_reg", "total"]
    rows = [{"iteration": int(r[0]), "grad_match": repr(float(r[1])), "tv": repr(float(r[2])),
             "bn_reg": repr(float(r[3])), "total": repr(float(r[4]))} for r in trajectory]
    return write_csv(path, rows, header)
