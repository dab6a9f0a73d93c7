"""Datasets, IDX ingestion, checkpoints and flat config files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .netcore import Dense, Network

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CKPT_MAGIC = b"EATCKPT\0"
CKPT_VERSION = 1


class DataError(ValueError):
    pass


class BadMagic(DataError):
    def __init__(self, path, value, expected):
        super().__init__(f"{path}: bad magic 0x{value:08x}, expected 0x{expected:08x}")
        self.value = value


class TruncatedFile(DataError):
    pass


class CountMismatch(DataError):
    pass


class CheckpointError(DataError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


@dataclass(frozen=True)
class Gaussians:
    n_classes: int = 2
    d: int = 2
    # distance of each class mean from the common center, in units of sigma
    separation: float = 4.0
    n_per_class: int = 500


@dataclass(frozen=True)
class Rings:
    n_per_class: int = 1000
    # ambient dimension; 2 means no embedding
    d: int = 2
    inner: tuple = (0.25, 0.45)
    outer: tuple = (0.75, 0.95)
    # plane-to-box factor; the outer edge lands 0.38 from the box center
    scale: float = 0.4


@dataclass(frozen=True)
class IdxFiles:
    images_path: str
    labels_path: str
    subset: int | None = None


@dataclass(frozen=True)
class DatasetSpec:
    kind: object
    seed: int = 0


def _split(x, y, rng) -> Dataset:
    perm = rng.permutation(x.shape[0])
    x, y = x[perm], y[perm]
    n_test = max(1, x.shape[0] // 10)
    return Dataset(x[n_test:], y[n_test:], x[:n_test], y[:n_test])


def ring_embedding(d: int, seed: int) -> np.ndarray:
    """Fixed random (d, 2) map from the ring plane into the d-dim box.

    Columns are heavy-tailed: a few coordinates carry most of each latent
    axis, the rest carry a thin copy.  Reading the plane through the strong
    coordinates is cheap against l-inf and costly against l1 perturbations,
    and the reverse for the thin ones.
    """
    rng = np.random.default_rng((seed, 0xE3B))
    g = rng.standard_normal((d, 2))
    a = np.sign(g) * np.abs(g) ** 3
    # column-wise orthogonalisation keeps the two latent axes independent
    q, _ = np.linalg.qr(a)
    q *= np.sign(np.sum(q * a, axis=0))
    return q / np.abs(q).sum(axis=1).max()


def _gaussians(spec: Gaussians, rng) -> tuple[np.ndarray, np.ndarray]:
    if spec.n_classes < 2 or spec.n_classes > 2 * spec.d:
        raise DataError("Gaussians needs 2 <= n_classes <= 2*d")
    sigma = 0.5 / (spec.separation + 5.0)
    xs, ys = [], []
    for c in range(spec.n_classes):
        mean = np.full(spec.d, 0.5)
        mean[c // 2] += (1 if c % 2 == 0 else -1) * spec.separation * sigma
        xs.append(mean + sigma * rng.standard_normal((spec.n_per_class, spec.d)))
        ys.append(np.full(spec.n_per_class, c))
    return np.clip(np.concatenate(xs), 0.0, 1.0), np.concatenate(ys)


def _rings(spec: Rings, rng, seed: int) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for c, (lo, hi) in enumerate((spec.inner, spec.outer)):
        r = rng.uniform(lo, hi, spec.n_per_class)
        t = rng.uniform(0, 2 * np.pi, spec.n_per_class)
        xs.append(np.stack([r * np.cos(t), r * np.sin(t)], axis=1))
        ys.append(np.full(spec.n_per_class, c))
    z = np.concatenate(xs)
    if spec.d == 2:
        x = 0.5 + spec.scale * z
    else:
        x = 0.5 + spec.scale * z @ ring_embedding(spec.d, seed).T
    return np.clip(x, 0.0, 1.0), np.concatenate(ys)


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic 90/10 train/test dataset from a spec."""
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if isinstance(kind, Gaussians):
        if kind.n_per_class < 1:
            raise DataError("n_per_class must be >= 1")
        x, y = _gaussians(kind, rng)
    elif isinstance(kind, Rings):
        if kind.n_per_class < 1:
            raise DataError("n_per_class must be >= 1")
        x, y = _rings(kind, rng, spec.seed)
    elif isinstance(kind, IdxFiles):
        x, y = load_idx(kind.images_path, kind.labels_path)
        if kind.subset is not None:
            keep = rng.permutation(x.shape[0])[: kind.subset]
            x, y = x[keep], y[keep]
    else:
        raise DataError(f"unknown dataset kind {kind!r}")
    return _split(x, y.astype(np.int64), rng)


# ---------------------------------------------------------------------------
# IDX


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def read_idx_images(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: header needs 16 bytes, file has {len(raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagic(path, magic, IDX_IMAGE_MAGIC)
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes for {n}x{rows}x{cols}, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 8:
        raise TruncatedFile(f"{path}: header needs 8 bytes, file has {len(raw)}")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise BadMagic(path, magic, IDX_LABEL_MAGIC)
    if len(raw) < 8 + n:
        raise TruncatedFile(f"{path}: expected {8 + n} bytes for {n} labels, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if x.shape[0] != y.shape[0]:
        raise CountMismatch(f"{x.shape[0]} images but {y.shape[0]} labels")
    return x, y


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# checkpoints


def arch_string(net: Network) -> str:
    return "|".join(f"{l.fan_in}>{l.fan_out}:{l.activation}" for l in net.layers)


def _parse_arch(arch: str) -> list[tuple[int, int, str]]:
    out = []
    try:
        for part in arch.split("|"):
            dims, act = part.split(":")
            a, b = dims.split(">")
            out.append((int(a), int(b), act))
    except ValueError:
        raise CheckpointError(f"malformed arch descriptor {arch!r}") from None
    return out


@dataclass
class Checkpoint:
    version: int
    arch: str
    params: list
    meta: dict = field(default_factory=dict)

    def to_network(self) -> Network:
        layers = _parse_arch(self.arch)
        if len(self.params) != 2 * len(layers):
            raise CheckpointError(f"arch has {len(layers)} layers but {len(self.params)} tensors")
        dense = []
        for i, (a, b, act) in enumerate(layers):
            w, bias = self.params[2 * i], self.params[2 * i + 1]
            if w.shape != (a, b) or bias.shape != (b,):
                raise CheckpointError(f"layer {i}: tensors {w.shape}/{bias.shape} do not match {a}>{b}")
            dense.append(Dense(w.copy(), bias.copy(), act))
        return Network(dense)


def save_checkpoint(net: Network, meta: dict | None, path) -> None:
    def u32(v):
        return struct.pack("<I", v)

    def text(s):
        b = str(s).encode("utf-8")
        return u32(len(b)) + b

    params = net.params()
    parts = [CKPT_MAGIC, u32(CKPT_VERSION), text(arch_string(net)), u32(len(params))]
    for p in params:
        parts.append(u32(p.ndim))
        parts.extend(u32(s) for s in p.shape)
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    meta = meta or {}
    parts.append(u32(len(meta)))
    for k, v in meta.items():
        parts.extend([text(k), text(v)])
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpoint(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(_read(path), path)
    magic = r.take(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    version = r.u32()
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {version}, supported {CKPT_VERSION}")
    arch = r.text()
    params = []
    for _ in range(r.u32()):
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise CheckpointError(f"{path}: non-finite parameter values")
        params.append(data.reshape(shape))
    meta = {}
    for _ in range(r.u32()):
        k = r.text()
        meta[k] = r.text()
    ckpt = Checkpoint(version, arch, params, meta)
    ckpt.to_network()  # validates arch against tensors
    return ckpt


# ---------------------------------------------------------------------------
# config files

CONFIG_NAMESPACES = ("train.", "attack.", "data.", "eval.")


def parse_config(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key.startswith(CONFIG_NAMESPACES):
            raise ConfigError(f"{source}:{lineno}: key {key!r} outside namespaces {CONFIG_NAMESPACES}")
        out[key] = value
    return out


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
