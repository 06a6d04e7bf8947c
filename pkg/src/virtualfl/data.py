"""Federated datasets: ingestion, sharding, transforms and splits.

Sources:

* IDX image/label pairs (MNIST layout), optionally gzip-compressed.
* CSV with header ``client_id,label,f_0,...,f_{d-1}``; rows are grouped into
  one shard per client id, in order of first appearance.
* A synthetic generator with a heterogeneity knob ``tau``.

Everything is a deterministic function of the input bytes, the DatasetSpec and the
seed.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


class IdxFormatError(DataFormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CsvFormatError(DataFormatError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: str
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    permutation: np.ndarray | None = None
    source_idx: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_split(self) -> bool:
        return self.train_idx is not None

    def _need_split(self):
        if not self.is_split:
            raise ValueError(f"client {self.client_id} has no train/test split yet")

    @property
    def x_train(self) -> np.ndarray:
        self._need_split()
        return self.features[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        self._need_split()
        return self.labels[self.train_idx]

    @property
    def x_test(self) -> np.ndarray:
        self._need_split()
        return self.features[self.test_idx]

    @property
    def y_test(self) -> np.ndarray:
        self._need_split()
        return self.labels[self.test_idx]

    @property
    def n_train(self) -> int:
        return len(self.train_idx) if self.is_split else len(self)


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    shards: tuple[ClientShard, ...]
    num_classes: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "shards", tuple(self.shards))
        self.validate()

    def validate(self) -> None:
        if not self.shards:
            raise ValueError("a federated dataset needs at least one client")
        widths = {s.features.shape[1] for s in self.shards}
        if len(widths) != 1:
            raise ValueError(f"shards disagree on feature width: {sorted(widths)}")
        for s in self.shards:
            if s.features.ndim != 2 or len(s.features) != len(s.labels):
                raise ValueError(f"client {s.client_id}: features/labels misaligned")
            if not np.isfinite(s.features).all():
                raise ValueError(f"client {s.client_id}: non-finite features")
            if len(s.labels) and (s.labels.min() < 0 or s.labels.max() >= self.num_classes):
                raise ValueError(f"client {s.client_id}: label outside [0, {self.num_classes})")
            if s.is_split and np.intersect1d(s.train_idx, s.test_idx).size:
                raise ValueError(f"client {s.client_id}: train and test overlap")

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    @property
    def feature_dim(self) -> int:
        return self.shards[0].features.shape[1]

    def __iter__(self):
        return iter(self.shards)

    def __getitem__(self, i: int) -> ClientShard:
        return self.shards[i]


# --------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(buf: bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX container into an ndarray."""
    if len(buf) < 4:
        raise IdxFormatError("file too short for an IDX header", len(buf))
    zero, dtype_code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IdxFormatError(f"unsupported magic 0x{struct.unpack('>I', buf[:4])[0]:08x}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError("truncated dimension header", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(buf) < expected:
        raise IdxFormatError(f"truncated payload: expected {expected} bytes, got {len(buf)}", len(buf))
    if len(buf) > expected:
        raise IdxFormatError(f"{len(buf) - expected} trailing bytes after payload", expected)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims).copy()


def read_idx(path, magic: int | None = None) -> np.ndarray:
    buf = _read_bytes(path)
    if magic is not None and len(buf) >= 4:
        found = struct.unpack(">I", buf[:4])[0]
        if found != magic:
            raise IdxFormatError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    return parse_idx(buf)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255 or not np.array_equal(arr, np.round(arr)):
            raise ValueError("write_idx stores unsigned bytes only")
        arr = arr.astype(np.uint8)
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    data = header + np.ascontiguousarray(arr).tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def pool_images(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool (N, H, W) images by ``factor`` in both directions."""
    if factor == 1:
        return images
    n, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by pool factor {factor}")
    return images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def load_idx(images_path, labels_path, pool: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX pair as features in [0, 1] (one row per image) and int labels."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"image file has {images.ndim} dimensions, expected 3", 3)
    if labels.ndim != 1:
        raise IdxFormatError(f"label file has {labels.ndim} dimensions, expected 1", 3)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    feats = pool_images(images.astype(np.float64) / 255.0, pool)
    return feats.reshape(len(feats), -1), labels.astype(np.int64)


# --------------------------------------------------------------------------
# sharding and transforms


def _infer_classes(labels: np.ndarray, num_classes: int | None) -> int:
    return int(labels.max()) + 1 if num_classes is None else int(num_classes)


def shard_iid(
    features: np.ndarray,
    labels: np.ndarray,
    num_clients: int,
    rng: np.random.Generator,
    num_classes: int | None = None,
    name: str = "",
) -> FederatedDataset:
    """Random partition into ``num_clients`` shards whose sizes differ by at most one."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if num_clients < 1 or len(labels) < num_clients:
        raise ValueError(f"cannot split {len(labels)} samples into {num_clients} shards")
    order = rng.permutation(len(labels))
    shards = [
        ClientShard(str(k), features[idx], labels[idx], source_idx=idx)
        for k, idx in enumerate(np.array_split(order, num_clients))
    ]
    return FederatedDataset(shards, _infer_classes(labels, num_classes), name)


def cap_clients(ds: FederatedDataset, cap: int | None, rng: np.random.Generator) -> FederatedDataset:
    """Randomly subsample every shard to at most ``cap`` samples."""
    if cap is None:
        return ds
    shards = []
    for s in ds.shards:
        if len(s) <= cap:
            shards.append(s)
            continue
        keep = np.sort(rng.choice(len(s), size=cap, replace=False))
        src = s.source_idx[keep] if s.source_idx is not None else None
        shards.append(replace(s, features=s.features[keep], labels=s.labels[keep], source_idx=src,
                              train_idx=None, test_idx=None))
    return replace(ds, shards=tuple(shards))


def permute_pixels(ds: FederatedDataset, rng: np.random.Generator) -> FederatedDataset:
    """Apply an independent fixed feature permutation to every shard."""
    shards = []
    for s in ds.shards:
        perm = rng.permutation(s.features.shape[1])
        shards.append(replace(s, features=s.features[:, perm], permutation=perm))
    return replace(ds, shards=tuple(shards))


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


# --------------------------------------------------------------------------
# CSV


def load_csv_features(path, num_classes: int | None = None, name: str = "") -> FederatedDataset:
    """Read ``client_id,label,f_0..f_{d-1}`` rows into one shard per client."""
    groups: dict[str, tuple[list, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file", 1) from None
        expected = [f"f_{j}" for j in range(len(header) - 2)]
        if header[:2] != ["client_id", "label"] or header[2:] != expected or len(header) < 3:
            raise CsvFormatError("header must be client_id,label,f_0,...,f_{d-1}", 1)
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise CsvFormatError(f"expected {width} fields, found {len(row)}", line_no)
            try:
                label = int(row[1])
                feats = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise CsvFormatError(f"non-numeric field ({exc})", line_no) from None
            if label < 0:
                raise CsvFormatError(f"negative label {label}", line_no)
            if not all(np.isfinite(feats)):
                raise CsvFormatError("non-finite feature value", line_no)
            xs, ys = groups.setdefault(row[0], ([], []))
            xs.append(feats)
            ys.append(label)
    if not groups:
        raise CsvFormatError("no data rows", 2)
    shards = [
        ClientShard(cid, np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64))
        for cid, (xs, ys) in groups.items()
    ]
    all_labels = np.concatenate([s.labels for s in shards])
    return FederatedDataset(shards, _infer_classes(all_labels, num_classes), name)


def standardize(ds: FederatedDataset) -> FederatedDataset:
    """Per-client z-score using training-portion statistics only."""
    shards = []
    for s in ds.shards:
        train = s.x_train
        mu = train.mean(axis=0)
        sd = train.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        shards.append(replace(s, features=(s.features - mu) / sd))
    return replace(ds, shards=tuple(shards))


# --------------------------------------------------------------------------
# synthetic


def synth_noniid(
    num_clients: int,
    dim: int,
    num_classes: int,
    n_per_client: int,
    tau: float,
    rng: np.random.Generator,
    *,
    separation: float = 1.0,
    noise: float = 1.0,
    name: str = "synthetic",
) -> FederatedDataset:
    """Gaussian class clusters whose placement is client-dependent.

    Every client sees the same ``num_classes`` shared prototypes, but client
    ``i`` places class ``c`` at ``(1 - tau) * P[c] + tau * P[pi_i(c)]`` for a
    client-specific permutation ``pi_i``. ``tau = 0`` gives identically
    distributed clients; ``tau = 1`` gives clients whose concepts conflict:
    the same region of input space carries different labels on different
    clients. Labels are balanced (counts differ by at most one).
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    protos = rng.standard_normal((num_classes, dim)) * separation
    shards = []
    for i in range(num_clients):
        assignment = rng.permutation(num_classes)
        centers = (1.0 - tau) * protos + tau * protos[assignment]
        labels = rng.permutation(np.arange(n_per_client) % num_classes)
        feats = centers[labels] + noise * rng.standard_normal((n_per_client, dim))
        shards.append(ClientShard(str(i), feats, labels.astype(np.int64)))
    return FederatedDataset(shards, num_classes, name)


# --------------------------------------------------------------------------
# splits


def _stratified_test_indices(labels: np.ndarray, n_test: int, rng: np.random.Generator) -> np.ndarray:
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * (n_test / len(labels))
    take = np.floor(quota).astype(int)
    remainder = n_test - take.sum()
    if remainder:
        # largest remainder, ties broken by a random key for determinism per seed
        keys = np.lexsort((rng.random(len(classes)), -(quota - take)))
        take[keys[:remainder]] += 1
    # keep at least one training sample in every class
    take = np.minimum(take, counts - 1)
    chosen = [rng.permutation(np.flatnonzero(labels == c))[:k] for c, k in zip(classes, take)]
    return np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)


def split(ds: FederatedDataset, test_fraction: float, seed: int, stratified: bool = True) -> FederatedDataset:
    """Per-client train/test split; stratified by label where every class has >= 2 samples."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    shards = []
    for k, s in enumerate(ds.shards):
        rng = np.random.default_rng([int(seed), k])
        n = len(s)
        n_test = int(round(test_fraction * n))
        n_test = min(max(n_test, 1), n - 1) if n >= 2 else 0
        _, counts = np.unique(s.labels, return_counts=True)
        if stratified and counts.min(initial=n) >= 2:
            test = _stratified_test_indices(s.labels, n_test, rng)
            if len(test) != n_test:  # capping by class size changed the total
                test = rng.permutation(n)[:n_test]
        else:
            test = rng.permutation(n)[:n_test]
        test = np.sort(test.astype(np.int64))
        train = np.setdiff1d(np.arange(n), test)
        shards.append(replace(s, train_idx=train, test_idx=test))
    return replace(ds, shards=tuple(shards))


def concat_train(ds: FederatedDataset) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.concatenate([s.x_train for s in ds.shards]),
        np.concatenate([s.y_train for s in ds.shards]),
    )


# --------------------------------------------------------------------------
# declarative construction


@dataclass(frozen=True)
class DatasetSpec:
    source: str  # "idx" | "csv" | "synthetic"
    num_clients: int = 10
    transform: str = "none"  # "none" | "permute"
    per_client_cap: int | None = None
    test_fraction: float = 0.25
    seed: int = 0
    stratified: bool = True
    standardize: bool = False
    name: str = ""
    images: str | None = None
    labels: str | None = None
    pool: int = 1
    path: str | None = None
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in {"idx", "csv", "synthetic"}:
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.transform not in {"none", "permute"}:
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.source == "idx" and not (self.images and self.labels):
            raise ValueError("idx source needs 'images' and 'labels' paths")
        if self.source == "csv" and not self.path:
            raise ValueError("csv source needs a 'path'")


_SYNTH_KEYS = {"dim", "num_classes", "n_per_client", "tau", "separation", "noise"}


def build_dataset(spec: DatasetSpec, split_seed: int) -> FederatedDataset:
    """Materialize ``spec``; shards and permutations depend on ``spec.seed`` only."""
    rng = np.random.default_rng(spec.seed)
    name = spec.name or spec.source
    if spec.source == "idx":
        feats, labels = load_idx(spec.images, spec.labels, pool=spec.pool)
        ds = shard_iid(feats, labels, spec.num_clients, rng, num_classes=10, name=name)
    elif spec.source == "csv":
        ds = load_csv_features(spec.path, name=name)
    else:
        unknown = set(spec.synthetic) - _SYNTH_KEYS
        if unknown:
            raise ValueError(f"unknown synthetic options {sorted(unknown)}")
        opts = {"dim": 20, "num_classes": 5, "n_per_client": 200, "tau": 1.0, **spec.synthetic}
        ds = synth_noniid(
            spec.num_clients, int(opts["dim"]), int(opts["num_classes"]), int(opts["n_per_client"]),
            float(opts["tau"]), rng, separation=float(opts.get("separation", 1.0)),
            noise=float(opts.get("noise", 1.0)), name=name,
        )
    ds = cap_clients(ds, spec.per_client_cap, rng)
    if spec.transform == "permute":
        ds = permute_pixels(ds, rng)
    ds = split(ds, spec.test_fraction, split_seed, stratified=spec.stratified)
    if spec.standardize:
        ds = standardize(ds)
    return ds


def subset_clients(ds: FederatedDataset, ids: Sequence[int]) -> FederatedDataset:
    return replace(ds, shards=tuple(ds.shards[i] for i in ids))


def minibatch_indices(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True) -> list[np.ndarray]:
    """One epoch of minibatch index arrays; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
