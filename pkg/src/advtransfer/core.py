"""Shared data model: samples, datasets, perturbation records, keyed randomness.

Feature vectors live in the unit hypercube [0, 1]^n throughout the package.
"""
import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, InvalidArguments, ParseError, StratificationError

MASK64 = (1 << 64) - 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Purpose(IntEnum):
    """First component of every stream key; keeps unrelated draws independent."""

    SPLIT = 1
    SURROGATE = 2
    TARGET = 3
    SOURCES = 4
    ATTACK = 5
    DATA = 6


class RngStream:
    """Deterministic random stream keyed by ``(root_seed, stream_key)``.

    The key is mixed into the root seed with numpy's ``SeedSequence`` hashing,
    so distinct keys give independent streams and the same key always replays
    the same sequence. A stream is single-owner; parallel work should derive
    its own stream with :meth:`child` instead of sharing one.
    """

    def __init__(self, root_seed, stream_key=()):
        root_seed = int(root_seed)
        if not 0 <= root_seed <= MASK64:
            raise InvalidArguments(f"root_seed must be a 64-bit unsigned integer, got {root_seed}")
        self.root_seed = root_seed
        self.stream_key = tuple(int(k) for k in stream_key)
        if any(k < 0 for k in self.stream_key):
            raise InvalidArguments("stream key components must be non-negative")
        self._seq = np.random.SeedSequence(root_seed, spawn_key=self.stream_key)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, *key):
        return RngStream(self.root_seed, self.stream_key + tuple(key))

    @property
    def seed64(self):
        """64-bit digest of (root_seed, stream_key), stored on records for provenance."""
        return int(self._seq.generate_state(1, np.uint64)[0])

    def __repr__(self):
        return f"RngStream(root_seed={self.root_seed}, stream_key={self.stream_key})"


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int


def _as_unit_features(values, what="features"):
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArguments(f"{what} contain non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvalidArguments(f"{what} must lie in [0, 1]")
    arr.setflags(write=False)
    return arr


class Dataset:
    """Ordered collection of labelled samples stored as a dense matrix.

    :param features: array of shape ``(n_samples, feature_dim)`` with entries in [0, 1].
    :param labels: integer class indices, one per row.
    :param class_count: declared number of classes ``C``; defaults to ``max(label) + 1``.
    """

    def __init__(self, features, labels, class_count=None):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {features.shape}")
        labels = np.array(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != features.shape[0]:
            raise DimensionError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if class_count is None:
            class_count = int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise InvalidArguments(f"labels must lie in 0..{class_count - 1}")
        self.features = _as_unit_features(features)
        labels.setflags(write=False)
        self.labels = labels
        self.class_count = int(class_count)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i):
        return LabeledSample(self.features[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def samples(self):
        return list(self)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.class_count)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.class_count)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def __repr__(self):
        return f"Dataset(n={len(self)}, feature_dim={self.feature_dim}, class_count={self.class_count})"


def save_dataset(ds, path):
    np.savez(
        path,
        features=ds.features,
        labels=ds.labels,
        class_count=np.array(ds.class_count, dtype=np.int64),
    )


def load_saved_dataset(path):
    with np.load(path, allow_pickle=False) as data:
        return Dataset(data["features"], data["labels"], int(data["class_count"]))


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------


def _is_int_token(tok):
    tok = tok.strip()
    if tok.startswith(("+", "-")):
        tok = tok[1:]
    return tok.isdigit()


def _load_csv(path, header=False, class_count=None):
    labels = []
    rows = []
    all_int = True
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not tok.strip() for tok in row):
                continue
            if len(row) < 2:
                raise ParseError("row needs a label and at least one feature", line=lineno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DimensionError(
                    f"line {lineno}: expected {width - 1} features, found {len(row) - 1}"
                )
            if not _is_int_token(row[0]):
                raise ParseError(f"label {row[0]!r} is not an integer", line=lineno)
            try:
                values = [float(tok) for tok in row[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if all_int and not all(_is_int_token(tok) for tok in row[1:]):
                all_int = False
            labels.append(int(row[0]))
            rows.append(values)
    if not rows:
        raise ParseError("no data rows", line=0)
    feats = np.array(rows, dtype=np.float64)
    if all_int:
        if feats.min() < 0 or feats.max() > 255:
            raise ParseError("integer features must lie in 0..255")
        feats = feats / 255.0
    elif feats.min() < 0 or feats.max() > 1:
        raise ParseError("real-valued features must lie in [0, 1]")
    return Dataset(feats, labels, class_count)


def _open_maybe_gzip(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path):
    """Read an IDX file (``ubyte`` payload only) and return ``(magic, array)``."""
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError("file too short for IDX magic", offset=0)
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise ParseError(f"bad IDX magic 0x{raw[:4].hex()}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ParseError("truncated IDX dimension header", offset=4)
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims)) if dims else 0
    payload = raw[header_end:]
    if len(payload) != expected:
        raise ParseError(
            f"IDX payload has {len(payload)} bytes, header promises {expected}", offset=header_end
        )
    magic = (dtype_code << 8) | ndim
    return magic, np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _default_labels_path(images_path):
    name = Path(images_path).name
    guess = name.replace("images", "labels").replace("idx3", "idx1")
    if guess == name:
        raise ParseError(f"cannot infer labels file for {images_path}; pass labels_path")
    return Path(images_path).with_name(guess)


def _load_idx(path, labels_path=None, class_count=None):
    magic, images = read_idx(path)
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(f"expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}", offset=0)
    labels_path = labels_path or _default_labels_path(path)
    magic, labels = read_idx(labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise ParseError(f"expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}", offset=0)
    if labels.shape[0] != images.shape[0]:
        raise DimensionError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), class_count)


def load_dataset(path, format="csv", *, header=False, labels_path=None, class_count=None):
    """Load a labelled dataset, scaling features into [0, 1].

    CSV rows are ``label,f1,f2,...``. When every feature token in the file is
    an integer the values are read as 0..255 bytes and divided by 255;
    otherwise they must already be reals in [0, 1]. IDX input is an images
    file (magic ``0x803``) plus a labels file (magic ``0x801``); the labels
    path is inferred from the images file name when not given.
    """
    if format == "csv":
        return _load_csv(path, header=header, class_count=class_count)
    if format == "idx":
        return _load_idx(path, labels_path=labels_path, class_count=class_count)
    raise InvalidArguments(f"unknown dataset format {format!r}")


def split_dataset(ds, train_fraction, rng):
    """Shuffle under ``rng`` and cut into disjoint, exhaustive train/test splits."""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArguments("train_fraction must lie in (0, 1)")
    n = len(ds)
    if n < 2:
        raise InvalidArguments("need at least two samples to split")
    n_train = int(math.floor(n * train_fraction + 1e-9))
    n_train = min(max(n_train, 1), n - 1)
    order = rng.gen.permutation(n)
    train, test = ds.subset(order[:n_train]), ds.subset(order[n_train:])
    present = set(np.unique(ds.labels).tolist())
    missing = present - set(np.unique(train.labels).tolist())
    if missing:
        raise StratificationError(f"classes {sorted(missing)} absent from the training split")
    return train, test


def make_blobs(class_count, feature_dim, samples_per_class, spread, rng):
    """Isotropic Gaussian clusters with centres drawn inside [0.2, 0.8]^n, clipped to [0, 1]."""
    centres = rng.gen.uniform(0.2, 0.8, size=(class_count, feature_dim))
    labels = np.repeat(np.arange(class_count), samples_per_class)
    feats = centres[labels] + spread * rng.gen.standard_normal((labels.size, feature_dim))
    order = rng.gen.permutation(labels.size)
    return Dataset(np.clip(feats[order], 0.0, 1.0), labels[order], class_count)


def load_digits_dataset():
    """The 8x8 handwritten-digit corpus bundled with scikit-learn, scaled to [0, 1].

    Pixel intensities there run 0..16, so they are divided by 16.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    return Dataset(bunch.data / 16.0, bunch.target, 10)


# ---------------------------------------------------------------------------
# Perturbation records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationRecord:
    """One adversarial example ``x' = x + delta`` found against a surrogate."""

    source_index: int
    perturbation_index: int
    x_prime: np.ndarray
    delta: np.ndarray
    l2_norm: float
    surrogate_label_source: int
    surrogate_label_adv: int
    target_class: int | None = None
    seed: int = 0
    queries: int = field(default=0, compare=False)

    @classmethod
    def build(cls, p, d, source, x_prime, label_source, label_adv, target_class=None, seed=0, queries=0):
        x_prime = np.array(x_prime, dtype=np.float64)
        delta = x_prime - np.asarray(source, dtype=np.float64)
        return cls(
            int(p), int(d), x_prime, delta, float(np.linalg.norm(delta)),
            int(label_source), int(label_adv),
            None if target_class is None else int(target_class), int(seed), int(queries),
        )

    def violations(self, source):
        """List the field invariants this record breaks (empty when valid)."""
        out = []
        source = np.asarray(source, dtype=np.float64)
        if self.x_prime.shape != source.shape or self.delta.shape != source.shape:
            return ["shape mismatch with source"]
        if np.max(np.abs(source + self.delta - self.x_prime), initial=0.0) > 1e-9:
            out.append("x_prime != source + delta")
        if abs(float(np.linalg.norm(self.delta)) - self.l2_norm) > 1e-9:
            out.append("l2_norm != ||delta||")
        if self.surrogate_label_adv == self.surrogate_label_source:
            out.append("surrogate label not flipped")
        if self.x_prime.size and (self.x_prime.min() < 0.0 or self.x_prime.max() > 1.0):
            out.append("x_prime outside [0, 1]")
        if not 0 <= self.seed <= MASK64:
            out.append("seed outside 64-bit range")
        return out

    def __eq__(self, other):
        if not isinstance(other, PerturbationRecord):
            return NotImplemented
        return (
            self.source_index == other.source_index
            and self.perturbation_index == other.perturbation_index
            and np.array_equal(self.x_prime, other.x_prime)
            and np.array_equal(self.delta, other.delta)
            and self.l2_norm == other.l2_norm
            and self.surrogate_label_source == other.surrogate_label_source
            and self.surrogate_label_adv == other.surrogate_label_adv
            and self.target_class == other.target_class
            and self.seed == other.seed
        )

    __hash__ = None


def validate_records(records, sources):
    """Return ``[(p, d, message), ...]`` over every record; empty means clean."""
    problems = []
    for rec in records:
        for msg in rec.violations(sources[rec.source_index]):
            problems.append((rec.source_index, rec.perturbation_index, msg))
    return problems


PERTURBATION_FORMAT = "advtransfer-perturbations/1"


def save_perturbations(directory, records, sources, *, failures=(), extra=None):
    """Persist a perturbation set as ``metadata.json`` plus raw float64 blobs.

    ``x_prime.f64`` holds the x' vectors in (p, d) row-major order,
    ``sources.f64`` the P source vectors (needed to recover ``delta`` bit-exactly).
    Both are little-endian float64.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sources = np.asarray(sources, dtype=np.float64)
    records = sorted(records, key=lambda r: (r.source_index, r.perturbation_index))
    dim = sources.shape[1]
    blob = np.zeros((len(records), dim), dtype="<f8")
    entries = []
    for i, rec in enumerate(records):
        blob[i] = rec.x_prime
        entries.append(
            {
                "p": rec.source_index,
                "d": rec.perturbation_index,
                "l2_norm": rec.l2_norm,
                "surrogate_label_source": rec.surrogate_label_source,
                "surrogate_label_adv": rec.surrogate_label_adv,
                "target_class": rec.target_class,
                "seed": rec.seed,
                "queries": rec.queries,
            }
        )
    (directory / "x_prime.f64").write_bytes(blob.tobytes())
    (directory / "sources.f64").write_bytes(sources.astype("<f8").tobytes())
    meta = {
        "format": PERTURBATION_FORMAT,
        "feature_dim": dim,
        "source_count": int(sources.shape[0]),
        "records": entries,
        "failures": [dict(f) for f in failures],
    }
    if extra:
        meta.update(extra)
    (directory / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_perturbations(directory):
    """Inverse of :func:`save_perturbations`; returns ``(records, sources, metadata)``."""
    directory = Path(directory)
    meta = json.loads((directory / "metadata.json").read_text())
    if meta.get("format") != PERTURBATION_FORMAT:
        raise FormatError(f"unsupported perturbation set format {meta.get('format')!r}")
    dim = meta["feature_dim"]
    sources = np.frombuffer((directory / "sources.f64").read_bytes(), dtype="<f8")
    if sources.size != meta["source_count"] * dim:
        raise FormatError("sources blob size does not match metadata")
    sources = sources.reshape(meta["source_count"], dim).astype(np.float64)
    blob = np.frombuffer((directory / "x_prime.f64").read_bytes(), dtype="<f8")
    if blob.size != len(meta["records"]) * dim:
        raise FormatError("x_prime blob size does not match metadata")
    blob = blob.reshape(len(meta["records"]), dim).astype(np.float64)
    records = []
    for row, e in zip(blob, meta["records"]):
        delta = row - sources[e["p"]]
        records.append(
            PerturbationRecord(
                e["p"], e["d"], row, delta, e["l2_norm"],
                e["surrogate_label_source"], e["surrogate_label_adv"],
                e["target_class"], e["seed"], e.get("queries", 0),
            )
        )
    return records, sources, meta
