"""Synthetic paired-modality segmentation benchmark and its on-disk format.

Every point carries a latent vector ``z = anchor[c] + shift[domain] + noise``.
Two fixed renderers, shared by all domains, map ``z`` to the two modalities::

    x_m1 = tanh(A1 z + b1) + sigma_m1 * eps
    x_m2 = tanh(A2 z + b2) + sigma_m2 * eps

Source scenes are rendered in modality 1 only, target scenes in modality 2
only, and bridge scenes in both from the same latent points.

Randomness comes from numpy's Philox counter-based generator. The benchmark
constants use the stream ``SeedSequence(seed, spawn_key=(0,))``; scene ``i``
of ``domain`` / ``split`` uses ``spawn_key=(1, domain_code, split_code, i)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

DOMAINS = ("S", "B", "T")
SPLITS = ("train", "val", "test")
DOMAIN_CODE = {"S": 0, "B": 1, "T": 2}
SPLIT_CODE = {"train": 0, "val": 1, "test": 2}
# modalities present per domain, as the on-disk bitmask (bit 0 = m1, bit 1 = m2)
MODALITY_MASK = {"S": 0b01, "B": 0b11, "T": 0b10}

FILE_MAGIC = b"HMUD"
FILE_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sHBIIHHHB")


class DatasetFormatError(ValueError):
    pass


class LabelSecrecyError(RuntimeError):
    """Training code touched labels that only evaluation may read."""


def _default_shift(direction: int, magnitude: float, k: int = 8) -> tuple[float, ...]:
    rng = np.random.default_rng(1000 + direction)
    u = rng.standard_normal(k)
    return tuple(float(v) for v in magnitude * u / np.linalg.norm(u))


@dataclass(frozen=True)
class BenchmarkSpec:
    num_classes: int = 4
    latent_dim: int = 8
    d1: int = 12
    d2: int = 9
    points_per_scene: int = 64
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    prior_S: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    prior_B: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    prior_T: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    shift_S: tuple[float, ...] = (0.0,) * 8
    shift_B: tuple[float, ...] = _default_shift(1, 0.5)
    shift_T: tuple[float, ...] = _default_shift(2, 2.0)
    sigma_latent: float = 0.3
    sigma_m1: float = 0.05
    sigma_m2: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "latent_dim", "d1", "d2", "points_per_scene"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for dom in DOMAINS:
            prior = np.asarray(getattr(self, f"prior_{dom}"), dtype=float)
            if prior.shape != (self.num_classes,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
                raise ValueError(f"prior_{dom} must be a length-{self.num_classes} simplex vector")
            if len(getattr(self, f"shift_{dom}")) != self.latent_dim:
                raise ValueError(f"shift_{dom} must have length latent_dim={self.latent_dim}")
        if min(self.sigma_latent, self.sigma_m1, self.sigma_m2) < 0:
            raise ValueError("noise scales must be >= 0")

    def n_scenes(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown benchmark keys: {sorted(unknown)}")
        kw = {k: tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class Split:
    """All scenes of one (domain, split) as stacked arrays.

    Labels of bridge and target splits are hidden: reading ``labels`` raises
    :class:`LabelSecrecyError`. Evaluation (and the Oracle baseline) reads
    them through :meth:`reveal_labels`, which is counted.
    """

    def __init__(self, domain: str, split: str, m1: np.ndarray | None, m2: np.ndarray | None,
                 labels: np.ndarray, num_classes: int):
        self.domain = domain
        self.split = split
        self.m1 = m1
        self.m2 = m2
        self._labels = labels
        self.num_classes = num_classes
        self.hidden = domain != "S"
        self.reveal_count = 0
        self._f64: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return self._labels.shape[0]

    @property
    def points_per_scene(self) -> int:
        return self._labels.shape[1]

    @property
    def labels(self) -> np.ndarray:
        if self.hidden:
            raise LabelSecrecyError(f"labels of {self.domain}/{self.split} are evaluation-only")
        return self._labels

    def reveal_labels(self) -> np.ndarray:
        self.reveal_count += 1
        return self._labels

    def features(self, modality: str) -> np.ndarray:
        """float64 view of a modality block, shape (scenes, N, dim); cached."""
        if modality not in self._f64:
            arr = getattr(self, modality)
            if arr is None:
                raise KeyError(f"{self.domain} scenes carry no {modality} features")
            self._f64[modality] = arr.astype(np.float64)
        return self._f64[modality]

    def scene(self, i: int) -> "Scene":
        return Scene(self, i)


@dataclass
class Scene:
    split: Split
    index: int

    @property
    def domain(self) -> str:
        return self.split.domain

    @property
    def features_m1(self):
        return None if self.split.m1 is None else self.split.m1[self.index]

    @property
    def features_m2(self):
        return None if self.split.m2 is None else self.split.m2[self.index]

    @property
    def labels(self) -> np.ndarray:
        return self.split.labels[self.index]


@dataclass
class Dataset:
    spec: BenchmarkSpec
    splits: dict[tuple[str, str], Split] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def __getitem__(self, key: tuple[str, str]) -> Split:
        return self.splits[key]

    def __iter__(self) -> Iterator[Split]:
        return iter(self.splits.values())


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def benchmark_constants(spec: BenchmarkSpec) -> dict[str, np.ndarray]:
    rng = _stream(spec.seed, 0)
    k = spec.latent_dim
    return {
        "anchors": rng.standard_normal((spec.num_classes, k)),
        "A1": rng.standard_normal((spec.d1, k)) / np.sqrt(k),
        "b1": 0.5 * rng.standard_normal(spec.d1),
        "A2": rng.standard_normal((spec.d2, k)) / np.sqrt(k),
        "b2": 0.5 * rng.standard_normal(spec.d2),
    }


def generate_benchmark(spec: BenchmarkSpec) -> Dataset:
    const = benchmark_constants(spec)
    n, k = spec.points_per_scene, spec.latent_dim
    ds = Dataset(spec)
    for dom in DOMAINS:
        prior = np.asarray(getattr(spec, f"prior_{dom}"), dtype=float)
        shift = np.asarray(getattr(spec, f"shift_{dom}"), dtype=float)
        mask = MODALITY_MASK[dom]
        for split in SPLITS:
            count = spec.n_scenes(split)
            m1 = np.empty((count, n, spec.d1), np.float32) if mask & 1 else None
            m2 = np.empty((count, n, spec.d2), np.float32) if mask & 2 else None
            labels = np.empty((count, n), np.uint16)
            for i in range(count):
                rng = _stream(spec.seed, 1, DOMAIN_CODE[dom], SPLIT_CODE[split], i)
                c = rng.choice(spec.num_classes, size=n, p=prior)
                z = const["anchors"][c] + shift + spec.sigma_latent * rng.standard_normal((n, k))
                e1 = rng.standard_normal((n, spec.d1))
                e2 = rng.standard_normal((n, spec.d2))
                if m1 is not None:
                    m1[i] = np.tanh(z @ const["A1"].T + const["b1"]) + spec.sigma_m1 * e1
                if m2 is not None:
                    m2[i] = np.tanh(z @ const["A2"].T + const["b2"]) + spec.sigma_m2 * e2
                labels[i] = c
            ds.splits[(dom, split)] = Split(dom, split, m1, m2, labels, spec.num_classes)
    return ds


# --- file format ----------------------------------------------------------

def _split_bytes(spl: Split, spec: BenchmarkSpec) -> bytes:
    mask = (1 if spl.m1 is not None else 0) | (2 if spl.m2 is not None else 0)
    parts = [_HEADER.pack(FILE_MAGIC, FILE_VERSION, DOMAIN_CODE[spl.domain], len(spl),
                          spl.points_per_scene, spec.num_classes, spec.d1, spec.d2, mask)]
    labels = spl._labels
    for i in range(len(spl)):
        if spl.m1 is not None:
            parts.append(spl.m1[i].astype("<f4").tobytes())
        if spl.m2 is not None:
            parts.append(spl.m2[i].astype("<f4").tobytes())
        parts.append(labels[i].astype("<u2").tobytes())
    return b"".join(parts)


def manifest_dict(ds: Dataset) -> dict:
    spec = ds.spec
    return {
        "version": MANIFEST_VERSION,
        "seed": spec.seed,
        "num_classes": spec.num_classes,
        "dims": {"d1": spec.d1, "d2": spec.d2, "points_per_scene": spec.points_per_scene},
        "scene_counts": {f"{d}_{s}": len(spl) for (d, s), spl in ds.splits.items()},
        "spec": spec.to_dict(),
    }


def write_dataset(ds: Dataset, dir_path: str | Path) -> None:
    out = Path(dir_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for (dom, split), spl in ds.splits.items():
            (out / f"{dom}_{split}.bin").write_bytes(_split_bytes(spl, ds.spec))
        (out / "manifest.json").write_text(json.dumps(manifest_dict(ds), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"writing dataset to {out}: {exc}") from exc


def _read_split(path: Path, split: str) -> tuple[Split, dict]:
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(buf)} of {_HEADER.size} bytes)")
    magic, version, dcode, count, n, c, d1, d2, mask = _HEADER.unpack_from(buf)
    if magic != FILE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {FILE_MAGIC!r}")
    if version != FILE_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    domain = {v: k for k, v in DOMAIN_CODE.items()}.get(dcode)
    if domain is None:
        raise DatasetFormatError(f"{path}: unknown domain tag {dcode}")
    has1, has2 = bool(mask & 1), bool(mask & 2)
    per_scene = (n * d1 * 4 if has1 else 0) + (n * d2 * 4 if has2 else 0) + n * 2
    expected = _HEADER.size + count * per_scene
    if len(buf) != expected:
        raise DatasetFormatError(f"{path}: length mismatch, expected {expected} bytes, got {len(buf)}")
    rec = np.dtype([
        *([("m1", "<f4", (n, d1))] if has1 else []),
        *([("m2", "<f4", (n, d2))] if has2 else []),
        ("labels", "<u2", (n,)),
    ])
    table = np.frombuffer(buf, dtype=rec, count=count, offset=_HEADER.size)
    m1 = table["m1"].astype(np.float32) if has1 else None
    m2 = table["m2"].astype(np.float32) if has2 else None
    labels = table["labels"].astype(np.uint16)
    if labels.size and labels.max() >= c:
        raise DatasetFormatError(f"{path}: label {labels.max()} out of range for C={c}")
    return Split(domain, split, m1, m2, labels, c), {"C": c, "d1": d1, "d2": d2, "N": n}


def read_dataset(dir_path: str | Path) -> Dataset:
    root = Path(dir_path)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{manifest_path}: missing manifest") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetFormatError(f"{manifest_path}: unsupported manifest version {manifest.get('version')}")
    spec = BenchmarkSpec.from_dict(manifest["spec"])
    ds = Dataset(spec)
    for dom in DOMAINS:
        for split in SPLITS:
            path = root / f"{dom}_{split}.bin"
            if not path.exists():
                continue
            spl, dims = _read_split(path, split)
            if spl.domain != dom:
                raise DatasetFormatError(f"{path}: header domain {spl.domain} does not match file name")
            want = {"C": spec.num_classes, "d1": spec.d1, "d2": spec.d2, "N": spec.points_per_scene}
            if dims != want:
                raise DatasetFormatError(f"{path}: header dims {dims} disagree with manifest {want}")
            ds.splits[(dom, split)] = spl
    return ds


# --- batching -------------------------------------------------------------

@dataclass
class Batch:
    domain: str
    split: Split
    indices: np.ndarray
    x_m1: np.ndarray | None
    x_m2: np.ndarray | None

    @property
    def scene_counts(self) -> list[int]:
        return [self.split.points_per_scene] * len(self.indices)

    @property
    def labels(self) -> np.ndarray:
        """Flattened per-point labels; raises for hidden splits."""
        return self.split.labels[self.indices].reshape(-1).astype(np.int64)

    def reveal_labels(self) -> np.ndarray:
        return self.split.reveal_labels()[self.indices].reshape(-1).astype(np.int64)


class EpochSampler:
    """Scene batches without replacement; each epoch is a fresh seeded shuffle.

    The final batch of an epoch holds the remainder, so every scene is seen
    exactly once per epoch.
    """

    def __init__(self, split: Split, batch_size: int, seed: int):
        if len(split) == 0:
            raise ValueError(f"{split.domain}/{split.split} is empty")
        if batch_size > len(split):
            raise ValueError(f"batch_size {batch_size} exceeds {len(split)} scenes in {split.domain}/{split.split}")
        self.split = split
        self.batch_size = batch_size
        self.rng = np.random.Generator(np.random.Philox(seed))
        self.epoch = 0
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_batch(self) -> Batch:
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(len(self.split))
            self._pos = 0
            self.epoch += 1
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return make_batch(self.split, idx)


def make_batch(split: Split, idx) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    x1 = split.features("m1")[idx].reshape(-1, split.m1.shape[2]) if split.m1 is not None else None
    x2 = split.features("m2")[idx].reshape(-1, split.m2.shape[2]) if split.m2 is not None else None
    return Batch(split.domain, split, idx, x1, x2)


def sample_batch(dataset: Dataset, domain: str, batch_size: int = 16,
                 rng_state: EpochSampler | int = 0, split: str = "train") -> tuple[Batch, EpochSampler]:
    """Draw the next batch; pass the returned sampler back in to continue the epoch."""
    sampler = rng_state
    if not isinstance(sampler, EpochSampler):
        sampler = EpochSampler(dataset[(domain, split)], batch_size, int(rng_state))
    return sampler.next_batch(), sampler
