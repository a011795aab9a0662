"""Per-point branch networks: MLP extractor, linear classifier, linear projection."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (64, 64)
    feat_dim: int = 32
    # None means the branch has no projection and features are used as-is
    proj_dim: int | None = 16
    activation: str = "tanh"

    def __post_init__(self):
        dims = [self.input_dim, self.feat_dim, *self.hidden_dims]
        if self.proj_dim is not None:
            dims.append(self.proj_dim)
        if min(dims) < 1:
            raise ValueError(f"all network dims must be >= 1, got {self}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self) -> int:
        """Width of the shared space this branch projects into."""
        return self.feat_dim if self.proj_dim is None else self.proj_dim


@dataclass
class ParamSet:
    """Named tensors of one branch.

    Names: ``extractor.{i}.weight`` (out x in), ``extractor.{i}.bias`` (1 x out),
    ``classifier.weight`` (C x feat_dim), ``classifier.bias``, and optionally
    ``projection.weight`` / ``projection.bias``.
    """

    spec: NetworkSpec
    tensors: dict[str, Tensor]
    role: str = "source"

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def n_layers(self) -> int:
        return len(self.spec.hidden_dims) + 1

    @property
    def has_projection(self) -> bool:
        return "projection.weight" in self.tensors

    def projection_tensors(self) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if n.startswith("projection.")]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def clone(self, role: str | None = None) -> "ParamSet":
        return ParamSet(self.spec, {n: t.copy() for n, t in self.tensors.items()},
                        role or self.role)


def _layer_dims(spec: NetworkSpec) -> list[tuple[int, int]]:
    widths = [spec.input_dim, *spec.hidden_dims, spec.feat_dim]
    return list(zip(widths[:-1], widths[1:]))


def init_params(spec: NetworkSpec, seed: int, role: str = "source") -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    shapes: list[tuple[str, int, int]] = [
        (f"extractor.{i}", fan_out, fan_in) for i, (fan_in, fan_out) in enumerate(_layer_dims(spec))
    ]
    shapes.append(("classifier", spec.num_classes, spec.feat_dim))
    if spec.proj_dim is not None:
        shapes.append(("projection", spec.proj_dim, spec.feat_dim))
    tensors = {}
    for prefix, fan_out, fan_in in shapes:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"{prefix}.weight"] = Tensor(rng.uniform(-s, s, size=(fan_out, fan_in)), requires_grad=True)
        tensors[f"{prefix}.bias"] = Tensor(np.zeros((1, fan_out)), requires_grad=True)
    return ParamSet(spec, tensors, role)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, ad.transpose(w)), b)


def _check_cols(x: Tensor, expected: int, what: str) -> None:
    if x.cols != expected:
        raise ShapeError(f"{what}: expected {expected} input columns, got shape {x.shape}")


def extract_features(params: ParamSet, x: Tensor) -> Tensor:
    spec = params.spec
    _check_cols(x, spec.input_dim, "extract_features")
    act = ACTIVATIONS[spec.activation]
    h = x
    for i in range(params.n_layers):
        h = act(_linear(h, params[f"extractor.{i}.weight"], params[f"extractor.{i}.bias"]))
    return h


def classify(params: ParamSet, feats: Tensor) -> Tensor:
    """Row-wise log-probabilities over classes."""
    _check_cols(feats, params.spec.feat_dim, "classify")
    return ad.log_softmax(_linear(feats, params["classifier.weight"], params["classifier.bias"]))


def project(params: ParamSet, feats: Tensor) -> Tensor:
    _check_cols(feats, params.spec.feat_dim, "project")
    if not params.has_projection:
        return feats
    return _linear(feats, params["projection.weight"], params["projection.bias"])


def argmax_rows(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. lowest class on ties
    return np.argmax(scores, axis=1)


def predict_labels(params: ParamSet, x: Tensor | np.ndarray) -> np.ndarray:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    return argmax_rows(classify(params, extract_features(params, x)).values)


# --- checkpoint files -----------------------------------------------------

CKPT_MAGIC = b"LSBP"
CKPT_VERSION = 1


def write_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    """Binary little-endian record file: magic, u16 version, then named f64 matrices."""
    chunks = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    for name, t in tensors.items():
        arr = t.values if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 6
    while pos < len(buf):
        try:
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
        except struct.error as exc:
            raise ValueError(f"{path}: truncated record header at byte {pos}") from exc
        nbytes = rows * cols * 8
        if pos + nbytes > len(buf):
            raise ValueError(f"{path}: record {name!r} needs {nbytes} bytes, {len(buf) - pos} left")
        out[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    return out


def params_to_records(params: ParamSet, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{n}": t.values for n, t in params.items()}


def params_from_records(records: Mapping[str, np.ndarray], prefix: str,
                        activation: str = "tanh", role: str | None = None) -> ParamSet:
    """Rebuild a branch from checkpoint records; the architecture is inferred from shapes."""
    sub = {n[len(prefix) + 1:]: v for n, v in records.items() if n.startswith(prefix + ".")}
    if "classifier.weight" not in sub:
        raise KeyError(f"checkpoint has no tensors under {prefix!r}")
    n_layers = sum(1 for n in sub if n.startswith("extractor.") and n.endswith(".weight"))
    weights = [sub[f"extractor.{i}.weight"] for i in range(n_layers)]
    spec = NetworkSpec(
        input_dim=weights[0].shape[1],
        num_classes=sub["classifier.weight"].shape[0],
        hidden_dims=tuple(w.shape[0] for w in weights[:-1]),
        feat_dim=weights[-1].shape[0],
        proj_dim=sub["projection.weight"].shape[0] if "projection.weight" in sub else None,
        activation=activation,
    )
    tensors = {n: Tensor(v.copy(), requires_grad=True) for n, v in sub.items()}
    return ParamSet(spec, tensors, role or prefix)
