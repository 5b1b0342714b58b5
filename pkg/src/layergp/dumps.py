"""Feature-dump ingestion: binary tensor files, channel pooling, sample assembly.

A dump directory holds one dataset split exported by a classifier:

    manifest.json   {"split", "n", "k", "layers": [{"index", "shape"}, ...],
                     "dtype": "f32", "endianness": "little"}
    softmax.f32     n*k float32, row-major
    labels.i32      n int32
    predictions.i32 n int32
    layer_<i>.f32   per-layer activations, row-major in the declared shape
    logits.f32      optional, n*k float32 (needed for temperature scaling)

All binaries are flat little-endian arrays whose byte lengths must match the
manifest exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOFTMAX_ROW_TOL = 1e-5

_F32 = np.dtype("<f4")
_I32 = np.dtype("<i4")


class DumpError(Exception):
    """Raised when a dump directory is missing files or fails validation."""


@dataclass(frozen=True)
class LayerTensor:
    """One layer's activations: shape (N, C, H, W) for conv maps, (N, D) otherwise."""

    index: int
    values: np.ndarray

    def __post_init__(self):
        if self.index < 1:
            raise DumpError(f"layer index must be >= 1, got {self.index}")
        if self.values.ndim not in (2, 4):
            raise DumpError(
                f"layer {self.index}: expected 2-d or 4-d values, got {self.values.ndim}-d"
            )
        if any(d <= 0 for d in self.values.shape):
            raise DumpError(f"layer {self.index}: non-positive dimension in shape {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def pooled_width(self) -> int:
        """Feature width after channel pooling and flattening."""
        if self.values.ndim == 2:
            return self.values.shape[1]
        _, _, h, w = self.values.shape
        return h * w


@dataclass
class FeatureDump:
    """Per-layer features plus softmax/label metadata for one dataset split."""

    split: str
    layers: list[LayerTensor]
    softmax: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    logits: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.softmax.shape[0]

    @property
    def k(self) -> int:
        return self.softmax.shape[1]

    @property
    def layer_indices(self) -> list[int]:
        return [t.index for t in self.layers]

    def layer(self, index: int) -> LayerTensor:
        for t in self.layers:
            if t.index == index:
                return t
        raise ValueError(f"unknown layer index {index}; dump has {self.layer_indices}")

    def validate(self) -> None:
        n = self.n
        if self.labels.shape != (n,) or self.predictions.shape != (n,):
            raise DumpError(
                f"labels/predictions length mismatch: softmax has {n} rows, "
                f"labels {self.labels.shape}, predictions {self.predictions.shape}"
            )
        if np.any(self.softmax < 0) or np.any(self.softmax > 1):
            bad = int(np.argwhere((self.softmax < 0) | (self.softmax > 1))[0][0])
            raise DumpError(f"softmax row {bad} has entries outside [0, 1]")
        sums = self.softmax.sum(axis=1)
        off = np.abs(sums - 1.0) > SOFTMAX_ROW_TOL
        if np.any(off):
            bad = int(np.argmax(off))
            raise DumpError(
                f"softmax row {bad} is not normalized (sum={sums[bad]!r}, tol={SOFTMAX_ROW_TOL})"
            )
        argmax = self.softmax.argmax(axis=1)
        if np.any(argmax != self.predictions):
            bad = int(np.argmax(argmax != self.predictions))
            raise DumpError(
                f"prediction {self.predictions[bad]} at row {bad} does not match "
                f"softmax argmax {argmax[bad]}"
            )
        for t in self.layers:
            if t.n != n:
                raise DumpError(f"layer {t.index} has {t.n} samples, expected {n}")
        if self.logits is not None and self.logits.shape != self.softmax.shape:
            raise DumpError(
                f"logits shape {self.logits.shape} does not match softmax {self.softmax.shape}"
            )


def _read_flat(path: Path, dtype: np.dtype, count: int) -> np.ndarray:
    if not path.is_file():
        raise DumpError(f"missing file: {path}")
    raw = path.read_bytes()
    expected = count * dtype.itemsize
    if len(raw) != expected:
        raise DumpError(
            f"{path.name}: expected {expected} bytes ({count} x {dtype.itemsize}), got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype).copy()


def load_dump(path: str | Path) -> FeatureDump:
    """Read and validate a dump directory."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DumpError(f"missing file: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    for key in ("split", "n", "k", "layers", "dtype", "endianness"):
        if key not in manifest:
            raise DumpError(f"manifest missing field {key!r}")
    if manifest["dtype"] != "f32" or manifest["endianness"] != "little":
        raise DumpError(
            f"unsupported dump encoding: dtype={manifest['dtype']!r}, "
            f"endianness={manifest['endianness']!r}"
        )
    n, k = int(manifest["n"]), int(manifest["k"])

    softmax = _read_flat(root / "softmax.f32", _F32, n * k).astype(np.float64).reshape(n, k)
    labels = _read_flat(root / "labels.i32", _I32, n).astype(np.int64)
    predictions = _read_flat(root / "predictions.i32", _I32, n).astype(np.int64)

    layers = []
    for entry in manifest["layers"]:
        idx = int(entry["index"])
        shape = tuple(int(d) for d in entry["shape"])
        if len(shape) not in (2, 4):
            raise DumpError(f"layer {idx}: manifest shape {shape} must have 2 or 4 dims")
        if shape[0] != n:
            raise DumpError(f"layer {idx}: manifest shape {shape} disagrees with n={n}")
        count = int(np.prod(shape))
        values = _read_flat(root / f"layer_{idx}.f32", _F32, count)
        layers.append(LayerTensor(idx, values.astype(np.float64).reshape(shape)))

    logits = None
    logits_path = root / "logits.f32"
    if logits_path.is_file():
        logits = _read_flat(logits_path, _F32, n * k).astype(np.float64).reshape(n, k)

    dump = FeatureDump(
        split=str(manifest["split"]),
        layers=layers,
        softmax=softmax,
        labels=labels,
        predictions=predictions,
        logits=logits,
    )
    dump.validate()
    return dump


def write_dump(dump: FeatureDump, path: str | Path) -> None:
    """Write a dump directory in the exact on-disk layout load_dump expects."""
    dump.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "split": dump.split,
        "n": dump.n,
        "k": dump.k,
        "layers": [{"index": t.index, "shape": list(t.values.shape)} for t in dump.layers],
        "dtype": "f32",
        "endianness": "little",
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    (root / "softmax.f32").write_bytes(np.ascontiguousarray(dump.softmax, dtype=_F32).tobytes())
    (root / "labels.i32").write_bytes(np.ascontiguousarray(dump.labels, dtype=_I32).tobytes())
    (root / "predictions.i32").write_bytes(
        np.ascontiguousarray(dump.predictions, dtype=_I32).tobytes()
    )
    for t in dump.layers:
        (root / f"layer_{t.index}.f32").write_bytes(
            np.ascontiguousarray(t.values, dtype=_F32).tobytes()
        )
    if dump.logits is not None:
        (root / "logits.f32").write_bytes(np.ascontiguousarray(dump.logits, dtype=_F32).tobytes())


def pool_channels(t: LayerTensor, mode: str) -> LayerTensor:
    """Collapse the channel axis of an (N, C, H, W) tensor to (N, H*W).

    Entry (i, h*W + w) is the max or mean over channels of (i, c, h, w);
    (N, D) tensors pass through unchanged.
    """
    if mode not in ("max", "avg"):
        raise ValueError(f"pooling mode must be 'max' or 'avg', got {mode!r}")
    if t.values.ndim == 2:
        return t
    n, _, h, w = t.values.shape
    pooled = t.values.max(axis=1) if mode == "max" else t.values.mean(axis=1)
    return LayerTensor(t.index, pooled.reshape(n, h * w))


@dataclass(frozen=True)
class CalibrationSample:
    """One (pooled features, confidence, layer, residual target) record.

    residual = correctness - confidence, the regression target; features are
    flattened row-major and zero-padded on the right to the run's common width.
    """

    features: np.ndarray
    confidence: float
    layer_index: int
    correctness: int
    residual: float


def build_samples(
    dump: FeatureDump, mode: str, layers: "list[int] | tuple[int, ...] | set[int]"
) -> list[CalibrationSample]:
    """Assemble calibration samples for the requested layer subset.

    Emits one sample per (layer, record) pair, grouped by layer in ascending
    index order. Features are pooled, flattened, and zero-padded to the
    maximum pooled width across the requested layers only.
    """
    wanted = sorted(set(int(l) for l in layers))
    if not wanted:
        raise ValueError("requested layer set is empty")
    available = set(dump.layer_indices)
    missing = [l for l in wanted if l not in available]
    if missing:
        raise ValueError(f"unknown layer index {missing[0]}; dump has {sorted(available)}")

    pooled = {l: pool_channels(dump.layer(l), mode) for l in wanted}
    width = max(t.values.shape[1] for t in pooled.values())

    confidence = dump.softmax.max(axis=1)
    correctness = (dump.labels == dump.predictions).astype(np.int64)

    samples = []
    for l in wanted:
        feats = pooled[l].values
        if feats.shape[1] < width:
            feats = np.pad(feats, ((0, 0), (0, width - feats.shape[1])))
        for i in range(dump.n):
            c = int(correctness[i])
            s = float(confidence[i])
            samples.append(
                CalibrationSample(
                    features=feats[i].copy(),
                    confidence=s,
                    layer_index=l,
                    correctness=c,
                    residual=c - s,
                )
            )
    return samples


@dataclass
class Standardizer:
    """Per-dimension affine map fitted on training features: x -> (x - mean) / scale.

    Zero-variance dimensions keep scale 1 so they are centered but not divided.
    The confidence input is never standardized; it has its own kernel.
    """

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        return cls(mean=mean, scale=scale)

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(mean=np.zeros(width), scale=np.ones(width))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(mean=np.asarray(d["mean"], dtype=float), scale=np.asarray(d["scale"], dtype=float))


def standardize_samples(
    samples: list[CalibrationSample], standardizer: Standardizer
) -> list[CalibrationSample]:
    """Apply a fitted standardizer to every sample's feature vector."""
    out = []
    for s in samples:
        out.append(
            CalibrationSample(
                features=standardizer.transform(s.features),
                confidence=s.confidence,
                layer_index=s.layer_index,
                correctness=s.correctness,
                residual=s.residual,
            )
        )
    return out
