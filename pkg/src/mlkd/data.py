"""Synthetic datasets, their container format, and split management.

Two generator families cover both loss paths at desk scale:

  * flat clusters: Gaussian class clusters in R^d, optionally pushed
    through a fixed random nonlinearity so class boundaries curve;
  * bar images: square grayscale images holding a class-dependent cross
    (two orthogonal oriented bars), which makes every class pattern
    invariant under the four right-angle rotations used for augmentation.

Datasets are stored as float32; training code promotes to float64.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, SpecError, SplitError

DATASET_MAGIC = b"MLKD"
DATASET_VERSION = 1


@dataclass
class GeneratorSpec:
    """Recipe for a synthetic dataset.

    ``kind`` is "flat" or "image".  Flat mode uses ``dim``; image mode uses
    ``image_size`` (square, single channel).  ``spread`` scales class-center
    separation, ``noise`` the within-class standard deviation, and ``warp``
    toggles the fixed random nonlinearity (flat mode only).
    """

    kind: str = "flat"
    classes: int = 10
    samples_per_class: int = 100
    dim: int = 20
    image_size: int = 16
    spread: float = 3.0
    noise: float = 1.0
    warp: bool = False
    warp_strength: float = 2.0
    modes_per_class: int = 1

    def validate(self) -> None:
        if self.kind not in ("flat", "image"):
            raise SpecError(f"kind must be 'flat' or 'image', got {self.kind!r}")
        if self.classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.classes}")
        if self.samples_per_class < 1:
            raise SpecError("samples_per_class must be positive")
        if self.kind == "flat" and self.dim < 1:
            raise SpecError("dim must be positive")
        if self.kind == "image" and self.image_size < 4:
            raise SpecError("image_size must be at least 4")
        if self.modes_per_class < 1:
            raise SpecError("modes_per_class must be positive")

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "classes": self.classes,
            "samples_per_class": self.samples_per_class, "dim": self.dim,
            "image_size": self.image_size, "spread": self.spread,
            "noise": self.noise, "warp": self.warp,
            "warp_strength": self.warp_strength,
        }

    @staticmethod
    def from_json(obj: dict) -> "GeneratorSpec":
        known = {f for f in GeneratorSpec.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise SpecError(f"unknown generator keys: {sorted(unknown)}")
        spec = GeneratorSpec(**obj)
        spec.validate()
        return spec


@dataclass
class Dataset:
    """Inputs plus optional labels; the unit every harness operation consumes."""

    inputs: np.ndarray            # float32, N x d or N x C x H x W
    labels: np.ndarray | None     # int labels in [0, K), or None
    class_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] < 1:
            raise SpecError("dataset must hold at least one sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise SpecError(
                    f"labels shape {self.labels.shape} does not match "
                    f"{self.inputs.shape[0]} samples")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise SpecError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_width(self) -> int:
        """Width of one flattened sample (what networks consume)."""
        return int(np.prod(self.inputs.shape[1:]))

    def flat_inputs(self) -> np.ndarray:
        """Samples as float64 rows, images flattened."""
        return self.inputs.reshape(len(self), -1).astype(np.float64)

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.inputs[indices], labels, self.class_count,
                       dict(self.metadata))


def _warp_inputs(x: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    d = x.shape[1]
    a = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    b = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    return x + strength * np.tanh(x @ a) @ b


def _render_cross(size: int, angle: float, offset: np.ndarray, width: float,
                  amplitude: float) -> np.ndarray:
    """A pair of orthogonal bars through (near) the center at ``angle``."""
    coords = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    yy = yy - offset[0]
    xx = xx - offset[1]
    # signed distances to the two bar axes
    d1 = xx * np.sin(angle) - yy * np.cos(angle)
    d2 = xx * np.cos(angle) + yy * np.sin(angle)
    bars = np.exp(-0.5 * (d1 / width) ** 2) + np.exp(-0.5 * (d2 / width) ** 2)
    return amplitude * bars


def generate_synthetic(spec: GeneratorSpec, seed: int) -> Dataset:
    """Deterministic synthetic dataset from a generator spec and seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    k, per = spec.classes, spec.samples_per_class
    labels = np.repeat(np.arange(k), per)

    if spec.kind == "flat":
        modes = spec.modes_per_class
        centers = rng.normal(0.0, spec.spread, size=(k, modes, spec.dim))
        mode_of = rng.integers(0, modes, size=k * per)
        x = centers[labels, mode_of] + rng.normal(0.0, spec.noise, size=(k * per, spec.dim))
        if spec.warp:
            x = _warp_inputs(x, rng, spec.warp_strength)
        inputs = x.astype(np.float32)
    else:
        size = spec.image_size
        # cross orientation identifies the class; right-angle rotations of a
        # cross map it onto itself, so augmentation never changes semantics.
        # modest amplitude keeps downstream feature magnitudes tame
        angles = (np.pi / 2.0) * (np.arange(k) + 0.5) / k
        images = np.empty((k * per, 1, size, size), dtype=np.float64)
        for idx, label in enumerate(labels):
            offset = rng.normal(0.0, 0.06 * size, size=2)
            amplitude = 0.3 * (1.0 + 0.2 * rng.standard_normal())
            width = size / 12.0
            img = _render_cross(size, angles[label], offset, width, amplitude)
            img += rng.normal(0.0, spec.noise * 0.03, size=(size, size))
            images[idx, 0] = img
        inputs = images.astype(np.float32)

    return Dataset(inputs, labels, k,
                   metadata={"generator": spec.to_json(), "seed": int(seed)})


# -- container format ----------------------------------------------------


def dataset_to_bytes(ds: Dataset) -> bytes:
    header = {
        "dtype": "f32",
        "shape": list(ds.inputs.shape),
        "labels_present": ds.labels is not None,
        "K": int(ds.class_count),
        "generator": ds.metadata.get("generator", {}),
        "seed": ds.metadata.get("seed"),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<H", DATASET_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes())
    if ds.labels is not None:
        if ds.labels.max(initial=0) >= 2 ** 16:
            raise FormatError("labels exceed u16 range")
        buf.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
    return buf.getvalue()


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < 10:
        raise FormatError("container truncated before header", offset=len(blob))
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    (version,) = struct.unpack("<H", blob[4:6])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    (header_len,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + header_len:
        raise FormatError("container truncated inside header", offset=len(blob))
    try:
        header = json.loads(blob[10:10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", offset=10) from exc
    if header.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}", offset=10)

    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape))
    labels_present = bool(header["labels_present"])
    offset = 10 + header_len
    expected = count * 4 + (shape[0] * 2 if labels_present else 0)
    if len(blob) - offset != expected:
        raise FormatError(
            f"payload size {len(blob) - offset} does not match header "
            f"(expected {expected})", offset=offset)

    inputs = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    inputs = inputs.reshape(shape).astype(np.float32)
    offset += count * 4
    labels = None
    if labels_present:
        labels = np.frombuffer(blob, dtype="<u2", count=shape[0], offset=offset)
        labels = labels.astype(np.int64)
    metadata = {"generator": header.get("generator", {}), "seed": header.get("seed")}
    return Dataset(inputs, labels, int(header["K"]), metadata)


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# -- splits ----------------------------------------------------------------


def split(ds: Dataset, fractions, seed: int) -> list[Dataset]:
    """Stratified, disjoint, exhaustive partition of a labeled dataset.

    Per-class counts follow the fractions with largest-remainder rounding,
    so proportions are honored within one sample.  A fraction that would
    leave any class empty in any part is an error.
    """
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"fractions must sum to 1, got {sum(fractions)}")
    if any(f <= 0 for f in fractions):
        raise ParameterError("every fraction must be positive")
    if len(fractions) == 1:
        return [ds.take(np.arange(len(ds)))]

    if ds.labels is None:
        strata = [np.arange(len(ds))]
    else:
        strata = [np.where(ds.labels == c)[0] for c in range(ds.class_count)]
        strata = [s for s in strata if s.size]

    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for class_indices in strata:
        n = class_indices.size
        ideal = np.array(fractions) * n
        counts = np.floor(ideal).astype(int)
        remainder = n - counts.sum()
        order = np.argsort(-(ideal - counts), kind="stable")
        counts[order[:remainder]] += 1
        if np.any(counts == 0):
            raise SplitError(
                f"fractions {fractions} leave a class empty in some part "
                f"(class size {n})")
        shuffled = class_indices[rng.permutation(n)]
        start = 0
        for part_idx, c in enumerate(counts):
            parts[part_idx].append(shuffled[start:start + c])
            start += c

    out = []
    for chunks in parts:
        indices = np.sort(np.concatenate(chunks))
        out.append(ds.take(indices))
    return out
