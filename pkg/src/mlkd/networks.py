"""Feature extractors, classification projections, and transform heads.

Networks here are small multilayer perceptrons: a stack of affine+ReLU
blocks whose final affine layer (the feature layer) has no activation,
optionally followed by an affine projection onto class logits.  Image
inputs are flattened at the door; the losses only ever see the final
feature vector, so nothing about them depends on input topology.

The student-to-teacher transform is a two-layer perceptron whose hidden
width is a multiplier times the teacher's feature width; the default
multiplier of 16 gives the spindle shape that aligns best in practice.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, FormatError, ParameterError, ShapeError, SpecError
from .tensor import Tensor, matmul, add, relu, parameter

CHECKPOINT_MAGIC = b"MLKD"
CHECKPOINT_VERSION = 1


@dataclass
class ArchSpec:
    """Widths of an MLP: input, affine layer outputs (last = feature), classes.

    ``widths[-1]`` is the feature dimension; ``classes`` may be None for a
    feature-only network (e.g. a teacher pretrained without labels).
    """

    input_dim: int
    widths: list[int]
    classes: int | None = None

    def validate(self) -> None:
        if not self.widths:
            raise SpecError("architecture needs at least one layer width")
        if self.input_dim < 1 or any(w < 1 for w in self.widths):
            raise SpecError(f"layer widths must be positive: in={self.input_dim}, widths={self.widths}")
        if self.classes is not None and self.classes < 2:
            raise SpecError(f"class count must be at least 2, got {self.classes}")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def to_json(self) -> dict:
        return {"input_dim": self.input_dim, "widths": list(self.widths),
                "classes": self.classes}

    @staticmethod
    def from_json(obj: dict) -> "ArchSpec":
        spec = ArchSpec(input_dim=int(obj["input_dim"]),
                        widths=[int(w) for w in obj["widths"]],
                        classes=None if obj.get("classes") is None else int(obj["classes"]))
        spec.validate()
        return spec


def _xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Network:
    """An MLP feature extractor with an optional class projection.

    Parameters are leaf tensors; set ``trainable`` False for a frozen
    teacher so its forward passes build no gradient graph at all.
    """

    def __init__(self, spec: ArchSpec, weights: list[np.ndarray], biases: list[np.ndarray],
                 projection: tuple[np.ndarray, np.ndarray] | None, trainable: bool = True):
        spec.validate()
        self.spec = spec
        self.layers = [(parameter(w), parameter(b)) for w, b in zip(weights, biases)]
        self.projection = None
        if projection is not None:
            self.projection = (parameter(projection[0]), parameter(projection[1]))
        self.set_trainable(trainable)

    def set_trainable(self, trainable: bool) -> None:
        for w, b in self.layers:
            w.requires_grad = trainable
            b.requires_grad = trainable
        if self.projection is not None:
            self.projection[0].requires_grad = trainable
            self.projection[1].requires_grad = trainable

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    @property
    def has_projection(self) -> bool:
        return self.projection is not None

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        if self.projection is not None:
            out.extend(self.projection)
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"layer{i}.W", w))
            out.append((f"layer{i}.b", b))
        if self.projection is not None:
            out.append(("projection.W", self.projection[0]))
            out.append(("projection.b", self.projection[1]))
        return out


def init_network(spec: ArchSpec, seed: int) -> Network:
    """Xavier-uniform weights, zero biases, deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = spec.input_dim
    for width in spec.widths:
        weights.append(_xavier_uniform(rng, fan_in, width))
        biases.append(np.zeros(width))
        fan_in = width
    projection = None
    if spec.classes is not None:
        projection = (_xavier_uniform(rng, spec.feature_dim, spec.classes),
                      np.zeros(spec.classes))
    return Network(spec, weights, biases, projection)


def forward_features(net: Network, batch) -> Tensor:
    """Last-layer representation of a batch, before any class projection."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise ShapeError(
            f"batch shape {x.shape} does not match declared input "
            f"(N x {net.spec.input_dim})"
        )
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        x = add(matmul(x, w), b)
        if i != last:
            x = relu(x)
    return x


def forward_logits(net: Network, z: Tensor) -> Tensor:
    """Class logits from features: z W + bias."""
    if net.projection is None:
        raise CapabilityError("network has no class projection (feature-only)")
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.ndim != 2 or z.shape[1] != net.feature_dim:
        raise ShapeError(
            f"feature shape {z.shape} does not match projection input "
            f"(N x {net.feature_dim})"
        )
    w, b = net.projection
    return add(matmul(z, w), b)


class TransformHead:
    """Two affine layers with one ReLU: maps student features to teacher width."""

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray):
        self.w1, self.b1 = parameter(w1), parameter(b1)
        self.w2, self.b2 = parameter(w2), parameter(b2)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[1]

    def forward(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.input_dim:
            raise ShapeError(
                f"head input shape {z.shape} does not match (N x {self.input_dim})"
            )
        return add(matmul(relu(add(matmul(z, self.w1), self.b1)), self.w2), self.b2)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("head.W1", self.w1), ("head.b1", self.b1),
                ("head.W2", self.w2), ("head.b2", self.b2)]


class LinearHead:
    """A single affine map, used where only linear projections are wanted."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w, self.b = parameter(w), parameter(b)

    def forward(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.w.shape[0]:
            raise ShapeError(
                f"projection input shape {z.shape} does not match (N x {self.w.shape[0]})"
            )
        return add(matmul(z, self.w), self.b)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("proj.W", self.w), ("proj.b", self.b)]


def make_transform_head(student_dim: int, teacher_dim: int,
                        multiplier: float = 16.0, seed: int = 0) -> TransformHead:
    """Spindle-shaped head: hidden width is round(multiplier * teacher_dim)."""
    if student_dim < 1 or teacher_dim < 1:
        raise ParameterError(f"dims must be >= 1, got {student_dim}, {teacher_dim}")
    if multiplier <= 0:
        raise ParameterError(f"multiplier must be > 0, got {multiplier}")
    hidden = max(1, int(round(multiplier * teacher_dim)))
    rng = np.random.default_rng(seed)
    return TransformHead(
        _xavier_uniform(rng, student_dim, hidden), np.zeros(hidden),
        _xavier_uniform(rng, hidden, teacher_dim), np.zeros(teacher_dim),
    )


def make_linear_head(in_dim: int, out_dim: int, seed: int = 0) -> LinearHead:
    if in_dim < 1 or out_dim < 1:
        raise ParameterError(f"dims must be >= 1, got {in_dim}, {out_dim}")
    rng = np.random.default_rng(seed)
    return LinearHead(_xavier_uniform(rng, in_dim, out_dim), np.zeros(out_dim))


# -- checkpoints ---------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to reconstruct a trained network bit-exactly."""

    arch: ArchSpec
    params: list[tuple[str, np.ndarray]]
    seed: int
    epochs: int
    extra: dict = field(default_factory=dict)

    @staticmethod
    def from_network(net: Network, seed: int, epochs: int, extra: dict | None = None,
                     head: "TransformHead | None" = None) -> "Checkpoint":
        params = [(name, t.data.copy()) for name, t in net.named_parameters()]
        if head is not None:
            params.extend((name, t.data.copy()) for name, t in head.named_parameters())
        return Checkpoint(arch=net.spec, params=params, seed=seed, epochs=epochs,
                          extra=dict(extra or {}))

    def to_network(self, trainable: bool = True) -> Network:
        by_name = dict(self.params)
        weights, biases = [], []
        for i in range(len(self.arch.widths)):
            weights.append(by_name[f"layer{i}.W"].copy())
            biases.append(by_name[f"layer{i}.b"].copy())
        projection = None
        if self.arch.classes is not None:
            projection = (by_name["projection.W"].copy(), by_name["projection.b"].copy())
        return Network(self.arch, weights, biases, projection, trainable=trainable)

    def to_transform_head(self) -> "TransformHead | None":
        """The stored transform head, when one was checkpointed with the network."""
        by_name = dict(self.params)
        if "head.W1" not in by_name:
            return None
        return TransformHead(by_name["head.W1"].copy(), by_name["head.b1"].copy(),
                             by_name["head.W2"].copy(), by_name["head.b2"].copy())

    def to_bytes(self) -> bytes:
        descriptor = {
            "arch": self.arch.to_json(),
            "seed": self.seed,
            "epochs": self.epochs,
            "extra": self.extra,
            "params": [{"name": n, "shape": list(a.shape)} for n, a in self.params],
        }
        header = json.dumps(descriptor, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<H", CHECKPOINT_VERSION))
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        for _, arr in self.params:
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @staticmethod
    def from_bytes(blob: bytes) -> "Checkpoint":
        if len(blob) < 10:
            raise FormatError("checkpoint truncated before header", offset=len(blob))
        if blob[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
        (version,) = struct.unpack("<H", blob[4:6])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        (header_len,) = struct.unpack("<I", blob[6:10])
        if len(blob) < 10 + header_len:
            raise FormatError("checkpoint truncated inside descriptor", offset=len(blob))
        try:
            descriptor = json.loads(blob[10:10 + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"descriptor is not valid JSON: {exc}", offset=10) from exc
        arch = ArchSpec.from_json(descriptor["arch"])
        offset = 10 + header_len
        expected = sum(int(np.prod(p["shape"])) for p in descriptor["params"]) * 8
        if len(blob) - offset != expected:
            raise FormatError(
                f"payload size {len(blob) - offset} does not match descriptor "
                f"(expected {expected})", offset=offset)
        params = []
        for entry in descriptor["params"]:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            params.append((entry["name"], arr.reshape(shape).astype(np.float64)))
            offset += count * 8
        return Checkpoint(arch=arch, params=params, seed=int(descriptor["seed"]),
                          epochs=int(descriptor["epochs"]),
                          extra=dict(descriptor.get("extra", {})))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def load(path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return Checkpoint.from_bytes(fh.read())
