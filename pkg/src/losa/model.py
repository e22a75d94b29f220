"""Layer stacks, dense forward pass with feature capture, and checkpoint I/O.

Checkpoint container layout (all integers little-endian)::

    b"LOSACKPT"                      8-byte magic
    u32                              manifest length in bytes
    manifest                         UTF-8 JSON
    blobs                            raw little-endian f32 tensors

The manifest is ``{"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}``
plus a ``"layers"`` list of layer names and an optional ``"meta"`` object.
Offsets are relative to the first blob byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from losa.errors import CheckpointError, ShapeError
from losa.linalg import as_matrix, derive_seed, gaussian_fill, make_rng, matmul

MAGIC = b"LOSACKPT"
ACTIVATIONS = ("relu", "identity")


@dataclass
class LayerStack:
    weights: list
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = [as_matrix(w) for w in self.weights]
        if not self.weights:
            raise ShapeError("a layer stack needs at least one layer")
        if not self.names:
            self.names = [f"layer{i}" for i in range(len(self.weights))]
        if len(self.names) != len(self.weights):
            raise ShapeError("one name per layer required")
        for i in range(len(self.weights) - 1):
            out_i = self.weights[i].shape[0]
            in_next = self.weights[i + 1].shape[1]
            if out_i != in_next:
                raise ShapeError(
                    f"layer {i} outputs {out_i} features but layer {i + 1} expects {in_next}"
                )

    def __len__(self):
        return len(self.weights)

    @property
    def dims(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def rank_caps(self) -> list:
        return [min(w.shape) for w in self.weights]


@dataclass
class FeatureMaps:
    """Per-layer inputs X_i and outputs Y_i, each samples x features."""

    inputs: list
    outputs: list

    @property
    def samples(self) -> int:
        return self.inputs[0].shape[0]

    def check(self):
        counts = {m.shape[0] for m in self.inputs + self.outputs}
        if len(counts) != 1:
            raise ShapeError(f"feature maps disagree on sample count: {sorted(counts)}")


@dataclass
class CalibBatch:
    inputs: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs)
        if self.inputs.shape[0] < 2:
            raise ShapeError("calibration batch needs at least 2 samples")


def activate(y: np.ndarray, activation: str = "relu") -> np.ndarray:
    if activation == "relu":
        return np.maximum(y, 0.0)
    if activation == "identity":
        return y
    raise ValueError(f"unknown activation {activation!r}; choose from {ACTIVATIONS}")


def forward_capture(stack: LayerStack, batch: CalibBatch, activation: str = "relu") -> FeatureMaps:
    return capture_weights(stack.weights, batch.inputs, activation)


def capture_weights(weights: Sequence[np.ndarray], x: np.ndarray, activation: str = "relu") -> FeatureMaps:
    if x.shape[1] != weights[0].shape[1]:
        raise ShapeError(
            f"batch width {x.shape[1]} does not match layer 0 input width {weights[0].shape[1]}"
        )
    inputs, outputs = [], []
    for w in weights:
        inputs.append(x)
        y = matmul(x, w.T)
        outputs.append(y)
        x = activate(y, activation)
    return FeatureMaps(inputs, outputs)


def forward(weights: Sequence[np.ndarray], x: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Final-layer output (no activation after the last layer)."""
    return capture_weights(weights, x, activation).outputs[-1]


def make_synthetic(n_layers: int, dims: Sequence[int], seed: int, sigma: Optional[float] = None) -> LayerStack:
    """Gaussian stack with ``len(dims) == n_layers + 1``; layer i maps dims[i] -> dims[i+1].

    ``sigma=None`` scales each layer by ``sqrt(2 / fan_in)`` (He init).
    """
    dims = list(dims)
    if len(dims) != n_layers + 1 or n_layers < 1:
        raise ShapeError(f"{n_layers} layers need {n_layers + 1} dims, got {dims}")
    rng = make_rng(derive_seed(seed, "model"))
    weights = []
    for c_in, c_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(2.0 / c_in) if sigma is None else sigma
        weights.append(gaussian_fill(rng, c_out, c_in, s))
    return LayerStack(weights)


def make_calib(samples: int, width: int, seed: int) -> CalibBatch:
    rng = make_rng(derive_seed(seed, "calib"))
    return CalibBatch(gaussian_fill(rng, samples, width, 1.0), source=f"synthetic:seed={seed}")


def load_calib(path) -> CalibBatch:
    """Read a samples x features matrix from ``.npy`` or comma-separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        data = np.load(path)
    else:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    return CalibBatch(data, source=str(path))


@dataclass
class Checkpoint:
    stack: LayerStack
    adapters: Optional[list] = None
    masks: Optional[list] = None
    meta: dict = field(default_factory=dict)


def _tensor_list(stack, adapters, masks):
    tensors = []
    for i, w in enumerate(stack.weights):
        tensors.append((f"layer{i}.W", w))
        if adapters is not None:
            tensors.append((f"layer{i}.B", adapters[i].b))
            tensors.append((f"layer{i}.A", adapters[i].a))
        if masks is not None:
            tensors.append((f"layer{i}.mask", masks[i].bits.astype(np.float64)))
    return tensors


def encode_checkpoint(stack: LayerStack, adapters=None, masks=None, meta=None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in _tensor_list(stack, adapters, masks):
        blob = np.ascontiguousarray(t, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "dtype": "f32", "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {"tensors": entries, "layers": list(stack.names)}
    if meta:
        manifest["meta"] = meta
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def save_checkpoint(path, stack: LayerStack, adapters=None, masks=None, meta=None) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(stack, adapters, masks, meta))
    return path


def decode_checkpoint(raw: bytes) -> Checkpoint:
    from losa.adapters import Adapter
    from losa.masks import Mask

    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (mlen,) = struct.unpack("<I", raw[8:12])
    if 12 + mlen > len(raw):
        raise CheckpointError(f"manifest length {mlen} runs past end of file ({len(raw)} bytes)")
    try:
        manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
        entries = manifest["tensors"]
        names = manifest["layers"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    blob = raw[12 + mlen :]

    tensors = {}
    for e in entries:
        shape = tuple(e["shape"])
        if e.get("dtype") != "f32":
            raise CheckpointError(f"{e['name']}: unsupported dtype {e.get('dtype')!r}")
        expect = 4 * int(np.prod(shape, dtype=np.int64))
        if e["nbytes"] != expect:
            raise CheckpointError(f"{e['name']}: nbytes {e['nbytes']} does not match shape {list(shape)}")
        end = e["offset"] + e["nbytes"]
        if e["offset"] < 0 or end > len(blob):
            raise CheckpointError(
                f"{e['name']}: blob truncated (needs bytes up to {end}, have {len(blob)})"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=expect // 4, offset=e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(shape)

    n = len(names)
    try:
        weights = [tensors[f"layer{i}.W"] for i in range(n)]
    except KeyError as exc:
        raise CheckpointError(f"missing weight tensor {exc}") from exc
    try:
        stack = LayerStack(weights, list(names))
    except ShapeError as exc:
        raise CheckpointError(f"inconsistent layer shapes: {exc}") from exc

    adapters = masks = None
    if "layer0.B" in tensors:
        adapters = []
        for i, w in enumerate(weights):
            b, a = tensors.get(f"layer{i}.B"), tensors.get(f"layer{i}.A")
            if b is None or a is None:
                raise CheckpointError(f"layer {i}: adapter tensors incomplete")
            if b.shape[0] != w.shape[0] or a.shape[1] != w.shape[1] or b.shape[1] != a.shape[0]:
                raise CheckpointError(f"layer {i}: adapter shapes {b.shape}, {a.shape} do not fit weight {w.shape}")
            adapters.append(Adapter(b, a))
    if "layer0.mask" in tensors:
        masks = []
        for i, w in enumerate(weights):
            bits = tensors.get(f"layer{i}.mask")
            if bits is None or bits.shape != w.shape:
                raise CheckpointError(f"layer {i}: mask missing or misshapen")
            if not np.all((bits == 0.0) | (bits == 1.0)):
                raise CheckpointError(f"layer {i}: mask is not binary")
            masks.append(Mask(bits == 1.0))
    return Checkpoint(stack, adapters, masks, manifest.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
