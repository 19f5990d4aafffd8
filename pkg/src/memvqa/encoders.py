"""Frozen per-frame feature encoders.

Three interchangeable kinds, all deterministic functions of (frame, spec):

* ``seeded_projection`` — average-pool the frame to a 32x32x3 grid, flatten,
  multiply by a seeded random D x 3072 matrix with Normal(0, 1/3072) entries.
  Training-free and linear, good enough to validate the pipeline.
* ``tiny_conv`` — three seeded stride-2 conv layers with ReLU, a 1x1
  projection to D and global average pooling. Slightly richer features.
* ``precomputed`` — a lookup table of externally produced embeddings, for
  wiring in features from a real pretrained network.

No gradients ever flow here: encoders return plain numpy arrays and own no
trainable state.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_io import read_tensor
from .patches import PatchRecord

GRID = 32
POOLED_LEN = GRID * GRID * 3

ENCODER_KINDS = ("seeded_projection", "tiny_conv", "precomputed")


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "seeded_projection"
    dim: int = 64
    seed: int = 1234
    table_path: str | None = None  # precomputed index CSV

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise EncoderError(f"unknown encoder kind {self.kind!r}")
        if self.dim < 1:
            raise EncoderError("encoder dim must be positive")


# Parameter caches keyed by spec; regenerating from the seed is cheap but not free.
_PROJ_CACHE: dict[tuple, np.ndarray] = {}
_CONV_CACHE: dict[tuple, list] = {}
_TABLE_CACHE: dict[tuple, "PrecomputedTable"] = {}


def _bin_edges(n: int, bins: int) -> np.ndarray:
    edges = (np.arange(bins) * n) // bins
    return edges.astype(np.intp)


def pool_to_grid(frame: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Average-pool [H,W,3] to [grid,grid,3]; any H,W >= 1 accepted."""
    f = frame.astype(np.float32, copy=False)
    h, w = f.shape[:2]
    re = _bin_edges(h, grid)
    ce = _bin_edges(w, grid)
    rc = np.diff(np.append(re, h)).clip(min=1).astype(np.float32)
    cc = np.diff(np.append(ce, w)).clip(min=1).astype(np.float32)
    pooled = np.add.reduceat(np.add.reduceat(f, re, axis=0), ce, axis=1)
    return pooled / (rc[:, None] * cc[None, :])[:, :, None]


def _projection_matrix(spec: EncoderSpec) -> np.ndarray:
    key = ("proj", spec.dim, spec.seed)
    if key not in _PROJ_CACHE:
        rng = np.random.default_rng(spec.seed)
        _PROJ_CACHE[key] = rng.normal(0.0, 1.0 / np.sqrt(POOLED_LEN),
                                      size=(spec.dim, POOLED_LEN)).astype(np.float32)
    return _PROJ_CACHE[key]


def _conv_params(spec: EncoderSpec) -> list:
    key = ("conv", spec.dim, spec.seed)
    if key not in _CONV_CACHE:
        rng = np.random.default_rng(spec.seed)
        channels = [3, 8, 16, 32]
        layers = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            fan_in = cin * 9
            layers.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                                     size=(cout, cin, 3, 3)).astype(np.float32))
        layers.append(rng.normal(0.0, 1.0 / np.sqrt(channels[-1]),
                                 size=(spec.dim, channels[-1])).astype(np.float32))
        _CONV_CACHE[key] = layers
    return _CONV_CACHE[key]


def _conv2d_stride2(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid 3x3 stride-2 convolution. x: [H,W,Cin], kernel: [Cout,Cin,3,3]."""
    h, w, cin = x.shape
    oh = (h - 3) // 2 + 1
    ow = (w - 3) // 2 + 1
    s0, s1, s2 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(oh, ow, 3, 3, cin), strides=(2 * s0, 2 * s1, s0, s1, s2))
    cols = windows.reshape(oh * ow, 9 * cin)
    kmat = kernel.transpose(2, 3, 1, 0).reshape(9 * cin, -1)
    return (cols @ kmat).reshape(oh, ow, -1)


def encode_frame(frame: np.ndarray, spec: EncoderSpec) -> np.ndarray:
    """Map one [H,W,3] frame (0..255) to a D-dim float32 embedding."""
    if spec.kind == "precomputed":
        raise EncoderError("precomputed encoder has no per-frame path; "
                           "use encode_patch with a loaded table")
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise EncoderError(f"expected [H,W,3] frame, got {frame.shape}")
    scaled = frame.astype(np.float32) / 255.0
    if spec.kind == "seeded_projection":
        pooled = pool_to_grid(scaled).reshape(-1)
        return _projection_matrix(spec) @ pooled
    # tiny_conv: fixed 64x64 working resolution keeps the cost frame-size independent
    x = pool_to_grid(scaled, grid=64)
    layers = _conv_params(spec)
    for kernel in layers[:-1]:
        x = np.maximum(_conv2d_stride2(x, kernel), 0.0)
    feats = x.reshape(-1, x.shape[2]).mean(axis=0)
    return (layers[-1] @ feats).astype(np.float32)


def encode_patch(patch: PatchRecord, spec: EncoderSpec) -> np.ndarray:
    """One embedding per frame, order preserved: [T, D] float32."""
    if spec.kind == "precomputed":
        table = load_precomputed(spec)
        return table.lookup_patch(patch.patch_id, patch.temporal_len)
    patch.validate_pixels()
    out = np.empty((patch.temporal_len, spec.dim), dtype=np.float32)
    for t in range(patch.temporal_len):
        out[t] = encode_frame(patch.pixels[t], spec)
    return out


def encode_frames_array(frames: np.ndarray, spec: EncoderSpec) -> np.ndarray:
    """Encode a [T,H,W,3] pixel array directly (videos, not patches)."""
    out = np.empty((frames.shape[0], spec.dim), dtype=np.float32)
    for t in range(frames.shape[0]):
        out[t] = encode_frame(frames[t], spec)
    return out


class PrecomputedTable:
    """(patch_id, frame_idx) -> embedding row, loaded from an index CSV.

    Index columns: patch_id, frame_idx, tensor_path, row. Tensor paths are
    resolved relative to the index file. Tensors are read lazily and cached.
    """

    def __init__(self, index_path: str | Path, dim: int):
        self.dim = dim
        self.base = Path(index_path).parent
        self.index: dict[tuple[str, int], tuple[str, int]] = {}
        self._tensors: dict[str, np.ndarray] = {}
        with open(index_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["patch_id", "frame_idx", "tensor_path", "row"]:
                raise EncoderError(f"{index_path}: bad index header {header}")
            for fields in reader:
                if len(fields) != 4:
                    raise EncoderError(f"{index_path}: malformed row {fields}")
                self.index[(fields[0], int(fields[1]))] = (fields[2], int(fields[3]))

    def _tensor(self, rel: str) -> np.ndarray:
        if rel not in self._tensors:
            arr = read_tensor(self.base / rel)
            if arr.ndim != 2 or arr.shape[1] != self.dim:
                raise EncoderError(
                    f"{rel}: embedding dim {arr.shape} incompatible with D={self.dim}")
            self._tensors[rel] = arr
        return self._tensors[rel]

    def lookup(self, patch_id: str, frame_idx: int) -> np.ndarray:
        key = (patch_id, frame_idx)
        if key not in self.index:
            raise EncoderError(f"no precomputed embedding for {key}")
        rel, row = self.index[key]
        return self._tensor(rel)[row]

    def lookup_patch(self, patch_id: str, temporal_len: int) -> np.ndarray:
        return np.stack([self.lookup(patch_id, t) for t in range(temporal_len)])


def load_precomputed(spec: EncoderSpec) -> PrecomputedTable:
    if spec.kind != "precomputed":
        raise EncoderError("spec is not a precomputed encoder")
    if not spec.table_path:
        raise EncoderError("precomputed encoder needs table_path")
    key = ("table", spec.table_path, spec.dim)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = PrecomputedTable(spec.table_path, spec.dim)
    return _TABLE_CACHE[key]


def fingerprint(spec: EncoderSpec) -> str:
    """Hash of the encoder's effective parameters; frozen-ness is checkable."""
    h = hashlib.sha256()
    h.update(repr((spec.kind, spec.dim, spec.seed)).encode())
    if spec.kind == "seeded_projection":
        h.update(_projection_matrix(spec).tobytes())
    elif spec.kind == "tiny_conv":
        for layer in _conv_params(spec):
            h.update(layer.tobytes())
    elif spec.table_path:
        h.update(Path(spec.table_path).read_bytes())
    return h.hexdigest()
