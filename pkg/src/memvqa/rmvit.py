"""Recurrent-memory vision transformer over frame embeddings.

A video is consumed as consecutive segments of N frame embeddings. Each
segment is processed by a small pre-norm ViT together with M memory tokens
prepended to it; the memory slots of the output become the memory input of
the next segment, threading state across the whole sequence. Any length
T >= N is accepted; a trailing partial segment is discarded.

The video-level embedding pools the final memory block together with the
processed frame embeddings of every segment (not just the last memory, which
is what the original recurrent-memory scheme would use). A cheaper pooling
variant over only the last two segments is available for inference.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, Tensor
from .tensor_io import read_tensor, write_tensor

POOLING_MODES = ("all", "last2")


@dataclass(frozen=True)
class RmvitConfig:
    """Desk-scale defaults; ``full_scale()`` is the heavyweight preset."""

    dim: int = 64
    mem_tokens: int = 4
    segment_len: int = 4
    depth: int = 2
    heads: int = 4
    ffn_mult: int = 2
    pooling: str = "all"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.mem_tokens < 1 or self.segment_len < 1:
            raise ValueError("mem_tokens and segment_len must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")

    @classmethod
    def full_scale(cls) -> "RmvitConfig":
        return cls(dim=2048, mem_tokens=12, segment_len=12, depth=8, heads=64,
                   ffn_mult=2)


@dataclass
class VideoEmbedding:
    """Pooled video representation plus the tensors the heads consume."""

    h_v: Tensor            # [D]
    mem_prev: Tensor       # [M,D], memory entering the last segment
    last_frames_out: Tensor  # [N,D], processed embeddings of the last segment
    segments: int
    frames_used: int       # segments * segment_len


POS_INIT_STD = 0.02


def init_params(cfg: RmvitConfig, seed: int = 0) -> dict[str, Tensor]:
    """Trainable parameters, keyed by dotted names.

    Initial memory starts at zero (it is a leaf parameter and drifts with
    training); weight matrices are Normal(0, 1/sqrt(fan_in)) so activations
    stay O(1) at any width; norms start as identity.
    """
    rng = np.random.default_rng(seed)
    d = cfg.dim
    hidden = d * cfg.ffn_mult

    def w(shape):
        std = 1.0 / np.sqrt(shape[0])
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    params: dict[str, Tensor] = {
        "mem_init": ad.parameter(np.zeros((cfg.mem_tokens, d), np.float32), "mem_init"),
        "pos": ad.parameter(rng.normal(0.0, POS_INIT_STD,
                                       size=(cfg.mem_tokens + cfg.segment_len, d))
                            .astype(np.float32), "pos"),
    }
    for i in range(cfg.depth):
        pre = f"blk{i}."
        params[pre + "ln1.g"] = ad.parameter(np.ones(d, np.float32), pre + "ln1.g")
        params[pre + "ln1.b"] = ad.parameter(np.zeros(d, np.float32), pre + "ln1.b")
        params[pre + "attn.wq"] = ad.parameter(w((d, d)), pre + "attn.wq")
        params[pre + "attn.bq"] = ad.parameter(np.zeros(d, np.float32), pre + "attn.bq")
        params[pre + "attn.wk"] = ad.parameter(w((d, d)), pre + "attn.wk")
        params[pre + "attn.wv"] = ad.parameter(w((d, d)), pre + "attn.wv")
        params[pre + "attn.bv"] = ad.parameter(np.zeros(d, np.float32), pre + "attn.bv")
        params[pre + "attn.wo"] = ad.parameter(w((d, d)), pre + "attn.wo")
        params[pre + "attn.bo"] = ad.parameter(np.zeros(d, np.float32), pre + "attn.bo")
        params[pre + "ln2.g"] = ad.parameter(np.ones(d, np.float32), pre + "ln2.g")
        params[pre + "ln2.b"] = ad.parameter(np.zeros(d, np.float32), pre + "ln2.b")
        params[pre + "ffn.w1"] = ad.parameter(w((d, hidden)), pre + "ffn.w1")
        params[pre + "ffn.b1"] = ad.parameter(np.zeros(hidden, np.float32), pre + "ffn.b1")
        params[pre + "ffn.w2"] = ad.parameter(w((hidden, d)), pre + "ffn.w2")
        params[pre + "ffn.b2"] = ad.parameter(np.zeros(d, np.float32), pre + "ffn.b2")
    return params


def init_memory(cfg: RmvitConfig, params: dict[str, Tensor]) -> Tensor:
    """The trainable initial memory block [M,D]."""
    mem = params["mem_init"]
    if mem.shape != (cfg.mem_tokens, cfg.dim):
        raise ValueError(f"mem_init shape {mem.shape} does not match config")
    return mem


def _attn_params(params: dict[str, Tensor], i: int) -> AttentionParams:
    pre = f"blk{i}.attn."
    return AttentionParams(
        wq=params[pre + "wq"], bq=params[pre + "bq"], wk=params[pre + "wk"],
        wv=params[pre + "wv"], bv=params[pre + "bv"], wo=params[pre + "wo"],
        bo=params[pre + "bo"])


def _block(x: Tensor, cfg: RmvitConfig, params: dict[str, Tensor], i: int) -> Tensor:
    pre = f"blk{i}."
    normed = ad.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
    x = ad.add(x, ad.multi_head_attention(normed, _attn_params(params, i), cfg.heads))
    normed = ad.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
    h = ad.gelu(ad.linear(normed, params[pre + "ffn.w1"], params[pre + "ffn.b1"]))
    return ad.add(x, ad.linear(h, params[pre + "ffn.w2"], params[pre + "ffn.b2"]))


def process_segment(mem: Tensor, frames: Tensor, cfg: RmvitConfig,
                    params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One recurrent iteration: [mem | frames] through the ViT, split back out."""
    if frames.shape != (cfg.segment_len, cfg.dim):
        raise ValueError(
            f"segment must be [{cfg.segment_len},{cfg.dim}], got {frames.shape}")
    if mem.shape != (cfg.mem_tokens, cfg.dim):
        raise ValueError(f"memory must be [{cfg.mem_tokens},{cfg.dim}], got {mem.shape}")
    tokens = ad.add(ad.concat_rows([mem, frames]), params["pos"])
    for i in range(cfg.depth):
        tokens = _block(tokens, cfg, params, i)
    m = cfg.mem_tokens
    return ad.slice_rows(tokens, 0, m), ad.slice_rows(tokens, m, m + cfg.segment_len)


def forward_video(frames, cfg: RmvitConfig, params: dict[str, Tensor],
                  pooling: str | None = None) -> VideoEmbedding:
    """Thread memory across S = floor(T/N) segments and pool.

    ``frames`` is a [T,D] array or Tensor of frame embeddings, T >= N.
    Trailing frames beyond S*N are discarded, so the result is bit-identical
    to running on the truncated prefix.
    """
    if not isinstance(frames, Tensor):
        frames = Tensor(frames)
    t_total = frames.shape[0]
    n = cfg.segment_len
    if t_total < n:
        raise ValueError(f"need at least one segment of {n} frames, got {t_total}")
    pooling = pooling or cfg.pooling
    if pooling not in POOLING_MODES:
        raise ValueError(f"pooling must be one of {POOLING_MODES}")

    segments = t_total // n
    mem = init_memory(cfg, params)
    mem_prev = mem
    blocks: list[Tensor] = []
    for s in range(segments):
        mem_prev = mem
        seg = ad.slice_rows(frames, s * n, (s + 1) * n)
        mem, out = process_segment(mem, seg, cfg, params)
        blocks.append(out)

    pooled_blocks = blocks if pooling == "all" else blocks[-2:]
    h_v = ad.mean_rows(ad.concat_rows([mem] + pooled_blocks))
    return VideoEmbedding(h_v=h_v, mem_prev=mem_prev, last_frames_out=blocks[-1],
                          segments=segments, frames_used=segments * n)


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# Checkpoints: directory of RMTT tensors plus JSON metadata
# ---------------------------------------------------------------------------


def save_checkpoint(directory: str | Path, cfg: RmvitConfig,
                    params: dict[str, Tensor], extra: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    name_map = {}
    for name, tensor in params.items():
        rel = f"params/{name}.rmtt"
        write_tensor(directory / rel, tensor.data)
        name_map[name] = rel
    meta = {"config": asdict(cfg), "params": name_map}
    if extra:
        meta.update(extra)
    with open(directory / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory: str | Path) -> tuple[RmvitConfig, dict[str, Tensor], dict]:
    directory = Path(directory)
    with open(directory / "metadata.json") as fh:
        meta = json.load(fh)
    cfg = RmvitConfig(**meta["config"])
    params = {}
    for name, rel in meta["params"].items():
        params[name] = ad.parameter(read_tensor(directory / rel), name)
    return cfg, params, meta
