"""Contrastive training loop: batches, SGD with warmup+cosine, checkpoints.

The spatial encoder is frozen, so every patch is encoded exactly once up
front and the loop runs entirely on cached [T,D] embedding sequences. One
optimizer step consumes one 2B batch (B full patches plus their down twins).
Resume is exact: parameters, momentum buffers, counters and the RNG state
round-trip through the checkpoint, so an interrupted run continues on the
same trajectory.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import heads as hd
from . import rmvit as rm
from .autodiff import Tensor
from .encoders import EncoderSpec, encode_patch, fingerprint
from .heads import BatchAnnotations, BatchItem, HeadParams
from .patches import (Manifest, REFERENCE_TAG, RESOLUTION_DOWN, RESOLUTION_FULL,
                      load_patch_pixels)
from .scoring import PairingConfig
from .tensor_io import read_tensor, write_tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8          # B; the batch itself holds 2B items
    epochs: int = 30
    base_lr: float = 2.5e-4
    warmup_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    lambda1: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0,1)")


def lr_at(epoch_frac: float, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at the last epoch."""
    if epoch_frac < 0 or epoch_frac > cfg.epochs:
        raise ValueError(f"epoch_frac {epoch_frac} outside [0, {cfg.epochs}]")
    w = cfg.warmup_epochs
    if epoch_frac < w:
        return cfg.base_lr * epoch_frac / w
    span = cfg.epochs - w
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch_frac - w) / span))


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------


@dataclass
class Model:
    cfg: rm.RmvitConfig
    rmvit_params: dict[str, Tensor]
    head_params: HeadParams

    def parameters(self) -> dict[str, Tensor]:
        merged = {f"rmvit.{k}": v for k, v in self.rmvit_params.items()}
        merged.update(self.head_params.named())
        return merged


def build_model(cfg: rm.RmvitConfig, seed: int = 0) -> Model:
    return Model(cfg=cfg, rmvit_params=rm.init_params(cfg, seed=seed),
                 head_params=hd.init_head_params(cfg.dim, seed=seed + 1))


def model_from_named(cfg: rm.RmvitConfig, named: dict[str, Tensor]) -> Model:
    rmvit_params = {}
    head_kwargs = {}
    for key, tensor in named.items():
        if key.startswith("rmvit."):
            rmvit_params[key[len("rmvit."):]] = tensor
        elif key.startswith("heads."):
            head_kwargs[key[len("heads."):]] = tensor
        else:
            raise ValueError(f"unknown parameter namespace in {key!r}")
    return Model(cfg=cfg, rmvit_params=rmvit_params, head_params=HeadParams(**head_kwargs))


# ---------------------------------------------------------------------------
# Embedding cache and batches
# ---------------------------------------------------------------------------


def encode_manifest(manifest: Manifest, spec: EncoderSpec,
                    cache_dir: str | Path | None = None) -> dict[str, np.ndarray]:
    """Encode every enhanced patch (full and down) once. Reference rows skipped.

    With a cache_dir, embeddings are persisted as RMTT files keyed by patch id
    and reused on later calls as long as the encoder fingerprint matches.
    """
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
        stamp = cache / "encoder.json"
        fp = fingerprint(spec)
        if stamp.exists():
            if json.loads(stamp.read_text()).get("fingerprint") != fp:
                raise ValueError(f"cache {cache} was built by a different encoder")
        else:
            stamp.write_text(json.dumps({"fingerprint": fp}))

    store: dict[str, np.ndarray] = {}
    for row in manifest.rows:
        if row.enhancement_tag == REFERENCE_TAG:
            continue
        if cache and (cache / f"{row.patch_id}.rmtt").exists():
            store[row.patch_id] = read_tensor(cache / f"{row.patch_id}.rmtt")
            continue
        rec = replace(row, pixels=load_patch_pixels(row.path))
        emb = encode_patch(rec, spec)
        store[row.patch_id] = emb
        if cache:
            write_tensor(cache / f"{row.patch_id}.rmtt", emb)
    return store


def build_batch(manifest: Manifest, batch_size: int, rng: np.random.Generator,
                store: dict[str, np.ndarray]) -> tuple[BatchAnnotations, list[np.ndarray]]:
    """Sample B labeled full patches and collect their down twins.

    Returns annotations (2B items, full block first) and the matching list of
    [T,D] embedding sequences.
    """
    fulls = [r for r in manifest.rows
             if r.resolution_tag == RESOLUTION_FULL and r.enhancement_tag != REFERENCE_TAG]
    downs = {r.reference_link: r for r in manifest.rows
             if r.resolution_tag == RESOLUTION_DOWN}
    if len(fulls) < batch_size:
        raise ValueError(f"need at least {batch_size} full patches, have {len(fulls)}")
    chosen = [fulls[i] for i in rng.choice(len(fulls), size=batch_size, replace=False)]

    items: list[BatchItem] = []
    seqs: list[np.ndarray] = []
    down_rows = []
    for i, row in enumerate(chosen):
        if row.proxy_score is None:
            raise ValueError(f"{row.patch_id}: manifest is not labeled")
        down = downs.get(row.patch_id)
        if down is None:
            raise ValueError(f"{row.patch_id}: no down-sampled twin in manifest")
        items.append(BatchItem(row.patch_id, row.source_id, row.proxy_score,
                               RESOLUTION_FULL, counterpart=batch_size + i))
        seqs.append(store[row.patch_id])
        down_rows.append(down)
    for i, down in enumerate(down_rows):
        score = down.proxy_score if down.proxy_score is not None else chosen[i].proxy_score
        items.append(BatchItem(down.patch_id, down.source_id, score,
                               RESOLUTION_DOWN, counterpart=i))
        seqs.append(store[down.patch_id])
    metric = manifest.meta.get("metric_name", "psnr")
    return BatchAnnotations(items=items, metric_name=metric), seqs


# ---------------------------------------------------------------------------
# Forward and optimization
# ---------------------------------------------------------------------------


def forward_batch(model: Model, ann: BatchAnnotations, seqs: list[np.ndarray],
                  pairing: PairingConfig, tau: float, lambda1: float):
    """Run the full loss graph for one batch.

    Returns (total, quality_terms, content_terms).
    """
    b = ann.b
    embeds = [rm.forward_video(seq, model.cfg, model.rmvit_params) for seq in seqs]

    h_v = ad.concat_rows([ad.reshape_row(e.h_v) for e in embeds])          # [2B,D]
    z = hd.project(h_v, model.head_params)                                  # [2B,128]

    h_c = ad.concat_rows([ad.reshape_row(hd.content_embedding(e.last_frames_out))
                          for e in embeds[:b]])                             # [B,D]
    h_c_hat = ad.concat_rows([ad.reshape_row(hd.predict_content(e.mem_prev,
                                                                model.head_params))
                              for e in embeds[:b]])
    c = hd.project(h_c, model.head_params)
    c_hat = hd.project(h_c_hat, model.head_params)

    lq = hd.quality_loss(z, hd.quality_positive_sets(ann, pairing), tau)
    lc = hd.content_loss(c, c_hat, hd.content_positive_sets(ann), tau)
    return hd.total_loss(lq, lc, lambda1), lq, lc


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_loss: float = math.inf
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def sgd_step(params: dict[str, Tensor], state: TrainState, lr: float,
             cfg: TrainConfig) -> None:
    for name, p in params.items():
        if p.grad is None:
            continue
        grad = p.grad
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * p.data
        buf = state.momentum.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = cfg.momentum * buf + grad
        state.momentum[name] = buf
        p.data = p.data - np.float32(lr) * buf
        p.grad = None


def train_step(state: TrainState, ann: BatchAnnotations, seqs: list[np.ndarray],
               model: Model, cfg: TrainConfig, pairing: PairingConfig,
               epoch_frac: float, dump_path: str | Path | None = None) -> float:
    """One forward/backward/update; returns the scalar loss."""
    params = model.parameters()
    try:
        loss, _, _ = forward_batch(model, ann, seqs, pairing, cfg.tau, cfg.lambda1)
    except ad.NonFiniteError as exc:
        _dump_divergence(dump_path, state, ann, model, str(exc))
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {exc}") from exc
    value = loss.item()
    loss.backward()
    sgd_step(params, state, lr_at(epoch_frac, cfg), cfg)
    state.step += 1
    state.best_loss = min(state.best_loss, value)
    return value


def _dump_divergence(dump_path, state, ann, model, reason):
    if dump_path is None:
        return
    info = {
        "reason": reason, "step": state.step, "epoch": state.epoch,
        "batch": [it.patch_id for it in ann.items],
        "param_norms": {k: float(np.linalg.norm(v.data))
                        for k, v in model.parameters().items()},
    }
    Path(dump_path).write_text(json.dumps(info, indent=2))


# ---------------------------------------------------------------------------
# The fit loop
# ---------------------------------------------------------------------------


CURVE_COLUMNS = ["step", "epoch", "lr", "loss"]


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(st: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = st
    return rng


def save_train_state(directory: Path, model: Model, state: TrainState,
                     cfg: TrainConfig, encoder_spec: EncoderSpec,
                     pairing: PairingConfig) -> None:
    extra = {
        "train_config": asdict(cfg),
        "encoder_spec": asdict(encoder_spec),
        "pairing": asdict(pairing),
        "state": {"epoch": state.epoch, "step": state.step,
                  "best_loss": state.best_loss, "rng": _rng_state(state.rng)},
    }
    rm.save_checkpoint(directory, model.cfg, model.parameters(), extra=extra)
    mdir = directory / "momentum"
    mdir.mkdir(exist_ok=True)
    for name, buf in state.momentum.items():
        write_tensor(mdir / f"{name}.rmtt", buf)


def load_train_state(directory: str | Path):
    """Rebuild (model, state, train_cfg, encoder_spec, pairing) from disk."""
    directory = Path(directory)
    cfg, named, meta = rm.load_checkpoint(directory)
    model = model_from_named(cfg, named)
    st = meta["state"]
    state = TrainState(epoch=st["epoch"], step=st["step"], best_loss=st["best_loss"],
                       rng=_rng_from_state(st["rng"]))
    for name in model.parameters():
        buf_path = directory / "momentum" / f"{name}.rmtt"
        if buf_path.exists():
            state.momentum[name] = read_tensor(buf_path)
    train_cfg = TrainConfig(**meta["train_config"])
    encoder_spec = EncoderSpec(**meta["encoder_spec"])
    pairing = PairingConfig(**meta["pairing"])
    return model, state, train_cfg, encoder_spec, pairing


def fit(manifest: Manifest, cfg: TrainConfig, model_cfg: rm.RmvitConfig,
        encoder_spec: EncoderSpec, pairing: PairingConfig, out_dir: str | Path,
        resume_from: str | Path | None = None,
        store: dict[str, np.ndarray] | None = None) -> tuple[Path, Path]:
    """Train from scratch (or resume) and write checkpoint + loss curve CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoint"
    curve_path = out_dir / "loss_curve.csv"

    if resume_from is not None:
        model, state, saved_cfg, saved_spec, saved_pairing = load_train_state(resume_from)
        # Extending `epochs` on resume is fine; everything else must match.
        if replace(saved_cfg, epochs=cfg.epochs) != cfg:
            raise ValueError("resume with a different train config")
        encoder_spec, pairing = saved_spec, saved_pairing
    else:
        model = build_model(model_cfg, seed=cfg.seed)
        state = TrainState(rng=np.random.default_rng([cfg.seed, 1]))

    if store is None:
        store = encode_manifest(manifest, encoder_spec, cache_dir=out_dir / "enc_cache")
    n_full = sum(1 for r in manifest.rows
                 if r.resolution_tag == RESOLUTION_FULL and r.enhancement_tag != REFERENCE_TAG)
    steps_per_epoch = max(1, n_full // cfg.batch_size)

    mode = "a" if resume_from is not None and curve_path.exists() else "w"
    with open(curve_path, mode, newline="") as curve_fh:
        writer = csv.writer(curve_fh)
        if mode == "w":
            writer.writerow(CURVE_COLUMNS)
        while state.epoch < cfg.epochs:
            epoch_losses = []
            for s in range(steps_per_epoch):
                epoch_frac = state.epoch + s / steps_per_epoch
                ann, seqs = build_batch(manifest, cfg.batch_size, state.rng, store)
                lr = lr_at(epoch_frac, cfg)
                value = train_step(state, ann, seqs, model, cfg, pairing, epoch_frac,
                                   dump_path=out_dir / "diverged_dump.json")
                epoch_losses.append(value)
                writer.writerow([state.step - 1, state.epoch, f"{lr:.10g}", f"{value:.8f}"])
            curve_fh.flush()
            state.epoch += 1
            save_train_state(ckpt_dir, model, state, cfg, encoder_spec, pairing)
            log.info("epoch %d/%d mean loss %.5f", state.epoch, cfg.epochs,
                     float(np.mean(epoch_losses)))
    return ckpt_dir, curve_path
