"""Command-line surface: one subcommand per pipeline stage.

    synth-data  build a synthetic degraded corpus with known quality ordering
    extract     cut windows into patches, make down twins and rotations
    label       fill proxy quality scores into a manifest
    train       contrastive training of the transformer and heads
    embed       pooled video embeddings from a checkpoint
    evaluate    repeated source-split cross-validation report
    sweep       memory-tokens x segment-length grid of short trainings
    stats       parameter counts and forward timing for a checkpoint
    selfcheck   fast internal consistency checks (gradients, losses, ranks)

Every command resolves one seed, writes a run manifest into --out before
doing any work, and emits figures next to its delimited outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import evaluation as ev
from . import heads as hd
from . import rmvit as rm
from . import training as tr
from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .encoders import EncoderSpec, encode_frames_array
from .patches import (Manifest, augment_rotate, downsample_patch, extract_patches,
                      read_manifest, save_patch, write_manifest)
from .plots import save_eval_figure, save_loss_curve, save_sweep_heatmap
from .scoring import PairingConfig, label_manifest
from .videos import build_corpus, read_video

log = logging.getLogger("memvqa")

METRIC_CMD_ENV = "MEMVQA_METRIC_CMD"


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _resolve(args) -> tuple[RunConfig, Path]:
    overrides = {"seed": getattr(args, "seed", None)}
    for key in ("dim", "mem_tokens", "segment_len", "depth", "heads", "epochs",
                "batch_size", "lambda1", "tau", "encoder_kind", "pooling",
                "pair_threshold", "metric_name"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    cfg = load_run_config(getattr(args, "config", None), overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.cmd,
        "argv": sys.argv[1:],
        "seed": cfg.seed,
        "version": __version__,
        "config": asdict(cfg),
    }
    with open(out / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    dump_run_config(cfg, out / "resolved_config.json")
    return cfg, out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg, out = _resolve(args)
    corpus = build_corpus(out, n_sources=args.sources, kinds=args.kinds.split(","),
                          severities=_float_list(args.severities), seed=cfg.seed,
                          width=args.width, height=args.height, frames=args.frames)
    log.info("wrote %d reference and %d degraded videos to %s",
             len(corpus.refs), len(corpus.entries), out)
    return 0


def cmd_extract(args) -> int:
    cfg, out = _resolve(args)
    corpus = Path(args.corpus)
    vid_dir, ref_dir = corpus / "videos", corpus / "refs"
    if not vid_dir.is_dir():
        raise FileNotFoundError(f"{vid_dir} not found; expected a synth-data layout")
    rotations = [k for k in _int_list(args.rotations) if k != 0]
    patch_dir = out / "patches"

    manifest = Manifest(meta={"seed": str(cfg.seed)})
    files = sorted(vid_dir.glob("*.rmtv"))
    for vi, path in enumerate(files):
        video = read_video(path)
        source_id, _, tag = path.stem.partition("__")
        video.source_id = source_id
        ref_path = ref_dir / f"{source_id}.rmtv"
        ref = read_video(ref_path) if ref_path.exists() else None
        pairs = extract_patches(video, ref, seed=cfg.seed * 100003 + vi, tag=tag)
        for enh, refp in pairs:
            variants = [(enh, refp)]
            for k in rotations:
                variants.append((augment_rotate(enh, k),
                                 augment_rotate(refp, k) if refp else None))
            for e, r in variants:
                manifest.rows.append(save_patch(e, patch_dir))
                if r is not None:
                    manifest.rows.append(save_patch(r, patch_dir))
                manifest.rows.append(save_patch(downsample_patch(e), patch_dir))
    manifest.validate()
    write_manifest(out / "manifest.csv", manifest)
    log.info("extracted %d patch records from %d videos", len(manifest.rows), len(files))
    return 0


def cmd_label(args) -> int:
    cfg, out = _resolve(args)
    manifest = read_manifest(args.manifest)
    template = args.command_template or os.environ.get(METRIC_CMD_ENV)
    if cfg.metric_name != "psnr" and not template:
        raise ConfigError(f"metric {cfg.metric_name!r} needs a command template "
                          f"(flag or ${METRIC_CMD_ENV})")
    label_manifest(manifest, cfg.pairing_config(), command_template=template,
                   workers=args.workers)
    target = Path(args.manifest)
    write_manifest(target, manifest)
    scored = sum(1 for r in manifest.rows if r.proxy_score is not None)
    log.info("labeled manifest: %d/%d rows scored", scored, len(manifest.rows))
    (out / "label_summary.json").write_text(json.dumps(
        {"manifest": str(target), "scored_rows": scored, "rows": len(manifest.rows),
         "metric": cfg.metric_name}, indent=2))
    return 0


def _loss_curve_figure(curve_path: Path, fig_path: Path) -> None:
    steps, losses, lrs = [], [], []
    with open(curve_path, newline="") as fh:
        for rec in csv.DictReader(fh):
            steps.append(int(rec["step"]))
            losses.append(float(rec["loss"]))
            lrs.append(float(rec["lr"]))
    save_loss_curve(steps, losses, lrs, fig_path)


def cmd_train(args) -> int:
    cfg, out = _resolve(args)
    manifest = read_manifest(args.manifest)
    ckpt, curve = tr.fit(manifest, cfg.train_config(), cfg.rmvit_config(),
                         cfg.encoder_spec(), cfg.pairing_config(), out,
                         resume_from=args.resume)
    _loss_curve_figure(curve, out / "loss_curve.png")
    log.info("checkpoint at %s, loss curve at %s", ckpt, curve)
    return 0


def cmd_embed(args) -> int:
    cfg, out = _resolve(args)
    rmvit_cfg, named, meta = rm.load_checkpoint(args.checkpoint)
    model = tr.model_from_named(rmvit_cfg, named)
    spec = EncoderSpec(**meta["encoder_spec"])
    pooling = args.pooling or rmvit_cfg.pooling

    files = sorted(Path(args.videos).glob("*.rmtv"))
    if not files:
        raise FileNotFoundError(f"no .rmtv files under {args.videos}")
    ids, vecs, timings = [], [], []
    for path in files:
        video = read_video(path)
        t0 = time.perf_counter()
        emb_seq = encode_frames_array(video.pixels, spec)
        with ad.no_grad():
            ve = rm.forward_video(emb_seq, rmvit_cfg, model.rmvit_params,
                                  pooling=pooling)
        timings.append(time.perf_counter() - t0)
        ids.append(path.stem)
        vecs.append(ve.h_v.data.copy())
    ev.write_embeddings(out, ids, np.stack(vecs))
    log.info("embedded %d videos (%.2fs mean per video, %d trainable params)",
             len(ids), float(np.mean(timings)), rm.parameter_count(model.parameters()))
    return 0


def cmd_evaluate(args) -> int:
    cfg, out = _resolve(args)
    labels = ev.read_labels(args.labels)
    ids, matrix = ev.read_embeddings(args.embeddings)
    videos = ev.join_labeled_videos(labels, ids, matrix)
    report = ev.cross_validate(videos, repeats=args.repeats, seed=cfg.seed,
                               k=args.folds)
    if not report.rows:
        raise RuntimeError("cross-validation produced no fold entries")
    ev.write_report(report, out / "report.csv")
    table = ev.write_summary(report, out / "summary.csv")
    save_eval_figure(report, out / "report.png")
    print(table)
    log.info("overall mean SRCC %.4f over %d repeats x %d folds",
             report.mean_srcc(), args.repeats, args.folds)
    return 0


def cmd_sweep(args) -> int:
    cfg, out = _resolve(args)
    manifest = read_manifest(args.manifest)
    mem_values = _int_list(args.mem_tokens)
    seg_values = _int_list(args.segment_lens)
    grid = []
    rows = []
    for s in seg_values:
        grid_row = []
        for m in mem_values:
            cell_cfg = load_run_config(None, {**asdict(cfg), "mem_tokens": m,
                                              "segment_len": s})
            cell_dir = out / f"cell_m{m}_s{s}"
            _, curve = tr.fit(manifest, cell_cfg.train_config(),
                              cell_cfg.rmvit_config(), cell_cfg.encoder_spec(),
                              cell_cfg.pairing_config(), cell_dir)
            with open(curve, newline="") as fh:
                recs = list(csv.DictReader(fh))
            last_epoch = recs[-1]["epoch"]
            final = float(np.mean([float(r["loss"]) for r in recs
                                   if r["epoch"] == last_epoch]))
            grid_row.append(final)
            rows.append((m, s, final))
            log.info("cell M=%d S=%d final loss %.4f", m, s, final)
        grid.append(grid_row)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mem_tokens", "segment_len", "final_loss"])
        for m, s, final in rows:
            writer.writerow([m, s, f"{final:.8f}"])
    save_sweep_heatmap(mem_values, seg_values, grid, out / "sweep.png")
    return 0


def cmd_stats(args) -> int:
    cfg, out = _resolve(args)
    rmvit_cfg, named, meta = rm.load_checkpoint(args.checkpoint)
    model = tr.model_from_named(rmvit_cfg, named)
    counts = {
        "rmvit": sum(p.size for p in model.rmvit_params.values()),
        "heads": sum(p.size for p in model.head_params.named().values()),
    }
    counts["total"] = counts["rmvit"] + counts["heads"]

    timing = {}
    t_frames = args.probe_frames
    rng = np.random.default_rng(cfg.seed)
    probe = rng.normal(0, 1, size=(t_frames, rmvit_cfg.dim)).astype(np.float32)
    for pooling in ("all", "last2"):
        t0 = time.perf_counter()
        with ad.no_grad():
            rm.forward_video(probe, rmvit_cfg, model.rmvit_params, pooling=pooling)
        timing[pooling] = time.perf_counter() - t0
    stats = {"parameters": counts, "probe_frames": t_frames,
             "forward_seconds": timing}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# selfcheck
# ---------------------------------------------------------------------------


def _check(name: str, fn) -> bool:
    try:
        fn()
    except Exception as exc:  # report, do not crash the remaining checks
        print(f"FAIL {name}: {exc}")
        return False
    print(f"PASS {name}")
    return True


def _selfcheck_gradients():
    cfg = rm.RmvitConfig(dim=16, mem_tokens=2, segment_len=2, depth=1, heads=2)
    model = tr.build_model(cfg, seed=3)
    ad.jitter_parameters(model.parameters(), std=0.1, seed=9)
    rng = np.random.default_rng(4)
    seqs = [rng.normal(0, 1, size=(4, cfg.dim)).astype(np.float32) for _ in range(4)]
    items = [
        hd.BatchItem("a", "s1", 30.0, "full", 2), hd.BatchItem("b", "s1", 40.0, "full", 3),
        hd.BatchItem("a_d", "s1", 30.0, "down", 0), hd.BatchItem("b_d", "s1", 40.0, "down", 1),
    ]
    ann = hd.BatchAnnotations(items=items, metric_name="psnr")
    pairing = PairingConfig()

    def loss():
        total, _, _ = tr.forward_batch(model, ann, seqs, pairing, tau=0.1, lambda1=1.0)
        return total

    failures = ad.gradient_check(loss, model.parameters(), max_coords_per_tensor=4,
                                 rng=np.random.default_rng(5))
    if failures:
        raise AssertionError(f"{len(failures)} gradient mismatches, "
                             f"first: {failures[0]}")


def _selfcheck_losses():
    z = ad.Tensor(np.tile(np.arange(1, 9, dtype=np.float32), (4, 1)))
    lq = hd.quality_loss(z, [[1, 2, 3], [0, 2, 3]], tau=0.1)
    expect = float(np.log(3))
    got = lq.mean().item()
    if abs(got - expect) > 1e-5:
        raise AssertionError(f"quality loss {got} != log(3) {expect}")
    c = ad.Tensor(np.tile(np.arange(1, 9, dtype=np.float32), (3, 1)))
    lc = hd.content_loss(c, c, [[1, 2], [0, 2], [0, 1]], tau=0.1)
    expect = float(np.log(2))
    got = lc.mean().item()
    if abs(got - expect) > 1e-5:
        raise AssertionError(f"content loss {got} != log(2) {expect}")


def _selfcheck_ranks():
    from scipy import stats as sps
    rng = np.random.default_rng(11)
    for trial in range(20):
        a = rng.normal(size=12)
        b = rng.normal(size=12)
        if trial % 3 == 0:
            a = np.round(a)  # force ties
        s_ref = sps.spearmanr(a, b).statistic
        p_ref = sps.pearsonr(a, b).statistic
        if abs(ev.srcc(a, b) - s_ref) > 1e-12:
            raise AssertionError(f"srcc mismatch on trial {trial}")
        if abs(ev.plcc(a, b) - p_ref) > 1e-12:
            raise AssertionError(f"plcc mismatch on trial {trial}")


def _selfcheck_schedule():
    cfg = tr.TrainConfig(epochs=150, warmup_epochs=10, base_lr=2.5e-4)
    if tr.lr_at(0, cfg) != 0.0:
        raise AssertionError("lr at 0 must be 0")
    if tr.lr_at(10, cfg) != cfg.base_lr:
        raise AssertionError("lr at warmup end must be base_lr")
    if tr.lr_at(150, cfg) > 1e-9 * cfg.base_lr:
        raise AssertionError("lr at the end must vanish")
    left = tr.lr_at(10 - 1e-9, cfg)
    if abs(left - cfg.base_lr) > 1e-12:
        raise AssertionError("warmup/cosine junction is discontinuous")


def cmd_selfcheck(args) -> int:
    t0 = time.perf_counter()
    ok = True
    ok &= _check("gradient-fidelity", _selfcheck_gradients)
    ok &= _check("loss-closed-forms", _selfcheck_losses)
    ok &= _check("rank-statistics", _selfcheck_ranks)
    ok &= _check("lr-schedule", _selfcheck_schedule)
    print(f"selfcheck {'PASSED' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memvqa", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"memvqa {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=str, default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="overrides config seed")
        p.add_argument("--out", type=str, required=out_required, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth-data", help="generate a synthetic degraded corpus")
    common(p)
    p.add_argument("--sources", type=int, default=3)
    p.add_argument("--kinds", type=str, default="noise")
    p.add_argument("--severities", type=str, default="0,8,24")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--frames", type=int, default=72)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("extract", help="cut videos into training patches")
    common(p)
    p.add_argument("--corpus", type=str, required=True,
                   help="directory with videos/ and refs/ subdirs")
    p.add_argument("--rotations", type=str, default="0",
                   help="comma list of 90-degree rotation multiples to add")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("label", help="fill proxy quality scores into a manifest")
    common(p)
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--metric-name", dest="metric_name", type=str, default=None)
    p.add_argument("--command-template", type=str, default=None,
                   help="external tool, e.g. 'vmaf-tool {enh} {ref}' "
                        f"(or ${METRIC_CMD_ENV})")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("train", help="contrastive training")
    common(p)
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--resume", type=str, default=None, help="checkpoint dir to resume")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--encoder-kind", dest="encoder_kind", type=str, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="pooled video embeddings from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--videos", type=str, required=True, help="directory of .rmtv files")
    p.add_argument("--pooling", type=str, default=None, choices=["all", "last2"])
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("evaluate", help="repeated source-split cross-validation")
    common(p)
    p.add_argument("--embeddings", type=str, required=True)
    p.add_argument("--labels", type=str, required=True)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid of short trainings over M and S")
    common(p)
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--mem-tokens", type=str, default="2,4")
    p.add_argument("--segment-lens", type=str, default="2,4")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("stats", help="parameter counts and forward timing")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--probe-frames", type=int, default=72)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("selfcheck", help="fast internal consistency checks")
    common(p, out_required=False)
    p.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
