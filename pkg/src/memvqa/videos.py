"""Raw videos: the RMTV interchange format, synthetic sources and degradations.

RMTV is a deliberately dumb container: one ASCII header line
``RMTV <width> <height> <frames>`` followed by raw RGB24 bytes, frame-major,
row-major. Codec decoding is out of scope; anything real gets converted to
RMTV upstream.

The synthetic corpus generator exists so the whole pipeline can be exercised
without third-party enhancement tools: procedural source clips plus graded
degradations (noise, blur, brightness, contrast, shake) standing in for
enhancement artifacts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class VideoFileError(ValueError):
    """Malformed RMTV file."""


@dataclass
class RawVideo:
    """Uint8 RGB frames, shape [frames, height, width, 3]."""

    source_id: str
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[3] != 3:
            raise ValueError(f"expected [T,H,W,3] pixels, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")

    @property
    def frame_count(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def write_video(path: str | Path, video: RawVideo) -> None:
    with open(path, "wb") as fh:
        fh.write(f"RMTV {video.width} {video.height} {video.frame_count}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(video.pixels).tobytes())


def read_video(path: str | Path, source_id: str | None = None) -> RawVideo:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 4 or parts[0] != "RMTV":
            raise VideoFileError(f"{path}: bad RMTV header {header!r}")
        try:
            width, height, frames = (int(p) for p in parts[1:])
        except ValueError as exc:
            raise VideoFileError(f"{path}: non-integer dims in header") from exc
        payload = fh.read()
    expected = width * height * 3 * frames
    if len(payload) != expected:
        raise VideoFileError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(frames, height, width, 3).copy()
    return RawVideo(source_id=source_id or path.stem, pixels=pixels)


# ---------------------------------------------------------------------------
# Synthetic sources
# ---------------------------------------------------------------------------


def make_source(source_id: str, seed: int, width: int = 256, height: int = 256,
                frames: int = 72) -> RawVideo:
    """Procedural clip: drifting gradient, moving high-contrast shapes, texture.

    The shapes include fully saturated black and white blocks on purpose:
    clipping of additive degradations near the extremes is what makes severity
    visible to downstream pooled features.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height, dtype=np.float32),
                         np.linspace(0, 1, width, dtype=np.float32), indexing="ij")

    ax, ay = rng.uniform(0.5, 2.0, size=2)
    phase0 = rng.uniform(0, 2 * np.pi)
    tex_fx, tex_fy = rng.uniform(6, 14, size=2)
    tex_phase = rng.uniform(0, 2 * np.pi)
    chan_off = rng.uniform(-25, 25, size=3).astype(np.float32)

    n_rects = int(rng.integers(3, 6))
    rects = []
    for j in range(n_rects):
        rw = int(rng.integers(width // 8, width // 3))
        rh = int(rng.integers(height // 8, height // 3))
        x0 = float(rng.uniform(0, width - rw))
        y0 = float(rng.uniform(0, height - rh))
        vx, vy = rng.uniform(-1.5, 1.5, size=2)
        if j == 0:
            color = np.zeros(3, dtype=np.float32)
        elif j == 1:
            color = np.full(3, 255.0, dtype=np.float32)
        else:
            color = rng.uniform(0, 255, size=3).astype(np.float32)
        rects.append((x0, y0, rw, rh, vx, vy, color))

    out = np.empty((frames, height, width, 3), dtype=np.uint8)
    for t in range(frames):
        base = 110.0 + 70.0 * np.sin(2 * np.pi * (ax * xx + ay * yy) + 0.12 * t + phase0)
        tex = 25.0 * np.sin(2 * np.pi * (tex_fx * xx + tex_fy * yy) + 0.3 * t + tex_phase)
        frame = (base + tex)[..., None] + chan_off[None, None, :]
        for (x0, y0, rw, rh, vx, vy, color) in rects:
            cx = int(x0 + vx * t) % max(1, width - rw)
            cy = int(y0 + vy * t) % max(1, height - rh)
            frame[cy : cy + rh, cx : cx + rw, :] = color
        out[t] = np.clip(frame, 0, 255).astype(np.uint8)
    return RawVideo(source_id=source_id, pixels=out)


DEGRADATION_KINDS = ("noise", "blur", "brightness", "contrast", "shake")


def degrade(video: RawVideo, kind: str, severity: float, seed: int) -> RawVideo:
    """Apply one graded degradation. Severity 0 is the identity for all kinds."""
    if kind not in DEGRADATION_KINDS:
        raise ValueError(f"unknown degradation kind {kind!r}")
    src = video.pixels
    if severity == 0:
        return RawVideo(source_id=video.source_id, pixels=src.copy())

    rng = np.random.default_rng(seed)
    if kind == "noise":
        noisy = src.astype(np.float32) + rng.normal(0.0, severity, size=src.shape)
        out = np.clip(noisy, 0, 255).astype(np.uint8)
    elif kind == "blur":
        out = np.empty_like(src)
        for t in range(src.shape[0]):
            blurred = ndimage.gaussian_filter(src[t].astype(np.float32),
                                              sigma=(severity, severity, 0))
            out[t] = np.clip(blurred, 0, 255).astype(np.uint8)
    elif kind == "brightness":
        out = np.clip(src.astype(np.float32) + severity, 0, 255).astype(np.uint8)
    elif kind == "contrast":
        scaled = 128.0 + (src.astype(np.float32) - 128.0) / (1.0 + 0.15 * severity)
        out = np.clip(scaled, 0, 255).astype(np.uint8)
    else:  # shake
        amp = int(round(severity))
        out = np.empty_like(src)
        for t in range(src.shape[0]):
            dy, dx = rng.integers(-amp, amp + 1, size=2)
            shifted = np.roll(src[t], (dy, dx), axis=(0, 1))
            out[t] = shifted
    return RawVideo(source_id=video.source_id, pixels=out)


@dataclass
class CorpusEntry:
    video_id: str
    source_id: str
    kind: str
    severity: float
    path: str
    ref_path: str


@dataclass
class Corpus:
    refs: dict[str, str] = field(default_factory=dict)
    entries: list[CorpusEntry] = field(default_factory=list)


def build_corpus(out_dir: str | Path, n_sources: int = 3, kinds=("noise",),
                 severities=(0.0, 8.0, 24.0), seed: int = 0, width: int = 256,
                 height: int = 256, frames: int = 72) -> Corpus:
    """Write a synthetic corpus: refs/, degraded videos/, and labels.csv.

    The label assigned to each degraded clip is -severity, i.e. the known
    quality ordering within its degradation kind.
    """
    out_dir = Path(out_dir)
    refs_dir = out_dir / "refs"
    vid_dir = out_dir / "videos"
    refs_dir.mkdir(parents=True, exist_ok=True)
    vid_dir.mkdir(parents=True, exist_ok=True)

    corpus = Corpus()
    labels_path = out_dir / "labels.csv"
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "subset_tag", "source_id", "mos"])
        for si in range(n_sources):
            source_id = f"src{si:02d}"
            ref = make_source(source_id, seed=seed * 1000 + si, width=width,
                              height=height, frames=frames)
            ref_path = refs_dir / f"{source_id}.rmtv"
            write_video(ref_path, ref)
            corpus.refs[source_id] = str(ref_path)
            for ki, kind in enumerate(kinds):
                for vi, severity in enumerate(severities):
                    tag = f"{kind}{severity:g}"
                    video_id = f"{source_id}__{tag}"
                    deg = degrade(ref, kind, severity,
                                  seed=seed * 100000 + si * 1000 + ki * 100 + vi)
                    path = vid_dir / f"{video_id}.rmtv"
                    write_video(path, deg)
                    corpus.entries.append(CorpusEntry(
                        video_id=video_id, source_id=source_id, kind=kind,
                        severity=severity, path=str(path), ref_path=str(ref_path)))
                    writer.writerow([video_id, kind, source_id, f"{-severity:g}"])
    return corpus
