"""Spatio-temporal training patches and the manifest that tracks them.

Full patches are 256x256x3x72 windows cut from a video on a non-overlapping
grid with a seeded random spatial offset. Each full patch gets a 128x128
down-sampled twin (2x2 box average) that always links back to it, and
optional 90-degree block rotations. Patch pixels live on disk as RMTT
tensors of shape [72, 3, H, W] with values 0..255.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor_io import read_tensor, write_tensor
from .videos import RawVideo

FULL_SIZE = 256
DOWN_SIZE = 128
TEMPORAL_LEN = 72

RESOLUTION_FULL = "full"
RESOLUTION_DOWN = "down"
REFERENCE_TAG = "reference"

MANIFEST_COLUMNS = ["patch_id", "source_id", "enhancement_tag", "resolution_tag",
                    "temporal_len", "reference_link", "proxy_score", "path"]


class PatchError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class PatchRecord:
    patch_id: str
    source_id: str
    enhancement_tag: str
    resolution_tag: str
    temporal_len: int = TEMPORAL_LEN
    reference_link: str | None = None
    proxy_score: float | None = None
    path: str | None = None
    pixels: np.ndarray | None = None  # uint8 [T,H,W,3] when loaded

    def expected_side(self) -> int:
        return FULL_SIZE if self.resolution_tag == RESOLUTION_FULL else DOWN_SIZE

    def validate_pixels(self):
        if self.pixels is None:
            raise PatchError(f"{self.patch_id}: pixels not loaded")
        t, h, w, c = self.pixels.shape
        side = self.expected_side()
        if (t, h, w, c) != (self.temporal_len, side, side, 3):
            raise PatchError(
                f"{self.patch_id}: shape {self.pixels.shape} does not match "
                f"{self.resolution_tag} patch contract")


def extract_patches(video: RawVideo, ref: RawVideo | None, seed: int,
                    tag: str = "") -> list[tuple[PatchRecord, PatchRecord | None]]:
    """Cut co-located (enhanced, reference) window pairs from a video.

    The grid of 256x256x72 windows never overlaps and never crosses the video
    bounds; its spatial origin is a seeded random offset within the slack left
    by the floor division. Temporal windows stride from frame 0.
    """
    if ref is not None and ref.pixels.shape != video.pixels.shape:
        raise PatchError("enhanced and reference videos must share dimensions")
    if video.width < FULL_SIZE or video.height < FULL_SIZE:
        raise PatchError(
            f"video {video.width}x{video.height} smaller than one {FULL_SIZE} window")
    if video.frame_count < TEMPORAL_LEN:
        raise PatchError(
            f"video has {video.frame_count} frames, window needs {TEMPORAL_LEN}")

    nx = video.width // FULL_SIZE
    ny = video.height // FULL_SIZE
    nt = video.frame_count // TEMPORAL_LEN
    rng = np.random.default_rng(seed)
    off_x = int(rng.integers(0, video.width - nx * FULL_SIZE + 1))
    off_y = int(rng.integers(0, video.height - ny * FULL_SIZE + 1))

    tag = tag or video.source_id
    pairs = []
    for it in range(nt):
        t0 = it * TEMPORAL_LEN
        for iy in range(ny):
            y0 = off_y + iy * FULL_SIZE
            for ix in range(nx):
                x0 = off_x + ix * FULL_SIZE
                window = (slice(t0, t0 + TEMPORAL_LEN),
                          slice(y0, y0 + FULL_SIZE), slice(x0, x0 + FULL_SIZE))
                base = f"{video.source_id}__{tag}__x{ix}_y{iy}_t{it}"
                ref_rec = None
                if ref is not None:
                    ref_rec = PatchRecord(
                        patch_id=base + "__ref", source_id=video.source_id,
                        enhancement_tag=REFERENCE_TAG, resolution_tag=RESOLUTION_FULL,
                        pixels=ref.pixels[window].copy())
                enh_rec = PatchRecord(
                    patch_id=base, source_id=video.source_id, enhancement_tag=tag,
                    resolution_tag=RESOLUTION_FULL,
                    reference_link=ref_rec.patch_id if ref_rec else None,
                    pixels=video.pixels[window].copy())
                pairs.append((enh_rec, ref_rec))
    return pairs


def downsample_patch(patch: PatchRecord) -> PatchRecord:
    """2x2 box average per frame, round half up; links back to the source patch."""
    if patch.resolution_tag != RESOLUTION_FULL:
        raise PatchError(f"{patch.patch_id}: can only down-sample full patches")
    patch.validate_pixels()
    px = patch.pixels
    t, h, w, _ = px.shape
    # Integer arithmetic keeps round-half-up exact: (sum + 2) // 4.
    blocks = px.reshape(t, h // 2, 2, w // 2, 2, 3).astype(np.uint16)
    summed = blocks.sum(axis=(2, 4), dtype=np.uint16)
    down = ((summed + 2) // 4).astype(np.uint8)
    return PatchRecord(
        patch_id=patch.patch_id + "__d", source_id=patch.source_id,
        enhancement_tag=patch.enhancement_tag, resolution_tag=RESOLUTION_DOWN,
        temporal_len=patch.temporal_len, reference_link=patch.patch_id,
        proxy_score=patch.proxy_score, pixels=down)


def augment_rotate(patch: PatchRecord, k: int) -> PatchRecord:
    """Rotate all frames by 90k degrees; k=1 sends pixel (0,0) to (0, H-1).

    Square spatial dims required. Keeps source and proxy score; the reference
    link is rewritten with the same rotation suffix so that pairs rotated in
    tandem stay linked.
    """
    if k not in (0, 1, 2, 3):
        raise ValueError(f"rotation k must be 0..3, got {k}")
    if patch.pixels is None:
        raise PatchError(f"{patch.patch_id}: pixels not loaded")
    h, w = patch.pixels.shape[1:3]
    if h != w:
        raise PatchError("rotation requires square spatial dims")
    if k == 0:
        rotated = patch.pixels.copy()
    else:
        rotated = np.ascontiguousarray(np.rot90(patch.pixels, k=k, axes=(2, 1)))
    ref = f"{patch.reference_link}__r{k}" if patch.reference_link else None
    return replace(patch, patch_id=f"{patch.patch_id}__r{k}", pixels=rotated,
                   reference_link=ref, path=None)


# ---------------------------------------------------------------------------
# Patch files
# ---------------------------------------------------------------------------


def save_patch(patch: PatchRecord, directory: str | Path) -> PatchRecord:
    """Persist pixels as an RMTT tensor [T,3,H,W]; returns the record with path set."""
    patch.validate_pixels()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{patch.patch_id}.rmtt"
    write_tensor(path, patch.pixels.transpose(0, 3, 1, 2).astype(np.float32))
    patch.path = str(path)
    return patch


def load_patch_pixels(path: str | Path) -> np.ndarray:
    """Read an RMTT patch back to uint8 [T,H,W,3]."""
    arr = read_tensor(path)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise PatchError(f"{path}: expected [T,3,H,W] patch tensor, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise PatchError(f"{path}: pixel values outside 0..255")
    return np.rint(arr).astype(np.uint8).transpose(0, 2, 3, 1)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    rows: list[PatchRecord] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def by_id(self) -> dict[str, PatchRecord]:
        return {r.patch_id: r for r in self.rows}

    def validate(self, check_files: bool = True):
        seen = set()
        for row in self.rows:
            if row.patch_id in seen:
                raise ManifestError(f"duplicate patch_id {row.patch_id}")
            seen.add(row.patch_id)
            if check_files:
                if not row.path or not Path(row.path).exists():
                    raise ManifestError(f"{row.patch_id}: missing file {row.path!r}")


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        for key in sorted(manifest.meta):
            fh.write(f"# {key}={manifest.meta[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            writer.writerow([
                r.patch_id, r.source_id, r.enhancement_tag, r.resolution_tag,
                r.temporal_len, r.reference_link or "",
                "" if r.proxy_score is None else f"{r.proxy_score:.6f}",
                r.path or ""])
    tmp.replace(path)  # atomic rewrite


def read_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    path = Path(path)
    meta: dict[str, str] = {}
    rows: list[PatchRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        lineno = 0
        header_seen = False
        reader = csv.reader(fh)
        for fields in reader:
            lineno += 1
            if fields and fields[0].startswith("#"):
                text = ",".join(fields)[1:].strip()
                if "=" in text:
                    key, value = text.split("=", 1)
                    meta[key.strip()] = value.strip()
                continue
            if not header_seen:
                if fields != MANIFEST_COLUMNS:
                    raise ManifestError(f"{path}:{lineno}: bad header {fields}")
                header_seen = True
                continue
            if len(fields) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, "
                    f"got {len(fields)}")
            try:
                temporal = int(fields[4])
                score = float(fields[6]) if fields[6] else None
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            rows.append(PatchRecord(
                patch_id=fields[0], source_id=fields[1], enhancement_tag=fields[2],
                resolution_tag=fields[3], temporal_len=temporal,
                reference_link=fields[5] or None, proxy_score=score,
                path=fields[7] or None))
    if not header_seen:
        raise ManifestError(f"{path}: missing header row")
    manifest = Manifest(rows=rows, meta=meta)
    manifest.validate(check_files=check_files)
    return manifest
