"""Video IO, synthetic degradations, patch extraction, manifests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memvqa.patches import (FULL_SIZE, TEMPORAL_LEN, Manifest, ManifestError,
                            PatchError, PatchRecord, augment_rotate,
                            downsample_patch, extract_patches, load_patch_pixels,
                            read_manifest, save_patch, write_manifest)
from memvqa.videos import (RawVideo, VideoFileError, build_corpus, degrade,
                           make_source, read_video, write_video)


def video(width, height, frames, seed=0, source="src"):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=(frames, height, width, 3), dtype=np.uint8)
    return RawVideo(source_id=source, pixels=px)


# ---------------------------------------------------------------------------
# RMTV files
# ---------------------------------------------------------------------------


def test_rmtv_round_trip(tmp_path):
    v = video(20, 12, 3, seed=1)
    path = tmp_path / "v.rmtv"
    write_video(path, v)
    back = read_video(path)
    assert back.source_id == "v"
    np.testing.assert_array_equal(back.pixels, v.pixels)
    header = path.read_bytes().split(b"\n", 1)[0]
    assert header == b"RMTV 20 12 3"


def test_rmtv_truncated(tmp_path):
    v = video(8, 8, 2)
    path = tmp_path / "v.rmtv"
    write_video(path, v)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(VideoFileError):
        read_video(path)


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------


def test_zero_severity_is_identity():
    v = video(16, 16, 4, seed=2)
    for kind in ("noise", "blur", "brightness", "contrast", "shake"):
        out = degrade(v, kind, 0, seed=3)
        np.testing.assert_array_equal(out.pixels, v.pixels)


def test_noise_severity_monotone_in_mse():
    v = make_source("s", seed=4, width=64, height=64, frames=4)
    mses = []
    for sev in (4, 16, 48):
        out = degrade(v, "noise", sev, seed=5)
        mses.append(((out.pixels.astype(float) - v.pixels.astype(float)) ** 2).mean())
    assert mses[0] < mses[1] < mses[2]


def test_degrade_deterministic():
    v = make_source("s", seed=6, width=32, height=32, frames=3)
    a = degrade(v, "noise", 8, seed=7)
    b = degrade(v, "noise", 8, seed=7)
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_make_source_has_saturated_pixels():
    v = make_source("s", seed=8, width=64, height=64, frames=2)
    assert (v.pixels == 0).any() and (v.pixels == 255).any()


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def test_extract_1280x720_gives_ten_patches():
    v = video(1280, 720, TEMPORAL_LEN, seed=9)
    pairs = extract_patches(v, None, seed=0)
    assert len(pairs) == 10  # floor(1280/256) * floor(720/256) = 5 * 2


def test_extract_exact_window_single_patch():
    v = video(FULL_SIZE, FULL_SIZE, TEMPORAL_LEN, seed=10)
    pairs = extract_patches(v, None, seed=0)
    assert len(pairs) == 1
    enh, ref = pairs[0]
    assert ref is None
    np.testing.assert_array_equal(enh.pixels, v.pixels)


def test_extract_too_small_is_an_error():
    v = video(FULL_SIZE - 1, FULL_SIZE, TEMPORAL_LEN)
    with pytest.raises(PatchError):
        extract_patches(v, None, seed=0)


def test_extract_too_few_frames_is_an_error():
    v = video(FULL_SIZE, FULL_SIZE, TEMPORAL_LEN - 1)
    with pytest.raises(PatchError):
        extract_patches(v, None, seed=0)


def test_extract_windows_never_overlap_or_cross_bounds():
    v = video(600, 300, TEMPORAL_LEN, seed=11)
    marks = np.zeros((300, 600), dtype=int)
    pairs = extract_patches(v, None, seed=42)
    assert len(pairs) == 2
    # recover each window position by matching pixels of frame 0
    for enh, _ in pairs:
        found = False
        for y0 in range(0, 300 - FULL_SIZE + 1):
            for x0 in range(0, 600 - FULL_SIZE + 1):
                if np.array_equal(v.pixels[0, y0:y0 + FULL_SIZE, x0:x0 + FULL_SIZE],
                                  enh.pixels[0]):
                    marks[y0:y0 + FULL_SIZE, x0:x0 + FULL_SIZE] += 1
                    found = True
                    break
            if found:
                break
        assert found
    assert marks.max() == 1  # non-overlapping


def test_extract_colocated_reference():
    v = video(FULL_SIZE, FULL_SIZE, TEMPORAL_LEN, seed=12)
    r = video(FULL_SIZE, FULL_SIZE, TEMPORAL_LEN, seed=13)
    (enh, ref), = extract_patches(v, r, seed=1, tag="blur2")
    assert enh.reference_link == ref.patch_id
    assert enh.enhancement_tag == "blur2"
    assert ref.enhancement_tag == "reference"
    np.testing.assert_array_equal(ref.pixels, r.pixels)


def test_extract_dim_mismatch_error():
    v = video(FULL_SIZE, FULL_SIZE, TEMPORAL_LEN)
    r = video(FULL_SIZE + 10, FULL_SIZE, TEMPORAL_LEN)
    with pytest.raises(PatchError):
        extract_patches(v, r, seed=0)


# ---------------------------------------------------------------------------
# down-sampling
# ---------------------------------------------------------------------------


def full_patch(pixels, score=None):
    return PatchRecord(patch_id="p", source_id="s", enhancement_tag="t",
                       resolution_tag="full", proxy_score=score, pixels=pixels)


def test_downsample_constant_patch():
    px = np.full((TEMPORAL_LEN, FULL_SIZE, FULL_SIZE, 3), 77, dtype=np.uint8)
    down = downsample_patch(full_patch(px))
    assert down.pixels.shape == (TEMPORAL_LEN, 128, 128, 3)
    assert (down.pixels == 77).all()
    assert down.reference_link == "p"
    assert down.resolution_tag == "down"


def test_downsample_checkerboard_rounds_half_up():
    px = np.zeros((TEMPORAL_LEN, FULL_SIZE, FULL_SIZE, 3), dtype=np.uint8)
    px[:, ::2, ::2] = 255
    px[:, 1::2, 1::2] = 255  # every 2x2 block holds two 0s and two 255s
    down = downsample_patch(full_patch(px))
    assert (down.pixels == 128).all()  # 127.5 rounds up


def test_downsample_preserves_temporal_length():
    px = np.zeros((TEMPORAL_LEN, FULL_SIZE, FULL_SIZE, 3), dtype=np.uint8)
    down = downsample_patch(full_patch(px))
    assert down.pixels.shape[0] == TEMPORAL_LEN == down.temporal_len


def test_downsample_rejects_down_input():
    px = np.zeros((TEMPORAL_LEN, 128, 128, 3), dtype=np.uint8)
    rec = PatchRecord(patch_id="d", source_id="s", enhancement_tag="t",
                      resolution_tag="down", pixels=px)
    with pytest.raises(PatchError):
        downsample_patch(rec)


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------


def small_square(seed=0, side=8, frames=2):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=(frames, side, side, 3), dtype=np.uint8)
    return PatchRecord(patch_id="p", source_id="s", enhancement_tag="t",
                       resolution_tag="full", temporal_len=frames, pixels=px,
                       proxy_score=12.5, reference_link="refp")


def test_rotate_identity():
    p = small_square()
    out = augment_rotate(p, 0)
    np.testing.assert_array_equal(out.pixels, p.pixels)
    assert out.patch_id == "p__r0"
    assert out.proxy_score == p.proxy_score


def test_rotate_four_times_is_identity():
    p = small_square(seed=1)
    px = p.pixels
    for _ in range(4):
        p = augment_rotate(p, 1)
        p.patch_id = "p"  # keep ids short for the loop
    np.testing.assert_array_equal(p.pixels, px)


def test_rotate_moves_origin_pixel():
    side = 8
    px = np.zeros((2, side, side, 3), dtype=np.uint8)
    px[:, 0, 0] = 255
    p = PatchRecord(patch_id="p", source_id="s", enhancement_tag="t",
                    resolution_tag="full", temporal_len=2, pixels=px)
    out = augment_rotate(p, 1)
    assert (out.pixels[:, 0, side - 1] == 255).all()  # (0,0) -> (0, H-1)
    assert out.pixels.sum() == px.sum()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_rotate_preserves_pixel_multiset(k, seed):
    p = small_square(seed=seed, side=4, frames=1)
    out = augment_rotate(p, k)
    assert sorted(out.pixels.reshape(-1)) == sorted(p.pixels.reshape(-1))


def test_rotate_rewrites_reference_link():
    p = small_square(seed=2)
    out = augment_rotate(p, 3)
    assert out.reference_link == "refp__r3"


# ---------------------------------------------------------------------------
# patch files and manifests
# ---------------------------------------------------------------------------


def test_patch_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    px = rng.integers(0, 256, size=(TEMPORAL_LEN, FULL_SIZE, FULL_SIZE, 3),
                      dtype=np.uint8)
    rec = full_patch(px)
    save_patch(rec, tmp_path)
    assert rec.path.endswith("p.rmtt")
    np.testing.assert_array_equal(load_patch_pixels(rec.path), px)


def _manifest_rows(tmp_path, n=3):
    rows = []
    for i in range(n):
        path = tmp_path / f"p{i}.rmtt"
        path.write_bytes(b"")
        rows.append(PatchRecord(patch_id=f"p{i}", source_id="s", enhancement_tag="t",
                                resolution_tag="full", proxy_score=1.25 * i if i else None,
                                reference_link="p0" if i else None, path=str(path)))
    return rows


def test_manifest_round_trip_empty(tmp_path):
    path = tmp_path / "m.csv"
    write_manifest(path, Manifest(meta={"seed": "5"}))
    back = read_manifest(path)
    assert back.rows == [] and back.meta == {"seed": "5"}


def test_manifest_round_trip_fields(tmp_path):
    m = Manifest(rows=_manifest_rows(tmp_path), meta={"seed": "9"})
    path = tmp_path / "m.csv"
    write_manifest(path, m)
    back = read_manifest(path)
    assert back.meta["seed"] == "9"
    for a, b in zip(m.rows, back.rows):
        assert (a.patch_id, a.source_id, a.enhancement_tag, a.resolution_tag,
                a.temporal_len, a.reference_link, a.path) == \
               (b.patch_id, b.source_id, b.enhancement_tag, b.resolution_tag,
                b.temporal_len, b.reference_link, b.path)
        assert (a.proxy_score is None) == (b.proxy_score is None)
        if a.proxy_score is not None:
            assert abs(a.proxy_score - b.proxy_score) < 1e-6


def test_manifest_missing_column_names_line(tmp_path):
    m = Manifest(rows=_manifest_rows(tmp_path, 2))
    path = tmp_path / "m.csv"
    write_manifest(path, m)
    lines = path.read_text().splitlines()
    lines[2] = ",".join(lines[2].split(",")[:-1])  # drop one column from row 2
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match=":3:"):
        read_manifest(path)


def test_manifest_duplicate_id(tmp_path):
    rows = _manifest_rows(tmp_path, 2)
    rows[1].patch_id = rows[0].patch_id
    path = tmp_path / "m.csv"
    with pytest.raises(ManifestError, match="duplicate"):
        write_manifest(path, Manifest(rows=rows))
        read_manifest(path)


def test_manifest_missing_file(tmp_path):
    rows = _manifest_rows(tmp_path, 2)
    rows[1].path = str(tmp_path / "nope.rmtt")
    path = tmp_path / "m.csv"
    write_manifest(path, Manifest(rows=rows))
    with pytest.raises(ManifestError, match="missing file"):
        read_manifest(path)
    read_manifest(path, check_files=False)  # and the relaxed path works


# ---------------------------------------------------------------------------
# corpus generator
# ---------------------------------------------------------------------------


def test_build_corpus_layout(tmp_path):
    corpus = build_corpus(tmp_path, n_sources=2, kinds=("noise",),
                          severities=(0.0, 8.0), seed=1, width=32, height=32,
                          frames=4)
    assert len(corpus.refs) == 2
    assert len(corpus.entries) == 4
    labels = (tmp_path / "labels.csv").read_text().splitlines()
    assert labels[0] == "video_id,subset_tag,source_id,mos"
    assert len(labels) == 5
    zero = [e for e in corpus.entries if e.severity == 0][0]
    ref = read_video(zero.ref_path)
    deg = read_video(zero.path)
    np.testing.assert_array_equal(ref.pixels, deg.pixels)
