"""Proxy full-reference quality scores and threshold-based pairing.

Training patches never see subjective labels. Instead each enhanced patch is
scored against its co-located reference by a proxy metric, and two patches
count as a quality-positive pair when their scores differ by at most a
threshold. The built-in metric is PSNR (threshold default 3 dB, a common
just-noticeable rule of thumb); any external full-reference tool can be
plugged in through a command template.
"""

from __future__ import annotations

import logging
import re
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .patches import (Manifest, PatchRecord, REFERENCE_TAG, RESOLUTION_DOWN,
                      RESOLUTION_FULL, load_patch_pixels)

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
DEFAULT_THRESHOLD = 3.0
NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


class MetricMismatchError(ValueError):
    pass


class ExternalToolError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProxyScore:
    value: float
    metric_name: str

    def __post_init__(self):
        if self.value is None or not np.isfinite(self.value):
            raise ValueError(f"proxy score must be finite, got {self.value!r}")


@dataclass(frozen=True)
class PairingConfig:
    threshold: float = DEFAULT_THRESHOLD
    metric_name: str = "psnr"

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("pairing threshold must be positive")


def psnr(enhanced: PatchRecord, reference: PatchRecord) -> ProxyScore:
    """10*log10(255^2 / MSE) over all pixels and frames, capped at 100 for MSE=0."""
    enhanced.validate_pixels()
    reference.validate_pixels()
    if enhanced.pixels.shape != reference.pixels.shape:
        raise ValueError("psnr operands must share dimensions")
    sse = 0.0
    count = 0
    for t in range(enhanced.pixels.shape[0]):  # frame chunks bound peak memory
        diff = enhanced.pixels[t].astype(np.float64) - reference.pixels[t].astype(np.float64)
        sse += float((diff * diff).sum())
        count += diff.size
    mse = sse / count
    if mse == 0.0:
        return ProxyScore(PSNR_CAP, "psnr")
    return ProxyScore(10.0 * np.log10(255.0 ** 2 / mse), "psnr")


def external_score(enh_path: str, ref_path: str, command_template: str,
                   metric_name: str = "external", pattern: str | None = None,
                   timeout: float = 120.0, repeat_check: bool = False) -> ProxyScore:
    """Run an external full-reference tool and parse one real from its output.

    The template must contain ``{enh}`` and ``{ref}`` placeholders. By default
    the score is the last numeric token on the last output line that has one;
    ``pattern`` (a regex whose first group is the score) overrides that.
    ``repeat_check`` reruns the tool and warns when the two scores disagree.
    """
    if "{enh}" not in command_template or "{ref}" not in command_template:
        raise ValueError("command template needs {enh} and {ref} placeholders")

    def run_once() -> float:
        argv = shlex.split(command_template.format(enh=shlex.quote(enh_path),
                                                   ref=shlex.quote(ref_path)))
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            raise ExternalToolError(f"{argv[0]}: timed out after {timeout}s") from exc
        except OSError as exc:
            raise ExternalToolError(f"{argv[0]}: {exc}") from exc
        if proc.returncode != 0:
            raise ExternalToolError(
                f"{argv[0]} exited {proc.returncode}; stderr: {proc.stderr.strip()!r}")
        output = proc.stdout
        if pattern is not None:
            match = re.search(pattern, output, re.MULTILINE)
            if not match:
                raise ExternalToolError(f"pattern {pattern!r} not found in output")
            return float(match.group(1))
        for line in reversed(output.splitlines()):
            tokens = NUMBER_RE.findall(line)
            if tokens:
                return float(tokens[-1])
        raise ExternalToolError(f"no numeric token in tool output {output!r}")

    value = run_once()
    if repeat_check:
        second = run_once()
        if second != value:
            log.warning("external metric is nondeterministic: %s vs %s on %s",
                        value, second, enh_path)
    return ProxyScore(value, metric_name)


def is_positive_pair(a: ProxyScore, b: ProxyScore, cfg: PairingConfig) -> bool:
    """|a - b| <= threshold, on one shared metric scale."""
    if a.metric_name != b.metric_name:
        raise MetricMismatchError(
            f"cannot compare {a.metric_name} with {b.metric_name}")
    if a.metric_name != cfg.metric_name:
        raise MetricMismatchError(
            f"scores are {a.metric_name}, pairing expects {cfg.metric_name}")
    return abs(a.value - b.value) <= cfg.threshold


def label_manifest(manifest: Manifest, pairing: PairingConfig,
                   command_template: str | None = None, workers: int = 4,
                   pattern: str | None = None, timeout: float = 120.0) -> Manifest:
    """Fill proxy scores: score full enhanced rows, let down rows inherit.

    Rows that already carry a score are left alone, which makes relabeling
    idempotent (scores are deterministic, so recomputing would not change
    them either). Reference rows are never scored.
    """
    if manifest.meta.get("metric_name") not in (None, pairing.metric_name):
        raise MetricMismatchError(
            f"manifest already labeled with {manifest.meta['metric_name']!r}")
    index = manifest.by_id()

    def needs_score(row: PatchRecord) -> bool:
        return (row.resolution_tag == RESOLUTION_FULL
                and row.enhancement_tag != REFERENCE_TAG
                and row.proxy_score is None)

    def score_row(row: PatchRecord) -> float:
        if not row.reference_link:
            raise ValueError(f"{row.patch_id}: enhanced patch has no reference link")
        ref = index.get(row.reference_link)
        if ref is None:
            raise ValueError(f"{row.patch_id}: reference {row.reference_link} not in manifest")
        if command_template:
            return external_score(row.path, ref.path, command_template,
                                  metric_name=pairing.metric_name,
                                  pattern=pattern, timeout=timeout).value
        enh = replace(row, pixels=load_patch_pixels(row.path))
        refp = replace(ref, pixels=load_patch_pixels(ref.path))
        return psnr(enh, refp).value

    todo = [row for row in manifest.rows if needs_score(row)]
    if todo:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for row, value in zip(todo, pool.map(score_row, todo)):
                row.proxy_score = value

    for row in manifest.rows:
        if row.resolution_tag == RESOLUTION_DOWN and row.proxy_score is None:
            full = index.get(row.reference_link or "")
            if full is None:
                raise ValueError(f"{row.patch_id}: down patch lacks a full counterpart")
            row.proxy_score = full.proxy_score
    manifest.meta["metric_name"] = pairing.metric_name
    return manifest
