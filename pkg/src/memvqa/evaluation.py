"""Ridge regression on video embeddings and the cross-validation protocol.

The backbone is frozen at this stage: only a linear ridge model maps the
pooled D-dim video embedding to a quality score. Evaluation is k-fold
cross-validation, split by source content so that no source appears on both
sides of a fold, repeated with fresh splits. Per fold the ridge strength is
chosen by an inner validation loop over a log-spaced grid. Reported numbers
are Spearman (SRCC, average ranks on ties) and Pearson (PLCC) correlations,
per subset and overall, both from pooled splits filtered per subset and from
independent subset-local splits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg as sla

from .tensor_io import read_tensor, write_tensor

DEFAULT_ALPHA_GRID = tuple(10.0 ** k for k in range(-3, 4))


class ConstantInputError(ValueError):
    pass


class SingularSystemError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Rank statistics
# ---------------------------------------------------------------------------


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(a, b) -> float:
    """Pearson linear correlation. Constant inputs are undefined, hence errors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("plcc needs two equal-length vectors of size >= 2")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0.0:
        raise ConstantInputError("correlation of a constant vector is undefined")
    return float(np.clip((ac * bc).sum() / denom, -1.0, 1.0))


def srcc(a, b) -> float:
    """Spearman rank correlation: Pearson on fractional ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("srcc needs two equal-length vectors of size >= 2")
    return plcc(_fractional_ranks(a), _fractional_ranks(b))


# ---------------------------------------------------------------------------
# Ridge regression
# ---------------------------------------------------------------------------


@dataclass
class RidgeModel:
    weights: np.ndarray           # [D]
    intercept: float
    alpha: float
    x_mean: np.ndarray | None     # None when fit without intercept

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.x_mean is not None:
            x = x - self.x_mean
        return x @ self.weights + self.intercept


def ridge_fit(x, y, alpha: float, fit_intercept: bool = True) -> RidgeModel:
    """Solve (Xc^T Xc + alpha I) w = Xc^T yc on centered data.

    With the intercept enabled, columns and targets are centered first and
    the intercept absorbs the means. alpha = 0 on a rank-deficient design is
    a singular system and raises.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0] or x.shape[0] < 1:
        raise ValueError(f"bad ridge inputs: X {x.shape}, y {y.shape}")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")

    if fit_intercept:
        x_mean = x.mean(axis=0)
        y_mean = float(y.mean())
        xc = x - x_mean
        yc = y - y_mean
    else:
        x_mean = None
        y_mean = 0.0
        xc, yc = x, y

    gram = xc.T @ xc + alpha * np.eye(x.shape[1])
    try:
        weights = sla.solve(gram, xc.T @ yc, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"singular ridge system at alpha={alpha}: {exc}") from exc
    if not np.all(np.isfinite(weights)):
        raise SingularSystemError(f"non-finite ridge solution at alpha={alpha}")
    return RidgeModel(weights=weights, intercept=y_mean, alpha=alpha, x_mean=x_mean)


# ---------------------------------------------------------------------------
# Labeled videos and source-level splits
# ---------------------------------------------------------------------------


@dataclass
class LabeledVideo:
    video_id: str
    source_id: str
    subset_tag: str
    h_v: np.ndarray
    mos: float


def split_by_source(videos: list[LabeledVideo], k: int = 5,
                    seed: int = 0) -> list[list[LabeledVideo]]:
    """Shuffle distinct sources and deal them round-robin into k folds.

    Every video of a source lands in the same fold; fewer sources than folds
    is an error.
    """
    sources = sorted({v.source_id for v in videos})
    if len(sources) < k:
        raise ValueError(f"need at least {k} sources, have {len(sources)}")
    rng = np.random.default_rng(seed)
    rng.shuffle(sources)
    fold_of = {s: i % k for i, s in enumerate(sources)}
    folds: list[list[LabeledVideo]] = [[] for _ in range(k)]
    for v in videos:
        folds[fold_of[v.source_id]].append(v)
    return folds


def _safe_srcc(a, b) -> float | None:
    try:
        return srcc(a, b)
    except (ConstantInputError, ValueError):
        return None


def select_alpha(train: list[LabeledVideo], grid, seed: int, inner_k: int = 4) -> float:
    """Inner source-split validation; best mean SRCC wins, first on ties."""
    grid = list(grid)
    sources = {v.source_id for v in train}
    inner_k = min(inner_k, len(sources))
    if inner_k < 2:
        return grid[len(grid) // 2]
    folds = split_by_source(train, k=inner_k, seed=seed)
    best_alpha, best_score = grid[0], -np.inf
    for alpha in grid:
        scores = []
        for i in range(inner_k):
            val = folds[i]
            trn = [v for j, f in enumerate(folds) if j != i for v in f]
            if len(val) < 2 or not trn:
                continue
            model = ridge_fit(np.stack([v.h_v for v in trn]),
                              np.array([v.mos for v in trn]), alpha)
            pred = model.predict(np.stack([v.h_v for v in val]))
            s = _safe_srcc(pred, [v.mos for v in val])
            scores.append(-1.0 if s is None else s)
        mean = float(np.mean(scores)) if scores else -np.inf
        if mean > best_score:
            best_alpha, best_score = alpha, mean
    return best_alpha


# ---------------------------------------------------------------------------
# Cross-validation report
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    repeat: int
    fold: int
    split_mode: str   # "pooled" or "subset"
    subset: str       # "overall" or a subset tag
    n_test: int
    srcc: float
    plcc: float
    alpha: float
    split_seed: int


@dataclass
class CrossValReport:
    rows: list[FoldResult] = field(default_factory=list)
    k: int = 5
    repeats: int = 0
    seed: int = 0

    def mean_srcc(self, subset: str = "overall", split_mode: str = "pooled") -> float:
        vals = [r.srcc for r in self.rows
                if r.subset == subset and r.split_mode == split_mode]
        if not vals:
            raise ValueError(f"no entries for {subset!r}/{split_mode!r}")
        return float(np.mean(vals))

    def summary(self) -> list[dict]:
        keys = sorted({(r.split_mode, r.subset) for r in self.rows})
        out = []
        for mode, subset in keys:
            s = [r.srcc for r in self.rows if (r.split_mode, r.subset) == (mode, subset)]
            p = [r.plcc for r in self.rows if (r.split_mode, r.subset) == (mode, subset)]
            out.append({
                "split_mode": mode, "subset": subset, "entries": len(s),
                "mean_srcc": float(np.mean(s)), "sd_srcc": float(np.std(s)),
                "mean_plcc": float(np.mean(p)), "sd_plcc": float(np.std(p)),
            })
        return out


def _evaluate_split(videos, folds, repeat, split_mode, subset_filter, grid,
                    split_seed, rows):
    k = len(folds)
    for fi in range(k):
        test = folds[fi]
        train = [v for j, f in enumerate(folds) if j != fi for v in f]
        if len(test) < 2 or not train:
            continue
        train_sources = {v.source_id for v in train}
        test_sources = {v.source_id for v in test}
        if train_sources & test_sources:
            raise AssertionError("source leak between train and test folds")
        alpha = select_alpha(train, grid, seed=split_seed * 31 + fi)
        model = ridge_fit(np.stack([v.h_v for v in train]),
                          np.array([v.mos for v in train]), alpha)
        pred = model.predict(np.stack([v.h_v for v in test]))
        mos = np.array([v.mos for v in test])

        scopes = [("overall", np.ones(len(test), dtype=bool))]
        if subset_filter:
            for tag in sorted({v.subset_tag for v in test}):
                scopes.append((tag, np.array([v.subset_tag == tag for v in test])))
        for name, mask in scopes:
            if mask.sum() < 2:
                continue
            s = _safe_srcc(pred[mask], mos[mask])
            try:
                p = plcc(pred[mask], mos[mask])
            except (ConstantInputError, ValueError):
                p = None
            if s is None or p is None:
                continue
            rows.append(FoldResult(repeat=repeat, fold=fi, split_mode=split_mode,
                                   subset=name, n_test=int(mask.sum()), srcc=s,
                                   plcc=p, alpha=alpha, split_seed=split_seed))


def cross_validate(videos: list[LabeledVideo], alpha_grid=DEFAULT_ALPHA_GRID,
                   repeats: int = 100, seed: int = 0, k: int = 5,
                   subset_splits: bool = True) -> CrossValReport:
    """Repeated k-fold CV by source; backbone embeddings are fixed inputs.

    Pooled mode splits all sources together and reports overall plus
    per-subset numbers on each test fold. Subset mode additionally runs an
    independent CV inside every subset with enough sources.
    """
    if not videos:
        raise ValueError("no videos to evaluate")
    report = CrossValReport(k=k, repeats=repeats, seed=seed)
    subsets = sorted({v.subset_tag for v in videos})
    multi = len(subsets) > 1
    for r in range(repeats):
        split_seed = seed * 1009 + r
        folds = split_by_source(videos, k=k, seed=split_seed)
        _evaluate_split(videos, folds, r, "pooled", multi, alpha_grid,
                        split_seed, report.rows)
        if subset_splits and multi:
            for ti, tag in enumerate(subsets):
                sub = [v for v in videos if v.subset_tag == tag]
                if len({v.source_id for v in sub}) < k:
                    continue
                sub_seed = split_seed * 7 + 13 * (ti + 1)
                sub_folds = split_by_source(sub, k=k, seed=sub_seed)
                _evaluate_split(sub, sub_folds, r, "subset", False, alpha_grid,
                                sub_seed, report.rows)
    return report


# ---------------------------------------------------------------------------
# File formats: labels, embeddings, reports
# ---------------------------------------------------------------------------


LABEL_COLUMNS = ["video_id", "subset_tag", "source_id", "mos"]
REPORT_COLUMNS = ["repeat", "fold", "split_mode", "subset", "n_test",
                  "srcc", "plcc", "alpha", "split_seed"]


def read_labels(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABEL_COLUMNS:
            raise ValueError(f"{path}: expected columns {LABEL_COLUMNS}, "
                             f"got {reader.fieldnames}")
        rows = []
        for rec in reader:
            rec["mos"] = float(rec["mos"])
            rows.append(rec)
    return rows


def write_embeddings(directory: str | Path, ids: list[str], matrix: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "embeddings.rmtt", matrix)
    with open(directory / "embeddings_index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "row"])
        for i, vid in enumerate(ids):
            writer.writerow([vid, i])


def read_embeddings(directory: str | Path) -> tuple[list[str], np.ndarray]:
    directory = Path(directory)
    matrix = read_tensor(directory / "embeddings.rmtt")
    ids: list[str] = []
    with open(directory / "embeddings_index.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["video_id", "row"]:
            raise ValueError("bad embeddings index header")
        for fields in reader:
            if int(fields[1]) != len(ids):
                raise ValueError("embeddings index rows out of order")
            ids.append(fields[0])
    if len(ids) != matrix.shape[0]:
        raise ValueError("embeddings index does not match the matrix")
    return ids, matrix


def join_labeled_videos(labels: list[dict], ids: list[str],
                        matrix: np.ndarray) -> list[LabeledVideo]:
    rows = {rec["video_id"]: rec for rec in labels}
    videos = []
    for i, vid in enumerate(ids):
        rec = rows.get(vid)
        if rec is None:
            raise ValueError(f"no label for embedded video {vid}")
        videos.append(LabeledVideo(video_id=vid, source_id=rec["source_id"],
                                   subset_tag=rec["subset_tag"], h_v=matrix[i],
                                   mos=rec["mos"]))
    return videos


def write_report(report: CrossValReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in report.rows:
            writer.writerow([r.repeat, r.fold, r.split_mode, r.subset, r.n_test,
                             f"{r.srcc:.10g}", f"{r.plcc:.10g}", f"{r.alpha:.10g}",
                             r.split_seed])


def write_summary(report: CrossValReport, path: str | Path) -> str:
    """Summary CSV plus a plain-text table; returns the table."""
    rows = report.summary()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split_mode", "subset", "entries", "mean_srcc", "sd_srcc",
                         "mean_plcc", "sd_plcc"])
        for rec in rows:
            writer.writerow([rec["split_mode"], rec["subset"], rec["entries"],
                             f"{rec['mean_srcc']:.6f}", f"{rec['sd_srcc']:.6f}",
                             f"{rec['mean_plcc']:.6f}", f"{rec['sd_plcc']:.6f}"])
    lines = [f"{'mode':<8} {'subset':<12} {'n':>5} {'SRCC':>8} {'PLCC':>8}"]
    for rec in rows:
        lines.append(f"{rec['split_mode']:<8} {rec['subset']:<12} {rec['entries']:>5} "
                     f"{rec['mean_srcc']:>8.4f} {rec['mean_plcc']:>8.4f}")
    return "\n".join(lines)
