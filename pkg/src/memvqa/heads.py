"""Projector, content predictor, and the contrastive losses.

A training batch holds B full-resolution patches followed by their B
down-sampled twins. Every item yields a 128-d quality representation z
through the shared projector; the B full items additionally yield a content
representation c (projected mean of the last segment's processed embeddings)
and a predicted content representation c_hat (projected output of the
predictor MLP applied to the pooled previous-iteration memory).

Two InfoNCE-style terms are combined per full-resolution anchor:

* quality loss: positives are items whose proxy scores differ by at most the
  pairing threshold, plus the anchor's resolution twin; negatives are the
  rest of the 2B batch.
* content loss: positives are the other full items cut from the same source;
  both the c and c_hat similarities of a candidate enter numerator and
  denominator. Self-pairs are excluded from both so the numerator stays a
  strict subset of the denominator and the loss stays positive.

Anchors with no positives are skipped (never zero-filled) and reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scoring import PairingConfig, ProxyScore, is_positive_pair

PROJECTION_DIM = 128


class BatchContractError(ValueError):
    pass


class EmptyAnchorsError(ValueError):
    """Every anchor in the batch had an empty positive set."""


@dataclass
class BatchItem:
    patch_id: str
    source_id: str
    proxy_score: float
    resolution_tag: str
    counterpart: int  # index of the full<->down twin within the batch


@dataclass
class BatchAnnotations:
    """2B items: indices [0,B) full resolution, [B,2B) their down twins."""

    items: list[BatchItem]
    metric_name: str = "psnr"

    def __post_init__(self):
        n = len(self.items)
        if n < 4 or n % 2 != 0:
            raise BatchContractError(f"batch must hold 2B >= 4 items, got {n}")
        b = n // 2
        for i in range(b):
            full, down = self.items[i], self.items[i + b]
            if full.resolution_tag != "full" or down.resolution_tag != "down":
                raise BatchContractError(f"item order violated at index {i}")
            if full.counterpart != i + b or down.counterpart != i:
                raise BatchContractError(f"counterpart links broken at index {i}")

    @property
    def b(self) -> int:
        return len(self.items) // 2


@dataclass
class HeadParams:
    """Projector g (D->D->128) and content predictor f (D->D->D)."""

    g_w1: Tensor
    g_b1: Tensor
    g_w2: Tensor
    g_b2: Tensor
    f_w1: Tensor
    f_b1: Tensor
    f_w2: Tensor
    f_b2: Tensor

    def named(self) -> dict[str, Tensor]:
        return {f"heads.{k}": getattr(self, k) for k in
                ("g_w1", "g_b1", "g_w2", "g_b2", "f_w1", "f_b1", "f_w2", "f_b2")}


def init_head_params(dim: int, seed: int = 0, out_dim: int = PROJECTION_DIM) -> HeadParams:
    rng = np.random.default_rng(seed)

    def w(shape, name):
        std = 1.0 / np.sqrt(shape[0])  # fan-in scaled; keeps z away from zero norm
        return ad.parameter(rng.normal(0.0, std, size=shape).astype(np.float32), name)

    def z(shape, name):
        return ad.parameter(np.zeros(shape, np.float32), name)

    return HeadParams(
        g_w1=w((dim, dim), "g_w1"), g_b1=z(dim, "g_b1"),
        g_w2=w((dim, out_dim), "g_w2"), g_b2=z(out_dim, "g_b2"),
        f_w1=w((dim, dim), "f_w1"), f_b1=z(dim, "f_b1"),
        f_w2=w((dim, dim), "f_w2"), f_b2=z(dim, "f_b2"))


def project(h: Tensor, hp: HeadParams) -> Tensor:
    """Two-layer MLP to the 128-d representation space. h: [D] or [n,D]."""
    hidden = ad.relu(ad.linear(h, hp.g_w1, hp.g_b1))
    return ad.linear(hidden, hp.g_w2, hp.g_b2)


def predict_content(mem_prev: Tensor, hp: HeadParams) -> Tensor:
    """Pool the [M,D] memory block and predict a content embedding [D]."""
    pooled = ad.mean_rows(mem_prev)
    hidden = ad.relu(ad.linear(pooled, hp.f_w1, hp.f_b1))
    return ad.linear(hidden, hp.f_w2, hp.f_b2)


def content_embedding(last_frames_out: Tensor) -> Tensor:
    """Mean of the last segment's processed frame embeddings: [N,D] -> [D]."""
    return ad.mean_rows(last_frames_out)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Normalized dot product, in [-1,1]; zero vectors are an error."""
    an = ad.normalize_rows(a)
    bn = ad.normalize_rows(b)
    return ad.total_sum(ad.mul(an, bn))


# ---------------------------------------------------------------------------
# Positive-set construction
# ---------------------------------------------------------------------------


def quality_positive_sets(ann: BatchAnnotations, pairing: PairingConfig) -> list[list[int]]:
    """For each full-resolution anchor, indices of its quality positives.

    Candidates span the whole 2B batch. Membership: proxy scores within the
    pairing threshold, or being the anchor's resolution twin (twins inherit
    scores, so they qualify on both grounds).
    """
    scores = [ProxyScore(it.proxy_score, ann.metric_name) for it in ann.items]
    sets = []
    for i in range(ann.b):
        pos = [j for j in range(len(ann.items))
               if j != i and (j == ann.items[i].counterpart
                              or is_positive_pair(scores[i], scores[j], pairing))]
        sets.append(pos)
    return sets


def content_positive_sets(ann: BatchAnnotations) -> list[list[int]]:
    """Same-source full-resolution peers of each full-resolution anchor."""
    return [[j for j in range(ann.b)
             if j != i and ann.items[j].source_id == ann.items[i].source_id]
            for i in range(ann.b)]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    """Per-anchor loss values for the anchors that had positives."""

    anchor_ids: list[int]
    values: Tensor  # [len(anchor_ids)]
    skipped: list[int]

    def mean(self) -> Tensor:
        return ad.total_mean(self.values)


def _offdiag_mask(n: int) -> np.ndarray:
    return (1.0 - np.eye(n, dtype=np.float32))


def quality_loss(z: Tensor, positive_sets: list[list[int]], tau: float) -> LossTerms:
    """InfoNCE over quality representations.

    For anchor i with positive set P_i:
        L_i = log sum_{k != i} exp(phi(z_i,z_k)/tau)
              - (1/|P_i|) sum_{j in P_i} phi(z_i,z_j)/tau
    which is the mean over j of -log(exp(phi_ij/tau) / sum_{k != i} exp(phi_ik/tau)).
    """
    n = z.shape[0]
    b = len(positive_sets)
    if not 0 < b <= n:
        raise BatchContractError("positive_sets must cover the full-resolution anchors")
    y = ad.normalize_rows(z)
    phi = ad.matmul(y, ad.transpose(y))                     # [2B,2B] cosines
    e = ad.exp(ad.scale(phi, 1.0 / tau))
    denom = ad.row_sum(ad.mul(e, Tensor(_offdiag_mask(n))))  # excludes k = i
    log_denom = ad.log(denom)

    anchors = [i for i in range(b) if positive_sets[i]]
    skipped = [i for i in range(b) if not positive_sets[i]]
    if not anchors:
        raise EmptyAnchorsError("no anchor has a quality positive")

    pos_mask = np.zeros((n, n), dtype=np.float32)
    inv_count = np.zeros(n, dtype=np.float32)
    for i in anchors:
        pos_mask[i, positive_sets[i]] = 1.0
        inv_count[i] = 1.0 / (len(positive_sets[i]) * tau)
    pos_term = ad.mul(ad.row_sum(ad.mul(phi, Tensor(pos_mask))), Tensor(inv_count))

    per_anchor = ad.gather(ad.sub(log_denom, pos_term), anchors)
    return LossTerms(anchor_ids=anchors, values=per_anchor, skipped=skipped)


def content_loss(c: Tensor, c_hat: Tensor, same_source_sets: list[list[int]],
                 tau: float) -> LossTerms:
    """InfoNCE over content representations and their predictions.

    Candidate k contributes exp(phi(c_i,c_k)/tau) + exp(phi(c_i,c_hat_k)/tau)
    to anchor i's denominator (k != i); each same-source j != i contributes
    the log of its own pair of terms to the numerator.
    """
    b = c.shape[0]
    if c_hat.shape != c.shape or len(same_source_sets) != b:
        raise BatchContractError("content loss needs aligned c, c_hat and sets")
    cn = ad.normalize_rows(c)
    chn = ad.normalize_rows(c_hat)
    phi_cc = ad.matmul(cn, ad.transpose(cn))
    phi_ch = ad.matmul(cn, ad.transpose(chn))
    e_sum = ad.add(ad.exp(ad.scale(phi_cc, 1.0 / tau)),
                   ad.exp(ad.scale(phi_ch, 1.0 / tau)))    # [B,B]
    denom = ad.row_sum(ad.mul(e_sum, Tensor(_offdiag_mask(b))))
    log_denom = ad.log(denom)
    log_terms = ad.log(e_sum)

    anchors = [i for i in range(b) if same_source_sets[i]]
    skipped = [i for i in range(b) if not same_source_sets[i]]
    if not anchors:
        raise EmptyAnchorsError("no anchor has a same-source peer")

    mask = np.zeros((b, b), dtype=np.float32)
    inv_count = np.zeros(b, dtype=np.float32)
    for i in anchors:
        mask[i, same_source_sets[i]] = 1.0
        inv_count[i] = 1.0 / len(same_source_sets[i])
    num_term = ad.mul(ad.row_sum(ad.mul(log_terms, Tensor(mask))), Tensor(inv_count))

    per_anchor = ad.gather(ad.sub(log_denom, num_term), anchors)
    return LossTerms(anchor_ids=anchors, values=per_anchor, skipped=skipped)


def total_loss(lq: LossTerms, lc: LossTerms, lambda1: float) -> Tensor:
    """Weighted sum (1/B) sum_i (Lq_i + lambda1 * Lc_i) over full-res anchors.

    Each component averages over the anchors it covers, so a skipped anchor
    does not drag the mean toward zero.
    """
    return ad.add(lq.mean(), ad.scale(lc.mean(), lambda1))
