"""Projector/predictor heads and the contrastive losses vs enumeration oracles."""

import math

import numpy as np
import pytest

from memvqa import autodiff as ad
from memvqa.autodiff import Tensor
from memvqa.heads import (BatchAnnotations, BatchContractError, BatchItem,
                          EmptyAnchorsError, content_embedding, content_loss,
                          content_positive_sets, cosine, init_head_params,
                          predict_content, project, quality_loss,
                          quality_positive_sets, total_loss)
from memvqa.scoring import PairingConfig


def tens(rows):
    return Tensor(np.asarray(rows, dtype=np.float32))


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def test_project_zero_weights_zero_output():
    hp = init_head_params(6, seed=0)
    for p in hp.named().values():
        p.data = np.zeros_like(p.data)
    out = project(tens(np.ones((3, 6))), hp)
    np.testing.assert_array_equal(out.data, np.zeros((3, 128)))


def test_project_output_dim_always_128():
    for dim in (4, 16, 64):
        hp = init_head_params(dim, seed=1)
        out = project(tens(np.ones((2, dim))), hp)
        assert out.shape == (2, 128)


def test_project_matches_straight_line_oracle():
    hp = init_head_params(5, seed=2)
    x = np.random.default_rng(3).normal(size=(4, 5)).astype(np.float32)
    got = project(tens(x), hp).data
    hidden = np.maximum(x @ hp.g_w1.data + hp.g_b1.data, 0)
    expect = hidden @ hp.g_w2.data + hp.g_b2.data
    np.testing.assert_allclose(got, expect, atol=1e-5)


def test_predict_content_zero_memory_zero_bias():
    hp = init_head_params(6, seed=4)
    hp.f_b1.data[:] = 0
    hp.f_b2.data[:] = 0
    out = predict_content(tens(np.zeros((3, 6))), hp)
    np.testing.assert_array_equal(out.data, np.zeros(6))


def test_predict_content_deterministic():
    hp = init_head_params(6, seed=5)
    mem = tens(np.random.default_rng(6).normal(size=(2, 6)))
    a = predict_content(mem, hp).data
    b = predict_content(mem, hp).data
    np.testing.assert_array_equal(a, b)


def test_predicted_content_rep_is_128d():
    hp = init_head_params(6, seed=7)
    mem = tens(np.random.default_rng(8).normal(size=(2, 6)))
    c_hat = project(predict_content(mem, hp), hp)
    assert c_hat.shape == (128,)


def test_content_embedding_mean():
    out = content_embedding(tens([[1.0, 3.0], [3.0, 5.0]]))
    np.testing.assert_allclose(out.data, [2.0, 4.0], atol=1e-7)
    same = content_embedding(tens([[7.0, 1.0]] * 5))
    np.testing.assert_allclose(same.data, [7.0, 1.0], atol=1e-7)
    zero = content_embedding(tens([[2.0, -1.0], [-2.0, 1.0]]))
    np.testing.assert_allclose(zero.data, [0.0, 0.0], atol=1e-7)


# ---------------------------------------------------------------------------
# cosine
# ---------------------------------------------------------------------------


def test_cosine_self_opposite_scale():
    v = tens([1.0, 2.0, -3.0])
    assert cosine(v, v).item() == pytest.approx(1.0, abs=1e-6)
    assert cosine(v, ad.scale(v, -1.0)).item() == pytest.approx(-1.0, abs=1e-6)
    assert cosine(v, ad.scale(v, 5.0)).item() == pytest.approx(1.0, abs=1e-6)


def test_cosine_zero_vector_error():
    with pytest.raises(ValueError):
        cosine(tens([0.0, 0.0]), tens([1.0, 0.0]))


# ---------------------------------------------------------------------------
# batch annotations and positive sets
# ---------------------------------------------------------------------------


def make_ann(scores_full, sources_full, scores_down=None):
    b = len(scores_full)
    scores_down = scores_down or scores_full
    items = [BatchItem(f"p{i}", sources_full[i], scores_full[i], "full", b + i)
             for i in range(b)]
    items += [BatchItem(f"p{i}__d", sources_full[i], scores_down[i], "down", i)
              for i in range(b)]
    return BatchAnnotations(items=items, metric_name="psnr")


def test_batch_contract_enforced():
    with pytest.raises(BatchContractError):
        BatchAnnotations(items=[BatchItem("a", "s", 1.0, "full", 1),
                                BatchItem("b", "s", 1.0, "down", 0)])
    items = [BatchItem("a", "s", 1.0, "down", 2), BatchItem("b", "s", 1.0, "full", 3),
             BatchItem("c", "s", 1.0, "full", 0), BatchItem("d", "s", 1.0, "down", 1)]
    with pytest.raises(BatchContractError):
        BatchAnnotations(items=items)


def test_quality_positive_sets_threshold_and_twin():
    ann = make_ann([10.0, 20.0, 11.0], ["a", "b", "c"])
    sets = quality_positive_sets(ann, PairingConfig(threshold=3.0))
    # anchor 0 (score 10): twin 3; close scores: 2 (11), 5 (11 via twin inherit)
    assert sorted(sets[0]) == [2, 3, 5]
    # anchor 1 (score 20): only its twin 4
    assert sets[1] == [4]


def test_content_positive_sets_same_source():
    ann = make_ann([1.0, 2.0, 3.0], ["a", "b", "a"])
    assert content_positive_sets(ann) == [[2], [], [0]]


# ---------------------------------------------------------------------------
# quality loss: closed forms and enumeration oracle
# ---------------------------------------------------------------------------


def test_quality_loss_identical_reps_closed_form():
    # B=2: all four z identical and every pair positive -> log(2B-1) = log 3
    z = tens(np.tile([0.3, -0.7, 0.2], (4, 1)))
    lt = quality_loss(z, [[1, 2, 3], [0, 2, 3]], tau=0.1)
    assert lt.mean().item() == pytest.approx(math.log(3), abs=1e-5)


def quality_oracle(z, positive_sets, tau):
    """Direct per-anchor enumeration of the quality-aware loss."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]

    def phi(i, j):
        return float(z[i] @ z[j] / (np.linalg.norm(z[i]) * np.linalg.norm(z[j])))

    per_anchor = []
    for i, positives in enumerate(positive_sets):
        if not positives:
            continue
        denom = sum(math.exp(phi(i, k) / tau) for k in range(n) if k != i)
        total = 0.0
        for j in positives:
            total += math.log(math.exp(phi(i, j) / tau) / denom)
        per_anchor.append(-total / len(positives))
    return float(np.mean(per_anchor))


def test_quality_loss_single_positive_separated():
    # anchor and twin aligned, everything else opposed
    z = np.array([[1.0, 0.0], [-1.0, 0.01], [1.0, 0.0], [-1.0, -0.01]], np.float32)
    sets = [[2], [3]]
    lt = quality_loss(tens(z), sets, tau=0.1)
    assert lt.mean().item() == pytest.approx(quality_oracle(z, sets, 0.1), abs=1e-6)


def test_quality_loss_matches_oracle_random_batches():
    rng = np.random.default_rng(9)
    for b in (2, 3, 4):
        z = rng.normal(size=(2 * b, 6)).astype(np.float32)
        scores = list(rng.uniform(0, 50, size=b))
        ann = make_ann(scores, [f"s{i % 2}" for i in range(b)])
        sets = quality_positive_sets(ann, PairingConfig(threshold=10.0))
        lt = quality_loss(tens(z), sets, tau=0.1)
        assert lt.mean().item() == pytest.approx(quality_oracle(z, sets, 0.1), abs=1e-6)


def test_quality_loss_sharper_temperature_separates_more():
    z = np.array([[1.0, 0.0], [-1.0, 0.01], [1.0, 0.0], [-1.0, -0.01]], np.float32)
    sets = [[2], [3]]
    sharp = quality_loss(tens(z), sets, tau=0.1).mean().item()
    soft = quality_loss(tens(z), sets, tau=0.99).mean().item()
    assert sharp <= soft


def test_quality_loss_positive_when_negatives_exist():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(6, 4)).astype(np.float32)
    lt = quality_loss(tens(z), [[3], [4, 2], [5]], tau=0.3)
    assert (lt.values.data > 0).all()


def test_quality_loss_all_anchors_skipped():
    z = tens(np.random.default_rng(11).normal(size=(4, 3)))
    with pytest.raises(EmptyAnchorsError):
        quality_loss(z, [[], []], tau=0.1)


def test_quality_loss_skip_counted():
    z = tens(np.random.default_rng(12).normal(size=(4, 3)))
    lt = quality_loss(z, [[1], []], tau=0.1)
    assert lt.anchor_ids == [0] and lt.skipped == [1]


def test_quality_loss_symmetric_under_relabeling():
    # identical z and mirrored positive structure -> identical per-anchor values
    z = np.array([[1.0, 2.0], [1.0, 2.0], [0.5, -1.0], [0.5, -1.0]], np.float32)
    lt = quality_loss(tens(z), [[1, 2], [0, 3]], tau=0.2)
    assert lt.values.data[0] == pytest.approx(lt.values.data[1], abs=1e-6)


# ---------------------------------------------------------------------------
# content loss
# ---------------------------------------------------------------------------


def test_content_loss_identical_reps_closed_form():
    # B=3, all same source, c == c_hat identical -> log(B-1) = log 2
    c = tens(np.tile([0.5, 0.1, -0.4], (3, 1)))
    lt = content_loss(c, c, [[1, 2], [0, 2], [0, 1]], tau=0.1)
    assert lt.mean().item() == pytest.approx(math.log(2), abs=1e-5)


def test_content_loss_degenerate_batch_errors():
    c = tens(np.random.default_rng(13).normal(size=(2, 4)))
    with pytest.raises(EmptyAnchorsError):
        content_loss(c, c, [[], []], tau=0.1)


def content_oracle(c, c_hat, sets, tau):
    c = np.asarray(c, np.float64)
    c_hat = np.asarray(c_hat, np.float64)
    b = c.shape[0]

    def phi(a, bb):
        return float(a @ bb / (np.linalg.norm(a) * np.linalg.norm(bb)))

    per_anchor = []
    for i, same in enumerate(sets):
        if not same:
            continue
        denom = sum(math.exp(phi(c[i], c[k]) / tau) + math.exp(phi(c[i], c_hat[k]) / tau)
                    for k in range(b) if k != i)
        total = 0.0
        for j in same:
            num = math.exp(phi(c[i], c[j]) / tau) + math.exp(phi(c[i], c_hat[j]) / tau)
            total += math.log(num / denom)
        per_anchor.append(-total / len(same))
    return float(np.mean(per_anchor))


def test_content_loss_matches_oracle_random_batches():
    rng = np.random.default_rng(14)
    for b in (2, 3, 4):
        c = rng.normal(size=(b, 5)).astype(np.float32)
        ch = rng.normal(size=(b, 5)).astype(np.float32)
        sources = [f"s{i % 2}" for i in range(b)]
        sets = [[j for j in range(b) if j != i and sources[j] == sources[i]]
                for i in range(b)]
        if not any(sets):
            continue
        lt = content_loss(tens(c), tens(ch), sets, tau=0.1)
        assert lt.mean().item() == pytest.approx(content_oracle(c, ch, sets, 0.1),
                                                 abs=1e-6)


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------


def _terms(values, ids):
    from memvqa.heads import LossTerms
    return LossTerms(anchor_ids=ids, values=tens(values), skipped=[])


def test_total_loss_lambda_zero_is_quality_mean():
    lq = _terms([1.0, 3.0], [0, 1])
    lc = _terms([10.0, 10.0], [0, 1])
    assert total_loss(lq, lc, 0.0).item() == pytest.approx(2.0, abs=1e-6)


def test_total_loss_equal_values_sum():
    lq = _terms([2.5, 2.5], [0, 1])
    lc = _terms([0.75, 0.75], [0, 1])
    assert total_loss(lq, lc, 1.0).item() == pytest.approx(3.25, abs=1e-6)


def test_total_loss_matches_direct_sum_oracle():
    rng = np.random.default_rng(15)
    b = 4
    q = rng.uniform(0.1, 3, size=b)
    c = rng.uniform(0.1, 3, size=b)
    lam = 0.7
    expect = float(np.mean(q + lam * c))
    got = total_loss(_terms(q, list(range(b))), _terms(c, list(range(b))), lam).item()
    assert got == pytest.approx(expect, rel=1e-6)


def test_total_loss_gradients_reach_all_heads_params():
    hp = init_head_params(6, seed=16)
    rng = np.random.default_rng(17)
    hv = tens(rng.normal(size=(4, 6)))
    mem = tens(rng.normal(size=(3, 6)))
    lf = tens(rng.normal(size=(2, 6)))
    z = project(hv, hp)
    c = project(ad.concat_rows([ad.reshape_row(content_embedding(lf))] * 2), hp)
    ch = project(ad.concat_rows([ad.reshape_row(predict_content(mem, hp))] * 2), hp)
    lq = quality_loss(z, [[2], [3]], tau=0.1)
    lc = content_loss(c, ch, [[1], [0]], tau=0.1)
    loss = total_loss(lq, lc, 1.0)
    loss.backward()
    for name, p in hp.named().items():
        assert p.grad is not None and np.any(p.grad != 0), f"dead head param {name}"
