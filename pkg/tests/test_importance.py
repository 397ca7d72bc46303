from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasprune.errors import ContractError, InputError
from nasprune.importance import (AggregationScheme, PermutationRecord, apply_sorting, block_cosine, collect_stats,
                                 compute_rpd, descending_order, permute_weights, rpd_from_perplexities,
                                 score_blocks_by_drop, score_components, sort_supernet)
from nasprune.lora import attach_lora
from nasprune.model import forward, logits_np
from nasprune.search import sample_uniform


def _calib(cfg, n=6, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(n, cfg.max_seq_len))


def test_scheme_parsing():
    assert AggregationScheme.parse("norm-mean") == AggregationScheme("l2norm", "mean")
    assert AggregationScheme.parse("var-l2norm").name == "var-norm"
    assert len(AggregationScheme.all()) == 9
    with pytest.raises(ContractError):
        AggregationScheme.parse("max-mean")


def _direct_agg(acts, scheme):
    """Aggregate a list of B x T x C activations without streaming."""
    x = np.concatenate([np.asarray(a, dtype=np.float64) for a in acts])
    seq = {"mean": lambda a: np.abs(a).mean(1), "l2norm": lambda a: np.sqrt((a * a).sum(1)),
           "variance": lambda a: a.var(1)}[scheme.over_sequence](x)
    return {"mean": lambda s: s.mean(0), "l2norm": lambda s: np.sqrt((s * s).sum(0)),
            "variance": lambda s: s.var(0)}[scheme.over_batch](seq)


@pytest.mark.parametrize("scheme", AggregationScheme.all(), ids=lambda s: s.name)
def test_streamed_scores_match_direct_aggregation(tiny_w, scheme):
    cfg = tiny_w.cfg
    calib = _calib(cfg, 7)
    batches = [calib[:3], calib[3:5], calib[5:]]
    stats = collect_stats(tiny_w, batches)
    scores = score_components(stats, scheme)
    _, tr = forward(tiny_w, cfg.theta_max, calib, trace=True)
    emb = sum(_direct_agg([a], scheme) for a in tr.norm_outputs)
    np.testing.assert_allclose(scores.emb, emb, rtol=1e-6, atol=1e-9)
    for l in range(cfg.n_layers_max):
        np.testing.assert_allclose(scores.ffn[l], _direct_agg([tr.ffn_preacts[l]], scheme), rtol=1e-6, atol=1e-9)
        g = np.linalg.norm(tr.attn_group_outputs[l].astype(np.float64), axis=-1)
        np.testing.assert_allclose(scores.gqa[l], _direct_agg([g], scheme), rtol=1e-6, atol=1e-9)
    cos = [block_cosine(tr.block_inputs[l], tr.block_outputs[l]).mean() for l in range(cfg.n_layers_max)]
    np.testing.assert_allclose(scores.blocks, 1 - np.array(cos), rtol=1e-6)


@pytest.mark.parametrize("scheme", AggregationScheme.all(), ids=lambda s: s.name)
def test_duplicate_neurons_score_identically(tiny_w, scheme):
    w = tiny_w.copy()
    w.params["blocks.1.w0"][:, 5] = w.params["blocks.1.w0"][:, 2]
    scores = score_components(collect_stats(w, [_calib(w.cfg)]), scheme)
    assert scores.ffn[1, 5] == scores.ffn[1, 2]
    assert scores.ffn[1, 5] != scores.ffn[1, 3]


def test_block_cosine_oracle():
    a = np.array([[[1.0, 0.0], [1.0, 1.0]]])
    b = np.array([[[0.0, 2.0], [2.0, 2.0]]])
    np.testing.assert_allclose(block_cosine(a, b), [[0.0, 1.0]])


def test_descending_order_breaks_ties_by_index():
    assert descending_order([1.0, 3.0, 3.0, 2.0, 1.0]).tolist() == [1, 2, 3, 0, 4]


@pytest.mark.parametrize("scheme", ["mean-mean", "norm-mean", "var-var", "mean-norm"])
def test_sorting_preserves_full_network(tiny_w, scheme):
    cfg = tiny_w.cfg
    stats = collect_stats(tiny_w, [_calib(cfg)])
    sorted_w, record = apply_sorting(tiny_w, score_components(stats, scheme))
    assert not record.is_identity()
    for seed in range(5):
        toks = _calib(cfg, 2, seed + 10)
        np.testing.assert_allclose(logits_np(sorted_w, cfg.theta_max, toks),
                                   logits_np(tiny_w, cfg.theta_max, toks), atol=1e-5)


def test_sorted_prefix_holds_top_scores(tiny_w):
    cfg = tiny_w.cfg
    scores = score_components(collect_stats(tiny_w, [_calib(cfg)]))
    sorted_w, _ = apply_sorting(tiny_w, scores)
    again = score_components(collect_stats(sorted_w, [_calib(cfg)]))
    assert np.all(np.diff(again.emb) <= 1e-6 * again.emb.max())
    assert all(np.all(np.diff(f) <= 1e-6 * f.max()) for f in again.ffn)
    assert all(np.all(np.diff(g) <= 1e-6 * g.max()) for g in again.gqa)
    # a second sort is the identity up to floating-point ties
    _, rec2 = apply_sorting(sorted_w, again)
    assert rec2.is_identity()
    np.testing.assert_array_equal(sorted_w.block_scores, scores.blocks)


def test_inverse_permutation_restores_weights(tiny_w):
    scores = score_components(collect_stats(tiny_w, [_calib(tiny_w.cfg)]))
    sorted_w, rec = apply_sorting(tiny_w, scores)
    back = permute_weights(sorted_w, rec.inverse())
    for k in tiny_w.params:
        np.testing.assert_array_equal(back.params[k], tiny_w.params[k])
    composed = rec.then(rec.inverse())
    assert composed.is_identity()
    assert PermutationRecord.from_dict(rec.to_dict()).to_dict() == rec.to_dict()


def test_non_bijection_rejected(tiny_w):
    rec = PermutationRecord.identity(tiny_w.cfg)
    rec.emb[0] = 1
    with pytest.raises(ContractError, match="bijection"):
        permute_weights(tiny_w, rec)


def test_sorting_after_lora_rejected(tiny_w):
    scores = score_components(collect_stats(tiny_w, [_calib(tiny_w.cfg)]))
    with pytest.raises(ContractError):
        apply_sorting(attach_lora(tiny_w), scores)


def test_block_drop_scores(tiny_w):
    windows = np.random.default_rng(0).integers(0, tiny_w.cfg.vocab_size, size=(4, tiny_w.cfg.max_seq_len + 1))
    drop = score_blocks_by_drop(tiny_w, windows)
    assert drop.shape == (tiny_w.cfg.n_layers_max,)
    _, _, sc = sort_supernet(tiny_w, windows, block_scheme="drop")
    np.testing.assert_allclose(sc.blocks, drop)
    one = tiny_w.copy()
    object.__setattr__(one, "cfg", type(one.cfg)(**{**one.cfg.to_dict(), "n_layers_max": 1}))
    with pytest.raises(ContractError):
        score_blocks_by_drop(one, windows)


def test_rpd_definition():
    assert rpd_from_perplexities([10.0, 20.0], [5.0, 20.0]) == pytest.approx(0.25)
    assert rpd_from_perplexities([4.0], [5.0]) == pytest.approx(-0.25)
    with pytest.raises(InputError):
        rpd_from_perplexities([], [])


def test_rpd_of_identity_is_zero(tiny_w, tiny_space):
    windows = np.random.default_rng(0).integers(0, tiny_w.cfg.vocab_size, size=(3, tiny_w.cfg.max_seq_len + 1))
    rng = np.random.default_rng(0)
    thetas = [sample_uniform(tiny_space, rng) for _ in range(4)]
    assert compute_rpd(tiny_w, tiny_w, thetas, windows) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30))
def test_descending_order_is_a_sorting_permutation(vals):
    order = descending_order(vals)
    assert sorted(order.tolist()) == list(range(len(vals)))
    s = np.asarray(vals)[order]
    assert np.all(np.diff(s) <= 0)
