from functools import lru_cache

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from toyunlearn.datagen import QAItem
from toyunlearn.evaluate import (
    choice_scores,
    deviation_heatmap,
    evaluate_all,
    group_counts,
    heatmap_csv,
    lcs_length,
    mc_accuracy,
    predict,
    report_deltas,
    rouge_l,
    top_deviated,
)
from toyunlearn.model import TokenSequence, lm_forward, project, encode_image
from toyunlearn.numerics import ContractError


def lcs_recursive(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_oracle(p, g):
    lcs = lcs_recursive(tuple(p), tuple(g))
    if lcs == 0:
        return 0.0
    r, pr = lcs / len(g), lcs / len(p)
    return 2 * r * pr / (r + pr)


def test_rouge_examples():
    assert rouge_l([1, 2, 3], [1, 2, 3]) == 1.0
    assert rouge_l([1, 2], [3, 4]) == 0.0
    assert lcs_length("abd", "abc") == 2
    assert rouge_l("abd", "abc") == pytest.approx(2 / 3, abs=1e-15)
    assert rouge_l([], [1]) == 0.0
    with pytest.raises(ContractError):
        rouge_l([1], [])


def test_rouge_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(99)
    for _ in range(100):
        p = rng.integers(0, 6, size=rng.integers(1, 21)).tolist()
        g = rng.integers(0, 6, size=rng.integers(1, 21)).tolist()
        assert rouge_l(p, g) == rouge_oracle(p, g)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=12), st.lists(st.integers(0, 4), min_size=1, max_size=12))
def test_rouge_bounds_and_symmetry(p, g):
    v = rouge_l(p, g)
    assert 0.0 <= v <= 1.0
    assert v == rouge_l(g, p)


def _oracle_scores(model, item):
    hv = None if item.image is None else project(model, encode_image(model, item.image))
    out = []
    for c in range(len(item.choices)):
        seq = item.sequence(c)
        with torch.no_grad():
            logits = lm_forward(model, hv, seq)
        offset = 0 if hv is None else hv.shape[0]
        logp = torch.log_softmax(logits[offset:], -1)
        s, e = seq.answer_span
        out.append(np.mean([float(logp[j - 1, seq.ids[j]]) for j in range(s, e)]))
    return np.array(out)


def test_mc_accuracy_matches_enumeration(tiny_model, bench):
    items = bench.items[::5]
    fast = choice_scores(tiny_model, items)
    hits = 0
    for it, f in zip(items, fast):
        o = _oracle_scores(tiny_model, it)
        np.testing.assert_allclose(f, o, rtol=0, atol=1e-12)
        assert predict(f) == int(np.argmax(o))
        hits += int(np.argmax(o)) == it.correct_index
    assert mc_accuracy(tiny_model, items) == hits / len(items)


def test_single_token_choice_is_next_token_logprob(tiny_model, bench):
    it = next(i for i in bench.items if i.modality == "textual")
    logits = lm_forward(tiny_model, None, it.question).detach()
    logp = torch.log_softmax(logits[-1], -1)
    scores = choice_scores(tiny_model, [it])[0]
    expected = [float(logp[c.ids[0]]) for c in it.choices]
    np.testing.assert_allclose(scores, expected, rtol=0, atol=1e-12)
    probs = np.exp(scores) / np.exp(scores).sum()
    assert abs(probs.sum() - 1) < 1e-12


def test_ties_go_to_lowest_index():
    assert predict(np.array([0.1, 0.3, 0.3, 0.2])) == 1


def test_hardwired_model_scores_one():
    from conftest import tiny_config
    from toyunlearn.model import init_model

    model = init_model(tiny_config(vocab_size=8), 0)
    bias = np.zeros(8)
    bias[5] = 30.0
    model = model.with_params(
        model.params.replace({"lm.head.weight": torch.zeros(8, 16, dtype=torch.float64), "lm.head.bias": torch.as_tensor(bias)})
    )
    choices = tuple(TokenSequence((v,), (0, 1)) for v in (3, 5, 6, 7))
    items = [QAItem("textual", TokenSequence((1, 2)), choices, 1, item_id=f"x{i}") for i in range(3)]
    assert mc_accuracy(model, items) == 1.0


def test_uniform_random_scorer_near_chance():
    rng = np.random.default_rng(5)
    hits = [predict(rng.random(4)) == rng.integers(4) for _ in range(1000)]
    assert abs(np.mean(hits) - 0.25) <= 0.05


def test_report_deterministic_and_complete(tiny_model, bench):
    a = evaluate_all(tiny_model, bench.split, bench.items[:: 4], bench.vocab.eos)
    b = evaluate_all(tiny_model, bench.split, bench.items[:: 4], bench.vocab.eos)
    assert a.to_csv() == b.to_csv() and a.summary() == b.summary()
    assert len(a.accuracy) == 6 and len(a.rouge_l) == 3
    deltas = report_deltas(a, b).splitlines()
    assert deltas[0] == "dimension,before,after,delta" and len(deltas) > 1


def test_heatmap_degenerate_tie(tiny_model):
    params = tiny_model.params
    for n in (0, 10, 1000, params.numel()):
        recs = deviation_heatmap(params, params.clone(), n)
        assert sum(r.count for r in recs) == n
    first = top_deviated(params, params.clone(), 3)
    name = sorted(params.names())[0]
    assert first == [(name, 0), (name, 1), (name, 2)]


def test_heatmap_single_coordinate(tiny_model):
    params = tiny_model.params
    moved = params.perturbed("lm.blocks.0.mlp.fc.weight", 17, 1.0)
    assert top_deviated(params, moved, 1) == [("lm.blocks.0.mlp.fc.weight", 17)]
    counts = group_counts(deviation_heatmap(params, moved, 1))
    assert counts[(0, "mlp")] == 1 and sum(counts.values()) == 1
    assert heatmap_csv(deviation_heatmap(params, moved, 1)).splitlines()[0] == "layer_index,sublayer_kind,count"


def test_heatmap_counts_sum_random(tiny_model):
    rng = np.random.default_rng(2)
    moved = tiny_model.params.replace(
        {n: tiny_model.params[n] + torch.as_tensor(rng.normal(size=tuple(tiny_model.params[n].shape))) for n in tiny_model.params}
    )
    for n in (10, 1000, tiny_model.params.numel()):
        assert sum(group_counts(deviation_heatmap(tiny_model.params, moved, n)).values()) == n
    with pytest.raises(ContractError):
        top_deviated(tiny_model.params, moved, tiny_model.params.numel() + 1)


def test_empty_accuracy_rejected(tiny_model):
    with pytest.raises(ContractError):
        mc_accuracy(tiny_model, [])
