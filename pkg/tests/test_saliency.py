import math
from collections import OrderedDict
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toyunlearn.numerics import COMPONENTS, ContractError, ParamSet, backward
from toyunlearn.saliency import (
    GradientMask,
    SaliencyMap,
    compute_mask,
    component_fractions,
    fisher_diag,
    mask_stats,
    mask_stats_csv,
)
from toyunlearn.unlearn import nll_item_loss


def logistic(w: float):
    ps = ParamSet()
    ps.add("w", np.array([w]), "language_model")
    ps.add("unused", np.array([0.3, 0.1]), "vision_encoder")
    return SimpleNamespace(params=ps)


def logistic_nll(model, sample):
    x, y = sample
    z = model.params["w"][0] * x
    return -(y * torch.nn.functional.logsigmoid(z) + (1 - y) * torch.nn.functional.logsigmoid(-z))


def sal(values: dict, comp="language_model") -> SaliencyMap:
    scores = OrderedDict((k, torch.as_tensor(np.asarray(v, dtype=np.float64))) for k, v in values.items())
    return SaliencyMap(scores, {k: comp for k in values})


def test_logistic_fisher_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        w, x, y = rng.normal(), rng.normal() * 3, int(rng.integers(2))
        s = fisher_diag(logistic(w), [(x, y)], logistic_nll)
        sigma = 1 / (1 + math.exp(-w * x))
        assert abs(float(s.scores["w"][0]) - ((sigma - y) * x) ** 2) <= 1e-10


def test_fisher_is_mean_of_squares():
    model = logistic(0.4)
    data = [(1.0, 1), (-2.0, 0), (0.5, 1)]
    s = fisher_diag(model, data, logistic_nll, "toy")
    sq = [float(backward(logistic_nll(model, d), model.params)["w"][0]) ** 2 for d in data]
    assert abs(float(s.scores["w"][0]) - np.mean(sq)) < 1e-15
    assert s.sample_count == 3 and s.source_dataset_id == "toy"
    assert not s.scores["unused"].any()


def test_fisher_rejects_empty():
    with pytest.raises(ContractError):
        fisher_diag(logistic(0.1), [], logistic_nll)


def test_mask_examples():
    m = compute_mask(sal({"a": [4.0, 0.5, 2.0, 0.0]}), sal({"a": [1.0, 1.0, 2.0, 0.0]}), beta=1.0)
    # equality counts (>=); a zero/zero coordinate is not salient
    assert m.bits["a"].tolist() == [True, False, True, False]


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 16, elements=st.floats(0, 1e3)),
    arrays(np.float64, 16, elements=st.floats(0, 1e3)),
)
def test_mask_monotone_in_beta(st_, sp_):
    masks = [compute_mask(sal({"a": st_}), sal({"a": sp_}), beta=b).bits["a"] for b in (0.5, 1.0, 2.0)]
    assert bool((masks[2] <= masks[1]).all()) and bool((masks[1] <= masks[0]).all())


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(1e-3, 1e3)), st.floats(1e-3, 1e3))
def test_mask_tie_is_one(s, c):
    assert bool(compute_mask(sal({"a": s}), sal({"a": s}), 1.0).bits["a"].all())


def test_scope_zeroes_other_components():
    st_ = SaliencyMap(OrderedDict(v=torch.ones(3, dtype=torch.float64), c=torch.ones(2, dtype=torch.float64)), {"v": "vision_encoder", "c": "connector"})
    sp_ = SaliencyMap(OrderedDict(v=torch.zeros(3, dtype=torch.float64), c=torch.zeros(2, dtype=torch.float64)), dict(st_.components))
    m = compute_mask(st_, sp_, 1.0, scope=("connector",))
    assert not m.bits["v"].any() and m.bits["c"].all()
    assert m.component_scope == ("connector",)


def test_mask_rejects_bad_inputs():
    with pytest.raises(ContractError):
        compute_mask(sal({"a": [1.0]}), sal({"a": [1.0]}), beta=0)
    with pytest.raises(ContractError):
        compute_mask(sal({"a": [1.0]}), sal({"b": [1.0]}))


def test_mask_stats(tiny_model):
    params = tiny_model.params
    zero = mask_stats(GradientMask.full(params, False), params)
    assert sum(r["set_bits"] for r in zero) == 0
    one = mask_stats(GradientMask.full(params, True), params)
    assert sum(r["set_bits"] for r in one) == params.numel() == sum(r["total_bits"] for r in one)
    rng = np.random.default_rng(0)
    rand = GradientMask.full(params, False)
    for n in rand.bits:
        rand.bits[n] = torch.as_tensor(rng.random(tuple(rand.bits[n].shape)) < 0.3)
    assert sum(r["set_bits"] for r in mask_stats(rand, params)) == rand.total()
    assert mask_stats_csv(one).splitlines()[0] == "layer_index,sublayer_kind,set_bits,total_bits"
    assert set(component_fractions(GradientMask.full(params, True)).values()) == {1.0}


def test_saliency_on_model_and_round_trip(tmp_path, tiny_model, bench):
    s_t = fisher_diag(tiny_model, bench.targeted, nll_item_loss, "targeted")
    s_p = fisher_diag(tiny_model, bench.preserved[:40], nll_item_loss, "preserved")
    m = compute_mask(s_t, s_p)
    m.check_matches(tiny_model.params)
    assert 0 < m.total() < m.numel()
    # forget-concept visual items never touch the text-only path, yet every component gets some saliency
    assert all(any(bool(s_t.scores[n].any()) for n in s_t.scores if s_t.components[n] == c) for c in COMPONENTS)
    s_t.save(tmp_path / "s.bin")
    back = SaliencyMap.load(tmp_path / "s.bin")
    assert all(torch.equal(back.scores[n], s_t.scores[n]) for n in s_t.scores)
    assert back.sample_count == s_t.sample_count
    m.save(tmp_path / "m.bin")
    mb = GradientMask.load(tmp_path / "m.bin")
    assert mb.coordinates() == m.coordinates() and mb.beta == m.beta


def test_mask_ratio_invariant_to_common_scale(tiny_model, bench):
    s_t = fisher_diag(tiny_model, bench.targeted, nll_item_loss)
    s_p = fisher_diag(tiny_model, bench.preserved[:40], nll_item_loss)
    scaled_t = SaliencyMap(OrderedDict((n, 4.0 * v) for n, v in s_t.scores.items()), s_t.components)
    scaled_p = SaliencyMap(OrderedDict((n, 4.0 * v) for n, v in s_p.scores.items()), s_p.components)
    # scaling by a power of two is exact; only the epsilon guard can change a bit
    a, b = compute_mask(s_t, s_p), compute_mask(scaled_t, scaled_p)
    diff = a.coordinates() ^ b.coordinates()
    for n, i in diff:
        assert float(s_p.scores[n].reshape(-1)[i]) < 1e-10
