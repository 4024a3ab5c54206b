import json

import numpy as np
import pytest

from tsnas.data import WindowedDataset, gen_synthetic, make_windows
from tsnas.errors import ConfigError, NumericError
from tsnas.hypernet import HyperNetwork
from tsnas.nnops import ForecastModel, ModelConfig
from tsnas.search import (
    SearchConfig,
    ab_darts_search,
    contribution_score,
    darts_search,
    evaluate_loss,
    fit,
    train_subnet,
)
from tsnas.searchspace import full_space, reduced_space, vanilla_spec

CFG = ModelConfig(d_m=8, num_blocks=1, num_heads=2, patch_len=4, patch_stride=4, lookback=16, horizon=4,
                  dropout=0.0)
FAST = SearchConfig(K1=1, K2=1, K3=2, batch_size=32, lr=1e-3, eval_every=5, patience=2)


@pytest.fixture(scope="module")
def splits():
    return make_windows(gen_synthetic("sines", 300, 1, seed=0), 16, 4, (0.7, 0.1, 0.2))


def empty_like(ds):
    return ds.subset(0, 0, "val")


def test_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig(K1=0)
    with pytest.raises(ConfigError):
        SearchConfig(lr=0.0)
    with pytest.raises(ConfigError):
        SearchConfig(patience=0)


def test_empty_validation_is_a_config_error(splits):
    hn = HyperNetwork(CFG, full_space(), seed=0)
    with pytest.raises(ConfigError):
        contribution_score(hn, 0, 0, empty_like(splits["val"]))
    with pytest.raises(ConfigError):
        ab_darts_search(hn, splits["train"], empty_like(splits["val"]), FAST)


def test_node_order_must_be_permutation(splits):
    hn = HyperNetwork(CFG, full_space(), seed=0)
    cfg = SearchConfig(**{**FAST.to_dict(), "node_order": [0, 0, 1, 2, 3]})
    with pytest.raises(ConfigError):
        ab_darts_search(hn, splits["train"], splits["val"], cfg)


def test_ab_darts_trace_is_deterministic(splits, tmp_path):
    texts = []
    for i in range(2):
        path = tmp_path / f"t{i}.jsonl"
        _, trace = ab_darts_search(HyperNetwork(CFG, full_space(), seed=0), splits["train"], splits["val"],
                                   FAST, trace_path=path)
        texts.append(path.read_text())
        assert path.read_text() == trace.to_jsonl()
    assert texts[0] == texts[1]
    records = [json.loads(line) for line in texts[0].splitlines()]
    assert [r["node"] for r in records] == ["block0.enc_attn", "block0.attn", "block0.enc_ffn", "block0.act",
                                            "block0.k"]
    for r in records:
        # the kept op is the one whose removal hurts validation most
        scores = [s for s in r["scores"] if s is not None]
        assert r["scores"][r["chosen_index"]] == max(scores)
    assert trace.scoring_events() == 5 + 5 + 5 + 5 + 4


def test_ab_darts_does_not_touch_alpha(splits):
    hn = HyperNetwork(CFG, full_space(), seed=0)
    before = [a.data.copy() for a in hn.alphas()]
    ab_darts_search(hn, splits["train"], splits["val"], FAST)
    for a, b in zip(hn.alphas(), before):
        np.testing.assert_array_equal(a.data, b)
        assert a.requires_grad


def test_pre_discretized_space_has_no_scoring(splits):
    hn = HyperNetwork(CFG, reduced_space("s4"), seed=0)
    spec, trace = ab_darts_search(hn, splits["train"], splits["val"], FAST)
    assert trace.scoring_events() == 0
    assert all(r.pre_discretized for r in trace.records)
    assert trace.timings["optimizer_steps"] == 0
    assert spec == vanilla_spec(1)


def test_custom_node_order_is_followed(splits):
    cfg = SearchConfig(**{**FAST.to_dict(), "node_order": [4, 3, 2, 1, 0]})
    _, trace = ab_darts_search(HyperNetwork(CFG, full_space(), seed=0), splits["train"], splits["val"], cfg)
    assert [r.node_id for r in trace.records] == [4, 3, 2, 1, 0]


def test_darts_matches_artifact_shape(splits):
    hn = HyperNetwork(CFG, full_space(), seed=0)
    spec, trace = darts_search(hn, splits["train"], splits["val"], FAST)
    assert len(spec.blocks) == 1 and len(trace.records) == 5
    assert trace.algorithm == "darts"
    # alpha moved away from its uniform start
    assert any(np.ptp(n.alpha.data) > 0 for n in hn.nodes)


def test_darts_is_budget_matched(splits):
    _, ab = ab_darts_search(HyperNetwork(CFG, full_space(), seed=0), splits["train"], splits["val"], FAST)
    _, d = darts_search(HyperNetwork(CFG, full_space(), seed=0), splits["train"], splits["val"], FAST)
    assert ab.timings["optimizer_steps"] == d.timings["optimizer_steps"]


def test_frozen_alpha_darts_keeps_uniform_weights(splits):
    hn = HyperNetwork(CFG, full_space(), seed=0)
    darts_search(hn, splits["train"], splits["val"], FAST, freeze_alpha=True)
    assert all(not n.alpha.data.any() for n in hn.nodes)


def test_fit_restores_best_state(splits):
    model = ForecastModel(CFG, vanilla_spec(1), seed=0)
    cfg = SearchConfig(**{**FAST.to_dict(), "K3": 4, "lr": 5e-2})
    history, best, steps = fit(model, splits["train"], splits["val"], cfg, early_stopping=False)
    assert steps == 4 * -(-len(splits["train"]) // 32)
    assert evaluate_loss(model, splits["val"]) == pytest.approx(min(history), rel=1e-12)
    assert history[best - 1] == min(history)


def test_early_stopping_counts_evaluations(splits):
    model = ForecastModel(CFG, vanilla_spec(1), seed=0)
    cfg = SearchConfig(**{**FAST.to_dict(), "K3": 200, "eval_every": 1, "patience": 3, "lr": 0.5})
    history, best, steps = fit(model, splits["train"], splits["val"], cfg)
    assert len(history) == best + 3
    assert steps == len(history)


def test_train_subnet_reports_validation(splits):
    res = train_subnet(vanilla_spec(1), splits["train"], splits["val"], FAST, CFG, seed=3)
    assert res.report.mse > 0 and res.report.mae > 0 and res.steps > 0
    assert res.report.mse == pytest.approx(evaluate_loss(res.model, splits["val"]), rel=1e-12)


def test_numeric_failure_carries_partial_trace(splits):
    bad = splits["train"].series.copy()
    bad[5, 0] = np.nan
    train = WindowedDataset("train", bad, 16, 4, np.zeros(1), np.ones(1))
    with pytest.raises(NumericError) as info:
        ab_darts_search(HyperNetwork(CFG, full_space(), seed=0), train, splits["val"], FAST)
    assert info.value.trace.records == []
