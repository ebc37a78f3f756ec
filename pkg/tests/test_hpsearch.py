import json
import math

import numpy as np
import pytest
from scipy import stats

from susl4ts import hpsearch
from susl4ts.datasets import RegimeSpec, make_waveforms, znormalize
from susl4ts.hpsearch import (SearchSpace, SuccessiveHalving, TrialPruned, run_search,
                              sample_config)
from susl4ts.trainer import DivergenceError, TrainConfig

DRAWS = 10_000


@pytest.fixture(scope="module")
def draws():
    rng = np.random.default_rng(0)
    return [sample_config(SearchSpace(), rng) for _ in range(DRAWS)]


def test_every_augmented_count_is_drawn(draws):
    seen = {d["n_augmented"] for d in draws}
    assert seen == set(range(0, 101, 10))


def test_discrete_choices_stay_in_their_sets(draws):
    space = SearchSpace()
    for key in ("weight_decay", "alpha", "latent_dim", "gamma", "layers", "filters", "units",
                "kernel_size", "clip"):
        assert {d[key] for d in draws} <= set(getattr(space, key))
    assert {d["kernel_size"] for d in draws} == {3, 5, 7}


def test_learning_rate_is_log_uniform(draws):
    lrs = np.array([d["lr"] for d in draws])
    assert lrs.min() >= 1e-6 and lrs.max() <= 1e-1
    logs = np.log10(lrs)
    counts, _ = np.histogram(logs, bins=10, range=(-6, -1))
    assert stats.chisquare(counts).pvalue > 0.01


def test_draws_are_seeded():
    a = [sample_config(SearchSpace(), np.random.default_rng(5)) for _ in range(3)]
    b = [sample_config(SearchSpace(), np.random.default_rng(5)) for _ in range(3)]
    assert a == b


def test_successive_halving_prunes_bottom_half():
    sh = SuccessiveHalving(epochs=(2,))
    sh(1, 0.8)
    sh(0, 0.0)  # not a checkpoint epoch
    with pytest.raises(TrialPruned):
        sh(1, 0.1)
    sh(1, 0.9)


TINY = SearchSpace(n_augmented=(0, 1), weight_decay=(0.0,), lr=(1e-3, 1e-2), alpha=(1.0,),
                   latent_dim=(2, 3), gamma=(1.0,), layers=(1,), filters=(4,), units=(8,),
                   kernel_size=(3,), clip=(1.0,))
BASE = TrainConfig(epochs=2, batch_size=32)
BUNDLE = znormalize(make_waveforms(n_train=60, n_test=20, length=16, seed=2))
REGIME = RegimeSpec(labeled_fraction=0.5, hidden_classes={2}, seed=0)


def test_single_trial(tmp_path):
    res = run_search(BUNDLE, REGIME, TINY, n_trials=1, base=BASE, log_path=tmp_path / "t.jsonl")
    assert res.ranking == [0] and res.best_params is not None
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["status"] == "ok"
    assert set(res.test_metrics) == {"accuracy", "macro_f1", "weighted_f1"}


def test_ranking_by_validation_and_single_test_evaluation(monkeypatch):
    calls = []
    real = hpsearch.evaluate

    def counting(params, X, y, *a, **kw):
        calls.append(len(y))
        return real(params, X, y, *a, **kw)

    monkeypatch.setattr(hpsearch, "evaluate", counting)
    res = run_search(BUNDLE, REGIME, TINY, n_trials=4, base=BASE, seed=3)
    accs = [res.trials[i].val_accuracy for i in res.ranking]
    assert accs == sorted(accs, reverse=True)
    assert calls == [len(BUNDLE.y_test)]
    assert res.best.test_metrics == res.test_metrics
    assert all(t.test_metrics is None for t in res.trials if t is not res.best)


def test_search_is_deterministic():
    a = run_search(BUNDLE, REGIME, TINY, n_trials=2, base=BASE, seed=1, evaluate_test=False)
    b = run_search(BUNDLE, REGIME, TINY, n_trials=2, base=BASE, seed=1, evaluate_test=False)
    assert [t.record() for t in a.trials] == [t.record() for t in b.trials]
    assert a.best_params == b.best_params
    assert a.test_metrics == {}


def test_trials_never_see_test_split(monkeypatch):
    seen = []
    real = hpsearch.run_trial

    def spy(bundle, *a, **kw):
        seen.append(bundle.X_test)
        return real(bundle, *a, **kw)

    monkeypatch.setattr(hpsearch, "run_trial", spy)
    run_search(BUNDLE, REGIME, TINY, n_trials=2, base=BASE, evaluate_test=False)
    assert seen and all(x is None for x in seen)


def test_failed_trials_are_logged_not_fatal(monkeypatch, tmp_path):
    real = hpsearch.train
    calls = []

    def flaky(*a, **kw):
        calls.append(1)
        if len(calls) == 1:
            raise DivergenceError("boom", None, None)
        return real(*a, **kw)

    monkeypatch.setattr(hpsearch, "train", flaky)
    res = run_search(BUNDLE, REGIME, TINY, n_trials=2, base=BASE, evaluate_test=False,
                     log_path=tmp_path / "t.jsonl")
    assert [t.status for t in res.trials] == ["failed", "ok"] and res.ranking == [1]
    first = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
    assert first["val_accuracy"] is None and "boom" in first["message"]


def test_all_failed_trials_raise(monkeypatch):
    def broken(*a, **kw):
        raise DivergenceError("boom", None, None)

    monkeypatch.setattr(hpsearch, "train", broken)
    with pytest.raises(RuntimeError, match="no successful trials"):
        run_search(BUNDLE, REGIME, TINY, n_trials=2, base=BASE)


def test_zero_trials_rejected():
    with pytest.raises(ValueError):
        run_search(BUNDLE, REGIME, TINY, n_trials=0)
    assert math.isnan(hpsearch.TrialResult(0, {}, 0, "pruned").val_accuracy)
