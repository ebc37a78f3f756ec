"""Random hyperparameter search with an optional successive-halving pruner.

Trials are ranked by validation accuracy only. Test metrics are computed
once, for the winning trial, after the search has finished.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datasets import DatasetBundle, RegimeSpec, build_regime
from .evaluation import evaluate
from .model import ModelConfig
from .trainer import DivergenceError, TrainConfig, train

log = logging.getLogger(__name__)

PRUNE_EPOCHS = (10, 25, 50)


@dataclass(frozen=True)
class SearchSpace:
    n_augmented: tuple = tuple(range(0, 101, 10))
    weight_decay: tuple = (0.0,) + tuple(10.0 ** k for k in range(-10, 1))
    lr: tuple = (1e-6, 1e-1)  # log-uniform bounds
    alpha: tuple = tuple(10.0 ** k for k in range(0, 11))
    latent_dim: tuple = tuple(range(10, 101, 10))
    gamma: tuple = tuple(10.0 ** k for k in range(0, 11))
    layers: tuple = (1, 2, 3)
    filters: tuple = (32, 64, 128)
    units: tuple = tuple(2 ** k for k in range(5, 12))
    kernel_size: tuple = (3, 5, 7)
    clip: tuple = tuple(10.0 ** k for k in range(-10, 1))


def sample_config(space: SearchSpace, rng) -> dict:
    """One independent draw per parameter."""
    def pick(options):
        return options[int(rng.integers(len(options)))]

    lo, hi = space.lr
    return {
        "n_augmented": int(pick(space.n_augmented)),
        "weight_decay": float(pick(space.weight_decay)),
        "lr": float(10.0 ** rng.uniform(math.log10(lo), math.log10(hi))),
        "alpha": float(pick(space.alpha)),
        "latent_dim": int(pick(space.latent_dim)),
        "gamma": float(pick(space.gamma)),
        "layers": int(pick(space.layers)),
        "filters": int(pick(space.filters)),
        "units": int(pick(space.units)),
        "kernel_size": int(pick(space.kernel_size)),
        "clip": float(pick(space.clip)),
    }


@dataclass
class TrialResult:
    number: int
    config: dict
    seed: int
    status: str  # "ok" | "pruned" | "failed"
    val_accuracy: float = float("nan")
    history_csv: str = ""
    message: str = ""
    test_metrics: dict | None = None

    def record(self):
        """One JSON line for the search log."""
        d = {k: v for k, v in asdict(self).items() if k != "history_csv"}
        d["val_accuracy"] = None if math.isnan(self.val_accuracy) else self.val_accuracy
        return json.dumps(d, sort_keys=True)


class TrialPruned(Exception):
    pass


class SuccessiveHalving:
    """Stop a trial at a checkpoint epoch if it is in the bottom half so far."""

    def __init__(self, epochs=PRUNE_EPOCHS):
        self.epochs = tuple(epochs)
        self.seen = {e: [] for e in self.epochs}

    def __call__(self, epoch, acc):
        e = epoch + 1
        if e not in self.seen:
            return
        prior = self.seen[e]
        prior.append(acc)
        if len(prior) > 1 and acc < np.median(prior):
            raise TrialPruned(f"pruned at epoch {e} (val acc {acc:.4f})")


def _model_and_train_config(bundle, variant, cfg, base: TrainConfig, seed):
    mc = ModelConfig(
        channels=bundle.channels, length=bundle.length, n_known_classes=bundle.n_classes,
        n_augmented_classes=cfg["n_augmented"], latent_dim=cfg["latent_dim"], layers=cfg["layers"],
        filters=cfg["filters"], units=cfg["units"], kernel_size=cfg["kernel_size"], variant=variant,
    )
    tc = replace(base, lr=cfg["lr"], alpha=cfg["alpha"], gamma=cfg["gamma"],
                 weight_decay=cfg["weight_decay"], clip=cfg["clip"], seed=seed)
    return mc, tc


def run_trial(bundle, regime, variant, base, number, cfg, seed, pruner=None):
    """Train one configuration; returns ``(TrialResult, best_params or None)``."""
    labeled, unlabeled, validation = build_regime(bundle, regime)
    known = regime.known_classes(bundle.n_classes)
    mc, tc = _model_and_train_config(bundle, variant, cfg, base, seed)
    try:
        best, hist = train(mc, tc, labeled, unlabeled, validation, known,
                           n_true=bundle.n_classes, callback=pruner)
    except TrialPruned as err:
        return TrialResult(number, cfg, seed, "pruned", message=str(err)), None
    except (DivergenceError, ValueError, MemoryError) as err:
        return TrialResult(number, cfg, seed, "failed", message=f"{type(err).__name__}: {err}"), None
    return TrialResult(number, cfg, seed, "ok", val_accuracy=max(hist.column("val_acc")),
                       history_csv=hist.to_csv()), best


def _worker(args):
    result, _ = run_trial(*args)
    return result


@dataclass
class SearchResult:
    trials: list
    ranking: list  # trial numbers, best first
    best_params: object = None
    test_metrics: dict = field(default_factory=dict)

    @property
    def best(self):
        return self.trials[self.ranking[0]]


def run_search(bundle: DatasetBundle, regime: RegimeSpec, space: SearchSpace | None = None,
               n_trials=60, base: TrainConfig | None = None, variant="conv", seed=0,
               prune=False, n_jobs=1, evaluate_test=True, log_path=None):
    """Random search; returns a :class:`SearchResult` ranked by validation accuracy.

    ``regime.n_augmented`` is ignored: |C_a| is part of the search space.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    space = space or SearchSpace()
    base = base or TrainConfig()
    rng = np.random.default_rng(seed)
    seeds = np.random.SeedSequence(seed).generate_state(n_trials).tolist()
    plans = [(i, sample_config(space, rng), int(seeds[i])) for i in range(n_trials)]
    trials = []
    leader, leader_params = None, None
    if n_jobs > 1 and not prune:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            trials = list(pool.map(_worker, [(bundle.without_test(), regime, variant, base, i, c, s)
                                             for i, c, s in plans]))
    else:
        pruner = SuccessiveHalving() if prune else None
        train_only = bundle.without_test()
        for i, c, s in plans:
            result, params = run_trial(train_only, regime, variant, base, i, c, s, pruner)
            log.info("trial %d %s val_acc=%s", i, result.status, result.val_accuracy)
            trials.append(result)
            if result.status == "ok" and (leader is None or result.val_accuracy > leader.val_accuracy):
                leader, leader_params = result, params
    if log_path is not None:
        with open(log_path, "w") as fh:
            for t in trials:
                fh.write(t.record() + "\n")
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise RuntimeError("no successful trials:\n" + "\n".join(
            f"  trial {t.number}: {t.status} {t.message}" for t in trials))
    ranking = [t.number for t in sorted(ok, key=lambda t: (-t.val_accuracy, t.number))]
    result = SearchResult(trials=trials, ranking=ranking)
    winner = result.best
    if leader is not None and leader.number == winner.number:
        best_params = leader_params
    else:
        # parallel workers do not ship parameters back; retraining is deterministic
        _, best_params = run_trial(bundle.without_test(), regime, variant, base, winner.number,
                                   winner.config, winner.seed)
    result.best_params = best_params
    if evaluate_test and bundle.y_test is not None:
        rep = evaluate(best_params, bundle.X_test, bundle.y_test,
                       regime.known_classes(bundle.n_classes), bundle.class_names)
        winner.test_metrics = result.test_metrics = {
            "accuracy": rep.accuracy, "macro_f1": rep.macro_f1, "weighted_f1": rep.weighted_f1}
    return result
