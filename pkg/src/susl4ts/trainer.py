"""Optimization loop: Adam + decoupled weight decay, cosine LR, lambda ramp."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .datasets import DatasetBundle, RegimeSpec, Subset, build_regime, make_batches
from .evaluation import evaluate_predictions, predict
from .model import PRIOR_KEYS, ModelConfig, Parameters
from .objective import LossWeights, total_loss

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "total", "labeled_elbo_term", "classification_term",
                   "unlabeled_elbo_term", "entropy_term", "weight_decay_term",
                   "lambda", "lr", "val_acc")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, param, batch):
        self.param, self.batch = param, batch
        super().__init__(f"non-finite gradient for {param!r} in batch {batch}")


class DivergenceError(RuntimeError):
    """Training produced non-finite values; carries the best state so far."""

    def __init__(self, message, best_params, history):
        super().__init__(message)
        self.best_params = best_params
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 512
    alpha: float = 1.0
    gamma: float = 1.0
    weight_decay: float = 0.0
    clip: float = 1.0
    lambda_step: float = 0.1
    lambda_max: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"
    max_rows: int | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lambda_step <= 1:
            raise ValueError("lambda_step must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        # validates alpha/gamma/decay/clip
        self.loss_weights(0.0)

    def loss_weights(self, lam):
        return LossWeights(alpha=self.alpha, gamma=self.gamma, lam=lam,
                           weight_decay=self.weight_decay, clip=self.clip)


def lambda_at(epoch, step=0.1, maximum=1.0):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(maximum, step * epoch)


def cosine_lr(step, total_steps, lr0):
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if total_steps == 0:
        return lr0
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps)))


@dataclass
class AdamState:
    params: Parameters
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def create(cls, params: Parameters):
        return cls(params, {k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def clip_by_global_norm(grads, clip):
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > clip:
        factor = clip / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return grads, norm


def adam_step(state: AdamState, grads, lr, weight_decay=0.0, clip=None,
              beta1=0.9, beta2=0.999, eps=1e-8, batch=None):
    """One in-place Adam update with bias correction.

    Gradients are clipped to global L2 norm ``clip`` first; decoupled weight
    decay ``theta -= lr * w * theta`` is applied to every non-prior array.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(k, batch)
    if clip is not None:
        grads, _ = clip_by_global_norm(grads, clip)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, theta in state.params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and k not in PRIOR_KEYS:
            theta -= lr * weight_decay * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in self.rows:
            buf.write(",".join(repr(r[c]) for c in HISTORY_COLUMNS) + "\n")
        return buf.getvalue()


def validation_accuracy(params, validation: Subset, known_classes, n_true):
    if len(validation) == 0:
        return float("nan")
    pred = predict(params, validation.X)
    rep = evaluate_predictions(pred, validation.y, known_classes, params.config.n_classes, n_true)
    return rep.accuracy


def train(model_config: ModelConfig, config: TrainConfig, labeled: Subset, unlabeled: Subset,
          validation: Subset, known_classes, n_true=None, init_params=None, callback=None):
    """Run the epoch loop; returns ``(best_params, history)``.

    The returned parameters are those of the last epoch reaching the highest
    validation accuracy. ``callback(epoch, val_acc)`` runs after each epoch
    and may raise to stop training.
    """
    n_true = n_true or model_config.n_known_classes
    dtype = np.dtype(config.dtype)
    params = init_params.astype(dtype) if init_params is not None else \
        Parameters.init(model_config, seed=config.seed, dtype=dtype)
    state = AdamState.create(params)
    n_l, n_u = len(labeled), len(unlabeled)
    bs = config.batch_size
    steps_per_epoch = math.ceil(max(n_l, n_u) / bs)
    total_steps = steps_per_epoch * config.epochs
    d = model_config.latent_dim
    history = History()
    best, best_acc = params.copy(), -math.inf
    step = 0
    for epoch in range(config.epochs):
        lam = lambda_at(epoch, config.lambda_step, config.lambda_max)
        weights = config.loss_weights(lam)
        noise_rng = np.random.default_rng([config.seed, epoch, 7])
        sums = dict.fromkeys(HISTORY_COLUMNS[1:7], 0.0)
        n_batches = 0
        lr = cosine_lr(step, total_steps, config.lr)
        for b, (il, iu) in enumerate(make_batches(n_l, n_u, bs, config.seed, epoch)):
            lr = cosine_lr(step, total_steps, config.lr)
            noise_l = noise_rng.standard_normal((len(il), d))
            noise_u = noise_rng.standard_normal((len(iu), d))
            try:
                bd, grads = total_loss(
                    state.params, (labeled.X[il], labeled.y[il]), unlabeled.X[iu], weights,
                    noise_l, noise_u, with_grads=True, max_rows=config.max_rows)
                if not math.isfinite(bd.total):
                    raise FloatingPointError("loss is not finite")
                adam_step(state, grads, lr, config.weight_decay, config.clip,
                          config.beta1, config.beta2, config.eps, batch=(epoch, b))
            except (FloatingPointError, dc.NumericalError) as err:
                raise DivergenceError(f"epoch {epoch} batch {b}: {err}", best, history) from err
            if not state.params.is_finite():
                raise DivergenceError(f"epoch {epoch} batch {b}: parameters became non-finite",
                                      best, history)
            for k in sums:
                sums[k] += getattr(bd, k)
            n_batches += 1
            step += 1
        acc = validation_accuracy(state.params, validation, known_classes, n_true)
        history.append(epoch=epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()},
                       **{"lambda": lam, "lr": lr, "val_acc": acc})
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, sums["total"] / max(n_batches, 1), acc)
        if not (acc < best_acc):  # >= keeps the last epoch at the maximum; NaN when no validation
            best_acc = acc if math.isfinite(acc) else best_acc
            best = state.params.copy()
        if callback is not None:
            callback(epoch, acc)
    return best, history


def fit(bundle: DatasetBundle, regime: RegimeSpec, model_config: ModelConfig, config: TrainConfig,
        callback=None):
    """Build the regime's splits from ``bundle`` and train on them."""
    if model_config.n_known_classes != bundle.n_classes:
        raise ValueError("model n_known_classes must equal the number of dataset classes")
    labeled, unlabeled, validation = build_regime(bundle, regime)
    known = regime.known_classes(bundle.n_classes)
    return train(model_config, config, labeled, unlabeled, validation, known,
                 n_true=bundle.n_classes, callback=callback)


def config_dict(model_config: ModelConfig, config: TrainConfig, regime: RegimeSpec | None = None):
    d = {"model": model_config.to_dict(), "train": asdict(config)}
    if regime is not None:
        r = asdict(regime)
        r["hidden_classes"] = sorted(regime.hidden_classes)
        d["regime"] = r
    return d
