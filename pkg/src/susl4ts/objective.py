"""Training objective: labeled/unlabeled negative ELBOs plus regularizers.

All losses are *negative* ELBOs so the total is minimized directly::

    L_l(x, y) = -log p(x|z) + KL(q(z|x,y) || p(z|y)) - log p(y),  z ~ q(z|x,y)
    L_u(x)    = sum_c q(c|x) L_l(x, c) - H(q(y|x))

    total = mean_l [L_l - alpha log q(y|x)]
          + mean_u [L_u - gamma lam sum_c q(c|x) log q(c|x)]
          + w * sum(theta**2)

The last term is reported only; the optimizer applies it as decoupled
weight decay.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .model import PRIOR_KEYS, Parameters, class_logits, decoder, encoder_heads, sample_latent, trunk

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    gamma: float = 1.0
    lam: float = 0.0
    weight_decay: float = 0.0
    clip: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and non-negative, got {v}")
        if self.lam > 1:
            raise ValueError("lam must be <= 1")
        if self.clip <= 0:
            raise ValueError("clip must be > 0")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    labeled_elbo_term: float
    classification_term: float
    unlabeled_elbo_term: float
    entropy_term: float
    weight_decay_term: float

    def parts(self):
        return (self.labeled_elbo_term, self.classification_term, self.unlabeled_elbo_term,
                self.entropy_term, self.weight_decay_term)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------- graph helpers


def kl_rows(mean_q, logvar_q, mean_p, logvar_p):
    """KL between diagonal Gaussians, summed over the last axis."""
    diff = mean_q - mean_p
    ratio = (dc.exp(logvar_q) + diff * diff) * dc.exp(dc.neg(logvar_p))
    inner = logvar_p - logvar_q + ratio
    return dc.scale(dc.sum(inner, axis=-1) - float(inner.shape[-1]), 0.5)


def recon_rows(x, x_hat):
    """Unit-variance Gaussian log-likelihood per sample."""
    n = int(np.prod(x.shape[1:]))
    r = dc.reshape(x - x_hat, (x.shape[0], n))
    return dc.scale(dc.sum(r * r, axis=1), -0.5) - 0.5 * n * LOG_2PI


def _labeled_parts(P, cfg, h, y, x, noise):
    """Per-sample L_l for class indices ``y`` given trunk features ``h``."""
    onehot = dc.Array(np.eye(cfg.n_classes, dtype=h.value.dtype)[y])
    mean, logvar = encoder_heads(P, h, onehot)
    z = sample_latent(mean, logvar, noise)
    x_hat = decoder(P, cfg, z)
    kl = kl_rows(mean, logvar, dc.take(P["prior_mean"], y), dc.take(P["prior_logvar"], y))
    return kl - recon_rows(x, x_hat) + math.log(cfg.n_classes)


def labeled_graph(P, cfg, x, y, noise):
    """Returns (L_l per sample, log q(y|x) per sample)."""
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= cfg.n_known_classes):
        raise ValueError("labels must reference known classes only")
    h = trunk(P, cfg, x)
    logq = dc.log_softmax(class_logits(P, h))
    onehot = dc.Array(np.eye(cfg.n_classes, dtype=h.value.dtype)[y])
    return _labeled_parts(P, cfg, h, y, x, noise), dc.sum(logq * onehot, axis=1)


def unlabeled_graph(P, cfg, x, noise):
    """Returns (L_u per sample, sum_c q log q per sample).

    The class sum is exact; every class reuses the same noise vector, i.e.
    one latent draw per datapoint.
    """
    n, c = x.shape[0], cfg.n_classes
    h = trunk(P, cfg, x)
    logq = dc.log_softmax(class_logits(P, h))
    q = dc.exp(logq)
    rows = np.repeat(np.arange(n), c)
    cls = np.tile(np.arange(c), n)
    ll = _labeled_parts(P, cfg, dc.take(h, rows), cls, dc.take(x, rows), dc.take(noise, rows))
    ll = dc.reshape(ll, (n, c))
    qlogq = dc.sum(q * logq, axis=1)
    return dc.sum(q * ll, axis=1) + qlogq, qlogq


# ----------------------------------------------------------------- numpy API


def gaussian_kl(mean_q, logvar_q, mean_p, logvar_p) -> float:
    arrs = [np.atleast_1d(np.asarray(a, dtype=float)) for a in (mean_q, logvar_q, mean_p, logvar_p)]
    if len({a.shape for a in arrs}) != 1:
        raise dc.ShapeError("gaussian_kl", *[a.shape for a in arrs])
    return float(kl_rows(*[dc.Array(a[None]) for a in arrs]).value[0])


def recon_loglik(x, x_hat) -> float:
    x, x_hat = np.asarray(x, dtype=float), np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape:
        raise dc.ShapeError("recon_loglik", x.shape, x_hat.shape)
    return float(recon_rows(dc.Array(x[None]), dc.Array(x_hat[None])).value[0])


def _prep(params, x, noise):
    dt = params.dtype
    return dc.Array(np.asarray(x, dtype=dt)), dc.Array(np.asarray(noise, dtype=dt))


def labeled_loss(params: Parameters, x, y, noise) -> float:
    """L_l for a single series ``x`` (channels, length) and class ``y``."""
    xa, na = _prep(params, np.asarray(x)[None], np.asarray(noise)[None])
    ll, _ = labeled_graph(params.constants(), params.config, xa, np.array([y]), na)
    return float(ll.value[0])


def unlabeled_loss(params: Parameters, x, noise) -> float:
    xa, na = _prep(params, np.asarray(x)[None], np.asarray(noise)[None])
    lu, _ = unlabeled_graph(params.constants(), params.config, xa, na)
    return float(lu.value[0])


def decay_term(params: Parameters, weight_decay) -> float:
    return float(weight_decay * sum(np.sum(v.astype(float) ** 2)
                                    for k, v in params.items() if k not in PRIOR_KEYS))


def objective_graph(P, cfg, labeled, unlabeled, weights: LossWeights, noise_l=None, noise_u=None,
                    n_labeled=None, n_unlabeled=None):
    """Differentiable objective (without weight decay) and its term values.

    ``labeled`` is ``(x, y)`` or None; ``unlabeled`` is ``x`` or None. An
    empty or missing side contributes zero. ``n_labeled``/``n_unlabeled``
    override the batch means' denominators so a batch can be split in shards.
    """
    parts = dict.fromkeys(
        ("labeled_elbo_term", "classification_term", "unlabeled_elbo_term", "entropy_term"), 0.0)
    node = dc.Array(0.0)
    if labeled is not None and len(labeled[1]) > 0:
        x, y = labeled
        inv = 1.0 / (n_labeled or len(y))
        ll, logq_y = labeled_graph(P, cfg, x, y, noise_l)
        elbo = dc.scale(dc.sum(ll), inv)
        cls = dc.scale(dc.sum(logq_y), -weights.alpha * inv)
        node = node + elbo + cls
        parts["labeled_elbo_term"] = float(elbo.value)
        parts["classification_term"] = float(cls.value)
    if unlabeled is not None and unlabeled.shape[0] > 0:
        inv = 1.0 / (n_unlabeled or unlabeled.shape[0])
        lu, qlogq = unlabeled_graph(P, cfg, unlabeled, noise_u)
        elbo = dc.scale(dc.sum(lu), inv)
        ent = dc.scale(dc.sum(qlogq), -weights.gamma * weights.lam * inv)
        node = node + elbo + ent
        parts["unlabeled_elbo_term"] = float(elbo.value)
        parts["entropy_term"] = float(ent.value)
    return node, parts


def _shards(n, size):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)] if n else []


def total_loss(params: Parameters, labeled_batch, unlabeled_batch, weights: LossWeights,
               noise_l=None, noise_u=None, with_grads=False, max_rows=None):
    """Evaluate the full objective on one labeled and one unlabeled batch.

    Returns a :class:`LossBreakdown`, or ``(breakdown, grads)`` when
    ``with_grads`` is set; ``grads`` maps parameter names to arrays and
    excludes the weight-decay term. ``max_rows`` bounds the number of decoder
    evaluations per shard (each unlabeled sample costs one per class); the
    result does not depend on it beyond float summation order.
    """
    cfg = params.config
    dt = params.dtype
    xl = yl = xu = None
    if labeled_batch is not None and len(labeled_batch[1]):
        xl = np.asarray(labeled_batch[0], dtype=dt)
        yl = np.asarray(labeled_batch[1], dtype=np.intp)
        noise_l = np.asarray(noise_l, dtype=dt)
    if unlabeled_batch is not None and len(unlabeled_batch):
        xu = np.asarray(unlabeled_batch, dtype=dt)
        noise_u = np.asarray(noise_u, dtype=dt)
    n_l = 0 if yl is None else len(yl)
    n_u = 0 if xu is None else len(xu)
    if max_rows is None:
        jobs = [(slice(0, n_l) if n_l else None, slice(0, n_u) if n_u else None)]
    else:
        jobs = [(s, None) for s in _shards(n_l, max_rows)]
        jobs += [(None, s) for s in _shards(n_u, max(1, max_rows // cfg.n_classes))]
    if not jobs:
        jobs = [(None, None)]

    parts = dict.fromkeys(
        ("labeled_elbo_term", "classification_term", "unlabeled_elbo_term", "entropy_term"), 0.0)
    grads = {k: np.zeros_like(v) for k, v in params.items()} if with_grads else None
    objective = 0.0
    P = params.watch() if with_grads else params.constants()
    for sl, su in jobs:
        lab = (dc.Array(xl[sl]), yl[sl]) if sl is not None else None
        unl = dc.Array(xu[su]) if su is not None else None
        nl = dc.Array(noise_l[sl]) if sl is not None else None
        nu = dc.Array(noise_u[su]) if su is not None else None
        if with_grads:
            with dc.Tape() as tape:
                node, p = objective_graph(P, cfg, lab, unl, weights, nl, nu, n_l, n_u)
            names = list(P)
            for k, g in zip(names, dc.backward(tape, node, [P[k] for k in names])):
                grads[k] += g
        else:
            node, p = objective_graph(P, cfg, lab, unl, weights, nl, nu, n_l, n_u)
        objective += float(node.value)
        for k, v in p.items():
            parts[k] += v
    wd = decay_term(params, weights.weight_decay)
    bd = LossBreakdown(total=objective + wd, weight_decay_term=wd, **parts)
    return (bd, grads) if with_grads else bd
