"""Regime-aware evaluation.

Known classes (those that received labels) are scored on their own output
slot. Every other slot (hidden classes, augmented clusters) is matched to the
remaining true classes with the Hungarian method on the co-occurrence
counts; a cluster only earns credit for its matched class. Clusters left over
after matching are reported under their majority class but always count as
errors.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import Parameters, classify, decode, encode

UNASSIGNED = None


def predict(params: Parameters, X, batch_size=1024):
    """Arg-max cluster per series; ties go to the lowest index."""
    return np.argmax(predict_proba(params, X, batch_size), axis=1)


def predict_proba(params: Parameters, X, batch_size=1024):
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    out = [classify(params, X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.n_classes))


@dataclass
class ClusterMap:
    """cluster -> (true class or None, credited?)"""

    target: dict
    credited: dict

    def mapped_predictions(self, predictions, n_true):
        """Class per prediction, ``n_true`` for uncredited clusters."""
        lut = np.full(max(self.target, default=-1) + 1, n_true, dtype=np.int64)
        for c, t in self.target.items():
            if self.credited[c] and t is not None:
                lut[c] = t
        predictions = np.asarray(predictions)
        out = np.full(len(predictions), n_true, dtype=np.int64)
        inside = predictions < len(lut)
        out[inside] = lut[predictions[inside]]
        return out

    def as_rows(self):
        return [(c, "unassigned" if t is None else t, self.credited[c])
                for c, t in sorted(self.target.items())]


def cooccurrence(predictions, truths, n_clusters, n_true):
    m = np.zeros((n_true, n_clusters), dtype=np.int64)
    np.add.at(m, (np.asarray(truths), np.asarray(predictions)), 1)
    return m


def map_clusters(predictions, truths, known_classes, n_clusters=None, n_true=None) -> ClusterMap:
    predictions, truths = np.asarray(predictions), np.asarray(truths)
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths differ in length")
    n_clusters = n_clusters or int(predictions.max(initial=-1)) + 1
    n_true = n_true or int(truths.max(initial=-1)) + 1
    known = sorted(int(k) for k in known_classes)
    co = cooccurrence(predictions, truths, n_clusters, max(n_true, 1))
    target, credited = {}, {}
    for k in known:
        target[k], credited[k] = k, True
    rest_clusters = [c for c in range(n_clusters) if c not in target]
    rest_classes = [t for t in range(n_true) if t not in known]
    if rest_clusters and rest_classes:
        sub = co[np.ix_(rest_classes, rest_clusters)].T
        rows, cols = linear_sum_assignment(sub, maximize=True)
        for r, c in zip(rows, cols):
            target[rest_clusters[r]] = rest_classes[c]
            credited[rest_clusters[r]] = True
    for c in rest_clusters:
        if c in target:
            continue
        counts = co[:, c]
        target[c] = int(np.argmax(counts)) if counts.sum() else UNASSIGNED
        credited[c] = False
    return ClusterMap(target=target, credited=credited)


def mapped_confusion(predictions, truths, cluster_map: ClusterMap, n_true):
    """Square confusion over true classes plus one trailing 'uncredited' column."""
    mapped = cluster_map.mapped_predictions(predictions, n_true)
    m = np.zeros((n_true, n_true + 1), dtype=np.int64)
    np.add.at(m, (np.asarray(truths), mapped), 1)
    return m


def score(confusion):
    """(accuracy, macro F1, weighted F1) for rows=true, cols=predicted.

    Columns beyond the number of rows hold predictions that cannot be
    correct; they count against recall only.
    """
    m = np.asarray(confusion, dtype=np.float64)
    if m.ndim != 2 or m.size == 0 or m.sum() == 0:
        raise ValueError("empty confusion matrix")
    k = m.shape[0]
    if m.shape[1] < k:
        raise ValueError(f"confusion has fewer columns ({m.shape[1]}) than classes ({k})")
    tp = np.diag(m[:, :k])
    support = m.sum(axis=1)
    predicted = m[:, :k].sum(axis=0)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros(k), where=denom > 0)
    accuracy = tp.sum() / m.sum()
    return float(accuracy), float(f1.mean()), float((f1 * support).sum() / support.sum())


@dataclass
class EvalReport:
    confusion: np.ndarray
    cluster_map: ClusterMap
    accuracy: float
    macro_f1: float
    weighted_f1: float
    class_names: tuple = field(default=())

    def to_text(self):
        k, c = self.confusion.shape
        names = list(self.class_names) or [str(i) for i in range(k)]
        out = io.StringIO()
        w = max(6, *(len(n) for n in names)) + 1
        out.write("true\\cluster".ljust(w) + "".join(f"{j:>7d}" for j in range(c)) + "\n")
        for i in range(k):
            out.write(names[i].ljust(w) + "".join(f"{v:>7d}" for v in self.confusion[i]) + "\n")
        out.write("\ncluster map (cluster -> class, credited):\n")
        for cl, t, cr in self.cluster_map.as_rows():
            label = t if t == "unassigned" else names[t]
            out.write(f"  {cl:>3d} -> {label}{'' if cr else ' (uncredited)'}\n")
        out.write(f"\naccuracy:    {self.accuracy:.6f}\n")
        out.write(f"macro F1:    {self.macro_f1:.6f}\n")
        out.write(f"weighted F1: {self.weighted_f1:.6f}\n")
        return out.getvalue()

    def metrics_csv(self):
        return ("metric,value\n"
                f"accuracy,{self.accuracy!r}\nmacro_f1,{self.macro_f1!r}\n"
                f"weighted_f1,{self.weighted_f1!r}\n")

    def confusion_csv(self):
        k, c = self.confusion.shape
        rows = ["true," + ",".join(f"c{j}" for j in range(c))]
        rows += [f"{i}," + ",".join(map(str, self.confusion[i])) for i in range(k)]
        return "\n".join(rows) + "\n"

    def cluster_map_csv(self):
        rows = ["cluster,class,credited"]
        rows += [f"{c},{t},{int(cr)}" for c, t, cr in self.cluster_map.as_rows()]
        return "\n".join(rows) + "\n"


def evaluate_predictions(predictions, truths, known_classes, n_clusters, n_true, class_names=()):
    cmap = map_clusters(predictions, truths, known_classes, n_clusters, n_true)
    acc, macro, weighted = score(mapped_confusion(predictions, truths, cmap, n_true))
    return EvalReport(
        confusion=cooccurrence(predictions, truths, n_clusters, n_true),
        cluster_map=cmap, accuracy=acc, macro_f1=macro, weighted_f1=weighted,
        class_names=tuple(class_names),
    )


def evaluate(params: Parameters, X, y, known_classes, class_names=()):
    n_true = len(class_names) or params.config.n_known_classes
    return evaluate_predictions(predict(params, X), y, known_classes,
                                params.config.n_classes, n_true, class_names)


def majority_baseline(bundle) -> float:
    """Test accuracy of always predicting the training-set majority class."""
    ytr = bundle.y_train[bundle.y_train >= 0]
    majority = np.argmax(np.bincount(ytr, minlength=bundle.n_classes))
    return float(np.mean(bundle.y_test == majority))


def export_embeddings(params: Parameters, X, y=None, ids=None, batch_size=1024):
    """Latent means under the predicted cluster: rows of (id, true, pred, z)."""
    X = np.asarray(X)
    pred = predict(params, X, batch_size)
    z = np.concatenate([encode(params, X[i:i + batch_size], pred[i:i + batch_size])[0]
                        for i in range(0, len(X), batch_size)]) if len(X) else \
        np.zeros((0, params.config.latent_dim))
    ids = np.arange(len(X)) if ids is None else np.asarray(ids)
    y = np.full(len(X), -1) if y is None else np.asarray(y)
    return ids, y, pred, z


def embeddings_csv(ids, y, pred, z):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "true", "pred"] + [f"z_{j}" for j in range(z.shape[1])])
    for i, t, p, row in zip(ids, y, pred, z):
        writer.writerow([int(i), int(t), int(p)] + [repr(float(v)) for v in row])
    return buf.getvalue()


def sample_class(params: Parameters, c, count, seed=0):
    """Draw ``count`` series from class ``c``: z ~ p(z|c), then decode."""
    cfg = params.config
    if not 0 <= c < cfg.n_classes:
        raise IndexError(f"class {c} out of range 0..{cfg.n_classes - 1}")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((count, cfg.latent_dim))
    z = params["prior_mean"][c] + np.exp(0.5 * params["prior_logvar"][c]) * eps
    return decode(params, z.astype(params.dtype)).reshape(count, cfg.channels, cfg.length)
