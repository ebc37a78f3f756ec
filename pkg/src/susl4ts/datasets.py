"""Dataset ingestion, normalization, regime construction and batching.

Every raw format is converted into a :class:`DatasetBundle`, which can be
written to (and read back from) a two-file canonical format:

``<stem>.meta``
    ``key: value`` lines: ``format``, ``name``, ``channels``, ``length``,
    ``classes`` (comma separated, in index order), ``n_train``, ``n_test``.

``<stem>.csv``
    one row per sample, ``split,label,v_0,...`` where ``split`` is
    ``train`` or ``test``, ``label`` is the class index or ``-1``, and the
    values are channel-major (all of channel 0, then channel 1, ...) written
    with shortest round-trip float formatting. Train rows come first; a
    sample's id is its row number.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.model_selection import train_test_split

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "susl4ts-bundle-1"
HAR_CHANNELS = (
    "body_acc_x", "body_acc_y", "body_acc_z",
    "body_gyro_x", "body_gyro_y", "body_gyro_z",
    "total_acc_x", "total_acc_y", "total_acc_z",
)
HAR_CLASSES = ("walking", "walking_upstairs", "walking_downstairs", "sitting", "standing", "laying")
ECG_CLASSES = ("N", "S", "V", "F", "Q")
_SPLIT_RE = re.compile(r"[,\s]+")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class SeriesSample(NamedTuple):
    values: np.ndarray
    label: int | None
    id: int


@dataclass
class DatasetBundle:
    name: str
    channels: int
    length: int
    class_names: tuple
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None

    def __post_init__(self):
        self.class_names = tuple(str(c) for c in self.class_names)
        for split in ("train", "test"):
            X, y = self.split(split)
            if X is None:
                continue
            if X.ndim != 3 or X.shape[1:] != (self.channels, self.length):
                raise DataError(f"{split}: expected samples of shape "
                                f"({self.channels}, {self.length}), got {X.shape[1:]}")
            if len(X) != len(y):
                raise DataError(f"{split}: {len(X)} series but {len(y)} labels")
            if np.any(y >= self.n_classes) or np.any(y < -1):
                raise DataError(f"{split}: label outside 0..{self.n_classes - 1}")

    @property
    def n_classes(self):
        return len(self.class_names)

    def split(self, name):
        if name == "train":
            return self.X_train, self.y_train
        if name == "test":
            return self.X_test, self.y_test
        raise KeyError(name)

    @property
    def train_ids(self):
        return np.arange(len(self.y_train))

    @property
    def test_ids(self):
        return len(self.y_train) + np.arange(0 if self.y_test is None else len(self.y_test))

    def samples(self, split="train"):
        X, y = self.split(split)
        ids = self.train_ids if split == "train" else self.test_ids
        for v, lab, i in zip(X, y, ids):
            yield SeriesSample(v, None if lab < 0 else int(lab), int(i))

    def class_counts(self, split="train"):
        _, y = self.split(split)
        return np.bincount(y[y >= 0], minlength=self.n_classes)

    def without_test(self):
        return replace(self, X_test=None, y_test=None)


# ----------------------------------------------------------------- raw input


def _read_rows(path, sep=None):
    """Parse a text table into a list of float rows; skips a non-numeric header."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            tokens = _SPLIT_RE.split(line) if sep is None else line.split(sep)
            try:
                rows.append(np.array(tokens, dtype=np.float64))
            except ValueError:
                if lineno == 1 and not rows:
                    log.info("%s: skipping header row", path)
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return rows


def _stack(path, rows, width=None):
    width = width or len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: ragged row {i + 1} has {len(r)} fields, expected {width}")
    return np.vstack(rows)


def _labels_to_int(path, col):
    if not np.all(np.isfinite(col)) or np.any(col != np.round(col)):
        raise DataError(f"{path}: non-integer class label")
    return col.astype(np.int64)


def _ucr_files(path):
    path = Path(path)
    if path.is_dir():
        found = {}
        for split in ("TRAIN", "TEST"):
            cands = sorted(p for p in path.iterdir() if p.stem.upper().endswith("_" + split))
            if not cands:
                raise DataError(f"{path}: no *_{split}.tsv/.txt file")
            found[split] = cands[0]
        return found["TRAIN"], found["TEST"], found["TRAIN"].stem[:-len("_TRAIN")]
    raise DataError(f"{path}: expected a directory holding <name>_TRAIN and <name>_TEST files")


def ingest_ucr_tsv(path, length=None) -> DatasetBundle:
    """UCR archive layout (e.g. ElectricDevices): label then values per row.

    Class labels are remapped to 0..K-1 in sorted order of the training
    labels; test labels not seen in training are rejected.
    """
    train_path, test_path, name = _ucr_files(path)
    tr = _stack(train_path, _read_rows(train_path))
    width = tr.shape[1]
    if length is not None and width != length + 1:
        raise DataError(f"{train_path}: expected {length} values per row, got {width - 1}")
    te = _stack(test_path, _read_rows(test_path), width)
    ytr_raw = _labels_to_int(train_path, tr[:, 0])
    yte_raw = _labels_to_int(test_path, te[:, 0])
    labels = np.unique(ytr_raw)
    unknown = np.setdiff1d(yte_raw, labels)
    if unknown.size:
        raise DataError(f"{test_path}: unknown class labels {unknown.tolist()}")
    return DatasetBundle(
        name=name, channels=1, length=width - 1,
        class_names=tuple(str(v) for v in labels),
        X_train=tr[:, None, 1:].copy(), y_train=np.searchsorted(labels, ytr_raw),
        X_test=te[:, None, 1:].copy(), y_test=np.searchsorted(labels, yte_raw),
    )


def ingest_mitbih_csv(train_path, test_path) -> DatasetBundle:
    """Pre-segmented MIT-BIH heartbeats: comma-separated samples, label last.

    A trailing column that is zero in every row of both files is the padding
    slot and is dropped, giving 186 samples per beat.
    """
    tr = _stack(train_path, _read_rows(train_path, sep=","))
    te = _stack(test_path, _read_rows(test_path, sep=","), tr.shape[1])
    length = tr.shape[1] - 1
    if length not in (186, 187):
        raise DataError(f"{train_path}: beats must have 186 or 187 samples, got {length}")
    ytr = _labels_to_int(train_path, tr[:, -1])
    yte = _labels_to_int(test_path, te[:, -1])
    for p, y in ((train_path, ytr), (test_path, yte)):
        if np.any((y < 0) | (y >= len(ECG_CLASSES))):
            raise DataError(f"{p}: labels must be in 0..4")
    Xtr, Xte = tr[:, :-1], te[:, :-1]
    if length == 187:
        if np.all(Xtr[:, -1] == 0) and np.all(Xte[:, -1] == 0):
            Xtr, Xte, length = Xtr[:, :-1], Xte[:, :-1], 186
        else:
            log.warning("last beat column is not all-zero padding; keeping 187 samples")
    return DatasetBundle(
        name="mitbih", channels=1, length=length, class_names=ECG_CLASSES,
        X_train=Xtr[:, None, :].copy(), y_train=ytr, X_test=Xte[:, None, :].copy(), y_test=yte,
    )


def _har_split(root, split):
    d = Path(root) / split
    sig_dir = d / "Inertial Signals"
    chans = []
    for ch in HAR_CHANNELS:
        f = sig_dir / f"{ch}_{split}.txt"
        if not f.exists():
            raise DataError(f"missing channel file {f}")
        chans.append(_stack(f, _read_rows(f)))
    n = len(chans[0])
    for ch, a in zip(HAR_CHANNELS, chans):
        if a.shape != (n, chans[0].shape[1]):
            raise DataError(f"{split}/{ch}: {a.shape[0]} rows, expected {n}")
    yf = d / f"y_{split}.txt"
    if not yf.exists():
        raise DataError(f"missing label file {yf}")
    y = _labels_to_int(yf, _stack(yf, _read_rows(yf))[:, 0])
    if len(y) != n:
        raise DataError(f"{yf}: {len(y)} labels for {n} windows")
    if np.any((y < 1) | (y > 6)):
        raise DataError(f"{yf}: labels must be in 1..6")
    return np.stack(chans, axis=1), y - 1


def ingest_har_dir(path) -> DatasetBundle:
    """UCI HAR raw inertial signals: 9 channels x 128 samples per window."""
    Xtr, ytr = _har_split(path, "train")
    Xte, yte = _har_split(path, "test")
    if Xtr.shape[2] != Xte.shape[2]:
        raise DataError("train and test windows differ in length")
    return DatasetBundle(name="har", channels=9, length=Xtr.shape[2], class_names=HAR_CLASSES,
                         X_train=Xtr, y_train=ytr, X_test=Xte, y_test=yte)


# ---------------------------------------------------------- canonical bundle


def save_bundle(bundle: DatasetBundle, stem):
    """Write ``<stem>.meta`` and ``<stem>.csv``; returns both paths."""
    stem = Path(stem)
    meta_path, data_path = stem.with_suffix(".meta"), stem.with_suffix(".csv")
    n_test = 0 if bundle.y_test is None else len(bundle.y_test)
    meta = {
        "format": BUNDLE_FORMAT,
        "name": bundle.name,
        "channels": bundle.channels,
        "length": bundle.length,
        "classes": ",".join(bundle.class_names),
        "n_train": len(bundle.y_train),
        "n_test": n_test,
        "train_counts": ",".join(map(str, bundle.class_counts("train"))),
        "test_counts": ",".join(map(str, bundle.class_counts("test"))) if n_test else "",
    }
    meta_path.write_text("".join(f"{k}: {v}\n" for k, v in meta.items()))
    with open(data_path, "w") as fh:
        for split in ("train", "test"):
            X, y = bundle.split(split)
            if X is None:
                continue
            flat = X.reshape(len(X), -1)
            for row, lab in zip(flat, y):
                fh.write(f"{split},{int(lab)},{','.join(map(repr, row.tolist()))}\n")
    return meta_path, data_path


def read_bundle_meta(stem):
    meta = {}
    for line in Path(stem).with_suffix(".meta").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition(":")
            meta[k.strip()] = v.strip()
    if meta.get("format") != BUNDLE_FORMAT:
        raise DataError(f"{stem}: not a {BUNDLE_FORMAT} bundle")
    return meta


def load_bundle(stem, splits=("train", "test")) -> DatasetBundle:
    """Read a canonical bundle; rows of splits not requested are not parsed."""
    meta = read_bundle_meta(stem)
    channels, length = int(meta["channels"]), int(meta["length"])
    data = {"train": ([], []), "test": ([], [])}
    with open(Path(stem).with_suffix(".csv")) as fh:
        for lineno, line in enumerate(fh, 1):
            split, lab, rest = line.rstrip("\n").split(",", 2)
            if split not in data:
                raise DataError(f"{stem}.csv:{lineno}: unknown split {split!r}")
            if split not in splits:
                continue
            vals = np.array(rest.split(","), dtype=np.float64)
            if vals.size != channels * length:
                raise DataError(f"{stem}.csv:{lineno}: {vals.size} values, "
                                f"expected {channels * length}")
            data[split][0].append(vals)
            data[split][1].append(int(lab))

    def arr(split):
        xs, ys = data[split]
        if split not in splits:
            return None, None
        X = np.vstack(xs).reshape(-1, channels, length) if xs else np.zeros((0, channels, length))
        return X, np.array(ys, dtype=np.int64)

    (Xtr, ytr), (Xte, yte) = arr("train"), arr("test")
    for split, y in (("train", ytr), ("test", yte)):
        if y is not None and len(y) != int(meta[f"n_{split}"]):
            raise DataError(f"{stem}: {split} row count {len(y)} != meta {meta[f'n_{split}']}")
    return DatasetBundle(name=meta["name"], channels=channels, length=length,
                         class_names=tuple(meta["classes"].split(",")),
                         X_train=Xtr, y_train=ytr, X_test=Xte, y_test=yte)


# -------------------------------------------------------------- preprocessing


def znormalize_array(X, eps=1e-8):
    mean = X.mean(axis=-1, keepdims=True)
    std = X.std(axis=-1, keepdims=True)
    centered = X - mean
    # (near-)constant channels carry no shape information: map them to exact zeros
    return np.where(std < eps, 0.0, centered / np.where(std < eps, 1.0, std))


def znormalize(bundle: DatasetBundle) -> DatasetBundle:
    """Standardize each channel of each series independently."""
    return replace(
        bundle,
        X_train=None if bundle.X_train is None else znormalize_array(bundle.X_train),
        X_test=None if bundle.X_test is None else znormalize_array(bundle.X_test),
    )


# ------------------------------------------------------------------- regimes


@dataclass(frozen=True)
class RegimeSpec:
    labeled_fraction: float = 1.0
    hidden_classes: frozenset = field(default_factory=frozenset)
    n_augmented: int = 0
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden_classes", frozenset(int(c) for c in self.hidden_classes))
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must be in [0, 1]")
        if self.n_augmented < 0:
            raise ValueError("n_augmented must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")

    def known_classes(self, n_classes):
        """Classes that receive labels; everything else is found by clustering."""
        if self.labeled_fraction == 0:
            return frozenset()
        return frozenset(range(n_classes)) - self.hidden_classes

    @property
    def name(self):
        if self.labeled_fraction == 0:
            return "UL"
        if self.hidden_classes:
            return "SuSL"
        return "SL" if self.labeled_fraction == 1 else "SSL"


@dataclass
class Subset:
    """Rows of the training split. ``y`` is -1 where the label is withheld."""

    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.ids)


def build_regime(bundle: DatasetBundle, spec: RegimeSpec):
    """Split the training data into (labeled, unlabeled, validation) subsets."""
    K = bundle.n_classes
    if not spec.hidden_classes <= set(range(K)):
        raise ValueError(f"hidden classes {sorted(spec.hidden_classes)} not in 0..{K - 1}")
    if spec.labeled_fraction > 0 and len(spec.hidden_classes) == K:
        raise ValueError("labels requested but every class is hidden")
    X, y = bundle.X_train, bundle.y_train
    ids = bundle.train_ids
    if spec.validation_fraction > 0:
        pool, val = train_test_split(ids, test_size=spec.validation_fraction,
                                     stratify=y, random_state=spec.seed)
        pool, val = np.sort(pool), np.sort(val)
    else:
        pool, val = ids, ids[:0]
    rng = np.random.default_rng(spec.seed)
    known = spec.known_classes(K)
    lab = []
    for c in sorted(known):
        members = pool[y[pool] == c]
        k = math.floor(spec.labeled_fraction * len(members))
        if spec.labeled_fraction > 0 and len(members):
            k = max(k, 1)
        lab.append(rng.choice(members, size=k, replace=False))
    lab = np.sort(np.concatenate(lab)) if lab else ids[:0]
    unl = np.setdiff1d(pool, lab)
    labeled = Subset(X[lab], y[lab].copy(), lab)
    unlabeled = Subset(X[unl], np.full(len(unl), -1), unl)
    validation = Subset(X[val], y[val].copy(), val)
    return labeled, unlabeled, validation


def make_batches(n_labeled, n_unlabeled, batch_size=512, seed=0, epoch=0):
    """Yield ``(labeled_idx, unlabeled_idx)`` index arrays for one epoch.

    The larger side is shuffled and consumed once in chunks of
    ``batch_size`` (the last chunk may be short); the smaller side is drawn
    with replacement to match each chunk. Equal sizes: both sides shuffled,
    no replacement. An empty side yields empty index arrays.
    """
    if n_labeled == 0 and n_unlabeled == 0:
        raise ValueError("both labeled and unlabeled sets are empty")
    rng = np.random.default_rng([seed, epoch])
    empty = np.zeros(0, dtype=np.intp)
    if n_labeled == n_unlabeled:
        pl, pu = rng.permutation(n_labeled), rng.permutation(n_unlabeled)
        for i in range(0, n_labeled, batch_size):
            yield pl[i:i + batch_size], pu[i:i + batch_size]
        return
    big, small = max(n_labeled, n_unlabeled), min(n_labeled, n_unlabeled)
    perm = rng.permutation(big)
    for i in range(0, big, batch_size):
        chunk = perm[i:i + batch_size]
        other = rng.integers(0, small, size=len(chunk)) if small else empty
        yield (chunk, other) if n_labeled > n_unlabeled else (other, chunk)


# ----------------------------------------------------------------- synthetic


WAVEFORMS = ("sine", "square", "sawtooth", "noise")


def make_waveforms(n_train=1000, n_test=400, length=64, seed=0, noise=0.1,
                   phase_range=1.0, cycles=(2.0, 3.0)) -> DatasetBundle:
    """Balanced four-class toy set: sine, square, sawtooth and white noise.

    Each periodic series has ``U(*cycles)`` cycles, a phase drawn from
    ``U(0, phase_range)`` (in cycles) and additive Gaussian noise of std
    ``noise``.
    """
    if not 0.0 <= phase_range <= 1.0:
        raise ValueError("phase_range must lie in [0, 1]")
    if not 0.0 < cycles[0] <= cycles[1]:
        raise ValueError("cycles must satisfy 0 < low <= high")
    rng = np.random.default_rng(seed)

    def draw(n):
        y = np.arange(n) % len(WAVEFORMS)
        rng.shuffle(y)
        t = np.arange(length) / length
        n_cycles = rng.uniform(cycles[0], cycles[1], size=(n, 1))
        phase = rng.uniform(0.0, phase_range, size=(n, 1))
        u = (n_cycles * t[None, :] + phase) % 1.0
        waves = np.stack([
            np.sin(2 * np.pi * u),
            np.where(u < 0.5, 1.0, -1.0),
            2.0 * u - 1.0,
            rng.standard_normal((n, length)),
        ])
        X = waves[y, np.arange(n)] + noise * rng.standard_normal((n, length))
        return X[:, None, :], y

    Xtr, ytr = draw(n_train)
    Xte, yte = draw(n_test)
    return DatasetBundle(name="waveforms", channels=1, length=length, class_names=WAVEFORMS,
                         X_train=Xtr, y_train=ytr, X_test=Xte, y_test=yte)
