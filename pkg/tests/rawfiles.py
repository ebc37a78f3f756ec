"""Writers for small, format-faithful stand-ins of the three raw dataset layouts.

Only the layout and the per-class counts are realistic; the values are noise.
"""
from pathlib import Path

import numpy as np

from susl4ts.datasets import HAR_CHANNELS

# reference per-class (train, test) counts of the public datasets, in label order
HAR_COUNTS = ((1226, 1073, 986, 1286, 1374, 1407), (496, 471, 420, 491, 532, 537))
ECG_COUNTS = ((72471, 2223, 5788, 641, 6431), (18118, 557, 1448, 162, 1607))
ELD_COUNTS = ((727, 2231, 851, 1474, 2406, 509, 728), (667, 1956, 755, 1165, 1869, 743, 556))


def _labels(counts, rng, first=0):
    y = np.repeat(np.arange(first, first + len(counts)), counts)
    rng.shuffle(y)
    return y


def _values(rng, n, width, cheap):
    if cheap:  # short tokens keep full-size files fast to write and parse
        return np.tile(np.array(["0", "1", "-1"], dtype=object), width // 3 + 1)[:width][None].repeat(n, 0)
    return rng.standard_normal((n, width))


def write_ucr(root, name="ElectricDevices", counts=ELD_COUNTS, length=96, seed=0, cheap=False,
              first_label=1):
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, c in zip(("TRAIN", "TEST"), counts):
        y = _labels(c, rng, first_label)
        X = _values(rng, len(y), length, cheap)
        with open(root / f"{name}_{split}.tsv", "w") as fh:
            for lab, row in zip(y, X):
                fh.write(f"{lab}\t" + "\t".join(r if cheap else f"{r:.6f}" for r in row) + "\n")
    return root


def write_mitbih(root, counts=ECG_COUNTS, width=187, seed=0, cheap=False, pad=True, header=False):
    """mitbih_train.csv / mitbih_test.csv: ``width`` samples then the label (as a float)."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for split, c in zip(("train", "test"), counts):
        y = _labels(c, rng)
        X = _values(rng, len(y), width, cheap)
        path = root / f"mitbih_{split}.csv"
        with open(path, "w") as fh:
            if header:
                fh.write(",".join(f"c{i}" for i in range(width + 1)) + "\n")
            for lab, row in zip(y, X):
                vals = [str(v) if cheap else f"{abs(v) / 4:.18e}" for v in row]
                if pad:
                    vals[-1] = "0" if cheap else f"{0.0:.18e}"
                fh.write(",".join(vals) + f",{float(lab):.18e}\n")
        paths.append(path)
    return paths


def write_har(root, counts=HAR_COUNTS, length=128, seed=0, cheap=False, skip_channel=None):
    """UCI HAR layout: <split>/Inertial Signals/<channel>_<split>.txt and <split>/y_<split>.txt."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for split, c in zip(("train", "test"), counts):
        y = _labels(c, rng, 1)
        sig = root / split / "Inertial Signals"
        sig.mkdir(parents=True, exist_ok=True)
        for ch in HAR_CHANNELS:
            if ch == skip_channel:
                continue
            X = _values(rng, len(y), length, cheap)
            with open(sig / f"{ch}_{split}.txt", "w") as fh:
                for row in X:
                    fh.write(" " + "  ".join(r if cheap else f"{r: .7e}" for r in row) + "\n")
        (root / split / f"y_{split}.txt").write_text("".join(f"{v}\n" for v in y))
    return root
