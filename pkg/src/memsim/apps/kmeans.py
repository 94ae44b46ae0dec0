"""k-means where the distance scores come from one crossbar product per iteration.

||x - y||^2 = ||x||^2 - 2 x.y + ||y||^2 and ||x||^2 is the same for every
center, so the assignment only needs -2 x.y + ||y||^2. Appending n copies of
-1/2 to x and n copies of ||y||^2/n to y makes that a single dot product.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .. import dpe
from ..numerics import stream

N_TAIL = 10


def augment_points(x, n: int = N_TAIL) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.hstack([x, np.full((x.shape[0], n), -0.5)])


def augment_centers(y, n: int = N_TAIL) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    sq = (y ** 2).sum(axis=1, keepdims=True) / n
    return np.hstack([y, np.repeat(sq, n, axis=1)])


def scores(x_aug, y_aug) -> np.ndarray:
    """-2 x.y + ||y||^2 from augmented operands."""
    return -2.0 * (np.asarray(x_aug) @ np.asarray(y_aug).T)


@dataclass
class Scaler:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, x):
        return cls(x.min(axis=0), x.max(axis=0))

    def transform(self, x):
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return 2 * (x - self.lo) / span - 1

    def inverse(self, z):
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return (z + 1) / 2 * span + self.lo


@dataclass
class KMeansState:
    centers: np.ndarray          # in scaled feature space
    assignments: np.ndarray
    iterations: int
    n_tail: int
    converged: bool
    sse_history: list[float] = field(default_factory=list)
    scaler: Scaler | None = None
    reseeds: int = 0

    @property
    def augmented_centers(self) -> np.ndarray:
        return augment_centers(self.centers, self.n_tail)


def kmeans_pp(x, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
    return np.array(centers)


def sse(x, centers, labels) -> float:
    return float(((x - centers[labels]) ** 2).sum())


def kmeans_hw(points, k: int, engine: dpe.EngineConfig | None = None, max_iter: int = 100,
              n_tail: int = N_TAIL, seed: int = 0, single_center: bool = False) -> KMeansState:
    """Lloyd iterations with hardware distance scores.

    ``engine=None`` runs the same loop with exact scores (the full-precision
    reference). With ``single_center`` only center ``it % k`` is recomputed per
    iteration. An empty cluster is reseeded at the point farthest from its
    current center.
    """
    x = np.asarray(points, dtype=np.float64)
    if k < 1 or k > len(x):
        raise ValueError(f"k must be in [1, {len(x)}], got {k}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points must be finite")
    scaler = Scaler.fit(x)
    z = scaler.transform(x)
    x_aug = augment_points(z, n_tail)
    centers = kmeans_pp(z, k, stream(seed, "kmeans", 0))
    labels = None
    hist: list[float] = []
    reseeds = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        c_aug = augment_centers(centers, n_tail)
        if engine is None:
            s = scores(x_aug, c_aug)
        else:
            pw = dpe.program_weights(c_aug.T, engine, cycle=it)
            s = -2.0 * dpe.matmul(x_aug, pw, engine).result
        new = np.argmin(s, axis=1)
        if labels is not None and np.array_equal(new, labels):
            converged = True
            break
        labels = new
        todo = [(it - 1) % k] if single_center else range(k)
        for j in todo:
            members = z[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                far = int(np.argmax(((z - centers[labels]) ** 2).sum(axis=1)))
                centers[j] = z[far]
                labels[far] = j
                reseeds += 1
        hist.append(sse(z, centers, labels))
    return KMeansState(centers, labels, it, n_tail, converged, hist, scaler, reseeds)


def agreement(a, b, k: int | None = None) -> float:
    """Fraction of points with matching labels under the best relabeling."""
    a = np.asarray(a)
    b = np.asarray(b)
    k = k or int(max(a.max(), b.max())) + 1
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (a, b), 1)
    r, c = linear_sum_assignment(-conf)
    return float(conf[r, c].sum() / len(a))


def synthetic_gaussians(n_per: int = 50, seed: int = 0, dim: int = 4) -> tuple[np.ndarray, np.ndarray]:
    rng = stream(seed, "data", 1)
    centers = np.array([[5.0, 3.4, 1.5, 0.25], [5.9, 2.8, 4.3, 1.3], [6.6, 3.0, 5.6, 2.0]])[:, :dim]
    x = np.vstack([c + 0.3 * rng.standard_normal((n_per, dim)) for c in centers])
    y = np.repeat(np.arange(3), n_per)
    return x, y


def load_iris(path=None, seed: int = 0) -> tuple[np.ndarray, np.ndarray, str]:
    """IRIS from a 150x4 CSV (header row, 4 numeric columns, label column).

    Falls back to three synthetic Gaussians when no file is found. Returns
    (features, integer labels, source).
    """
    if path is None:
        here = os.path.dirname(os.path.abspath(__file__))
        cand = os.path.normpath(os.path.join(here, "..", "..", "..", "tests", "data", "iris.csv"))
        path = cand if os.path.exists(cand) else None
    if path is None or not os.path.exists(path):
        x, y = synthetic_gaussians(seed=seed)
        return x, y, "synthetic"
    feats, names = [], []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    for i, row in enumerate(rows):
        if not row:
            continue
        try:
            feats.append([float(v) for v in row[:4]])
        except ValueError:
            if i == 0:
                continue
            raise ValueError(f"{path}:{i + 1}: bad row {row!r}") from None
        names.append(row[4] if len(row) > 4 else "")
    uniq = {n: j for j, n in enumerate(dict.fromkeys(names))}
    return np.array(feats), np.array([uniq[n] for n in names]), str(path)


def read_points(path) -> np.ndarray:
    """Numeric CSV; a non-numeric first row is skipped as a header."""
    out = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                out.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}:{i + 1}: non-numeric row {row!r}") from None
    if not out:
        raise ValueError(f"{path}: no rows")
    return np.array(out)
