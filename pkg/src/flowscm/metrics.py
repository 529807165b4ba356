"""Dependence and distribution metrics, and the evaluation report.

mic/tic use an equipartition-grid estimator: for every grid shape
(a, b) with a * b <= n^0.6, one axis is equipartitioned by rank and the
other axis's partition is optimized by dynamic programming over
equal-label clumps; the normalized mutual information I / log min(a, b)
is recorded for both orientations and the matrix maximum (mic) or mean
(tic) is returned. This approximates the exhaustive grid search of the
original statistic; rank-based binning makes both scores invariant to
strictly monotone transformations of either argument.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

GRID_EXPONENT = 0.6
CLUMP_CAP = 64
MIN_POINTS = 50


@njit(cache=True)
def _score_matrix(cum):
    """score[s, t] = sum_l v ln v - g ln g for the clump group (s, t]."""
    q = cum.shape[0] - 1
    n_labels = cum.shape[1]
    score = np.zeros((q + 1, q + 1))
    for s in range(q):
        for t in range(s + 1, q + 1):
            sc = 0.0
            g = 0.0
            for l in range(n_labels):
                v = cum[t, l] - cum[s, l]
                if v > 0.5:
                    sc += v * np.log(v)
                    g += v
            if g > 0.5:
                sc -= g * np.log(g)
            score[s, t] = sc
    return score


@njit(cache=True)
def _dp_partition(score, max_bins):
    """Max of sum-of-group-scores over contiguous partitions into <= max_bins groups."""
    q = score.shape[0] - 1
    neg = -1e18
    f_prev = np.full(q + 1, neg)
    f_prev[0] = 0.0
    best = neg
    top = min(max_bins, q)
    for m in range(1, top + 1):
        f_cur = np.full(q + 1, neg)
        for t in range(m, q + 1):
            b = neg
            for s in range(m - 1, t):
                if f_prev[s] > neg / 2.0:
                    val = f_prev[s] + score[s, t]
                    if val > b:
                        b = val
            f_cur[t] = b
        if f_cur[q] > best:
            best = f_cur[q]
        f_prev = f_cur
    return best


def _equipartition_labels(order: np.ndarray, bins: int) -> np.ndarray:
    n = order.size
    labels = np.empty(n, dtype=np.int64)
    labels[order] = (np.arange(n, dtype=np.int64) * bins) // n
    return labels


def _label_entropy(labels: np.ndarray, bins: int) -> float:
    counts = np.bincount(labels, minlength=bins).astype(np.float64)
    p = counts[counts > 0] / labels.size
    return float(-(p * np.log(p)).sum())


def _clump_cum(sorted_labels: np.ndarray, bins: int, cap: int) -> np.ndarray:
    """Cumulative label counts over equal-label runs, merged to <= cap clumps.

    Cut positions stay on run boundaries so a partition aligned with the
    label equipartition remains reachable whenever it exists.
    """
    n = sorted_labels.size
    change = np.nonzero(np.diff(sorted_labels))[0] + 1
    bounds = np.concatenate(([0], change, [n]))
    if len(bounds) - 1 > cap:
        targets = np.arange(1, cap) * n / cap
        keep = [0]
        ti = 0
        for bnd in bounds[1:-1]:
            if ti < len(targets) and bnd >= targets[ti]:
                keep.append(int(bnd))
                while ti < len(targets) and bnd >= targets[ti]:
                    ti += 1
        keep.append(n)
        bounds = np.asarray(sorted(set(keep)), dtype=np.int64)
    q = len(bounds) - 1
    cum = np.zeros((q + 1, bins), dtype=np.float64)
    for t in range(q):
        seg = sorted_labels[bounds[t] : bounds[t + 1]]
        cum[t + 1] = cum[t] + np.bincount(seg, minlength=bins)
    return cum


def _validate_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} points, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs must be finite")
    return x, y


def _char_entries(x: np.ndarray, y: np.ndarray) -> dict:
    n = x.size
    budget = float(n) ** GRID_EXPONENT
    max_side = int(budget // 2)
    orders = {"x": np.argsort(x, kind="stable"), "y": np.argsort(y, kind="stable")}
    entries = {}
    # (label axis, axis being optimized, whether the key is transposed)
    for label_order, opt_order, transposed in (
        (orders["y"], orders["x"], False),
        (orders["x"], orders["y"], True),
    ):
        for b in range(2, max_side + 1):
            a_max = int(budget // b)
            if a_max < 2:
                break
            labels = _equipartition_labels(label_order, b)
            h_labels = _label_entropy(labels, b)
            cum = _clump_cum(labels[opt_order], b, CLUMP_CAP)
            score = _score_matrix(cum)
            for a in range(2, a_max + 1):
                info = _dp_partition(score, a) / n + h_labels
                key = (b, a) if transposed else (a, b)
                # clamp: roundoff can push info a few ulp past log(min(key))
                val = min(1.0, max(0.0, info) / np.log(min(key)))
                if val > entries.get(key, 0.0):
                    entries[key] = val
    return entries


def mic_tic(x, y):
    """(mic, tic) from one pass over the characteristic matrix."""
    x, y = _validate_pair(x, y)
    if x.max() == x.min() or y.max() == y.min():
        return 0.0, 0.0
    entries = _char_entries(x, y)
    values = np.fromiter(entries.values(), dtype=np.float64)
    return float(values.max()), float(values.mean())


def mic(x, y) -> float:
    return mic_tic(x, y)[0]


def tic(x, y) -> float:
    return mic_tic(x, y)[1]


def wd1(a, b) -> float:
    """Exact 1-D Wasserstein-1 distance between empirical samples.

    Equal sizes reduce to the mean absolute difference of matched order
    statistics; unequal sizes integrate |F_a - F_b| over the merged
    support, which is the quantile-matching integral computed exactly.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wd1 needs non-empty samples")
    support = np.sort(np.concatenate([a, b]))
    deltas = np.diff(support)
    if deltas.size == 0:
        return 0.0
    ca = np.searchsorted(a, support[:-1], side="right") / a.size
    cb = np.searchsorted(b, support[:-1], side="right") / b.size
    return float(np.sum(np.abs(ca - cb) * deltas))


def r2_linear(z, u) -> float:
    """OLS R^2 of labels on a latent block, clamped to [0, 1].

    Rank-deficient designs fall back to a small ridge and warn.
    """
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64).ravel()
    if z.ndim != 2 or z.shape[0] != u.size:
        raise ValueError(f"z shape {z.shape} incompatible with {u.size} labels")
    design = np.column_stack([z, np.ones(z.shape[0])])
    ss_tot = float(((u - u.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 0.0
    coef, _, rank, _ = np.linalg.lstsq(design, u, rcond=None)
    if rank < design.shape[1]:
        warnings.warn("rank-deficient design in r2_linear; using ridge fallback", stacklevel=2)
        gram = design.T @ design + 1e-6 * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ u)
    resid = u - design @ coef
    r2 = 1.0 - float((resid**2).sum()) / ss_tot
    return float(min(1.0, max(0.0, r2)))


def bimodality_split(values):
    """Deterministic 1-D 2-means: (low center, high center, within-cluster std)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 4:
        raise ValueError(f"need at least 4 values, got {v.size}")
    centers = np.array([np.percentile(v, 25.0), np.percentile(v, 75.0)])
    if centers[0] == centers[1]:
        return float(centers[0]), float(centers[1]), float(v.std())
    assign = np.abs(v[:, None] - centers[None, :]).argmin(axis=1)
    for _ in range(100):
        new = centers.copy()
        for c in (0, 1):
            if np.any(assign == c):
                new[c] = v[assign == c].mean()
        next_assign = np.abs(v[:, None] - new[None, :]).argmin(axis=1)
        centers = new
        if np.array_equal(next_assign, assign):
            break
        assign = next_assign
    within = float(np.sqrt(np.mean((v - centers[assign]) ** 2)))
    lo, hi = sorted(float(c) for c in centers)
    return lo, hi, within


@dataclass
class MetricReport:
    concepts: list
    labels: list
    mic: np.ndarray  # (K concepts, K labels)
    tic: np.ndarray
    wd: dict  # concept name -> value (matched label)
    r2: dict

    def matched_mean(self, table: np.ndarray) -> float:
        vals = [
            table[i, self.labels.index(name)]
            for i, name in enumerate(self.concepts)
            if name in self.labels
        ]
        return float(np.mean(vals))

    @property
    def mean_mic(self) -> float:
        return self.matched_mean(self.mic)

    @property
    def mean_tic(self) -> float:
        return self.matched_mean(self.tic)

    @property
    def mean_wd(self) -> float:
        return float(np.mean(list(self.wd.values())))

    @property
    def mean_r2(self) -> float:
        return float(np.mean(list(self.r2.values())))

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["concept", "label", "mic", "tic", "wd", "r2"])
            for i, cname in enumerate(self.concepts):
                for j, lname in enumerate(self.labels):
                    matched = cname == lname
                    writer.writerow(
                        [
                            cname,
                            lname,
                            repr(float(self.mic[i, j])),
                            repr(float(self.tic[i, j])),
                            repr(float(self.wd[cname])) if matched else "",
                            repr(float(self.r2[cname])) if matched else "",
                        ]
                    )
            for tag, scale in (("mean_matched", 1.0), ("mean_matched_x100", 100.0)):
                writer.writerow(
                    [
                        "__summary__",
                        tag,
                        repr(scale * self.mean_mic),
                        repr(scale * self.mean_tic),
                        repr(scale * self.mean_wd),
                        repr(scale * self.mean_r2),
                    ]
                )


def evaluate_model(model, x: np.ndarray, u: np.ndarray, label_names) -> MetricReport:
    """Score posterior-mean readouts against every ground-truth label.

    mic/tic fill the full concept x label matrix; wd and r2 are reported
    for matched (same-name) pairs, r2 on the full latent block.
    """
    label_names = list(label_names)
    if u.shape[1] != len(label_names):
        raise ValueError(f"u has {u.shape[1]} columns for {len(label_names)} labels")
    concepts = list(model.graph.names)
    if set(concepts) != set(label_names):
        raise ValueError(f"concepts {concepts} do not match labels {label_names}")
    z_blocks = model.posterior_mean_np(x)
    readouts = model.readouts_np(z_blocks)
    k = len(concepts)
    mic_table = np.zeros((k, k))
    tic_table = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            mic_table[i, j], tic_table[i, j] = mic_tic(readouts[:, i], u[:, j])
    wd = {}
    r2 = {}
    for i, name in enumerate(concepts):
        j = label_names.index(name)
        wd[name] = wd1(readouts[:, i], u[:, j])
        r2[name] = r2_linear(z_blocks[i], u[:, j])
    return MetricReport(concepts=concepts, labels=label_names, mic=mic_table, tic=tic_table, wd=wd, r2=r2)


def export_latents(path, u: np.ndarray, z_blocks_np, readouts: np.ndarray) -> None:
    """JSON Lines {u, z, readouts} per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    z_flat = np.concatenate(z_blocks_np, axis=1)
    with open(path, "w") as fh:
        for i in range(u.shape[0]):
            fh.write(
                json.dumps(
                    {"u": u[i].tolist(), "z": z_flat[i].tolist(), "readouts": readouts[i].tolist()}
                )
                + "\n"
            )
