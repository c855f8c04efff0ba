"""Bagged regression-tree ensemble predicting strain from embeddings.

Trees use variance-reduction splits at midpoints between consecutive distinct
feature values, ``ceil(d / 3)`` candidate features per node, and are grown
depth-first so their node arrays are already in pre-order.

Bootstrap index convention: the training table is first reduced to its distinct
``(embedding, target)`` rows in first-occurrence order; tree ``t`` then draws
``n_distinct`` row indices with replacement from that table using numba's
MT19937 seeded with ``tree_seed(seed, t)``. Duplicated training rows therefore
never change the fitted ensemble, and the seed-to-tree mapping does not depend
on how trees are scheduled.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .core import Dataset
from .rng import splitmix64

MAGIC = b"ALQT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeParams:
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 3
    max_bins: int | None = 64  # None: every midpoint between distinct values is a candidate


@dataclass(frozen=True)
class Prediction:
    mean: float
    spread: float


def tree_seed(seed: int, t: int) -> int:
    h = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    h = splitmix64(h + np.uint64(t))
    return int(h) & 0x7FFFFFFF


@numba.njit(cache=True)
def _fit_tree(XT, y, order_global, seed, max_depth, min_leaf, mtry):
    np.random.seed(seed)
    d, n = XT.shape
    w = np.zeros(n, dtype=np.float64)
    for _ in range(n):
        w[np.random.randint(0, n)] += 1.0
    wy = w * y

    m = 0
    for i in range(n):
        if w[i] > 0:
            m += 1
    # two sorted-index buffers; a node at depth k reads buffer k % 2 and
    # partitions its segment into the other one for its children
    order = np.empty((2, d, m + 1), dtype=np.int32)
    for f in range(d):
        j = 0
        for i in range(n):
            r = order_global[f, i]
            order[0, f, j] = r
            j += w[r] > 0

    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, dtype=np.int32)
    threshold = np.zeros(max_nodes, dtype=np.float64)
    value = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)

    st_start = np.empty(max_depth + 2, dtype=np.int64)
    st_end = np.empty(max_depth + 2, dtype=np.int64)
    st_depth = np.empty(max_depth + 2, dtype=np.int64)
    st_parent = np.empty(max_depth + 2, dtype=np.int64)
    st_left = np.empty(max_depth + 2, dtype=np.bool_)
    st_start[0] = 0
    st_end[0] = m
    st_depth[0] = 0
    st_parent[0] = -1
    st_left[0] = True
    sp = 1

    perm = np.arange(d)
    goes_left = np.zeros(n, dtype=np.bool_)
    n_nodes = 0

    while sp > 0:
        sp -= 1
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        parent = st_parent[sp]
        is_left = st_left[sp]
        cur = depth % 2

        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if is_left:
                left[parent] = node
            else:
                right[parent] = node

        W = 0.0
        S = 0.0
        for i in range(start, end):
            r = order[cur, 0, i]
            W += w[r]
            S += wy[r]
        value[node] = S / W

        if depth >= max_depth or W < 2 * min_leaf:
            continue

        parent_score = S * S / W
        best_gain = parent_score + 1e-12 * (1.0 + abs(parent_score))
        best_f = -1
        best_thr = 0.0
        best_wl = 0.0
        # partial Fisher-Yates for the candidate features of this node
        for j in range(mtry):
            k = j + np.random.randint(0, d - j)
            tmp = perm[j]
            perm[j] = perm[k]
            perm[k] = tmp
        for j in range(mtry):
            f = perm[j]
            xf = XT[f]
            of = order[cur, f]
            wl = 0.0
            sl = 0.0
            prev = xf[of[start]]
            for i in range(start, end):
                r = of[i]
                x = xf[r]
                if x > prev and wl >= min_leaf and W - wl >= min_leaf:
                    sr = S - sl
                    gain = sl * sl / wl + sr * sr / (W - wl)
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        thr = 0.5 * (prev + x)
                        if thr >= x:
                            thr = prev
                        best_thr = thr
                        best_wl = wl
                wl += w[r]
                sl += wy[r]
                prev = x

        if best_f < 0:
            continue

        feature[node] = best_f
        threshold[node] = best_thr
        xb = XT[best_f]
        nl = 0
        for i in range(start, end):
            r = order[cur, 0, i]
            gl = xb[r] <= best_thr
            goes_left[r] = gl
            if gl:
                nl += 1

        # children that cannot split need no sorted orders
        child_splits = depth + 1 < max_depth and (best_wl >= 2 * min_leaf or W - best_wl >= 2 * min_leaf)
        if child_splits:
            nxt = 1 - cur
            for f in range(d):
                src = order[cur, f]
                dst = order[nxt, f]
                a = start
                b = start + nl
                for i in range(start, end):
                    r = src[i]
                    gl = goes_left[r]
                    dst[a if gl else b] = r
                    a += gl
                    b += 1 - gl
        else:
            nxt = 1 - cur
            src = order[cur, 0]
            dst = order[nxt, 0]
            a = start
            b = start + nl
            for i in range(start, end):
                r = src[i]
                gl = goes_left[r]
                dst[a if gl else b] = r
                a += gl
                b += 1 - gl

        # right pushed first so the left subtree is emitted first (pre-order)
        st_start[sp] = start + nl
        st_end[sp] = end
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_left[sp] = False
        sp += 1
        st_start[sp] = start
        st_end[sp] = start + nl
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_left[sp] = True
        sp += 1

    return feature[:n_nodes], threshold[:n_nodes], value[:n_nodes], left[:n_nodes], right[:n_nodes]


@numba.njit(cache=True)
def _fit_tree_binned(XB, cuts, n_cuts, y, seed, max_depth, min_leaf, mtry):
    np.random.seed(seed)
    d, n = XB.shape
    w = np.zeros(n, dtype=np.float64)
    for _ in range(n):
        w[np.random.randint(0, n)] += 1.0
    wy = w * y

    idx = np.empty(n, dtype=np.int32)
    m = 0
    for i in range(n):
        idx[m] = i
        m += w[i] > 0
    buf = np.empty(m, dtype=np.int32)

    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, dtype=np.int32)
    threshold = np.zeros(max_nodes, dtype=np.float64)
    value = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)

    st_start = np.empty(max_depth + 2, dtype=np.int64)
    st_end = np.empty(max_depth + 2, dtype=np.int64)
    st_depth = np.empty(max_depth + 2, dtype=np.int64)
    st_parent = np.empty(max_depth + 2, dtype=np.int64)
    st_left = np.empty(max_depth + 2, dtype=np.bool_)
    st_start[0] = 0
    st_end[0] = m
    st_depth[0] = 0
    st_parent[0] = -1
    st_left[0] = True
    sp = 1

    perm = np.arange(d)
    max_bins = cuts.shape[1] + 1
    hw = np.zeros(max_bins, dtype=np.float64)
    hs = np.zeros(max_bins, dtype=np.float64)
    n_nodes = 0

    while sp > 0:
        sp -= 1
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        parent = st_parent[sp]
        is_left = st_left[sp]

        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if is_left:
                left[parent] = node
            else:
                right[parent] = node

        W = 0.0
        S = 0.0
        for i in range(start, end):
            r = idx[i]
            W += w[r]
            S += wy[r]
        value[node] = S / W

        if depth >= max_depth or W < 2 * min_leaf:
            continue

        parent_score = S * S / W
        best_gain = parent_score + 1e-12 * (1.0 + abs(parent_score))
        best_f = -1
        best_bin = 0
        for j in range(mtry):
            k = j + np.random.randint(0, d - j)
            tmp = perm[j]
            perm[j] = perm[k]
            perm[k] = tmp
        for j in range(mtry):
            f = perm[j]
            nb = n_cuts[f] + 1
            if nb < 2:
                continue
            for b in range(nb):
                hw[b] = 0.0
                hs[b] = 0.0
            xb = XB[f]
            for i in range(start, end):
                r = idx[i]
                b = xb[r]
                hw[b] += w[r]
                hs[b] += wy[r]
            wl = 0.0
            sl = 0.0
            for b in range(nb - 1):
                wl += hw[b]
                sl += hs[b]
                if hw[b + 1] > 0 and wl >= min_leaf and W - wl >= min_leaf:
                    sr = S - sl
                    gain = sl * sl / wl + sr * sr / (W - wl)
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_bin = b

        if best_f < 0:
            continue

        feature[node] = best_f
        threshold[node] = cuts[best_f, best_bin]
        xb = XB[best_f]
        a = start
        nl = 0
        for i in range(start, end):
            nl += xb[idx[i]] <= best_bin
        b = start + nl
        for i in range(start, end):
            r = idx[i]
            gl = xb[r] <= best_bin
            buf[a if gl else b] = r
            a += gl
            b += 1 - gl
        for i in range(start, end):
            idx[i] = buf[i]

        st_start[sp] = start + nl
        st_end[sp] = end
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_left[sp] = False
        sp += 1
        st_start[sp] = start
        st_end[sp] = start + nl
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_left[sp] = True
        sp += 1

    return feature[:n_nodes], threshold[:n_nodes], value[:n_nodes], left[:n_nodes], right[:n_nodes]


@numba.njit(cache=True)
def _predict_all(X, feature, threshold, value, left, right, offsets):
    n_trees = offsets.shape[0] - 1
    out = np.empty((n_trees, X.shape[0]), dtype=np.float64)
    for t in range(n_trees):
        base = offsets[t]
        for i in range(X.shape[0]):
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[t, i] = value[base + node]
    return out


@dataclass
class SurrogateEnsemble:
    params: TreeParams
    bootstrap_seed: int
    n_features: int
    trained_on: int
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    left: np.ndarray
    right: np.ndarray
    offsets: np.ndarray
    fit_seconds: float = field(default=0.0, compare=False)

    @property
    def n_trees(self) -> int:
        return self.offsets.shape[0] - 1

    def tree_outputs(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        if X.shape[1] != self.n_features:
            raise ValueError(f"embedding length {X.shape[1]} != {self.n_features}")
        return _predict_all(X, self.feature, self.threshold, self.value, self.left, self.right, self.offsets)

    def predict_batch(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.tree_outputs(X)
        mean = out.mean(axis=0)
        if self.n_trees > 1:
            spread = out.std(axis=0, ddof=1)
        else:
            spread = np.zeros_like(mean)
        return mean, spread

    def tree_nodes(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.offsets[t], self.offsets[t + 1]
        return self.feature[s:e], np.where(self.feature[s:e] >= 0, self.threshold[s:e], self.value[s:e])


def _distinct_rows(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    Xy = np.ascontiguousarray(np.column_stack([X, y]))
    _, first = np.unique(Xy, axis=0, return_index=True)
    return np.sort(first)


def _cut_points(col: np.ndarray, max_bins: int) -> np.ndarray:
    u = np.unique(col)
    if len(u) < 2:
        return np.zeros(0)
    if len(u) <= max_bins:
        hi = np.arange(1, len(u))
    else:
        s = np.sort(col)
        pos = np.searchsorted(u, s[(np.arange(1, max_bins) * len(s)) // max_bins])
        hi = np.unique(pos[pos >= 1])
    mid = 0.5 * (u[hi - 1] + u[hi])
    return np.where(mid >= u[hi], u[hi - 1], mid)


def bin_features(X: np.ndarray, max_bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate thresholds per feature (midpoints between distinct values at
    row quantiles) and the bin index of every value: ``x <= cuts[j]`` iff bin <= j."""
    if not 2 <= max_bins <= 256:
        raise ValueError("max_bins must be in [2, 256]")
    n, d = X.shape
    cuts = np.zeros((d, max_bins - 1))
    n_cuts = np.zeros(d, dtype=np.int64)
    XB = np.empty((d, n), dtype=np.uint8)
    for f in range(d):
        c = _cut_points(X[:, f], max_bins)
        cuts[f, :len(c)] = c
        n_cuts[f] = len(c)
        XB[f] = np.searchsorted(c, X[:, f], side="left")
    return cuts, n_cuts, XB


def fit_arrays(X: np.ndarray, y: np.ndarray, params: TreeParams = TreeParams(), seed: int = 0) -> SurrogateEnsemble:
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty training set")
    if y.shape != (X.shape[0],) or not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite, one per row")
    keep = _distinct_rows(X, y)
    Xd = np.ascontiguousarray(X[keep])
    yd = np.ascontiguousarray(y[keep])
    d = Xd.shape[1]
    mtry = max(1, math.ceil(d / 3))
    seeds = [tree_seed(seed, t) for t in range(params.n_trees)]
    if params.max_bins is None:
        order = np.ascontiguousarray(np.stack([np.argsort(Xd[:, f], kind="stable") for f in range(d)]).astype(np.int32))
        XT = np.ascontiguousarray(Xd.T)
        parts = [_fit_tree(XT, yd, order, s, params.max_depth, params.min_leaf, mtry) for s in seeds]
    else:
        cuts, n_cuts, XB = bin_features(Xd, params.max_bins)
        parts = [_fit_tree_binned(XB, cuts, n_cuts, yd, s, params.max_depth, params.min_leaf, mtry) for s in seeds]
    sizes = np.array([len(p[0]) for p in parts])
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return SurrogateEnsemble(
        params=params, bootstrap_seed=seed, n_features=d, trained_on=X.shape[0],
        feature=np.concatenate([p[0] for p in parts]),
        threshold=np.concatenate([p[1] for p in parts]),
        value=np.concatenate([p[2] for p in parts]),
        left=np.concatenate([p[3] for p in parts]),
        right=np.concatenate([p[4] for p in parts]),
        offsets=offsets,
        fit_seconds=time.perf_counter() - t0,
    )


def fit(train: Dataset, params: TreeParams = TreeParams(), seed: int = 0) -> SurrogateEnsemble:
    if len(train) == 0:
        raise ValueError("empty training set")
    if any(r.s_is is None for r in train):
        raise ValueError("training rows must all have s_is")
    return fit_arrays(train.embeddings(), train.column("s_is"), params, seed)


def predict(e: SurrogateEnsemble, emb) -> Prediction:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 1:
        raise ValueError("predict takes a single embedding")
    mean, spread = e.predict_batch(emb[None, :])
    return Prediction(float(mean[0]), float(spread[0]))


def rmse(targets: np.ndarray, predictions: np.ndarray) -> float:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise ValueError("empty holdout")
    return float(np.sqrt(np.mean((targets - np.asarray(predictions, dtype=np.float64)) ** 2)))


def holdout_rmse(e: SurrogateEnsemble, holdout: Dataset) -> float:
    if len(holdout) == 0:
        raise ValueError("empty holdout")
    mean, _ = e.predict_batch(holdout.embeddings())
    return rmse(holdout.column("s_is"), mean)


def needs_retrain(results_since_fit: int, batch: int) -> bool:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return results_since_fit >= batch


# --- checkpoint format -------------------------------------------------------
# little-endian: magic "ALQT", u32 format version, u32 n_trees, u32 n_features,
# u32 max_depth, u32 min_leaf, u64 bootstrap seed, u64 trained_on; then per tree
# u32 n_nodes followed by n_nodes pre-order records (i32 feature, f64 value),
# where feature -1 marks a leaf and value is the split threshold or leaf output.


def save(e: SurrogateEnsemble, path: str | Path) -> None:
    p = e.params
    chunks = [MAGIC, struct.pack("<IIIIIQQ", FORMAT_VERSION, e.n_trees, e.n_features, p.max_depth,
                                 p.min_leaf, e.bootstrap_seed & 0xFFFFFFFFFFFFFFFF, e.trained_on)]
    rec = np.dtype([("feature", "<i4"), ("value", "<f8")])
    for t in range(e.n_trees):
        feat, val = e.tree_nodes(t)
        arr = np.empty(len(feat), dtype=rec)
        arr["feature"] = feat
        arr["value"] = val
        chunks.append(struct.pack("<I", len(feat)))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path: str | Path) -> SurrogateEnsemble:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tree checkpoint")
    version, n_trees, d, depth, min_leaf, seed, trained_on = struct.unpack_from("<IIIIIQQ", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 4 + struct.calcsize("<IIIIIQQ")
    rec = np.dtype([("feature", "<i4"), ("value", "<f8")])
    feats, thrs, vals, lefts, rights, sizes = [], [], [], [], [], []
    for _ in range(n_trees):
        (nn,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arr = np.frombuffer(data, dtype=rec, count=nn, offset=pos)
        pos += nn * rec.itemsize
        f = arr["feature"].astype(np.int32)
        v = arr["value"].astype(np.float64)
        left = np.full(nn, -1, dtype=np.int32)
        right = np.full(nn, -1, dtype=np.int32)
        stack = []  # internal nodes still waiting for their right child
        for i in range(nn):
            if i > 0:
                prev = i - 1
                if f[prev] >= 0:
                    left[prev] = i
                else:
                    right[stack.pop()] = i
            if f[i] >= 0:
                stack.append(i)
        feats.append(f)
        thrs.append(np.where(f >= 0, v, 0.0))
        vals.append(np.where(f >= 0, 0.0, v))
        lefts.append(left)
        rights.append(right)
        sizes.append(nn)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return SurrogateEnsemble(TreeParams(n_trees, depth, min_leaf), seed, d, trained_on,
                             np.concatenate(feats), np.concatenate(thrs), np.concatenate(vals),
                             np.concatenate(lefts), np.concatenate(rights), offsets)
