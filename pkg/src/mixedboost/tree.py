"""Regression trees with exact greedy least-squares split search.

Trees are grown depth-wise.  Every split is the exact best (feature,
threshold) pair over midpoints of consecutive sorted unique feature
values; ties are broken deterministically by lower feature index, then
smaller threshold.  Rows with a missing (NaN) value on the split feature
are routed to the child with more training samples.

Leaf values start as per-leaf target means and can be replaced by a
generalized least squares solve against a covariance operator (the
Newton/hybrid boosting step), see :func:`gls_leaf_values`.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

_NO_CHILD = -1


@dataclass
class TreeParams:
    max_depth: int = 5
    min_samples_leaf: int = 10
    max_leaves: int | None = None

    def __post_init__(self):
        if self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("max_depth and min_samples_leaf must be >= 1")
        if self.max_leaves is not None and self.max_leaves < 1:
            raise ValueError("max_leaves must be >= 1")


class RegressionTree:
    """Binary regression tree stored in parallel node arrays.

    ``feature[i] == -1`` marks node i as a leaf; internal nodes carry the
    split feature, threshold, child indices, and which child receives
    missing values.  ``leaf_slot`` maps leaves to contiguous 0..K-1 slots.
    """

    def __init__(self, feature, threshold, left, right, value, n_samples,
                 nan_left):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        self.n_samples = np.asarray(n_samples, dtype=np.int64)
        self.nan_left = np.asarray(nan_left, dtype=bool)
        leaves = np.flatnonzero(self.feature == _NO_CHILD)
        self.leaf_slot = np.full(self.feature.size, -1, dtype=np.int64)
        self.leaf_slot[leaves] = np.arange(leaves.size)
        self._leaf_nodes = leaves

    @property
    def n_leaves(self) -> int:
        return self._leaf_nodes.size

    @property
    def leaf_values(self) -> np.ndarray:
        return self.value[self._leaf_nodes]

    def set_leaf_values(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape != (self.n_leaves,):
            raise ValueError("leaf value vector has wrong length")
        self.value[self._leaf_nodes] = gamma

    def apply(self, X) -> np.ndarray:
        """Leaf slot (0..K-1) of each row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(X.shape[0], dtype=np.int64)
        pending = [0]
        while pending:
            i = pending.pop()
            if self.feature[i] == _NO_CHILD:
                continue
            rows = node == i
            if not rows.any():
                continue
            x = X[rows, self.feature[i]]
            nan = np.isnan(x)
            go_left = x <= self.threshold[i]
            go_left[nan] = self.nan_left[i]
            dest = np.where(go_left, self.left[i], self.right[i])
            node[rows] = dest
            pending.extend((self.left[i], self.right[i]))
        return self.leaf_slot[node]

    def predict(self, X) -> np.ndarray:
        slots = self.apply(X)
        return self.value[self._leaf_nodes][slots]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": [None if np.isnan(t) else t for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
            "nan_left": self.nan_left.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        thr = [np.nan if t is None else t for t in d["threshold"]]
        return cls(d["feature"], thr, d["left"], d["right"], d["value"],
                   d["n_samples"], d["nan_left"])


def predict_tree(tree: RegressionTree, X) -> np.ndarray:
    return tree.predict(X)


def fit_tree(X, targets, params: TreeParams) -> RegressionTree:
    """Grow a least-squares regression tree on (X, targets)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(targets, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty training data")
    if X.shape[0] != t.size:
        raise ValueError("X and targets disagree on sample size")
    if not np.all(np.isfinite(t)):
        raise ValueError("targets must be finite")

    feature, threshold, left, right = [], [], [], []
    value, n_samples, nan_left = [], [], []

    def new_node(idx):
        feature.append(_NO_CHILD)
        threshold.append(np.nan)
        left.append(_NO_CHILD)
        right.append(_NO_CHILD)
        value.append(float(np.mean(t[idx])))
        n_samples.append(idx.size)
        nan_left.append(False)
        return len(feature) - 1

    root = new_node(np.arange(X.shape[0]))
    queue = [(root, np.arange(X.shape[0]), 0)]
    n_leaves = 1
    while queue:
        node, idx, depth = queue.pop(0)
        if depth >= params.max_depth or idx.size < 2 * params.min_samples_leaf:
            continue
        if params.max_leaves is not None and n_leaves >= params.max_leaves:
            continue
        split = _best_split(X[idx], t[idx], params.min_samples_leaf)
        if split is None:
            continue
        j, thr = split
        x = X[idx, j]
        nan = np.isnan(x)
        go_left = x <= thr
        n_l = int(np.count_nonzero(go_left & ~nan))
        n_r = int(np.count_nonzero(~go_left & ~nan))
        to_left = n_l >= n_r  # missing values follow the bigger child
        go_left[nan] = to_left
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = j
        threshold[node] = thr
        nan_left[node] = to_left
        left[node] = new_node(li)
        right[node] = new_node(ri)
        n_leaves += 1
        queue.append((left[node], li, depth + 1))
        queue.append((right[node], ri, depth + 1))

    return RegressionTree(feature, threshold, left, right, value, n_samples,
                          nan_left)


def _best_split(Xn, tn, min_leaf):
    """Exact best (feature, threshold) by SSE reduction; None if no valid split."""
    if np.all(tn == tn[0]):
        return None
    best_gain = 0.0
    best = None
    for j in range(Xn.shape[1]):
        x = Xn[:, j]
        finite = ~np.isnan(x)
        xf = x[finite]
        if xf.size < 2 * min_leaf:
            continue
        tf = tn[finite]
        order = np.argsort(xf, kind="stable")
        xs = xf[order]
        ts = tf[order]
        csum = np.cumsum(ts)
        total = csum[-1]
        n = xs.size
        n_left = np.arange(1, n)
        boundary = xs[1:] > xs[:-1]
        valid = boundary & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        pos = np.flatnonzero(valid)
        L = csum[pos]  # sum of the n_left smallest-x targets
        nL = n_left[pos]
        R = total - L
        nR = n - nL
        score = L * L / nL + R * R / nR
        gain = score - total * total / n
        i = int(np.argmax(gain))  # first max: smallest threshold wins ties
        if gain[i] > best_gain:
            lo, hi = xs[pos[i]], xs[pos[i] + 1]
            thr = lo + 0.5 * (hi - lo)
            if not (lo <= thr < hi):
                # adjacent floats: midpoint cannot separate the values
                continue
            best_gain = float(gain[i])
            best = (j, float(thr))
    return best


def gls_leaf_values(tree: RegressionTree, X, residual, psi_dagger_solver):
    """Replace leaf values by the GLS solution against (Psi/sigma2)^{-1}.

    gamma = (H^T (Psi+)^{-1} H)^{-1} H^T (Psi+)^{-1} r, where H is the
    one-hot leaf assignment matrix of the training rows.
    """
    residual = np.asarray(residual, dtype=float)
    slots = tree.apply(X)
    K = tree.n_leaves
    H = np.zeros((residual.size, K))
    H[np.arange(residual.size), slots] = 1.0
    V = np.asarray(psi_dagger_solver(H))
    A = H.T @ V
    b = V.T @ residual
    try:
        cf = sla.cho_factor(A)
    except sla.LinAlgError:
        A = A + 1e-10 * np.eye(K)
        cf = sla.cho_factor(A)
    gamma = sla.cho_solve(cf, b)
    tree.set_leaf_values(gamma)
    return gamma
