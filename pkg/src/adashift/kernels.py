"""RBF kernel, squared MMD, the prototype objective, and its incremental cache.

The objective of a candidate set X against the pool X_T is

    J(X) = (2 / (n m)) sum_{i in X, j in pool} k_ij  -  (1 / m^2) sum_{i,j in X} k_ij

with m = |X| and J(empty) = 0, i.e. the constant-shifted negation of the
squared MMD between X and the pool. The cache keeps per-point mean kernel
values against the pool (mu) and running sums against the selected set (s,
S1, S2) so that one greedy step costs O(n) for the gain scan plus one kernel
row of O(n d) on commit, instead of a from-scratch O(m n d) evaluation.

All kernel arithmetic is float64. Argmax ties break toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend


def _as_matrix(pool) -> np.ndarray:
    feats = pool.features if hasattr(pool, "features") else pool
    return np.ascontiguousarray(feats, dtype=np.float64)


def rbf_kernel(z: np.ndarray, z2: np.ndarray, gamma: float) -> float:
    """exp(-gamma * |z - z2|^2); 1.0 at zero distance."""
    z = np.asarray(z, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z.shape != z2.shape:
        raise ValueError(f"dimension mismatch: {z.shape} vs {z2.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    diff = z - z2
    return float(np.exp(-gamma * np.dot(diff, diff)))


def default_gamma(feature_dim: int) -> float:
    """Bandwidth used when none is configured: the inverse feature dimension."""
    return 1.0 / feature_dim


def mmd_squared(indices, pool, gamma: float) -> float:
    """Biased squared MMD between the subset at `indices` and the whole pool.

    Three-term double sum including self-pairs; O(n^2 d), intended for
    moderate pools and for cross-checking the incremental objective.
    """
    X = _as_matrix(pool)
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    n = X.shape[0]
    m = idx.size
    sub = np.ascontiguousarray(X[idx])
    k_sub = _backend.kernel_cross(sub, sub, gamma)
    k_cross = _backend.kernel_cross(sub, X, gamma)
    k_pool = _backend.kernel_cross(X, X, gamma)
    return float(k_sub.sum() / m**2 - 2.0 * k_cross.sum() / (n * m) + k_pool.sum() / n**2)


@dataclass
class KernelCache:
    """Incrementally maintained kernel sums for greedy prototype selection.

    mean_to_pool[i] is the mean kernel value of point i against the pool;
    sum_to_selected[i] the kernel sum of point i against the selected set.
    s1 = sum of mean_to_pool over selected, s2 = full kernel sum within the
    selected set (self-pairs included, k(x,x) = 1). Mutation via
    commit_selection is exclusive-access; reads are safe to share.
    """

    features: np.ndarray
    gamma: float
    mean_to_pool: np.ndarray
    sum_to_selected: np.ndarray
    selected: list[int] = field(default_factory=list)
    selected_mask: np.ndarray = None
    s1: float = 0.0
    s2: float = 0.0

    def __post_init__(self):
        if self.selected_mask is None:
            self.selected_mask = np.zeros(self.features.shape[0], dtype=bool)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def selected_count(self) -> int:
        return len(self.selected)

    def objective(self) -> float:
        """J of the currently committed set, from the running sums."""
        m = self.selected_count
        if m == 0:
            return 0.0
        return 2.0 * self.s1 / m - self.s2 / m**2

    def gain_vector(self) -> np.ndarray:
        """Marginal gain of every point; committed entries set to -inf."""
        m = self.selected_count
        mu = self.mean_to_pool
        s = self.sum_to_selected
        gains = 2.0 * (self.s1 + mu) / (m + 1) - (self.s2 + 2.0 * s + 1.0) / (m + 1) ** 2
        gains -= self.objective()
        gains[self.selected_mask] = -np.inf
        return gains

    def argmax_gain(self) -> int:
        """Best candidate index; exact ties break toward the lowest index."""
        gains = self.gain_vector()
        best = int(np.argmax(gains))
        if not np.isfinite(gains[best]):
            raise ValueError("no unselected candidates remain")
        return best


def build_kernel_cache(pool, gamma: float, chunk_size: int = 1024) -> KernelCache:
    """O(n^2 d) cache build, chunked to bound peak memory."""
    X = _as_matrix(pool)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    mu = _backend.mean_kernel_to_pool(X, gamma, chunk_size)
    return KernelCache(
        features=X,
        gamma=gamma,
        mean_to_pool=mu,
        sum_to_selected=np.zeros(X.shape[0], dtype=np.float64),
    )


def objective_j(indices, cache: KernelCache) -> float:
    """J of an arbitrary subset, evaluated from mu plus its pairwise block."""
    idx = np.asarray(list(indices), dtype=np.intp)
    m = idx.size
    if m == 0:
        return 0.0
    sub = np.ascontiguousarray(cache.features[idx])
    pair_sum = float(_backend.kernel_cross(sub, sub, cache.gamma).sum())
    return 2.0 * float(cache.mean_to_pool[idx].sum()) / m - pair_sum / m**2


def marginal_gain(candidate: int, cache: KernelCache) -> float:
    """J(X + candidate) - J(X) in O(1) from the cached sums."""
    if cache.selected_mask[candidate]:
        raise ValueError(f"candidate {candidate} is already selected")
    m = cache.selected_count
    mu_c = float(cache.mean_to_pool[candidate])
    s_c = float(cache.sum_to_selected[candidate])
    new_j = 2.0 * (cache.s1 + mu_c) / (m + 1) - (cache.s2 + 2.0 * s_c + 1.0) / (m + 1) ** 2
    return new_j - cache.objective()


def commit_selection(candidate: int, cache: KernelCache) -> KernelCache:
    """Add a point to the selected set, updating s, s1, s2 with one kernel row."""
    if cache.selected_mask[candidate]:
        raise ValueError(f"candidate {candidate} is already selected")
    s_old = float(cache.sum_to_selected[candidate])
    row = _backend.kernel_row(cache.features, candidate, cache.gamma)
    cache.sum_to_selected += row
    cache.s1 += float(cache.mean_to_pool[candidate])
    cache.s2 += 2.0 * s_old + 1.0
    cache.selected.append(candidate)
    cache.selected_mask[candidate] = True
    return cache
