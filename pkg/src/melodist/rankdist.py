"""Rank vectors and rank-based distances on feature vectors.

The rank vector of x lists feature indices (1-based) in order of decreasing
value, ties broken by ascending index, so it is a unique permutation even
when ReLU features contain many exact zeros.  Distances compare these
permutations: an l2 norm over rank differences (optionally truncated to the
first l positions), and a concordance ratio in [-1, 1] computed from pairwise
inversions.  A token-level Levenshtein distance is included as the baseline
the rank distances are measured against.
"""

from __future__ import annotations

import numpy as np

from .encoding import TokenSequence
from .errors import BadOrder, LengthMismatch, NonFinite, TooShort

FeatureVector = np.ndarray
RankVector = np.ndarray  # 1-based permutation of {1..N}, dtype int64


def _as_vector(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise NonFinite("feature vector must be 1-dimensional and nonempty")
    if not np.isfinite(arr).all():
        raise NonFinite("feature vector contains NaN or infinite entries")
    return arr


def rank_vector(x: FeatureVector) -> RankVector:
    """Indices of x sorted by decreasing value, ties by ascending index.

    Stable sorting of the negated values yields exactly the tie rule: equal
    values keep their original (ascending-index) order.
    """
    arr = _as_vector(x)
    return np.argsort(-arr, kind="stable") + 1


def _paired_ranks(x: FeatureVector, y: FeatureVector) -> tuple[RankVector, RankVector]:
    ax, ay = _as_vector(x), _as_vector(y)
    if ax.size != ay.size:
        raise LengthMismatch(f"vector lengths differ: {ax.size} vs {ay.size}")
    return np.argsort(-ax, kind="stable") + 1, np.argsort(-ay, kind="stable") + 1


def rank_difference_sq(x: FeatureVector, y: FeatureVector, l: int | None = None) -> int:
    """Exact integer sum of squared rank differences over the first l positions.

    This is the quantity under the square root of the l2 rank distance; it is
    exposed as an integer so equal distances can be detected exactly.
    """
    px, py = _paired_ranks(x, y)
    if l is None:
        l = px.size
    if not 1 <= l <= px.size:
        raise BadOrder(f"truncation order {l} outside [1, {px.size}]")
    diff = px[:l] - py[:l]
    return int(np.dot(diff, diff))


def spearman_rho(x: FeatureVector, y: FeatureVector) -> float:
    """l2 norm between the rank vectors of x and y."""
    return float(np.sqrt(rank_difference_sq(x, y)))


def truncated_spearman(x: FeatureVector, y: FeatureVector, l: int) -> float:
    """l2 norm over the first l rank positions only; equals spearman_rho at l=N."""
    return float(np.sqrt(rank_difference_sq(x, y, l)))


def concordance_counts(x: FeatureVector, y: FeatureVector) -> tuple[int, int]:
    """(concordant, discordant) pair counts between the rank vectors of x, y.

    Sorting positions by the first rank vector reduces the discordant count
    to the number of inversions of the second, which a merge sort counts in
    O(N log N).  Rank vectors are strict permutations, so every pair is one
    or the other.
    """
    px, py = _paired_ranks(x, y)
    n = px.size
    if n < 2:
        raise TooShort("need at least 2 coordinates for pair concordance")
    order = np.argsort(px)  # px is a permutation: plain argsort is exact
    inversions = _count_inversions(list(py[order]))
    total = n * (n - 1) // 2
    return total - inversions, inversions


def concordance_counts_quadratic(
    x: FeatureVector, y: FeatureVector
) -> tuple[int, int]:
    """Reference oracle: evaluate every pair of rank positions directly."""
    px, py = _paired_ranks(x, y)
    n = px.size
    if n < 2:
        raise TooShort("need at least 2 coordinates for pair concordance")
    sign_x = np.sign(px[:, None] - px[None, :])
    sign_y = np.sign(py[:, None] - py[None, :])
    upper = np.triu_indices(n, k=1)
    products = sign_x[upper] * sign_y[upper]
    return int(np.sum(products > 0)), int(np.sum(products < 0))


def _count_inversions(values: list[int]) -> int:
    """Merge sort that counts how many pairs appear out of order."""
    n = len(values)
    if n < 2:
        return 0
    mid = n // 2
    left, right = values[:mid], values[mid:]
    count = _count_inversions(left) + _count_inversions(right)
    merged = []
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i])
            i += 1
        else:
            # right[j] jumps ahead of every remaining left element
            merged.append(right[j])
            j += 1
            count += len(left) - i
    merged.extend(left[i:])
    merged.extend(right[j:])
    values[:] = merged
    return count


def kendall_tau(x: FeatureVector, y: FeatureVector) -> float:
    """Concordance similarity in [-1, 1]: (concordant - discordant) / total.

    Rank vectors are strict permutations, so concordant + discordant is
    exactly N(N-1)/2 and no tie correction is needed.
    """
    concordant, discordant = concordance_counts(x, y)
    return (concordant - discordant) / (concordant + discordant)


def kendall_dissimilarity(x: FeatureVector, y: FeatureVector) -> float:
    """1 - kendall_tau, so identical rankings sit at distance 0."""
    return 1.0 - kendall_tau(x, y)


def edit_distance(a: TokenSequence, b: TokenSequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        current = [i]
        for j, tok_b in enumerate(b, start=1):
            cost = 0 if tok_a == tok_b else 1
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost)
            )
        previous = current
    return previous[-1]
