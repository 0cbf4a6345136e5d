"""Sparse linear algebra substrate.

CSR matrices with a structurally symmetric pattern, reverse Cuthill-McKee
bandwidth reduction, and a banded LU factorization with diagonal pivoting.
Factorizations are retained and reused for repeated multi-RHS solves; a
solve never mutates the factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from fescale.errors import SingularMatrixError, StructuralError

# Relative diagonal-pivot tolerance: pivots at or below this fraction of the
# row's largest magnitude raise SingularMatrixError instead of perturbing.
PIVOT_RTOL = 1e-14


@dataclass(frozen=True)
class SparseMatrix:
    """Square sparse matrix in compressed sparse row format.

    Within each row the column indices are strictly increasing, and the
    pattern is expected to be structurally symmetric (entry (i, j) present
    iff (j, i) is), which the factorization relies on.
    """

    n_rows: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ro, ci, v = self.row_offsets, self.col_indices, self.values
        if len(ro) != self.n_rows + 1 or ro[0] != 0 or ro[-1] != len(ci):
            raise StructuralError("inconsistent row offsets")
        if len(v) != len(ci):
            raise StructuralError("values/col_indices length mismatch")
        if np.any(np.diff(ro) < 0):
            raise StructuralError("row offsets must be nondecreasing")

    @classmethod
    def from_coo(cls, n, rows, cols, values=None):
        """Build from triplets, summing duplicates and sorting each row."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n):
            raise StructuralError("triplet index out of range")
        if values is None:
            values = np.zeros(rows.shape, dtype=np.float64)
        else:
            values = np.asarray(values, dtype=np.float64)
        # lexicographic sort by (row, col), then reduce duplicates
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size:
            keep = np.empty(rows.shape, dtype=bool)
            keep[0] = True
            keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            group = np.cumsum(keep) - 1
            summed = np.zeros(int(group[-1]) + 1, dtype=np.float64)
            np.add.at(summed, group, values)
            rows, cols, values = rows[keep], cols[keep], summed
        row_offsets = np.zeros(n + 1, dtype=np.int64)
        np.add.at(row_offsets, rows + 1, 1)
        np.cumsum(row_offsets, out=row_offsets)
        return cls(n, row_offsets, cols, values)

    @classmethod
    def from_dense(cls, a, keep_zeros=False):
        a = np.asarray(a, dtype=np.float64)
        rows, cols = np.nonzero(a) if not keep_zeros else np.nonzero(np.ones_like(a))
        return cls.from_coo(a.shape[0], rows, cols, a[rows, cols])

    def to_dense(self):
        a = np.zeros((self.n_rows, self.n_rows))
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))
        a[rows, self.col_indices] = self.values
        return a

    def row_of_entries(self):
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_offsets))

    def bandwidth(self):
        if len(self.col_indices) == 0:
            return 0
        return int(np.max(np.abs(self.row_of_entries() - self.col_indices)))

    def is_structurally_symmetric(self):
        rows = self.row_of_entries()
        fwd = set(zip(rows.tolist(), self.col_indices.tolist()))
        return all((j, i) in fwd for (i, j) in fwd)

    def with_values(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise StructuralError("value array shape mismatch")
        return SparseMatrix(self.n_rows, self.row_offsets, self.col_indices, values)


@dataclass(frozen=True)
class Permutation:
    """Bijection on [0, n): forward maps old->new, inverse maps new->old."""

    forward: np.ndarray
    inverse: np.ndarray

    def __post_init__(self):
        n = len(self.forward)
        if len(self.inverse) != n or not np.array_equal(self.forward[self.inverse], np.arange(n)):
            raise StructuralError("forward/inverse are not mutually inverse")

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(idx, idx.copy())

    @classmethod
    def from_forward(cls, forward):
        forward = np.asarray(forward, dtype=np.int64)
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(len(forward), dtype=np.int64)
        return cls(forward, inverse)


@dataclass(frozen=True)
class Factorization:
    """Banded LU factors of a permuted matrix, retained for repeated solves.

    ``band[i, j - i + half]`` stores entry (i, j) of the permuted matrix;
    L (unit diagonal, below) and U overwrite it in place during factorize.
    The arrays are frozen read-only: solve never mutates a Factorization.
    """

    n: int
    half_bandwidth: int
    band: np.ndarray
    perm: Permutation


def _adjacency(pattern: SparseMatrix):
    """Neighbor lists (diagonal excluded) of the pattern graph."""
    rows = pattern.row_of_entries()
    cols = pattern.col_indices
    off = pattern.row_offsets
    return [cols[off[i]:off[i + 1]][cols[off[i]:off[i + 1]] != i] for i in range(pattern.n_rows)]


def _pseudo_peripheral(adj, start, degrees):
    """Walk to a node of (near-)maximal eccentricity; deterministic."""
    node = start
    last_ecc = -1
    for _ in range(8):
        levels = _bfs_levels(adj, node)
        ecc = len(levels) - 1
        if ecc <= last_ecc:
            break
        last_ecc = ecc
        far = levels[-1]
        node = far[np.lexsort((far, degrees[far]))[0]]
    return node


def _bfs_levels(adj, root):
    seen = {root}
    level = [root]
    levels = [np.array([root], dtype=np.int64)]
    while True:
        nxt = []
        for u in level:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if not nxt:
            return levels
        level = sorted(nxt)
        levels.append(np.array(level, dtype=np.int64))


def compute_ordering(pattern: SparseMatrix) -> Permutation:
    """Bandwidth-reducing permutation (reverse Cuthill-McKee).

    Deterministic for identical patterns. Requires a structurally symmetric
    pattern with no empty rows. If RCM would not improve on the natural
    ordering, the identity permutation is returned so the permuted bandwidth
    never exceeds the original one.
    """
    n = pattern.n_rows
    if n == 0:
        return Permutation.identity(0)
    if np.any(np.diff(pattern.row_offsets) == 0):
        raise StructuralError("pattern has an empty row")
    if not pattern.is_structurally_symmetric():
        raise StructuralError("pattern is not structurally symmetric")

    adj = _adjacency(pattern)
    degrees = np.array([len(a) for a in adj], dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    order = []
    while len(order) < n:
        remaining = np.flatnonzero(~visited)
        start = _pseudo_peripheral(adj, remaining[0], degrees)
        # Cuthill-McKee sweep of this component, children sorted by degree
        queue = [start]
        visited[start] = True
        while queue:
            u = queue.pop(0)
            order.append(u)
            nb = [v for v in adj[u] if not visited[v]]
            nb.sort(key=lambda v: (degrees[v], v))
            for v in nb:
                visited[v] = True
            queue.extend(nb)
    order.reverse()
    forward = np.empty(n, dtype=np.int64)
    forward[np.array(order, dtype=np.int64)] = np.arange(n, dtype=np.int64)
    perm = Permutation.from_forward(forward)

    rows = pattern.row_of_entries()
    new_bw = int(np.max(np.abs(forward[rows] - forward[pattern.col_indices])))
    if new_bw > pattern.bandwidth():
        return Permutation.identity(n)
    return perm


def factorize(a: SparseMatrix, perm: Permutation | None = None) -> Factorization:
    """LU-factorize a structurally symmetric sparse matrix under ``perm``.

    Banded Doolittle elimination with diagonal pivoting: a pivot whose
    magnitude falls at or below ``PIVOT_RTOL`` times the row's largest
    original magnitude raises :class:`SingularMatrixError` carrying the
    failing row index (original numbering). The result is reusable for any
    number of subsequent solves.
    """
    n = a.n_rows
    if perm is None:
        perm = Permutation.identity(n)
    if len(perm.forward) != n:
        raise StructuralError("permutation size does not match matrix")
    if not a.is_structurally_symmetric():
        raise StructuralError("matrix pattern is not structurally symmetric")
    if n == 0:
        band = np.zeros((0, 1))
        band.setflags(write=False)
        return Factorization(0, 0, band, perm)

    rows = perm.forward[a.row_of_entries()]
    cols = perm.forward[a.col_indices]
    half = int(np.max(np.abs(rows - cols))) if len(cols) else 0
    band = np.zeros((n, 2 * half + 1))
    band[rows, cols - rows + half] = a.values
    row_max = np.abs(band).max(axis=1)  # permuted-row scale for the pivot test

    s0, s1 = band.strides
    for k in range(n):
        piv = band[k, half]
        if abs(piv) <= PIVOT_RTOL * row_max[k]:
            raise SingularMatrixError(perm.inverse[k], piv)
        r = min(half, n - 1 - k)
        if r == 0:
            continue
        # column k below the diagonal sits on an antidiagonal of the band
        col = as_strided(band[k + 1:, half - 1:], shape=(r,), strides=(s0 - s1,))
        col /= piv
        urow = band[k, half + 1:half + 1 + r]
        # trailing (r x r) block, sheared one column left per row
        block = as_strided(band[k + 1:, half:], shape=(r, r), strides=(s0 - s1, s1))
        block -= np.multiply.outer(col, urow)
    band.setflags(write=False)
    return Factorization(n, half, band, perm)


def solve(f: Factorization, rhs: np.ndarray) -> np.ndarray:
    """Forward/backward substitution for one or many right-hand sides.

    ``rhs`` may be shaped (n,) or (n, m); the result matches. Columns are
    processed with identical elementwise operations, so an m-column solve
    equals m single-column solves bit for bit.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.ndim not in (1, 2) or rhs.shape[0] != f.n:
        raise StructuralError(
            f"rhs shape {rhs.shape} does not match factorized dimension {f.n}"
        )
    if f.n == 0:
        return rhs.copy()
    single = rhs.ndim == 1
    x = rhs.reshape(f.n, 1) if single else rhs
    x = x[f.perm.inverse].astype(np.float64)

    band, half, n = f.band, f.half_bandwidth, f.n
    s0, s1 = band.strides
    for k in range(n - 1):  # L has unit diagonal
        r = min(half, n - 1 - k)
        if r == 0:
            continue
        col = as_strided(band[k + 1:, half - 1:], shape=(r,), strides=(s0 - s1,))
        x[k + 1:k + 1 + r] -= np.multiply.outer(col, x[k])
    for k in range(n - 1, -1, -1):
        x[k] /= band[k, half]
        r = min(half, k)
        if r == 0:
            continue
        # column k of U above the diagonal, rows k-r..k-1 ascending
        col = as_strided(band[k - r:, half + r:], shape=(r,), strides=(s0 - s1,))
        x[k - r:k] -= np.multiply.outer(col, x[k])
    out = x[f.perm.forward]
    return out[:, 0] if single else out
