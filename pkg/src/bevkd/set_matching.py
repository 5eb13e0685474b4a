"""Optimal one-to-one correspondence between two prediction sets.

The matching cost couples a classification term (negative log of the
candidate's probability at the target's argmax class) with an L1 distance
over a normalized box vector. The assignment itself is solved exactly with
a shortest-augmenting-path algorithm; a brute-force enumerator provides an
independent oracle for tests.

Both solvers share one tie-break: among minimum-cost assignments, return
the lexicographically smallest pair list (pairs sorted by row index), and
compute `total_cost` by summing entries in that row order so equal pair
lists yield bit-equal totals.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core_types import BevBox, ClassDistribution, PredictionSet

LOG_FLOOR = 1e-12
_BRUTE_FORCE_MAX_SIDE = 8
_BRUTE_FORCE_MAX_CANDIDATES = 2_000_000


def normalized_box_vector(box: BevBox, extent: float) -> np.ndarray:
    """(x, y, z, w, l, h, sin yaw, cos yaw) with metric entries / extent.

    The sin/cos pair replaces raw yaw so the distance has no 2*pi seam.
    """
    if not extent > 0:
        raise ValueError("extent must be positive")
    return np.array([
        box.x / extent, box.y / extent, box.z / extent,
        box.w / extent, box.l / extent, box.h / extent,
        math.sin(box.yaw), math.cos(box.yaw),
    ])


def pair_match_cost(teacher_class: ClassDistribution, teacher_box: BevBox,
                    student_class: ClassDistribution, student_box: BevBox,
                    extent: float) -> float:
    """-log p + L1, where p is the student's mass at the teacher's argmax."""
    p = float(student_class.probs[teacher_class.argmax()])
    l1 = float(np.abs(normalized_box_vector(teacher_box, extent)
                      - normalized_box_vector(student_box, extent)).sum())
    return -math.log(max(p, LOG_FLOOR)) + l1


@dataclass(frozen=True)
class CostMatrix:
    costs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.costs, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("cost matrix entries must be finite")
        object.__setattr__(self, "costs", arr)

    @property
    def rows(self) -> int:
        return self.costs.shape[0]

    @property
    def cols(self) -> int:
        return self.costs.shape[1]


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def __post_init__(self):
        pairs = tuple((int(r), int(c)) for r, c in self.pairs)
        rows = [r for r, _ in pairs]
        cols = [c for _, c in pairs]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ValueError("assignment pairs must be one-to-one")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "total_cost", float(self.total_cost))

    def column_of(self) -> dict[int, int]:
        return {r: c for r, c in self.pairs}


def _canonical_total(costs: np.ndarray, pairs) -> float:
    total = 0.0
    for r, c in sorted(pairs):
        total += float(costs[r, c])
    return total


def build_cost_matrix(teacher: PredictionSet, student: PredictionSet,
                      extent: float) -> CostMatrix:
    t_n, s_n = len(teacher), len(student)
    if t_n == 0 or s_n == 0:
        return CostMatrix(np.zeros((t_n, s_n)))
    t_arg = np.array([d.argmax() for d in teacher.class_dists])
    s_probs = np.stack([d.probs for d in student.class_dists])  # (S, K)
    cls_cost = -np.log(np.maximum(s_probs[:, t_arg].T, LOG_FLOOR))  # (T, S)
    t_vec = np.stack([normalized_box_vector(b, extent) for b in teacher.boxes])
    s_vec = np.stack([normalized_box_vector(b, extent) for b in student.boxes])
    l1 = np.abs(t_vec[:, None, :] - s_vec[None, :, :]).sum(axis=2)
    return CostMatrix(cls_cost + l1)


# -- exact solver ---------------------------------------------------------

def _lap_square_py(a):
    """Shortest-augmenting-path assignment on a square matrix.

    Returns (row_for_col, u, v): the matching and the dual potentials,
    which satisfy a[r, c] - u[r] - v[c] >= 0 with equality on matched edges.
    Written as scalar loops so the jit-compiled variant below stays fast.
    """
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.full(n + 1, n, dtype=np.int64)  # row matched to each col; n = free
    minv = np.empty(n)
    way = np.empty(n, dtype=np.int64)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(n):
        p[n] = i
        j0 = n
        for j in range(n):
            minv[j] = np.inf
            way[j] = n
            used[j] = False
        used[n] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = -1
            for j in range(n):
                if not used[j]:
                    cur = a[i0, j] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                elif j < n:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == n:
                break
        while j0 != n:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p[:n], u[:n], v[:n]


try:  # the jit makes per-call cost negligible; the fallback stays correct
    from numba import njit

    _lap_square = njit(cache=True)(_lap_square_py)
except ImportError:  # pragma: no cover
    _lap_square = _lap_square_py


def _lex_smallest_perfect_matching(tight: np.ndarray, row_for_col: np.ndarray):
    """Lexicographically smallest perfect matching inside a bipartite graph.

    `tight[r, c]` marks edges allowed to appear; `row_for_col` seeds a known
    perfect matching. Rows are fixed in ascending order to the smallest
    column that still leaves the rest completable, checked by re-augmenting
    the seeded matching (pure graph search, no cost arithmetic).
    """
    n = tight.shape[0]
    row_col: dict[int, int] = {}
    col_row: dict[int, int] = {}
    for c, r in enumerate(row_for_col):
        row_col[int(r)] = c
        col_row[c] = int(r)
    neighbors = [list(map(int, np.flatnonzero(tight[r]))) for r in range(n)]

    def augment(row: int, banned: set[int], visited: set[int]) -> bool:
        for c in neighbors[row]:
            if c in banned or c in visited:
                continue
            visited.add(c)
            owner = col_row.get(c)
            if owner is None or augment(owner, banned, visited):
                col_row[c] = row
                row_col[row] = c
                return True
        return False

    fixed_cols: set[int] = set()
    for r in range(n):
        for c in neighbors[r]:
            if c in fixed_cols:
                continue
            if c >= row_col[r]:
                break  # neighbors ascend; the current column is feasible
            owner = col_row[c]
            saved_rc, saved_cr = dict(row_col), dict(col_row)
            del col_row[row_col[r]]  # r's old column becomes the free target
            row_col[r] = c
            col_row[c] = r
            del row_col[owner]
            if augment(owner, fixed_cols | {c}, set()):
                break
            row_col, col_row = saved_rc, saved_cr
        fixed_cols.add(row_col[r])
    return [(r, row_col[r]) for r in range(n)]


def hungarian_assign(costs: CostMatrix) -> Assignment:
    """Globally minimal assignment with the shared lexicographic tie-break.

    Rectangular matrices are padded square with a large constant; padded
    pairs are dropped from the output.
    """
    m = costs.costs
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        return Assignment((), 0.0)
    n = max(rows, cols)
    pad_value = float(np.max(np.abs(m))) + 1.0 if m.size else 1.0
    padded = np.full((n, n), pad_value)
    padded[:rows, :cols] = m
    row_for_col, u, v = _lap_square(padded)
    scale = max(1.0, float(np.max(np.abs(padded))))
    tol = 1e-9 * scale
    tight = (padded - u[:, None] - v[None, :]) <= tol
    # the seeded matching is tight by construction; keep it usable even if
    # rounding nudged an edge past tol
    for c, r in enumerate(row_for_col):
        tight[r, c] = True
    full = _lex_smallest_perfect_matching(tight, row_for_col)
    pairs = [(r, c) for r, c in full if r < rows and c < cols]
    return Assignment(tuple(sorted(pairs)), _canonical_total(m, pairs))


def brute_force_assign(costs: CostMatrix) -> Assignment:
    """Exhaustive oracle; same optimum and tie-break as `hungarian_assign`."""
    m = costs.costs
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        return Assignment((), 0.0)
    k = min(rows, cols)
    if k > _BRUTE_FORCE_MAX_SIDE:
        raise ValueError(f"brute force limited to min dimension {_BRUTE_FORCE_MAX_SIDE}")
    if math.perm(max(rows, cols), k) > _BRUTE_FORCE_MAX_CANDIDATES:
        raise ValueError("brute force problem too large to enumerate")

    if rows <= cols:
        # permutations() yields column tuples in lexicographic order, which
        # is exactly pair-list order here, so the first minimum wins ties
        perms = np.array(list(itertools.permutations(range(cols), rows)),
                         dtype=np.intp)
        totals = m[np.arange(rows)[None, :], perms].sum(axis=1)
        chosen = perms[int(np.argmin(totals))]
        pairs = [(r, int(chosen[r])) for r in range(rows)]
        return Assignment(tuple(pairs), _canonical_total(m, pairs))

    perms = np.array(list(itertools.permutations(range(cols))), dtype=np.intp)
    best_key = None
    for row_subset in itertools.combinations(range(rows), k):
        sub = m[list(row_subset)]  # (k, cols)
        totals = sub[np.arange(k)[None, :], perms].sum(axis=1)
        best_local = float(totals.min())
        if best_key is not None and best_local > best_key[0]:
            continue
        for idx in np.flatnonzero(totals == best_local):
            pairs = tuple((row_subset[i], int(perms[idx][i])) for i in range(k))
            key = (best_local, pairs)
            if best_key is None or key < best_key:
                best_key = key
    pairs = best_key[1]
    return Assignment(pairs, _canonical_total(m, pairs))
