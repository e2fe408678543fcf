"""Identity bookkeeping: the ID bank, unique-ID resolution, new-instance
admission and the one-hot ID mask / ID embedding.

ID layout for a head with ``n_ids = N``:

* ``0 .. N-2`` name instances already seen in the video,
* ``N-1`` is the "new instance" class,
* ``N`` is background.

Per-proposal assignments use two sentinels, :data:`NEW` and
:data:`BACKGROUND`; any non-negative value is a real instance ID.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import mathkit

NEW = -1
BACKGROUND = -2

PROB_EPS = 1e-12


@dataclass(frozen=True)
class IdBank:
    """Embedding table with one row per ID slot (``n_ids + 1`` rows)."""

    n_ids: int
    channels: int
    table: np.ndarray

    def __post_init__(self):
        if self.table.shape != (self.n_ids + 1, self.channels):
            raise ValueError(
                f"bank table must be {(self.n_ids + 1, self.channels)}, got {self.table.shape}")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("bank table contains non-finite entries")

    @classmethod
    def create(cls, n_ids, channels, seed=0):
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((n_ids + 1, channels)) / np.sqrt(channels)
        table.setflags(write=False)
        return cls(n_ids, channels, table)

    @property
    def new_id(self):
        return self.n_ids - 1

    @property
    def background_id(self):
        return self.n_ids


@dataclass(frozen=True)
class IdState:
    """Per-video ID counter.  ``assigned`` is the number of IDs handed out."""

    capacity: int
    assigned: int = 0
    frame_index: int = 0

    def __post_init__(self):
        if self.capacity < 2:
            raise ValueError("ID capacity N must be at least 2")
        if not 0 <= self.assigned <= self.capacity - 1:
            raise ValueError(f"assigned count {self.assigned} outside [0, {self.capacity - 1}]")

    @property
    def full(self):
        return self.assigned == self.capacity - 1


@dataclass(frozen=True)
class IdMask:
    n_ids: int
    grid: np.ndarray  # (n_ids + 1) x HW, entries 0.0 / 1.0

    @property
    def pixels(self):
        return self.grid.shape[1]

    def labels(self):
        """Per-pixel ID (background pixels carry ``n_ids``)."""
        return np.argmax(self.grid, axis=0)


# ---------------------------------------------------------------------------
# Hungarian assignment
# ---------------------------------------------------------------------------

def _solve_square(cost):
    """Shortest-augmenting-path Hungarian method with dual potentials.

    Returns ``(row_to_col, u, v)`` for a square cost matrix.  The inner
    column scan is vectorised; the outer loops are the textbook ones.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)    # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lexicographic_optimum(tight, row_to_col, n_rows):
    """Among perfect matchings inside ``tight``, pick the one whose real rows
    take the smallest columns, row by row."""
    n = tight.shape[0]
    col_to_row = np.empty(n, dtype=np.int64)
    col_to_row[row_to_col] = np.arange(n)

    def find_path(r, target, frozen_cols, seen):
        # alternating path from row r to column `target` over tight edges
        for c in np.flatnonzero(tight[r]):
            if c in frozen_cols or c in seen:
                continue
            seen.add(c)
            if c == target:
                return [(r, c)]
            nxt = col_to_row[c]
            sub = find_path(nxt, target, frozen_cols, seen)
            if sub is not None:
                return [(r, c)] + sub
        return None

    frozen_cols = set()
    for i in range(n_rows):
        current = row_to_col[i]
        for j in np.flatnonzero(tight[i]):
            if j >= current:
                break
            if j in frozen_cols:
                continue
            r = col_to_row[j]
            path = find_path(r, current, frozen_cols | {j}, set())
            if path is None:
                continue
            row_to_col[i] = j
            col_to_row[j] = i
            for rr, cc in path:
                row_to_col[rr] = cc
                col_to_row[cc] = rr
            break
        frozen_cols.add(row_to_col[i])
    return row_to_col


def hungarian(cost):
    """Minimum-cost assignment of every row to a distinct column.

    Requires ``rows <= cols``.  Among equal-cost optima the one giving row 0
    the lowest column wins, then row 1, and so on.  Returns
    ``(assignment, total)`` where ``assignment[i]`` is row ``i``'s column and
    ``total`` is the row-order sum of the chosen entries.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return [], 0.0
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = cost.shape
    if rows > cols:
        raise ValueError(f"hungarian needs rows <= cols, got {rows}x{cols}; pad the columns")
    square = np.zeros((cols, cols))
    square[:rows] = cost
    row_to_col, u, v = _solve_square(square)
    scale = max(1.0, float(np.abs(square).max()))
    tight = np.abs(square - u[:, None] - v[None, :]) <= 1e-9 * scale
    tight[np.arange(cols), row_to_col] = True
    if tight.sum() > cols:
        row_to_col = _lexicographic_optimum(tight, row_to_col, rows)
    assignment = [int(c) for c in row_to_col[:rows]]
    total = 0.0
    for i, c in enumerate(assignment):
        total += float(cost[i, c])
    return assignment, total


# ---------------------------------------------------------------------------
# ID resolution and admission
# ---------------------------------------------------------------------------

def id_cost_matrix(id_probs, assigned):
    """Cost matrix for unique-ID resolution and the ID of each column.

    Columns are the ``assigned`` existing IDs, then one NEW and one
    BACKGROUND column per proposal, so only real IDs are exclusive.
    """
    probs = np.asarray(id_probs, dtype=np.float64)
    n_rows, width = probs.shape
    n_ids = width - 1
    nll = -np.log(probs + PROB_EPS)
    cost = np.concatenate([
        nll[:, :assigned],
        np.repeat(nll[:, n_ids - 1:n_ids], n_rows, axis=1),
        np.repeat(nll[:, n_ids:n_ids + 1], n_rows, axis=1),
    ], axis=1)
    column_ids = list(range(assigned)) + [NEW] * n_rows + [BACKGROUND] * n_rows
    return cost, column_ids


def resolve_ids(id_probs, state):
    """Give every proposal an existing ID, NEW or BACKGROUND, with existing
    IDs used at most once per frame."""
    probs = np.asarray(id_probs, dtype=np.float64)
    if probs.size == 0:
        return ()
    if probs.ndim != 2 or probs.shape[1] != state.capacity + 1:
        raise ValueError(f"id_probs must be L x {state.capacity + 1}, got {probs.shape}")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError("id_probs must be finite and non-negative")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"id_probs row {bad} sums to {sums[bad]:.8f}, not 1")
    cost, column_ids = id_cost_matrix(probs, state.assigned)
    cols, _ = hungarian(cost)
    return tuple(column_ids[c] for c in cols)


def admit_new(assignment, state, scores):
    """Hand out fresh IDs to NEW proposals, best score first.

    Once the capacity is exhausted the remaining NEW proposals are dropped
    (turned into BACKGROUND).  Returns the updated assignment and state.
    """
    assignment = list(assignment)
    pending = [i for i, a in enumerate(assignment) if a == NEW]
    if not pending:
        return tuple(assignment), state
    pending.sort(key=lambda i: (-scores[i], i))
    assigned = state.assigned
    for i in pending:
        if assigned < state.capacity - 1:
            assignment[i] = assigned
            assigned += 1
        else:
            assignment[i] = BACKGROUND
    return tuple(assignment), replace(state, assigned=assigned)


def build_id_mask(assignment, masks, scores, n_ids):
    """One-hot ID mask: row ``assignment[i]`` receives mask ``i``.

    Pixels claimed by several proposals go to the highest-scoring one;
    unclaimed pixels go to the background row.
    """
    masks = np.asarray(masks)
    if masks.ndim == 1:
        masks = masks[None, :]
    if len(assignment) != masks.shape[0] or len(scores) != len(assignment):
        raise ValueError(
            f"{len(assignment)} assignments, {masks.shape[0]} masks, {len(scores)} scores")
    if masks.size and not np.all((masks == 0) | (masks == 1)):
        raise ValueError("masks must be binary")
    hw = masks.shape[1]
    grid = np.zeros((n_ids + 1, hw))
    claimed = np.zeros(hw, dtype=bool)
    order = sorted(range(len(assignment)), key=lambda i: (-scores[i], i))
    for i in order:
        a = assignment[i]
        if a == NEW:
            raise ValueError("NEW proposals must be admitted before building the ID mask")
        if a == BACKGROUND:
            continue
        if not 0 <= a < n_ids - 1:
            raise ValueError(f"ID {a} outside the instance range [0, {n_ids - 2}]")
        pix = masks[i].astype(bool) & ~claimed
        grid[a, pix] = 1.0
        claimed |= pix
    grid[n_ids, ~claimed] = 1.0
    return IdMask(n_ids, grid)


def embed(y, bank):
    """ID embedding ``Y^T D``; one bank row per pixel."""
    if y.n_ids != bank.n_ids:
        raise ValueError(f"ID mask has N={y.n_ids}, bank has N={bank.n_ids}")
    return mathkit.matmul(y.grid.T, bank.table)
