"""Dense revised simplex for small persuasion LPs.

Solves   max c.x   s.t.  A_eq x = b_eq,  A_ge x >= b_ge,  x >= 0.

Two-phase revised simplex on the slack-augmented system with an explicitly
maintained basis inverse (rank-one pivot updates, periodic refactorization).
Pivoting rules:

  * "bland"    - smallest-index entering column, smallest-index leaving
                 variable on ratio ties.  Cycling is impossible.
  * "dantzig"  - most-positive reduced cost, but automatically falls back to
                 Bland's rule after a run of degenerate (zero-progress)
                 pivots, so termination is still guaranteed.

Intended for desk-scale dense instances (a few thousand columns); no
sparsity is exploited.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = ["LpResult", "solve_lp_standard_form"]

PIVOT_TOL = 1e-9
REFACTOR_EVERY = 64
STALL_LIMIT = 50          # degenerate pivots before dantzig falls back to bland
_CHUNK = 512              # lazy-pricing block size for Bland scans


@dataclass
class LpResult:
    status: str                      # optimal | infeasible | unbounded | iteration_limit
    x: Optional[np.ndarray]          # primal solution over the original columns
    value: Optional[float]
    y_eq: Optional[np.ndarray]       # equality-row duals (value = y_eq.b_eq + y_ge.b_ge)
    y_ge: Optional[np.ndarray]       # >=-row duals; <= 0 at a maximum
    slack_ge: Optional[np.ndarray]   # A_ge x - b_ge


class _Tableau:
    """Basis bookkeeping for the revised simplex."""

    def __init__(self, A: np.ndarray, b: np.ndarray, basis: np.ndarray):
        self.A = np.asfortranarray(A)
        self.b = b
        self.basis = basis.copy()
        self.refactor()

    def refactor(self):
        self.Binv = np.linalg.inv(self.A[:, self.basis])
        self.xb = self.Binv @ self.b

    def pivot(self, row: int, col: int):
        """Replace basis[row] by col; Binv <- E Binv with E the usual
        elementary matrix (pivot row scaled by 1/piv, others eliminated)."""
        d = self.Binv @ self.A[:, col]
        piv = d[row]
        e = -d / piv
        e[row] = 1.0 / piv - 1.0
        self.Binv += np.outer(e, self.Binv[row])
        self.xb += e * self.xb[row]
        self.basis[row] = col


def _entering_bland(T: _Tableau, c, allowed, y) -> Optional[int]:
    """Smallest-index column with positive reduced cost (lazy block scan)."""
    n = T.A.shape[1]
    in_basis = np.zeros(n, dtype=bool)
    in_basis[T.basis] = True
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        red = c[start:stop] - y @ T.A[:, start:stop]
        ok = allowed[start:stop] & ~in_basis[start:stop] & (red > PIVOT_TOL)
        idx = np.flatnonzero(ok)
        if len(idx):
            return start + int(idx[0])
    return None


def _entering_dantzig(T: _Tableau, c, allowed, y) -> Optional[int]:
    red = c - y @ T.A
    red[~allowed] = -np.inf
    red[T.basis] = -np.inf
    col = int(np.argmax(red))
    return col if red[col] > PIVOT_TOL else None


def _iterate(T: _Tableau, c: np.ndarray, allowed: np.ndarray,
             max_iters: int, rule: str) -> str:
    """Run simplex pivots until optimal/unbounded under the given rule."""
    n_pivots = 0
    stall = 0
    use_bland = rule == "bland"
    while True:
        if n_pivots and n_pivots % REFACTOR_EVERY == 0:
            T.refactor()
        y = c[T.basis] @ T.Binv
        col = (_entering_bland if use_bland else _entering_dantzig)(T, c, allowed, y)
        if col is None:
            return "optimal"
        d = T.Binv @ T.A[:, col]
        rows = np.flatnonzero(d > PIVOT_TOL)
        if len(rows) == 0:
            return "unbounded"
        ratios = T.xb[rows] / d[rows]
        rmin = ratios.min()
        ties = rows[ratios <= rmin + 1e-9 * max(1.0, abs(rmin))]
        # leave the basic variable of smallest index on ties (Bland-safe)
        row = int(ties[np.argmin(T.basis[ties])])
        if not use_bland:
            stall = stall + 1 if rmin <= PIVOT_TOL else 0
            if stall > STALL_LIMIT:
                use_bland = True     # degeneracy run: switch to Bland for safety
        T.pivot(row, col)
        n_pivots += 1
        if n_pivots > max_iters:
            return "iteration_limit"


def solve_lp_standard_form(c, A_eq=None, b_eq=None, A_ge=None, b_ge=None,
                           max_iters: Optional[int] = None,
                           rule: str = "bland") -> LpResult:
    """Maximize c.x subject to A_eq x = b_eq, A_ge x >= b_ge, x >= 0."""
    c = np.asarray(c, dtype=float)
    n = len(c)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    A_ge = np.zeros((0, n)) if A_ge is None else np.asarray(A_ge, dtype=float)
    b_ge = np.zeros(0) if b_ge is None else np.asarray(b_ge, dtype=float)
    m_eq, m_ge = len(b_eq), len(b_ge)
    m = m_eq + m_ge

    # Slack-augmented equality system; >= rows get surplus columns (-1).
    A = np.zeros((m, n + m_ge))
    A[:m_eq, :n] = A_eq
    A[m_eq:, :n] = A_ge
    A[m_eq:, n:] = -np.eye(m_ge)
    b = np.concatenate([b_eq, b_ge])

    # Normalize to b >= 0 (row signs flip; remembered for the duals).
    row_sign = np.where(b < 0, -1.0, 1.0)
    A = A * row_sign[:, None]
    b = b * row_sign

    # Initial basis: surplus columns where feasible at zero, artificials else.
    basis = np.empty(m, dtype=int)
    need_art = []
    for i in range(m):
        if i >= m_eq and (row_sign[i] < 0 or b[i] <= 0.0):
            basis[i] = n + (i - m_eq)
        else:
            need_art.append(i)
    n_art = len(need_art)
    if n_art:
        art_cols = np.zeros((m, n_art))
        for k, i in enumerate(need_art):
            art_cols[i, k] = 1.0
            basis[i] = n + m_ge + k
        A_full = np.concatenate([A, art_cols], axis=1)
    else:
        A_full = A

    total = A_full.shape[1]
    if max_iters is None:
        max_iters = 200 * (m + total)
    T = _Tableau(A_full, b, basis)
    if np.any(T.xb < -1e-9):
        # Defensive: fall back to a full artificial basis.
        A_full = np.concatenate([A, np.eye(m)], axis=1)
        basis = np.arange(n + m_ge, n + m_ge + m)
        n_art = m
        total = A_full.shape[1]
        T = _Tableau(A_full, b, basis)

    if n_art:
        c1 = np.zeros(total)
        c1[n + m_ge:] = -1.0
        allowed = np.ones(total, dtype=bool)
        status = _iterate(T, c1, allowed, max_iters, rule)
        if status == "iteration_limit":
            return LpResult(status, None, None, None, None, None)
        # Phase-1 value is -sum(artificials); meaningfully below zero
        # certifies infeasibility.
        if c1[T.basis] @ T.xb < -1e-7 * max(1.0, np.abs(b).max()):
            return LpResult("infeasible", None, None, None, None, None)
        # Drive lingering artificials out of the basis where possible.
        for i in range(m):
            if T.basis[i] >= n + m_ge:
                row = T.Binv[i] @ A_full[:, :n + m_ge]
                cand = np.flatnonzero(np.abs(row) > PIVOT_TOL)
                if len(cand):
                    T.pivot(i, int(cand[0]))

    c2 = np.zeros(total)
    c2[:n] = c
    allowed = np.ones(total, dtype=bool)
    allowed[n + m_ge:] = False
    status = _iterate(T, c2, allowed, max_iters, rule)
    if status != "optimal":
        return LpResult(status, None, None, None, None, None)

    T.refactor()   # clean inverse before reading off the solution
    x_full = np.zeros(total)
    x_full[T.basis] = T.xb
    x = x_full[:n]
    y = (c2[T.basis] @ T.Binv) * row_sign      # undo the row flips
    y_eq = y[:m_eq]
    y_ge = y[m_eq:]
    slack = A_ge @ x - b_ge if m_ge else np.zeros(0)
    return LpResult("optimal", x, float(c @ x), y_eq, y_ge, slack)
