"""Exact grid oracle for the relaxed persuasion problem.

On a finite belief grid x time grid, the relaxed problem is an LP in the
atom weights f_{ik} >= 0:

    max  sum V(mu_i, t_k) f_{ik}
    s.t. sum f = 1,   sum f mu = prior,
         for every interior time t_j and every piece (a, s >= t_j):
             sum_{k > j} [ U(mu_i, t_k) - u(., a, s).mu_i ] f_{ik}  >=  0.

Writing one row per linear piece of the HD-1 extension of U makes the
pooled obedience constraint exactly linear, so the simplex solution is the
exact optimum of the discretized problem.  The LP duals on the obedience
rows are the increments of the shadow-price path Lambda; the duals on the
prior rows give the supporting hyperplane.

Also provided: the reduced LP over full-revelation-with-delay policies
(valid when V is convex in the belief), and interim continuation values
W(mu', t') from truncated subproblems.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model
from .model import (BeliefTimeDistribution, IndirectUtility, Primitives,
                    augment_belief_grid, binary_belief_grid, hd1_eval,
                    simplex_belief_grid)
from .simplex import LpResult, solve_lp_standard_form

__all__ = ["GridProblem", "LpSolution", "build_grid_problem", "solve_relaxed",
           "solve_revelation_reduced", "interim_value_W", "occ_values"]

MAX_BELIEFS = 128
MAX_TIMES = 32
BINDING_TOL = 1e-7


@dataclass(frozen=True)
class GridProblem:
    """Action-form primitives tabulated on a finite belief grid."""

    prim: Primitives
    indirect: IndirectUtility
    belief_grid: np.ndarray          # (nB, n_states); includes vertices and prior
    U: np.ndarray                    # (nB, J)
    V: np.ndarray                    # (nB, J)

    @property
    def times(self) -> np.ndarray:
        return self.prim.times

    def belief_index(self, mu: np.ndarray, tol: float = 1e-10) -> int:
        d = np.abs(self.belief_grid - np.asarray(mu)[None, :]).max(axis=1)
        i = int(np.argmin(d))
        if d[i] > tol:
            raise ValueError("belief not on grid")
        return i


def build_grid_problem(prim: Primitives, belief_grid: Optional[np.ndarray] = None,
                       n_beliefs: int = 41,
                       enforce_limits: bool = True) -> GridProblem:
    """Tabulate an action-form problem on a belief grid.

    The grid always contains every vertex and the prior.  Tabulated-only
    indirect utilities are rejected: interpolating a convex U between grid
    points would over-tighten the obedience constraints.
    """
    ns = prim.n_states
    if belief_grid is None:
        if ns == 2:
            belief_grid = binary_belief_grid(n_beliefs)
        else:
            res = 2
            while len(simplex_belief_grid(ns, res + 1)) <= n_beliefs:
                res += 1
            belief_grid = simplex_belief_grid(ns, res)
    belief_grid = augment_belief_grid(belief_grid, np.eye(ns))
    belief_grid = augment_belief_grid(belief_grid, prim.prior)
    if enforce_limits and (len(belief_grid) > MAX_BELIEFS or prim.n_times > MAX_TIMES):
        raise ValueError(
            f"instance exceeds desk-scale bounds ({len(belief_grid)} beliefs x "
            f"{prim.n_times} times; limits {MAX_BELIEFS} x {MAX_TIMES})")
    ind = model.build_indirect(prim)
    U, V = ind.tabulate(belief_grid)
    return GridProblem(prim=prim, indirect=ind, belief_grid=belief_grid, U=U, V=V)


@dataclass
class LpSolution:
    f: Optional[BeliefTimeDistribution]
    objective: Optional[float]
    status: str
    binding_times: np.ndarray        # interior times where OC-C binds within 1e-7
    occ_residuals: np.ndarray        # G(f)(t_j) per interior time
    lam_increments: np.ndarray       # (J-1,) obedience multipliers per interior time
    beta_increments: np.ndarray      # (J-1, n_states) multiplier-weighted piece vectors
    a: np.ndarray                    # supporting hyperplane vector
    weights: Optional[np.ndarray] = None   # raw LP weights over grid x times
    piece_multipliers: Optional[dict] = None


def _oc_rows(gp: GridProblem, time_sel: np.ndarray, prune: bool = False):
    """Obedience rows for the LP, one per (interior time, active piece).

    time_sel is the sorted array of column time indices in use; rows are
    produced for every interior selected time j and every piece (a, s) with
    s >= t_j (all grid s, no pruning by default).  Returns a list of
    (j, piece_index) and the assembled coefficient matrix over the columns
    (belief i, selected time k) in C order.
    """
    ind = gp.indirect
    nB = len(gp.belief_grid)
    nK = len(time_sel)
    PU = ind.piece_vectors @ gp.belief_grid.T     # (P, nB)
    rows = []
    labels = []
    for jj, j in enumerate(time_sel[:-1]):
        piece_ids = np.flatnonzero(ind.piece_stimes >= j)
        if prune:
            piece_ids = _prune_dominated(ind.piece_vectors, piece_ids)
        tail = time_sel > j                        # columns with t_k > t_j
        for p in piece_ids:
            coef = np.zeros((nB, nK))
            coef[:, tail] = gp.U[:, time_sel[tail]] - PU[p][:, None]
            rows.append(coef.reshape(-1))
            labels.append((jj, int(p)))
    if rows:
        return np.array(rows), labels
    return np.zeros((0, nB * nK)), labels


def _prune_dominated(vectors: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Drop pieces whose payoff vector is componentwise dominated.

    Dominated pieces never attain the HD-1 maximum over nonnegative
    vectors, so their obedience rows are implied by the dominating ones.
    """
    vs = vectors[ids]
    keep = []
    for k, v in enumerate(vs):
        dominated = False
        for o, w in enumerate(vs):
            if o == k:
                continue
            if np.all(w >= v - 1e-14) and np.any(w > v + 1e-14):
                dominated = True
                break
            if o < k and np.all(np.abs(w - v) <= 1e-14):
                dominated = True    # duplicate: keep first occurrence
                break
        if not dominated:
            keep.append(ids[k])
    return np.array(keep, dtype=int)


def _assemble_and_solve(gp: GridProblem, time_sel: np.ndarray,
                        belief_sel: Optional[np.ndarray] = None,
                        prior: Optional[np.ndarray] = None,
                        rule: str = "bland",
                        prune: bool = False) -> LpSolution:
    prim = gp.prim
    prior = prim.prior if prior is None else np.asarray(prior, dtype=float)
    grid = gp.belief_grid if belief_sel is None else gp.belief_grid[belief_sel]
    Utab = gp.U if belief_sel is None else gp.U[belief_sel]
    Vtab = gp.V if belief_sel is None else gp.V[belief_sel]
    nB, nK = len(grid), len(time_sel)

    sub = GridProblem(prim=prim, indirect=gp.indirect, belief_grid=grid,
                      U=Utab, V=Vtab)
    A_ge, labels = _oc_rows(sub, time_sel, prune=prune)
    b_ge = np.zeros(len(A_ge))
    c = Vtab[:, time_sel].reshape(-1)

    # Prior consistency; one state row dropped as redundant with normalization.
    ns = prim.n_states
    A_eq = np.zeros((ns, nB * nK))
    A_eq[0] = 1.0
    for th in range(ns - 1):
        A_eq[1 + th] = np.repeat(grid[:, th], nK)
    b_eq = np.concatenate([[1.0], prior[:-1]])

    res = solve_lp_standard_form(c, A_eq, b_eq, A_ge, b_ge, rule=rule)
    J = prim.n_times
    lam_inc = np.zeros(J - 1)
    beta_inc = np.zeros((J - 1, ns))
    a = np.zeros(ns)
    if res.status != "optimal":
        return LpSolution(None, None, res.status, np.array([]), np.array([]),
                          lam_inc, beta_inc, a)

    w = res.x.reshape(nB, nK)
    atoms = np.argwhere(w > 1e-11)
    beliefs = grid[atoms[:, 0]]
    times = prim.times[time_sel[atoms[:, 1]]]
    weights = w[atoms[:, 0], atoms[:, 1]]
    f = BeliefTimeDistribution(beliefs, times, weights / weights.sum())

    # Duals: obedience multipliers are the (sign-flipped) >= row duals.
    piece_mult = {}
    for (jj, p), yv in zip(labels, res.y_ge):
        lam = max(0.0, -yv)
        if lam > 0.0:
            j = time_sel[jj]
            lam_inc[j] += lam
            beta_inc[j] += lam * gp.indirect.piece_vectors[p]
            piece_mult[(int(j), int(p))] = piece_mult.get((int(j), int(p)), 0.0) + lam
    # Supporting hyperplane from normalization + prior duals.
    a[:] = res.y_eq[0]
    a[:-1] += res.y_eq[1:]

    occ = occ_values(sub, w, time_sel)
    binding = prim.times[time_sel[:-1]][np.abs(occ) <= BINDING_TOL]
    return LpSolution(f, res.value, "optimal", binding, occ, lam_inc, beta_inc,
                      a, weights=w, piece_multipliers=piece_mult)


def occ_values(gp: GridProblem, w: np.ndarray, time_sel: np.ndarray) -> np.ndarray:
    """G(f)(t_j) for the weight matrix w over (belief grid x selected times)."""
    out = np.zeros(len(time_sel) - 1)
    for jj, j in enumerate(time_sel[:-1]):
        tail = time_sel > j
        wt = w[:, tail]
        gain = float(np.sum(wt * gp.U[:, time_sel[tail]]))
        z = wt.sum(axis=1) @ gp.belief_grid
        out[jj] = gain - hd1_eval(gp.indirect, z, gp.prim.times[j])
    return out


def solve_relaxed(gp: GridProblem, rule: str = "bland") -> LpSolution:
    """Exact LP optimum of the relaxed problem on the grid."""
    return _assemble_and_solve(gp, np.arange(gp.prim.n_times), rule=rule)


def solve_revelation_reduced(gp: GridProblem, rule: str = "bland") -> LpSolution:
    """Reduced LP over revelation-with-delay policies pi(state, time).

    Valid when V(., t) is convex on the belief grid (checked; refuse
    otherwise): splitting any stopping belief into degenerate ones then
    weakly improves both players, so only the timing of full revelation
    matters.  Matches solve_relaxed within LP tolerance on such instances.
    """
    if not _v_convex_on_grid(gp):
        raise ValueError("V is not convex in the belief on this grid; "
                         "use solve_relaxed instead")
    prim = gp.prim
    ns, J = prim.n_states, prim.n_times
    ind = gp.indirect
    vert = np.array([gp.belief_index(e) for e in np.eye(ns)])
    Uv = gp.U[vert]                   # (ns, J): U(delta_th, t)
    Vv = gp.V[vert]

    # Columns pi(theta, k); marginal rows sum_k pi(theta, k) = prior(theta).
    c = Vv.reshape(-1)
    A_eq = np.zeros((ns, ns * J))
    for th in range(ns):
        A_eq[th, th * J:(th + 1) * J] = 1.0
    b_eq = prim.prior.copy()

    PUv = ind.piece_vectors @ np.eye(ns)          # (P, ns): piece value per vertex
    rows, labels = [], []
    for j in range(J - 1):
        for p in np.flatnonzero(ind.piece_stimes >= j):
            coef = np.zeros((ns, J))
            coef[:, j + 1:] = Uv[:, j + 1:] - PUv[p][:, None]
            rows.append(coef.reshape(-1))
            labels.append((j, int(p)))
    A_ge = np.array(rows) if rows else np.zeros((0, ns * J))
    b_ge = np.zeros(len(A_ge))
    res = solve_lp_standard_form(c, A_eq, b_eq, A_ge, b_ge, rule=rule)

    lam_inc = np.zeros(J - 1)
    beta_inc = np.zeros((J - 1, ns))
    a = np.zeros(ns)
    if res.status != "optimal":
        return LpSolution(None, None, res.status, np.array([]), np.array([]),
                          lam_inc, beta_inc, a)
    pi = res.x.reshape(ns, J)
    atoms = np.argwhere(pi > 1e-11)
    beliefs = np.eye(ns)[atoms[:, 0]]
    times = prim.times[atoms[:, 1]]
    weights = pi[atoms[:, 0], atoms[:, 1]]
    f = BeliefTimeDistribution(beliefs, times, weights / weights.sum())
    for (j, p), yv in zip(labels, res.y_ge):
        lam = max(0.0, -yv)
        lam_inc[j] += lam
        beta_inc[j] += lam * ind.piece_vectors[p]
    occ = model.occ_residuals(f, ind)
    binding = prim.times[:-1][np.abs(occ) <= BINDING_TOL]
    return LpSolution(f, res.value, "optimal", binding, occ, lam_inc, beta_inc, a)


def _v_convex_on_grid(gp: GridProblem, tol: float = 1e-9) -> bool:
    """Midpoint convexity of V(., t) along the tabulated belief grid."""
    grid = gp.belief_grid
    if gp.prim.n_states == 2:
        order = np.argsort(grid[:, 1])
        p = grid[order, 1]
        V = gp.V[order]
        for k in range(1, len(p) - 1):
            lo, hi = p[k - 1], p[k + 1]
            if hi - lo < 1e-14:
                continue
            lam = (p[k] - lo) / (hi - lo)
            interp = (1 - lam) * V[k - 1] + lam * V[k + 1]
            if np.any(V[k] > interp + tol):
                return False
        return True
    # General case: test midpoints that land on the grid.
    for i in range(len(grid)):
        for j in range(i + 1, len(grid)):
            mid = 0.5 * (grid[i] + grid[j])
            d = np.abs(grid - mid[None, :]).max(axis=1)
            k = int(np.argmin(d))
            if d[k] <= 1e-10:
                if np.any(gp.V[k] > 0.5 * (gp.V[i] + gp.V[j]) + tol):
                    return False
    return True


def interim_value_W(gp: GridProblem, mu_prime: np.ndarray, t_prime: float,
                    rule: str = "bland", time_stride: int = 1,
                    prune: bool = False) -> float:
    """Value of the relaxed problem restricted to times >= t_prime, prior mu'.

    time_stride > 1 sub-samples the stopping times (keeping t', the next
    grid time and the last); stopping utilities still use the full
    action-time grid, and the omitted obedience constraints are implied by
    the retained ones for distributions supported on the sub-grid, so the
    result is the exact optimum of the restricted-support problem and hence
    a lower bound on the full W.
    """
    prim = gp.prim
    mu_prime = np.asarray(mu_prime, dtype=float)
    k0 = model.time_index(prim.times, t_prime)
    sel = np.arange(k0, prim.n_times, time_stride)
    if sel[-1] != prim.n_times - 1:
        sel = np.append(sel, prim.n_times - 1)

    grid = augment_belief_grid(gp.belief_grid, mu_prime)
    if len(grid) != len(gp.belief_grid):
        U, V = gp.indirect.tabulate(grid)
        gp = GridProblem(prim=prim, indirect=gp.indirect, belief_grid=grid,
                         U=U, V=V)
    sol = _assemble_and_solve(gp, sel, prior=mu_prime, rule=rule, prune=prune)
    if sol.status != "optimal":
        raise RuntimeError(f"interim LP not optimal: {sol.status}")
    return float(sol.objective)
