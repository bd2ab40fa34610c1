"""Problem primitives for persuasion in stopping problems.

A problem instance is a finite set of states, a finite set of actions, a
finite strictly increasing time grid, a prior, and two payoff tensors
u(state, action, time) / v(state, action, time) for the agent and the
principal.  From these we derive the indirect stopping utilities

    U(mu, t) = max_{a, s >= t}  sum_th u(th, a, s) mu(th)
    V(mu, t) = max over the U-argmax set of sum_th v(th, a, s) mu(th)

with agent ties broken in the principal's favour.  U is extended
homogeneously of degree one to nonnegative vectors, which lets obedience
constraints be written on unnormalized conditional means.

The decision variable of the relaxed design problem is a finitely supported
joint distribution of (stopping belief, stopping time); this module houses
that distribution, the continuation-belief and obedience-residual
calculators, and the conversion to a "simple recommendation" (a strategy
that only says "continue" until the stopping instant).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

__all__ = [
    "FEASIBILITY_TOL",
    "CONSISTENCY_TOL",
    "Primitives",
    "IndirectUtility",
    "BeliefTimeDistribution",
    "SimpleRecommendation",
    "build_indirect",
    "hd1_eval",
    "continuation_belief",
    "occ_residuals",
    "participation_residual",
    "to_simple_recommendation",
    "simulate_paths",
    "binary_belief_grid",
    "simplex_belief_grid",
    "augment_belief_grid",
    "time_index",
]

# Default tolerances; every operation accepts overrides.
FEASIBILITY_TOL = 1e-9
CONSISTENCY_TOL = 1e-12


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


def time_index(times: np.ndarray, t: float, tol: float = 1e-9) -> int:
    """Index of grid time t, matched within tol; raises on off-grid times."""
    j = int(np.searchsorted(times, t))
    for k in (j - 1, j, j + 1):
        if 0 <= k < len(times) and abs(times[k] - t) <= tol * max(1.0, abs(t)):
            return k
    raise ValueError(f"time {t!r} is not on the grid")


@dataclass(frozen=True)
class Primitives:
    """States, actions, time grid, prior and the two payoff tensors."""

    states: tuple
    actions: tuple
    times: np.ndarray       # (J,) strictly increasing, J >= 2
    prior: np.ndarray       # (n_states,)
    u: np.ndarray           # (n_states, n_actions, J)
    v: np.ndarray           # (n_states, n_actions, J)

    def __post_init__(self):
        object.__setattr__(self, "times", _as_readonly(self.times))
        object.__setattr__(self, "prior", _as_readonly(self.prior))
        object.__setattr__(self, "u", _as_readonly(self.u))
        object.__setattr__(self, "v", _as_readonly(self.v))
        ns, na, nt = len(self.states), len(self.actions), len(self.times)
        if na == 0:
            raise ValueError("empty action set")
        if nt < 2:
            raise ValueError("need at least two grid times")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.prior.shape != (ns,):
            raise ValueError("prior shape mismatch")
        if np.any(self.prior < -CONSISTENCY_TOL) or abs(self.prior.sum() - 1.0) > CONSISTENCY_TOL:
            raise ValueError("prior must be a probability vector (1e-12)")
        if self.u.shape != (ns, na, nt) or self.v.shape != (ns, na, nt):
            raise ValueError("payoff tensor shape mismatch")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("payoff tensors must be finite")

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def interior_times(self) -> np.ndarray:
        """T-degree-sign: all grid times except the last (where OC-C is never imposed)."""
        return self.times[:-1]


class IndirectUtility:
    """Indirect stopping utilities U and V.

    mode "action-form" keeps the payoff tensors so U is the exact maximum of
    known linear pieces (one per (action, action-time) pair); mode
    "tabulated" only knows U, V on a fixed belief grid.
    """

    def __init__(self, prim: Optional[Primitives] = None, *, belief_grid=None,
                 U_table=None, V_table=None, times=None):
        if prim is not None:
            self.mode = "action-form"
            self.prim = prim
            self.times = prim.times
            ns, na, nt = prim.u.shape
            # piece_vectors[(a, s)] = u(:, a, s); flattened with s-major order
            # so pieces active at time index j are the tail s >= j.
            self.piece_actions = np.repeat(np.arange(na), nt)
            self.piece_stimes = np.tile(np.arange(nt), na)
            self.piece_vectors = np.concatenate(
                [prim.u[:, a, :].T for a in range(na)], axis=0)      # (na*nt, ns)
            self.piece_values_v = np.concatenate(
                [prim.v[:, a, :].T for a in range(na)], axis=0)      # (na*nt, ns)
        else:
            self.mode = "tabulated"
            self.prim = None
            self.times = _as_readonly(times)
            self._grid = _as_readonly(belief_grid)
            self._U = _as_readonly(U_table)
            self._V = _as_readonly(V_table)

    # -- evaluation ------------------------------------------------------

    def pieces_at(self, j: int) -> np.ndarray:
        """Boolean mask of pieces (a, s) with s >= grid time j."""
        return self.piece_stimes >= j

    def eval_U(self, mu: np.ndarray, t: float) -> float:
        mu = np.asarray(mu, dtype=float)
        j = time_index(self.times, t)
        if self.mode == "action-form":
            mask = self.pieces_at(j)
            return float(np.max(self.piece_vectors[mask] @ mu))
        i = self._grid_lookup(mu)
        return float(self._U[i, j])

    def eval_V(self, mu: np.ndarray, t: float, tie_tol: float = 1e-12) -> float:
        mu = np.asarray(mu, dtype=float)
        j = time_index(self.times, t)
        if self.mode == "action-form":
            mask = self.pieces_at(j)
            pu = self.piece_vectors[mask] @ mu
            pv = self.piece_values_v[mask] @ mu
            best = pu.max()
            return float(pv[pu >= best - tie_tol].max())
        i = self._grid_lookup(mu)
        return float(self._V[i, j])

    def best_action(self, mu: np.ndarray, t: float, tie_tol: float = 1e-12):
        """(action index, action-time index) attaining V; deterministic.

        Among agent-optimal pieces the principal-best is taken; remaining
        ties go to the lexicographically smallest (action, action-time).
        """
        if self.mode != "action-form":
            raise ValueError("best_action requires action-form mode")
        mu = np.asarray(mu, dtype=float)
        j = time_index(self.times, t)
        idx = np.flatnonzero(self.pieces_at(j))
        pu = self.piece_vectors[idx] @ mu
        pv = self.piece_values_v[idx] @ mu
        cand = idx[pu >= pu.max() - tie_tol]
        cv = self.piece_values_v[cand] @ mu
        cand = cand[cv >= cv.max() - tie_tol]
        order = np.lexsort((self.piece_stimes[cand], self.piece_actions[cand]))
        p = cand[order[0]]
        return int(self.piece_actions[p]), int(self.piece_stimes[p])

    def hd1(self, z: np.ndarray, t: float) -> float:
        return hd1_eval(self, z, t)

    def tabulate(self, belief_grid: np.ndarray):
        """U and V tables of shape (n_beliefs, n_times)."""
        grid = np.asarray(belief_grid, dtype=float)
        J = len(self.times)
        if self.mode == "tabulated":
            rows = [self._grid_lookup(mu) for mu in grid]
            return self._U[rows], self._V[rows]
        U = np.empty((len(grid), J))
        V = np.empty((len(grid), J))
        PU = self.piece_vectors @ grid.T       # (P, nB)
        PV = self.piece_values_v @ grid.T
        for j in range(J):
            mask = self.pieces_at(j)
            pu = PU[mask]
            U[:, j] = pu.max(axis=0)
            tie = pu >= U[:, j][None, :] - 1e-12
            pv = np.where(tie, PV[mask], -np.inf)
            V[:, j] = pv.max(axis=0)
        return U, V

    def _grid_lookup(self, mu: np.ndarray) -> int:
        d = np.abs(self._grid - mu[None, :]).max(axis=1)
        i = int(np.argmin(d))
        if d[i] > 1e-10:
            raise ValueError("belief not on the tabulated grid")
        return i


def build_indirect(prim: Primitives) -> IndirectUtility:
    """Action-form indirect utilities from primitives."""
    return IndirectUtility(prim)


def hd1_eval(U: IndirectUtility, z: np.ndarray, t: float) -> float:
    """Degree-one homogeneous extension of U to nonnegative vectors.

    Returns (sum z) * U(z / sum z, t); the zero vector maps to 0 (the HD-1
    limit).  In action-form mode this is the exact maximum of the stored
    linear pieces at z.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < -1e-12):
        raise ValueError("hd1_eval requires a nonnegative vector")
    s = float(z.sum())
    if s <= 1e-300:
        return 0.0
    if U.mode == "action-form":
        j = time_index(U.times, t)
        return float(np.max(U.piece_vectors[U.pieces_at(j)] @ z))
    return s * U.eval_U(z / s, t)


@dataclass(frozen=True)
class BeliefTimeDistribution:
    """Finitely supported joint distribution of (stopping belief, stopping time)."""

    beliefs: np.ndarray      # (n, n_states)
    times: np.ndarray        # (n,)
    weights: np.ndarray      # (n,) nonnegative, sums to one

    def __post_init__(self):
        object.__setattr__(self, "beliefs", _as_readonly(np.atleast_2d(self.beliefs)))
        object.__setattr__(self, "times", _as_readonly(self.times))
        object.__setattr__(self, "weights", _as_readonly(self.weights))
        n = len(self.weights)
        if self.beliefs.shape[0] != n or self.times.shape != (n,):
            raise ValueError("support shape mismatch")
        if np.any(self.weights < -FEASIBILITY_TOL):
            raise ValueError("negative weight")
        if abs(self.weights.sum() - 1.0) > FEASIBILITY_TOL:
            raise ValueError("weights must sum to one (1e-9)")
        if np.any(self.beliefs < -FEASIBILITY_TOL) or \
           np.any(np.abs(self.beliefs.sum(axis=1) - 1.0) > FEASIBILITY_TOL):
            raise ValueError("beliefs must lie in the simplex")

    @property
    def mean_belief(self) -> np.ndarray:
        return self.weights @ self.beliefs

    def check_prior(self, prior: np.ndarray, tol: float = FEASIBILITY_TOL) -> bool:
        return bool(np.max(np.abs(self.mean_belief - np.asarray(prior))) <= tol)

    def expected(self, fn: Callable[[np.ndarray, float], float]) -> float:
        return float(sum(w * fn(mu, t) for mu, t, w in
                         zip(self.beliefs, self.times, self.weights)))

    def consolidated(self, belief_tol: float = 1e-12, time_tol: float = 1e-12
                     ) -> "BeliefTimeDistribution":
        """Merge duplicate (belief, time) atoms and drop zero weights."""
        order = np.lexsort((self.times, *[self.beliefs[:, k]
                                          for k in range(self.beliefs.shape[1])]))
        bs, ts, ws = [], [], []
        for i in order:
            if self.weights[i] <= 0.0:
                continue
            if bs and abs(ts[-1] - self.times[i]) <= time_tol and \
               np.max(np.abs(bs[-1] - self.beliefs[i])) <= belief_tol:
                ws[-1] += self.weights[i]
            else:
                bs.append(np.array(self.beliefs[i]))
                ts.append(float(self.times[i]))
                ws.append(float(self.weights[i]))
        return BeliefTimeDistribution(np.array(bs), np.array(ts), np.array(ws))


def continuation_belief(f: BeliefTimeDistribution, t: float,
                        mass_tol: float = CONSISTENCY_TOL) -> Optional[np.ndarray]:
    """E_f[mu | tau > t], or None when the surviving mass is <= 1e-12."""
    tail = f.times > t + 1e-12
    m = float(f.weights[tail].sum())
    if m <= mass_tol:
        return None
    return (f.weights[tail] @ f.beliefs[tail]) / m


def occ_residuals(f: BeliefTimeDistribution, U: IndirectUtility) -> np.ndarray:
    """Relaxed obedience residuals, one per interior grid time.

    G(f)(t) = int_{y>t} U(mu, y) df  -  U(int_{y>t} mu df, t), the second
    term through the HD-1 extension (no renormalization).  f is obedient iff
    every residual is >= -1e-9.  Empty tails give residual 0.
    """
    times = U.times
    uvals = np.array([U.eval_U(mu, t) for mu, t in zip(f.beliefs, f.times)])
    res = np.zeros(len(times) - 1)
    for j, t in enumerate(times[:-1]):
        tail = f.times > t + 1e-12
        if not np.any(tail):
            continue
        gain = float(f.weights[tail] @ uvals[tail])
        z = f.weights[tail] @ f.beliefs[tail]
        res[j] = gain - hd1_eval(U, z, t)
    return res


def participation_residual(f: BeliefTimeDistribution, U: IndirectUtility) -> float:
    """E_f[U] - U(E_f[mu], t0): the pre-time (time-zero) obedience slack."""
    ev = f.expected(U.eval_U)
    return ev - hd1_eval(U, f.mean_belief, U.times[0])


@dataclass(frozen=True)
class SimpleRecommendation:
    """Simple recommendation induced by a belief-time distribution.

    The strategy tells the agent only "continue" until the stopping instant;
    on path the belief sits at the continuation belief, jumps once to the
    stopping belief and stays constant.
    """

    source: BeliefTimeDistribution
    times: np.ndarray                 # problem grid
    survival: np.ndarray              # P(tau > t) per grid time
    continuation_path: np.ndarray     # (J, n_states); rows NaN once survival ~ 0
    stop_times: np.ndarray            # grid indices carrying stopping mass
    stop_mass: np.ndarray             # P(tau = t) for each entry of stop_times
    stop_kernel: tuple                # per stop time: (beliefs, conditional weights)

    def reconstruct(self) -> BeliefTimeDistribution:
        """The joint stopping law implied by the recommendation (== source)."""
        bs, ts, ws = [], [], []
        for j, m, (beliefs, cond) in zip(self.stop_times, self.stop_mass, self.stop_kernel):
            for mu, q in zip(beliefs, cond):
                bs.append(mu)
                ts.append(self.times[j])
                ws.append(m * q)
        return BeliefTimeDistribution(np.array(bs), np.array(ts), np.array(ws)).consolidated()


def to_simple_recommendation(f: BeliefTimeDistribution, U: IndirectUtility,
                             tol: float = FEASIBILITY_TOL) -> SimpleRecommendation:
    """Convert an obedient f into its simple recommendation.

    Rejects infeasible inputs, naming the first grid time whose obedience
    residual falls below -tol.
    """
    res = occ_residuals(f, U)
    bad = np.flatnonzero(res < -tol)
    if len(bad):
        t_bad = U.times[bad[0]]
        raise ValueError(f"distribution violates obedience at t={t_bad:.6g} "
                         f"(residual {res[bad[0]]:.3e})")
    f = f.consolidated()
    times = U.times
    J = len(times)
    idx = np.array([time_index(times, t) for t in f.times])

    survival = np.zeros(J)
    path = np.full((J, f.beliefs.shape[1]), np.nan)
    for j in range(J):
        tail = idx > j
        survival[j] = f.weights[tail].sum()
        if survival[j] > CONSISTENCY_TOL:
            path[j] = (f.weights[tail] @ f.beliefs[tail]) / survival[j]

    stop_times, stop_mass, kernel = [], [], []
    for j in sorted(set(idx.tolist())):
        sel = idx == j
        m = float(f.weights[sel].sum())
        stop_times.append(j)
        stop_mass.append(m)
        kernel.append((f.beliefs[sel].copy(), f.weights[sel] / m))
    return SimpleRecommendation(
        source=f, times=times, survival=survival, continuation_path=path,
        stop_times=np.array(stop_times, dtype=int), stop_mass=np.array(stop_mass),
        stop_kernel=tuple(kernel))


def simulate_paths(rec: SimpleRecommendation, n: int, seed: int):
    """n i.i.d. draws of (stopping belief, stopping time); deterministic in seed."""
    if n < 1:
        raise ValueError("need n >= 1")
    f = rec.source
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(f.weights), size=n, p=f.weights / f.weights.sum())
    return f.beliefs[picks].copy(), f.times[picks].copy()


# -- belief grids --------------------------------------------------------

def binary_belief_grid(n: int = 101) -> np.ndarray:
    """Uniform grid on the 2-state simplex; columns (P(state0), P(state1))."""
    p = np.linspace(0.0, 1.0, n)
    return np.column_stack([1.0 - p, p])


def simplex_belief_grid(n_states: int, resolution: int) -> np.ndarray:
    """Lattice {k/resolution} on the simplex, vertices included."""
    pts = []
    for cuts in combinations_with_replacement(range(resolution + 1), n_states - 1):
        ks = np.diff((0, *cuts, resolution))
        pts.append(ks / resolution)
    return np.array(pts)


def augment_belief_grid(grid: np.ndarray, extra: np.ndarray,
                        tol: float = 1e-10) -> np.ndarray:
    """Union of grid and extra points, deduplicated."""
    out = list(np.atleast_2d(grid))
    for mu in np.atleast_2d(extra):
        if all(np.max(np.abs(mu - g)) > tol for g in out):
            out.append(np.asarray(mu, dtype=float))
    return np.array(out)
