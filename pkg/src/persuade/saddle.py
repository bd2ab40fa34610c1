"""Min-max solver over shadow prices, first-order verifier, diagnostics.

The dual of the relaxed problem is a min-max over a nondecreasing
shadow-price path Lambda (pricing pooled obedience) and hyperplane paths b
(pricing prior consistency through time).  On a grid with J times the score
of a candidate dual against a stopping pair (mu, tau = k) plus interim
beliefs nu is

    Phi = V(mu, t_k) + Lam[k+1] U(mu, t_k) - Lam[0] U(mu0, t_0)
          - b[k+1].mu + b[0].mu0
          + sum_{i<k} [ (b[i+2]-b[i+1]).nu_i - (Lam[i+2]-Lam[i+1]) U(nu_i, t_i) ]

with dual arrays indexed 0..J (index 0 is the pre-time level, index j >= 1
is grid time t_{j-1}).  The inner maximum decouples: mu and each nu_i are
maximized period by period over the belief grid and tau by enumeration; the
outer problem is convex in (Lam, b) and is driven by projected subgradient
steps, the monotone projection computed by pool-adjacent-violators.

Primal recovery accumulates near-argmax stopping pairs across iterations
and solves a small restricted LP over that support; the restricted LP's own
duals then give a candidate certificate whose exact inner maximum is an
honest upper bound, closing the duality gap when the support is right.

verify_foc checks the first-order conditions: the Lagrangian derivative

    l(mu, t) = V(mu,t) + Lam(t) U(mu,t) - (sum_{s<t} dLam(s) grad U(mu_hat_s, s)) . mu

must lie below the supporting hyperplane a.mu everywhere, with equality on
the support of f, alongside obedience and complementary slackness.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model
from .model import BeliefTimeDistribution
from .oracle import GridProblem, LpSolution
from .simplex import solve_lp_standard_form

__all__ = ["DualCertificate", "SaddleReport", "DiagnosticsReport", "FocReport",
           "SaddleConfig", "eval_phi", "inner_maximize", "outer_step", "pava",
           "project_lambda", "solve_saddle", "verify_foc", "certificate_from_lp",
           "time_risk_diagnostics"]


# -- pool-adjacent-violators ----------------------------------------------

def pava(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the nondecreasing cone (unit weights)."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    level = y.copy()
    weight = np.ones(n)
    k = 0
    levels = np.empty(n)
    counts = np.empty(n, dtype=int)
    for i in range(n):
        levels[k] = y[i]
        counts[k] = 1
        while k > 0 and levels[k - 1] > levels[k]:
            merged = (levels[k - 1] * counts[k - 1] + levels[k] * counts[k]) / \
                     (counts[k - 1] + counts[k])
            counts[k - 1] += counts[k]
            levels[k - 1] = merged
            k -= 1
        k += 1
    out = np.empty(n)
    pos = 0
    for b in range(k):
        out[pos:pos + counts[b]] = levels[b]
        pos += counts[b]
    return out


def project_lambda(lam: np.ndarray) -> np.ndarray:
    """Projection onto {nondecreasing, first entry >= 0}: PAVA then clip."""
    return np.maximum(pava(lam), 0.0)


# -- certificates ----------------------------------------------------------

@dataclass
class DualCertificate:
    """Shadow-price path and hyperplane path on dual indices 0..J."""

    lam: np.ndarray    # (J+1,) nondecreasing, lam[0] >= 0
    b: np.ndarray      # (J+1, n_states)
    a: np.ndarray      # supporting vector (= b[0] for solver-built duals)
    value: float = np.nan

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.a = np.asarray(self.a, dtype=float)

    @property
    def lam_levels(self) -> np.ndarray:
        """Lambda(t_k): the coefficient applied to stops at grid time k."""
        return self.lam[1:]

    @property
    def lam_increments(self) -> np.ndarray:
        """Obedience multipliers at interior grid times."""
        return np.diff(self.lam[1:])

    @property
    def beta_increments(self) -> np.ndarray:
        """dLam(t_j) * grad-U selection at t_j, as b-increments."""
        return np.diff(self.b[1:], axis=0)


def certificate_from_lp(gp: GridProblem, sol: LpSolution) -> DualCertificate:
    """Dual certificate assembled from LP multipliers.

    The cumulative sums of the obedience multipliers give Lambda; the
    multiplier-weighted piece vectors give the b increments (they are honest
    subgradients at the conditional means by complementary slackness); the
    prior-row duals give the hyperplane.
    """
    J = gp.prim.n_times
    ns = gp.prim.n_states
    lam = np.zeros(J + 1)
    lam[2:] = np.cumsum(sol.lam_increments)[:J - 1]
    b = np.zeros((J + 1, ns))
    b[0] = sol.a
    b[1] = sol.a
    for j in range(J - 1):
        b[j + 2] = b[j + 1] + sol.beta_increments[j]
    return DualCertificate(lam=lam, b=b, a=sol.a.copy(),
                           value=sol.objective if sol.objective is not None else np.nan)


# -- the Phi functional ----------------------------------------------------

def eval_phi(cert: DualCertificate, nu: np.ndarray, mu: np.ndarray, tau: int,
             gp: GridProblem):
    """Phi at interim beliefs nu (rows nu_i for i < tau), stop pair (mu, tau).

    tau is a grid time index (0-based).  Returns (value, d_lam, d_b): the
    value and its gradient in (lam, b), Phi being affine in the duals.
    """
    prim = gp.prim
    ind = gp.indirect
    J = prim.n_times
    mu = np.asarray(mu, dtype=float)
    t_k = prim.times[tau]
    u_stop = ind.eval_U(mu, t_k)
    u0 = ind.eval_U(prim.prior, prim.times[0])
    v_stop = ind.eval_V(mu, t_k)

    d_lam = np.zeros(J + 1)
    d_b = np.zeros_like(cert.b)
    d_lam[tau + 1] += u_stop
    d_lam[0] -= u0
    d_b[tau + 1] -= mu
    d_b[0] += prim.prior
    for i in range(tau):
        nui = np.asarray(nu[i], dtype=float)
        ui = ind.eval_U(nui, prim.times[i])
        d_lam[i + 2] -= ui
        d_lam[i + 1] += ui
        d_b[i + 2] += nui
        d_b[i + 1] -= nui
    value = float(cert.lam @ d_lam + np.sum(cert.b * d_b)) + v_stop
    return value, d_lam, d_b


def inner_maximize(cert: DualCertificate, gp: GridProblem, tie_tol: float = 1e-9):
    """Enumerate the inner maximum of Phi over the belief grid.

    Per-period interim scores and stop scores decouple, so the maximizer is
    assembled from period-by-period argmaxes plus an argmax over tau.
    Returns a dict with the value, the argmax (nu*, mu*, tau*), subgradient
    arrays, and the full tie sets within tie_tol.
    """
    prim = gp.prim
    J = prim.n_times
    grid = gp.belief_grid
    lam_lvl = cert.lam[1:]
    dlam = np.diff(cert.lam[1:])          # multiplier at interior time i
    dbs = np.diff(cert.b[1:], axis=0)

    # Interim terms: m_i = max_nu (db_i . nu - dlam_i U(nu, t_i)).
    interim_best = np.zeros(J - 1)
    interim_arg = np.zeros(J - 1, dtype=int)
    interim_ties = []
    for i in range(J - 1):
        scores = grid @ dbs[i] - dlam[i] * gp.U[:, i]
        interim_arg[i] = int(np.argmax(scores))
        interim_best[i] = scores[interim_arg[i]]
        interim_ties.append(np.flatnonzero(scores >= interim_best[i] - tie_tol))
    prefix = np.concatenate([[0.0], np.cumsum(interim_best)])   # prefix[k] = sum_{i<k}

    # Stop terms: s_k = max_mu (V + lam_lvl[k] U - b[k+1].mu).
    stop_scores = gp.V + gp.U * lam_lvl[None, :] - grid @ cert.b[1:].T
    stop_arg = np.argmax(stop_scores, axis=0)
    stop_best = stop_scores[stop_arg, np.arange(J)]

    u0 = gp.indirect.eval_U(prim.prior, prim.times[0])
    const = -cert.lam[0] * u0 + float(cert.b[0] @ prim.prior)
    totals = stop_best + prefix + const
    tau_star = int(np.argmax(totals))
    value = float(totals[tau_star])
    tau_ties = np.flatnonzero(totals >= value - tie_tol)

    nu_star = grid[interim_arg]
    mu_star = grid[stop_arg[tau_star]]
    _, d_lam, d_b = eval_phi(cert, nu_star, mu_star, tau_star, gp)
    return {
        "value": value,
        "nu": nu_star,
        "mu": mu_star,
        "tau": tau_star,
        "d_lam": d_lam,
        "d_b": d_b,
        "stop_arg": stop_arg,
        "stop_scores_best": stop_best,
        "totals": totals,
        "tau_ties": tau_ties,
        "interim_ties": interim_ties,
    }


def _interim_max_exact(db: np.ndarray, lam: float, pieces: np.ndarray) -> float:
    """max over the whole simplex of db.nu - lam * U(nu, t).

    U is the max of linear pieces, so the objective is the concave
    piecewise-linear min_p (db - lam p).nu; the maximum is a tiny LP.  Grid
    enumeration alone can understate this (continuation beliefs need not be
    grid points), which would break the upper-bound property of Phi.
    """
    if lam <= 1e-15:
        return float(db.max())
    ns = len(db)
    rows = db[None, :] - lam * pieces          # (P, ns)
    # variables: nu (ns), t+ , t-;  max t+ - t-  s.t. rows.nu - t+ + t- >= 0
    c = np.zeros(ns + 2)
    c[ns], c[ns + 1] = 1.0, -1.0
    A_eq = np.zeros((1, ns + 2))
    A_eq[0, :ns] = 1.0
    A_ge = np.concatenate([rows, -np.ones((len(rows), 1)),
                           np.ones((len(rows), 1))], axis=1)
    res = solve_lp_standard_form(c, A_eq, np.array([1.0]), A_ge,
                                 np.zeros(len(rows)), rule="dantzig")
    if res.status != "optimal":      # defensive; the LP is always feasible/bounded
        return float(rows.min(axis=0).max())
    return float(res.value)


def dual_value(cert: DualCertificate, gp: GridProblem):
    """Exact upper value of the dual functional at cert.

    Stop pairs are enumerated over the belief grid (the primal lives there);
    interim maxima are solved exactly over the simplex.  Returns the value
    and, per stopping time, the grid argmax column (for column generation).
    """
    prim = gp.prim
    J = prim.n_times
    grid = gp.belief_grid
    lam_lvl = cert.lam[1:]
    dlam = np.diff(cert.lam[1:])
    dbs = np.diff(cert.b[1:], axis=0)
    ind = gp.indirect

    interim = np.zeros(J - 1)
    for i in range(J - 1):
        pieces = ind.piece_vectors[ind.pieces_at(i)]
        interim[i] = _interim_max_exact(dbs[i], float(dlam[i]), pieces)
    prefix = np.concatenate([[0.0], np.cumsum(interim)])

    stop_scores = gp.V + gp.U * lam_lvl[None, :] - grid @ cert.b[1:].T
    stop_arg = np.argmax(stop_scores, axis=0)
    stop_best = stop_scores[stop_arg, np.arange(J)]
    u0 = ind.eval_U(prim.prior, prim.times[0])
    const = -cert.lam[0] * u0 + float(cert.b[0] @ prim.prior)
    totals = stop_best + prefix[:J] + const
    return float(totals.max()), stop_arg, totals


def outer_step(cert: DualCertificate, d_lam: np.ndarray, d_b: np.ndarray,
               k: int, eta0: float = 1.0) -> DualCertificate:
    """Projected subgradient step eta_k = eta0 / sqrt(k) on (lam, b).

    lam is projected back onto the nondecreasing nonnegative cone by
    pool-adjacent-violators; b is unconstrained.  The solver keeps the
    pre-time block tied (lam[1] = lam[0], b[1] = b[0]) because no obedience
    constraint lives strictly between the pre-time and the first grid time.
    """
    eta = eta0 / np.sqrt(max(k, 1))
    lam = cert.lam - eta * d_lam
    lam[0] = lam[1] = 0.5 * (lam[0] + lam[1])
    lam = project_lambda(lam)
    lam[0] = lam[1]
    b = cert.b - eta * d_b
    b[0] = b[1] = 0.5 * (b[0] + b[1])
    return DualCertificate(lam=lam, b=b, a=b[0].copy(), value=cert.value)


# -- solver ----------------------------------------------------------------

@dataclass
class SaddleConfig:
    tol: float = 1e-5
    max_iters: int = 200_000
    eta0: float = 1.0
    recover_every: int = 250
    support_eps: float = 1e-6
    max_support: int = 4000
    time_budget_s: Optional[float] = None


@dataclass
class SaddleReport:
    certificate: DualCertificate
    primal: Optional[BeliefTimeDistribution]
    primal_value: Optional[float]
    dual_value: float
    duality_gap: float
    foc_max_violation: float
    iterations: int
    status: str                       # converged | max_iters | warning

    @property
    def value(self) -> Optional[float]:
        return self.primal_value


def _restricted_lp(gp: GridProblem, support: set, rule: str = "dantzig"):
    """Relaxed-problem LP restricted to the accumulated support columns.

    Vertices at the first time are always included so the prior stays
    representable.  Returns an LpSolution in the full index space.
    """
    prim = gp.prim
    nB, J = len(gp.belief_grid), prim.n_times
    cols = set(support)
    for e in np.eye(prim.n_states):
        cols.add((gp.belief_index(e), 0))
    cols.add((gp.belief_index(prim.prior), 0))
    cols = sorted(cols)
    bi = np.array([c[0] for c in cols])
    ki = np.array([c[1] for c in cols])

    ind = gp.indirect
    PU = ind.piece_vectors @ gp.belief_grid[bi].T
    c_obj = gp.V[bi, ki]
    rows, labels = [], []
    for j in range(J - 1):
        tail = ki > j
        if not np.any(tail):
            continue
        for p in np.flatnonzero(ind.piece_stimes >= j):
            coef = np.where(tail, gp.U[bi, ki] - PU[p], 0.0)
            rows.append(coef)
            labels.append((j, int(p)))
    A_ge = np.array(rows) if rows else np.zeros((0, len(cols)))
    ns = prim.n_states
    A_eq = np.zeros((ns, len(cols)))
    A_eq[0] = 1.0
    for th in range(ns - 1):
        A_eq[1 + th] = gp.belief_grid[bi, th]
    b_eq = np.concatenate([[1.0], prim.prior[:-1]])
    res = solve_lp_standard_form(c_obj, A_eq, b_eq, A_ge,
                                 np.zeros(len(A_ge)), rule=rule)
    if res.status != "optimal":
        return None
    J1 = J - 1
    lam_inc = np.zeros(J1)
    beta_inc = np.zeros((J1, ns))
    for (j, p), yv in zip(labels, res.y_ge):
        lam = max(0.0, -yv)
        lam_inc[j] += lam
        beta_inc[j] += lam * ind.piece_vectors[p]
    a = np.full(ns, res.y_eq[0])
    a[:-1] += res.y_eq[1:]
    keep = res.x > 1e-11
    f = BeliefTimeDistribution(gp.belief_grid[bi[keep]], prim.times[ki[keep]],
                               res.x[keep] / res.x[keep].sum())
    return LpSolution(f, res.value, "optimal", np.array([]), np.array([]),
                      lam_inc, beta_inc, a)


def solve_saddle(gp: GridProblem, config: Optional[SaddleConfig] = None) -> SaddleReport:
    """Subgradient min-max over (Lambda, b) with restricted-LP primal recovery."""
    cfg = config or SaddleConfig()
    prim = gp.prim
    J = prim.n_times
    ns = prim.n_states
    cert = DualCertificate(lam=np.zeros(J + 1), b=np.zeros((J + 1, ns)),
                           a=np.zeros(ns))
    avg_lam = np.zeros(J + 1)
    avg_b = np.zeros((J + 1, ns))
    n_avg = 0

    support: set = set()
    best_upper = np.inf
    best_primal: Optional[LpSolution] = None
    best_cert = cert
    status = "max_iters"
    t_start = _time.time()
    it = 0
    while it < cfg.max_iters:
        it += 1
        inner = inner_maximize(cert, gp)
        # Harvest near-argmax stopping pairs for primal recovery.
        for k in inner["tau_ties"]:
            sk = gp.V[:, k] + cert.lam[k + 1] * gp.U[:, k] - gp.belief_grid @ cert.b[k + 1]
            good = np.flatnonzero(sk >= sk.max() - max(cfg.support_eps, 1e-9))
            for i in good[:32]:
                if len(support) < cfg.max_support:
                    support.add((int(i), int(k)))
        cert = outer_step(cert, inner["d_lam"], inner["d_b"], it, cfg.eta0)
        # Polyak averaging over the trailing half of the run.
        if it >= 2 and it % 2 == 0:
            n_avg += 1
            w = 1.0 / n_avg
            avg_lam = (1 - w) * avg_lam + w * cert.lam
            avg_b = (1 - w) * avg_b + w * cert.b

        if it % cfg.recover_every == 0 or it == cfg.max_iters:
            rec = _restricted_lp(gp, support)
            if rec is not None:
                if best_primal is None or rec.objective > best_primal.objective:
                    best_primal = rec
                # Candidate certificates: LP duals and the Polyak average.
                cand = [certificate_from_lp(gp, rec)]
                if n_avg:
                    avg = DualCertificate(lam=project_lambda(avg_lam.copy()),
                                          b=avg_b.copy(), a=avg_b[0].copy())
                    avg.lam[0] = avg.lam[1]
                    cand.append(avg)
                for cc in cand:
                    ub, stop_arg, totals = dual_value(cc, gp)
                    if ub < best_upper:
                        best_upper = ub
                        best_cert = cc
                    # Column generation: columns the certificate fails to
                    # price feed the next restricted LP.
                    for k in np.flatnonzero(totals >= ub - 10 * cfg.tol):
                        if len(support) < cfg.max_support:
                            support.add((int(stop_arg[k]), int(k)))
                gap = best_upper - best_primal.objective
                if gap <= cfg.tol:
                    status = "converged"
                    break
            if cfg.time_budget_s and _time.time() - t_start > cfg.time_budget_s:
                break

    if best_primal is None:
        rec = _restricted_lp(gp, support)
        best_primal = rec
    gap = (best_upper - best_primal.objective) if best_primal else np.inf
    if status != "converged" and gap > cfg.tol:
        status = "warning"
    best_cert.value = best_upper
    foc = verify_foc(best_primal.f, best_cert, gp) if best_primal else None
    return SaddleReport(
        certificate=best_cert, primal=best_primal.f if best_primal else None,
        primal_value=best_primal.objective if best_primal else None,
        dual_value=best_upper, duality_gap=gap,
        foc_max_violation=foc.max_grid_violation if foc else np.inf,
        iterations=it, status=status)


# -- first-order verifier --------------------------------------------------

@dataclass
class FocReport:
    max_grid_violation: float     # max over grid of l - a.mu (must be <= tol)
    max_support_gap: float        # max |l - a.mu| on supp f
    min_occ_residual: float       # obedience residuals of f
    comp_slackness: float         # |sum dLam G(f)| (= |L(f,Lam) - E_f V|)
    passed: bool
    tol: float


def lagrangian_derivative(gp: GridProblem, cert: DualCertificate) -> np.ndarray:
    """l(mu_i, t_k) tabulated on the belief grid, using the certificate's
    b-increments as the grad-U selections at past conditional means."""
    J = gp.prim.n_times
    lam_lvl = cert.lam[1:]
    dbs = np.diff(cert.b[1:], axis=0)
    past = np.concatenate([np.zeros((1, gp.prim.n_states)),
                           np.cumsum(dbs, axis=0)])   # (J, ns): sum_{j<k} dLam_j beta_j
    return gp.V + gp.U * lam_lvl[None, :] - gp.belief_grid @ past.T


def verify_foc(f: BeliefTimeDistribution, cert: DualCertificate,
               gp: GridProblem, tol: float = 1e-6) -> FocReport:
    """Check the first-order conditions for (f, cert) on the grid.

    Reports the worst violation of l <= a.mu over the whole grid, the worst
    |l - a.mu| on the support of f, the obedience residuals, and
    complementary slackness |sum_j dLam_j G(f)(t_j) + lam0 G_pre(f)|.
    """
    lvals = lagrangian_derivative(gp, cert)
    amu = gp.belief_grid @ cert.a
    grid_violation = float(np.max(lvals - amu[:, None]))

    sup_gap = 0.0
    for mu, t in zip(f.beliefs, f.times):
        i = gp.belief_index(mu)
        k = model.time_index(gp.times, t)
        sup_gap = max(sup_gap, abs(lvals[i, k] - amu[i]))

    occ = model.occ_residuals(f, gp.indirect)
    dlam = cert.lam_increments
    pre = model.participation_residual(f, gp.indirect)
    comp = abs(float(dlam @ occ) + cert.lam[0] * pre)
    passed = (grid_violation <= tol and sup_gap <= tol
              and occ.min(initial=0.0) >= -tol and comp <= tol)
    return FocReport(grid_violation, sup_gap, float(occ.min(initial=0.0)),
                     comp, passed, tol)


# -- time-risk diagnostics --------------------------------------------------

@dataclass
class DiagnosticsReport:
    binding_mask: np.ndarray      # per interior time: OC-C residual <= tol
    t_lo: float                   # earliest support time
    t_hi: float                   # latest support time
    Jbar_V: np.ndarray            # per-step extremal forward time-differences
    Junder_V: np.ndarray
    Jbar_U: np.ndarray
    Junder_U: np.ndarray
    window_bound: float           # grid inversion of the concave-case bound
    window_ok: Optional[bool]     # supp times inside [t_lo, bound] (concave case)
    concave_case: bool            # finite-difference sign test for U'', V'' < 0


def time_risk_diagnostics(gp: GridProblem, f: BeliefTimeDistribution,
                          binding_tol: float = 1e-6) -> DiagnosticsReport:
    """Binding mask and persuasion-window bound from grid finite differences.

    Jbar/Junder are the extremal discrete time-derivatives of V and U over
    the belief grid; the window bound inverts Jbar at the minimal marginal
    delay gain of the earliest support time, the preimage taken as the
    largest grid time whose Jbar still reaches the target.
    """
    times = gp.times
    dt = np.diff(times)
    dV = np.diff(gp.V, axis=1) / dt[None, :]
    dU = np.diff(gp.U, axis=1) / dt[None, :]
    Jbar_V, Jun_V = dV.max(axis=0), dV.min(axis=0)
    Jbar_U, Jun_U = dU.max(axis=0), dU.min(axis=0)

    occ = model.occ_residuals(f, gp.indirect)
    binding = np.abs(occ) <= binding_tol
    t_lo, t_hi = float(f.times.min()), float(f.times.max())
    j_lo = model.time_index(times, t_lo)
    j_ref = min(j_lo, len(dt) - 1)

    def invert(Jbar, target):
        ok = np.flatnonzero(Jbar >= target - 1e-12)
        return times[ok[-1] + 1] if len(ok) else times[0]

    bound = max(invert(Jbar_V, Jun_V[j_ref]), invert(Jbar_U, Jun_U[j_ref]))

    d2V = np.diff(gp.V, axis=1, n=2)
    d2U = np.diff(gp.U, axis=1, n=2)
    concave = bool(np.all(d2V < 1e-12) and np.all(d2U < 1e-12))
    window_ok = bool(t_hi <= bound + 1e-9) if concave else None
    return DiagnosticsReport(binding, t_lo, t_hi, Jbar_V, Jun_V, Jbar_U, Jun_U,
                             float(bound), window_ok, concave)
