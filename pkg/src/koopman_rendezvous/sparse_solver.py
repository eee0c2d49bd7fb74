"""Iteratively reweighted least squares for sparse (l1 or l2/l1) minimum-norm
solutions of underdetermined systems ``C u + beta = z_f``, plus a brute-force
basic-solution oracle for small l1 problems."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)


class ConditioningError(np.linalg.LinAlgError):
    def __init__(self, cond):
        super().__init__(f"weighted KKT system is numerically singular (condition ~ {cond:.3e})")
        self.cond = cond


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class IrlsConfig:
    j_max: int = 100
    eps_bar: float = 1e-6
    ridge_lambda: float | None = None  # None: 1e-10 * trace(C W^-2 C^T) / p
    weight_mode: str = "entrywise"  # or "blockwise"
    m: int = 3
    step_tol: float = 1e-9
    eps_shrink: float = 0.1
    max_iters_per_eps: int = 15  # shrink eps anyway after this many iterations at one level
    paper_exact_formula: bool = False
    polish: bool = True

    def __post_init__(self):
        if self.j_max < 1 or self.eps_bar <= 0:
            raise ValueError("need j_max >= 1 and eps_bar > 0")
        if self.ridge_lambda is not None and self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be non-negative")
        if self.max_iters_per_eps < 1:
            raise ValueError("max_iters_per_eps must be at least 1")
        if self.weight_mode not in ("entrywise", "blockwise"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "IrlsConfig":
        return cls(**(d or {}))


@dataclass
class IrlsResult:
    u: np.ndarray
    converged: bool
    iterations: int
    eps_final: float
    cost_l21: float
    constraint_residual: float
    stop_reason: str = ""
    eps_history: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations, "eps_final": self.eps_final,
                "cost_l21": self.cost_l21, "constraint_residual": self.constraint_residual,
                "stop_reason": self.stop_reason}


def l21_cost(u, m: int = 3) -> float:
    """Sum over blocks of the Euclidean norm of each ``m``-vector."""
    u = np.asarray(u, dtype=float).reshape(-1, m)
    return float(np.sum(np.linalg.norm(u, axis=1)))


def weighted_min_norm(C, b, weights, lam: float = 0.0):
    """Minimise ``||diag(weights) u||^2`` subject to ``C u = b``.

    Closed form ``u = W^-2 C^T (C W^-2 C^T + lam I)^-1 b``.
    """
    C = np.asarray(C, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    d = 1.0 / (w * w)
    G = (C * d) @ C.T
    if lam:
        G[np.diag_indices_from(G)] += lam
    try:
        cf = sla.cho_factor(G, lower=False, check_finite=True)
        y = sla.cho_solve(cf, np.asarray(b, dtype=float))
    except np.linalg.LinAlgError:
        raise ConditioningError(np.linalg.cond(G)) from None
    return d * (C.T @ y)


def _printed_formula(C, beta, weights):
    # the update exactly as printed: Winv (C^T Winv)^T (C^T Winv + I)^-1 (C^T Winv)^T beta;
    # it only type-checks when C is square, which is why it is opt-in
    Winv = np.diag(1.0 / weights)
    M = C.T @ Winv
    return Winv @ M.T @ np.linalg.solve(M + np.eye(M.shape[0]), M.T @ beta)


def _weights(u, eps, mode, m):
    if mode == "blockwise":
        sq = np.repeat(np.sum(u.reshape(-1, m) ** 2, axis=1), m)
    else:
        sq = u * u
    w = (sq + eps * eps) ** -0.25
    return np.minimum(w, 1e30)


def _cost(u, m):
    return l21_cost(u, m) if m > 1 else float(np.sum(np.abs(u)))


def _certified(C, u, m, tol=1e-8):
    """Check the optimality conditions of min sum_b ||u_b|| s.t. C u = const:
    some y has C_b^T y = u_b / ||u_b|| on active blocks and ||C_b^T y|| <= 1
    elsewhere."""
    mags = np.linalg.norm(u.reshape(-1, m), axis=1)
    active = mags > 1e-12 * mags.max()
    cols = np.flatnonzero(np.repeat(active, m))
    g = (u.reshape(-1, m) / np.where(mags > 0, mags, 1.0)[:, None]).ravel()[cols]
    y, *_ = np.linalg.lstsq(C[:, cols].T, g, rcond=None)
    if np.linalg.norm(C[:, cols].T @ y - g) > tol * max(1.0, np.linalg.norm(g)):
        return False
    inactive = np.linalg.norm((C.T @ y).reshape(-1, m), axis=1)[~active]
    return bool(np.all(inactive <= 1.0 + tol))


def _polish(C, rhs, u, m, need_certificate=False):
    """Re-solve on the dominant support of ``u``.

    Returns the restricted least-squares solution when it is feasible and no
    more expensive than ``u`` (and, if asked, provably optimal), else None.
    """
    p = C.shape[0]
    mags = np.linalg.norm(u.reshape(-1, m), axis=1)
    if not mags.max() > 0:
        return None
    order = np.argsort(-mags, kind="stable")
    sizes = sorted({-(-p // m), int(np.sum(mags > 1e-6 * mags.max()))})
    best, best_cost = None, _cost(u, m)
    tol = 1e-9 * max(np.linalg.norm(rhs), 1e-300)
    for k in sizes:
        if k * m < p or k > len(mags):
            continue
        blocks = np.sort(order[:k])
        cols = (blocks[:, None] * m + np.arange(m)).ravel()
        sol, *_ = np.linalg.lstsq(C[:, cols], rhs, rcond=None)
        cand = np.zeros_like(u)
        cand[cols] = sol
        if np.linalg.norm(C @ cand - rhs) > tol or _cost(cand, m) > best_cost:
            continue
        if need_certificate and not _certified(C, cand, m):
            continue
        best, best_cost = cand, _cost(cand, m)
    return best


def _pivot_l1(C, rhs, u, max_pivots=100):
    """Finish an l1 iterate with exact pivots guided by the dual certificate.

    First slide along null directions of the active columns (cost is linear
    there) until ``u`` is an extreme point, then bring in any column whose
    multiplier violates ``|c_j^T y| <= 1`` and ratio-test a column out. Each
    move keeps ``C u = rhs`` and never raises the l1 cost.
    """
    u = u.copy()
    tol = 1e-12
    for _ in range(max_pivots):
        top = np.max(np.abs(u))
        if not top > 0:
            return u
        u[np.abs(u) <= 1e-12 * top] = 0.0
        S = np.flatnonzero(u)
        sgn = np.sign(u[S])
        CS = C[:, S]
        _, sv, Vt = np.linalg.svd(CS)
        rank = int(np.sum(sv > 1e-10 * sv[0]))
        if rank < len(S):
            d = Vt[-1]
            if sgn @ d > 0:
                d = -d
            ratios = np.where(u[S] * d < 0, -u[S] / np.where(d == 0, 1.0, d), np.inf)
            i = int(np.argmin(ratios))
            u[S] += ratios[i] * d
            u[S[i]] = 0.0
            continue
        y, *_ = np.linalg.lstsq(CS.T, sgn, rcond=None)
        r = C.T @ y
        r[S] = 0.0
        j = int(np.argmax(np.abs(r)))
        if abs(r[j]) <= 1.0 + 1e-9:
            return u
        sigma = np.sign(r[j])
        dS, *_ = np.linalg.lstsq(CS, -sigma * C[:, j], rcond=None)
        if np.linalg.norm(CS @ dS + sigma * C[:, j]) > 1e-9 * np.linalg.norm(C[:, j]):
            return u  # degenerate basis, leave it
        ratios = np.where(u[S] * dS < -tol * np.abs(dS), -u[S] / np.where(dS == 0, 1.0, dS), np.inf)
        i = int(np.argmin(ratios))
        t = ratios[i]
        if not np.isfinite(t):
            return u
        u[S] += t * dS
        u[j] = sigma * t
        u[S[i]] = 0.0
    return u


def irls_solve(C, beta, z_f, config: IrlsConfig | None = None) -> IrlsResult:
    """Sparse minimum-norm solution of ``C u + beta = z_f`` by IRLS.

    Weights start at one and the smoothing ``eps`` at one, measured in units
    of the largest entry of the minimum-l2 solution.  After every weighted
    solve ``eps <- min(eps, ||u||_inf)``, and once the iterate stalls at the
    current smoothing (relative change below ``sqrt(eps)/100``) or has spent
    ``max_iters_per_eps`` iterations at it, eps is shrunk by ``eps_shrink``.  Stops with success when eps reaches ``eps_bar``, the
    iterate change drops below ``step_tol``, or (with ``polish``) the
    re-solve on the dominant support passes the dual optimality check.
    On ``j_max`` the last iterate is returned with ``converged=False``.
    """
    cfg = config or IrlsConfig()
    C = np.asarray(C, dtype=float)
    beta = np.asarray(beta, dtype=float)
    rhs = np.asarray(z_f, dtype=float) - beta
    p, n = C.shape
    if cfg.weight_mode == "blockwise" and n % cfg.m:
        raise ValueError(f"{n} columns do not split into blocks of {cfg.m}")
    if not np.all(np.isfinite(C)):
        raise ValueError("C has non-finite entries")
    pm = cfg.m if cfg.weight_mode == "blockwise" else 1

    def solve(w):
        if cfg.paper_exact_formula:
            return _printed_formula(C, rhs, w)
        lam = cfg.ridge_lambda
        if lam is None:
            d = 1.0 / (w * w)
            lam = 1e-10 * float(np.einsum("ij,j,ij->", C, d, C)) / p
        return weighted_min_norm(C, rhs, w, lam)

    u = solve(np.ones(n))
    scale = float(np.max(np.abs(u)))
    rhs_norm = float(np.linalg.norm(rhs))
    if scale == 0.0:
        return IrlsResult(u, True, 1, 0.0, 0.0, float(np.linalg.norm(C @ u - rhs)), "zero solution", [0.0])

    eps = 1.0
    at_level = 0
    history = []
    converged = False
    reason = "j_max reached"
    j = 1
    while True:
        eps = min(eps, float(np.max(np.abs(u))) / scale)
        history.append(eps * scale)
        if eps <= cfg.eps_bar:
            converged, reason = True, "eps below eps_bar"
            break
        if j >= cfg.j_max:
            break
        w = _weights(u / scale, eps, cfg.weight_mode, cfg.m)
        u_new = solve(w)
        j += 1
        change = float(np.linalg.norm(u_new - u) / max(np.linalg.norm(u_new), 1e-300))
        u = u_new
        if change < cfg.step_tol:
            converged, reason = True, "iterate change below step_tol"
            log.info("IRLS stopped on iterate change at eps=%.3e", eps)
            break
        if cfg.polish and eps < 1e-2:
            found = _polish(C, rhs, u, pm, need_certificate=True)
            if found is not None:
                u = found
                converged, reason = True, "optimal support certified"
                break
        at_level += 1
        if change < math.sqrt(eps) / 100.0 or at_level >= cfg.max_iters_per_eps:
            eps *= cfg.eps_shrink
            at_level = 0
    if cfg.polish and not reason.startswith("optimal"):
        found = _polish(C, rhs, u, pm)
        if found is not None:
            u = found
            if not converged and _certified(C, u, pm):
                converged, reason = True, "optimal support certified at exit"
    if cfg.polish and pm == 1 and not _certified(C, u, pm):
        cand = _pivot_l1(C, rhs, u)
        if (np.linalg.norm(C @ cand - rhs) <= 1e-9 * max(rhs_norm, 1e-300)
                and _cost(cand, 1) <= _cost(u, 1) * (1 + 1e-12)):
            u = cand
            if _certified(C, u, pm):
                converged, reason = True, "optimal vertex reached by pivoting"
    res = float(np.linalg.norm(C @ u - rhs))
    if rhs_norm and res > 1e-6 * rhs_norm:
        log.warning("IRLS constraint residual %.3e (relative %.3e)", res, res / rhs_norm)
    m = cfg.m if n % cfg.m == 0 else 1
    return IrlsResult(u, converged, j, eps * scale, l21_cost(u, m), res, reason, history)


def l1_oracle(C, b, tol: float = 1e-10):
    """Exact minimum-l1 solution of ``C u = b`` by enumerating basic solutions.

    Only for small problems (at most 12 unknowns); C must have full row rank.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    p, n = C.shape
    if n > 12:
        raise ValueError("l1_oracle is limited to n <= 12")
    if np.linalg.matrix_rank(C) < p:
        raise ValueError("C must have full row rank")
    best, best_cost = None, math.inf
    for cols in itertools.combinations(range(n), p):
        sub = C[:, cols]
        if abs(np.linalg.det(sub)) < tol * max(1.0, np.abs(sub).max() ** p):
            continue
        xs = np.linalg.solve(sub, b)
        if np.linalg.norm(sub @ xs - b) > 1e-9 * max(1.0, np.linalg.norm(b)):
            continue
        cost = float(np.sum(np.abs(xs)))
        if cost < best_cost - tol:
            best_cost = cost
            best = np.zeros(n)
            best[list(cols)] = xs
    if best is None:
        raise InfeasibleError("no feasible basic solution")
    return best
