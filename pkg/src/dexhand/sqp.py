"""Dense SQP solver: damped-BFGS outer loop with an l1 merit line search, and
a Goldfarb-Idnani dual active-set QP for the subproblem.

Conventions: inequalities g(x) >= 0, equalities h(x) = 0, box bounds on x.
Problem sizes here are tens of variables, so everything is dense.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

CONVERGED = "converged"
MAX_ITER = "max-iter"
INFEASIBLE_QP = "infeasible-qp"
NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class NlpProblem:
    n: int
    objective: Callable  # x -> (f, grad)
    equalities: Optional[Callable] = None    # x -> (h, Jh)
    inequalities: Optional[Callable] = None  # x -> (g, Jg)
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    hessian0: Optional[Callable] = None      # x -> B0 seed for damped BFGS

    def bounds(self):
        lb = np.full(self.n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        ub = np.full(self.n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        if np.any(lb > ub):
            raise ValueError("bounds must satisfy lb <= ub")
        return lb, ub


@dataclass
class SqpSettings:
    max_iter: int = 100
    kkt_tol: float = 1e-8
    feas_tol: float = 1e-8
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_linesearch: int = 30
    penalty_init: float = 1.0
    penalty_margin: float = 2.0
    hessian_floor: float = 1e-8
    # reseed the BFGS matrix from problem.hessian0 every k iterations
    # (0 = never); used by retargeting where the Gauss-Newton model is cheap
    hessian_refresh: int = 0
    keep_trace: bool = False

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.feas_tol <= 0:
            raise ValueError("tolerances must be > 0")


@dataclass
class SqpResult:
    x: np.ndarray
    status: str
    kkt_residual: float
    constraint_violation: float
    iterations: int
    f: float = 0.0
    lam_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trace: list = field(default_factory=list)


class QpInfeasibleError(RuntimeError):
    pass


def _chol_regularized(H, floor):
    """Cholesky of H with the smallest diagonal shift that makes it PD."""
    H = 0.5 * (H + H.T)
    shift = 0.0
    for _ in range(40):
        try:
            L = np.linalg.cholesky(H + shift * np.eye(H.shape[0]))
            return L, shift
        except np.linalg.LinAlgError:
            shift = max(floor, 2.0 * shift, 1e-12 * max(1.0, np.abs(H).max()))
            shift *= 2.0
    raise QpInfeasibleError("Hessian could not be regularized")


def solve_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None,
             lb=None, ub=None, tol=1e-11):
    """min 1/2 x'Hx + g'x  s.t.  A_eq x = b_eq,  A_in x >= b_in,  lb<=x<=ub.

    Dual active-set method (Goldfarb-Idnani). H is symmetrized and shifted
    to positive definite if needed. Returns (x, info) where info carries the
    active set and multipliers; raises QpInfeasibleError when no feasible
    point exists.
    """
    g = np.asarray(g, float)
    n = g.size
    H = np.asarray(H, float)
    rows, rhs, kinds = [], [], []  # kinds: 'eq', 'in', 'lb', 'ub'
    tags = []
    if A_eq is not None and len(A_eq):
        for i, (a, b) in enumerate(zip(np.atleast_2d(A_eq), np.atleast_1d(b_eq))):
            rows.append(np.asarray(a, float)); rhs.append(float(b))
            kinds.append("eq"); tags.append(("eq", i))
    if A_in is not None and len(A_in):
        for i, (a, b) in enumerate(zip(np.atleast_2d(A_in), np.atleast_1d(b_in))):
            rows.append(np.asarray(a, float)); rhs.append(float(b))
            kinds.append("in"); tags.append(("in", i))
    if lb is not None:
        for i, b in enumerate(np.asarray(lb, float)):
            if np.isfinite(b):
                e = np.zeros(n); e[i] = 1.0
                rows.append(e); rhs.append(float(b)); kinds.append("in")
                tags.append(("lb", i))
    if ub is not None:
        for i, b in enumerate(np.asarray(ub, float)):
            if np.isfinite(b):
                e = np.zeros(n); e[i] = -1.0
                rows.append(e); rhs.append(-float(b)); kinds.append("in")
                tags.append(("ub", i))

    L, shift = _chol_regularized(H, 1e-10)
    Hreg = H + shift * np.eye(n) if shift else H

    def hsolve(v):
        return np.linalg.solve(Hreg, v)

    x = -hsolve(g)
    active: list = []       # indices into rows
    u = np.zeros(0)         # multipliers for active constraints
    flip = {}               # equality rows engaged with flipped sign

    m = len(rows)
    C = np.array(rows) if m else np.zeros((0, n))
    d = np.array(rhs) if m else np.zeros(0)

    max_pivots = 50 * (m + n + 1)
    scale = np.maximum(1.0, np.linalg.norm(C, axis=1)) if m else np.zeros(0)
    is_eq = np.array([k == "eq" for k in kinds]) if m else np.zeros(0, bool)
    for _ in range(max_pivots):
        if m:
            s = (C @ x - d) / scale
            v = np.where(is_eq, -np.abs(s), s)
            if active:
                v[np.array(active)] = 0.0
            p = int(np.argmin(v))
            if v[p] >= -tol:
                break  # all satisfied: optimal
            s = s * scale
        else:
            break
        sign = 1.0
        if kinds[p] == "eq" and s[p] > 0:
            sign = -1.0
        npvec = sign * C[p]
        sp = sign * s[p]
        up = 0.0
        while True:
            if active:
                N = C[active] * np.array([-1.0 if flip.get(k) else 1.0 for k in active])[:, None]
                HiN = np.linalg.solve(Hreg, N.T)
                M = N @ HiN
                r = np.linalg.solve(M, N @ hsolve(npvec))
                z = hsolve(npvec) - HiN @ r
            else:
                r = np.zeros(0)
                z = hsolve(npvec)
            t1 = np.inf
            k1 = -1
            for idx, k in enumerate(active):
                if kinds[k] == "in" and r[idx] > tol:
                    cand = u[idx] / r[idx]
                    if cand < t1:
                        t1, k1 = cand, idx
            zn = float(z @ npvec)
            t2 = (-sp) / zn if zn > tol else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QpInfeasibleError("QP has no feasible point")
            if np.isfinite(t2):
                x = x + t * z
                sp = sp + t * zn
            u = u - t * r
            up += t
            if t == t2 and np.isfinite(t2):
                active.append(p)
                flip[p] = sign < 0
                u = np.append(u, up)
                break
            # partial step: drop blocking constraint and continue
            drop = active.pop(k1)
            flip.pop(drop, None)
            u = np.delete(u, k1)
    else:
        raise QpInfeasibleError("QP pivot limit exceeded")

    lam_eq = np.zeros(sum(1 for k in kinds if k == "eq"))
    mu = {}
    for idx, k in enumerate(active):
        tag, i = tags[k]
        val = u[idx] * (-1.0 if flip.get(k) else 1.0)
        if tag == "eq":
            lam_eq[i] = val
        else:
            mu[(tag, i)] = u[idx]
    info = {
        "active": [tags[k] for k in active],
        "lam_eq": lam_eq,
        "mu": mu,
        "shift": shift,
    }
    return x, info


def _eval(problem: NlpProblem, x):
    f, gf = problem.objective(x)
    if problem.equalities is not None:
        h, Jh = problem.equalities(x)
        h = np.atleast_1d(np.asarray(h, float))
        Jh = np.atleast_2d(np.asarray(Jh, float))
    else:
        h, Jh = np.zeros(0), np.zeros((0, problem.n))
    if problem.inequalities is not None:
        gi, Jg = problem.inequalities(x)
        gi = np.atleast_1d(np.asarray(gi, float))
        Jg = np.atleast_2d(np.asarray(Jg, float))
    else:
        gi, Jg = np.zeros(0), np.zeros((0, problem.n))
    return float(f), np.asarray(gf, float), h, Jh, gi, Jg


def _merit(f, h, gi, pen):
    return f + pen * (np.abs(h).sum() + np.maximum(0.0, -gi).sum())


def solve(problem: NlpProblem, x0, settings: SqpSettings = None) -> SqpResult:
    st = settings or SqpSettings()
    lb, ub = problem.bounds()
    x = np.clip(np.asarray(x0, float).copy(), lb, ub)
    n = problem.n
    if problem.hessian0 is not None:
        B = 0.5 * (problem.hessian0(x) + problem.hessian0(x).T)
        B = B + st.hessian_floor * np.eye(n)
    else:
        B = np.eye(n)
    lam = None
    mu_full = None
    mu_lb = np.zeros(n)
    mu_ub = np.zeros(n)
    pen = st.penalty_init
    status = MAX_ITER
    trace = []
    reset_used = False

    f, gf, h, Jh, gi, Jg = _eval(problem, x)
    if lam is None:
        lam = np.zeros(h.size)
        mu_full = np.zeros(gi.size)
    it = 0
    kkt = np.inf
    viol = np.inf
    for it in range(1, st.max_iter + 1):
        if not (np.isfinite(f) and np.all(np.isfinite(gf))):
            status = NUMERICAL_FAILURE
            break
        if (st.hessian_refresh and problem.hessian0 is not None
                and (it - 1) % st.hessian_refresh == 0):
            B = problem.hessian0(x)
            B = 0.5 * (B + B.T) + st.hessian_floor * np.eye(n)
        gL = gf.copy()
        if h.size:
            gL += Jh.T @ lam
        if gi.size:
            gL -= Jg.T @ mu_full
        gL -= mu_lb
        gL += mu_ub
        kkt = float(np.abs(gL).max()) if n else 0.0
        viol = 0.0
        if h.size:
            viol = max(viol, float(np.abs(h).max()))
        if gi.size:
            viol = max(viol, float(np.maximum(0.0, -gi).max()))
        comp = float(np.abs(mu_full * gi).max()) if gi.size else 0.0
        if kkt <= st.kkt_tol and viol <= st.feas_tol and comp <= max(st.kkt_tol, 1e-6):
            status = CONVERGED
            break
        try:
            d, info = solve_qp(B, gf,
                               A_eq=Jh if h.size else None,
                               b_eq=-h if h.size else None,
                               A_in=Jg if gi.size else None,
                               b_in=-gi if gi.size else None,
                               lb=lb - x, ub=ub - x)
        except QpInfeasibleError:
            d, info = _elastic_qp(B, gf, h, Jh, gi, Jg, lb - x, ub - x)
            if d is None:
                status = INFEASIBLE_QP
                break
        # QP reports lam with Hd+g = Je'lam; NLP stationarity uses +Je'lam
        lam = -info["lam_eq"]
        mu_full = np.zeros(gi.size)
        mu_lb = np.zeros(n)
        mu_ub = np.zeros(n)
        for (tag, i), val in ((k, v) for k, v in info["mu"].items()):
            if tag == "in":
                mu_full[i] = val
            elif tag == "lb":
                mu_lb[i] = val
            elif tag == "ub":
                mu_ub[i] = val
        step_norm = float(np.linalg.norm(d))
        mult_inf = max(
            float(np.abs(lam).max()) if lam.size else 0.0,
            float(mu_full.max()) if mu_full.size else 0.0,
            float(mu_lb.max()) if n else 0.0,
            float(mu_ub.max()) if n else 0.0)
        pen = max(pen, st.penalty_margin * mult_inf, 1e-2)

        phi0 = _merit(f, h, gi, pen)
        dderiv = float(gf @ d) - pen * (np.abs(h).sum() + np.maximum(0.0, -gi).sum())
        alpha = 1.0
        accepted = False
        for _ in range(st.max_linesearch):
            xn = np.clip(x + alpha * d, lb, ub)
            fn, gfn, hn, Jhn, gin, Jgn = _eval(problem, xn)
            if np.isfinite(fn) and _merit(fn, hn, gin, pen) <= phi0 + st.armijo * alpha * min(dderiv, 0.0):
                accepted = True
                break
            alpha *= st.backtrack
        if st.keep_trace:
            trace.append((it, f, viol, alpha * step_norm, kkt))
        if not accepted:
            if not reset_used:
                if problem.hessian0 is not None:
                    B = 0.5 * (problem.hessian0(x) + problem.hessian0(x).T)
                    B = B + st.hessian_floor * np.eye(n)
                else:
                    B = np.eye(n)
                reset_used = True
                continue
            status = MAX_ITER if step_norm > st.kkt_tol else CONVERGED
            if status == CONVERGED and (kkt > st.kkt_tol or viol > st.feas_tol):
                status = MAX_ITER
            break
        # damped BFGS on the Lagrangian
        s = xn - x
        gLn = gfn.copy()
        if hn.size:
            gLn += Jhn.T @ lam
        if gin.size:
            gLn -= Jgn.T @ mu_full
        gLn -= mu_lb
        gLn += mu_ub
        gL_at_x = gf.copy()
        if h.size:
            gL_at_x += Jh.T @ lam
        if gi.size:
            gL_at_x -= Jg.T @ mu_full
        gL_at_x -= mu_lb
        gL_at_x += mu_ub
        y = gLn - gL_at_x
        sBs = float(s @ B @ s)
        sy = float(s @ y)
        if sBs > 1e-16:
            if sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1.0 - theta) * (B @ s)
                sy = float(s @ y)
            if sy > 1e-16:
                Bs = B @ s
                B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
                B = 0.5 * (B + B.T)
        x, f, gf, h, Jh, gi, Jg = xn, fn, gfn, hn, Jhn, gin, Jgn

    return SqpResult(x=x, status=status, kkt_residual=kkt,
                     constraint_violation=viol, iterations=it, f=f,
                     lam_eq=lam if lam is not None else np.zeros(0),
                     mu_in=mu_full if mu_full is not None else np.zeros(0),
                     trace=trace)


def _elastic_qp(B, gf, h, Jh, gi, Jg, dlb, dub, rho=1e6):
    """Relax inequalities with penalized slacks when the plain QP is
    infeasible. Equalities stay hard; returns (None, None) if still stuck."""
    n = gf.size
    mi = gi.size
    if mi == 0:
        return None, None
    ne = n + mi
    He = np.zeros((ne, ne))
    He[:n, :n] = B
    He[n:, n:] = 1e-4 * np.eye(mi)
    ge = np.concatenate([gf, rho * np.ones(mi)])
    A_in = np.hstack([Jg, np.eye(mi)])
    lb = np.concatenate([dlb, np.zeros(mi)])
    ub = np.concatenate([dub, np.full(mi, np.inf)])
    try:
        z, info = solve_qp(He, ge,
                           A_eq=np.hstack([Jh, np.zeros((h.size, mi))]) if h.size else None,
                           b_eq=-h if h.size else None,
                           A_in=A_in, b_in=-gi, lb=lb, ub=ub)
    except QpInfeasibleError:
        return None, None
    d = z[:n]
    mu = {}
    for (tag, i), val in info["mu"].items():
        if tag == "in" and i < mi:
            mu[("in", i)] = val
        elif tag == "lb" and i < n:
            mu[("lb", i)] = val
        elif tag == "ub" and i < n:
            mu[("ub", i)] = val
    info2 = {"active": info["active"], "lam_eq": info["lam_eq"], "mu": mu,
             "shift": info.get("shift", 0.0), "relaxed": True}
    return d, info2


def write_trace(trace, fh):
    """Line-delimited iteration records: iter f viol step kkt."""
    for it, f, viol, step, kkt in trace:
        fh.write(f"{it} {f:.9g} {viol:.9g} {step:.9g} {kkt:.9g}\n")
