"""Rate functions: control action, explicit formulas and their minimization.

Controls are the optimization variables. The objective

    J(f) = 1/2 sum_k |f_k|^2 dt + G(Gamma_x(f))

is differentiated by the discrete adjoint of the Euler recursion, and
minimized with L-BFGS in the scaled variables u_k = f_k sqrt(dt), where
the action is simply |u|^2 / 2. Terminal constraints are enforced by a
quadratic penalty with a geometric schedule.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from . import rng
from .models import Model, Segment, TimeGrid, initial_point
from .simulate import Control, StatePath, _bind_segment, integrate

CONSTRAINTS = ("point", "halfspace", "ball", "sup")
COSTS = ("cost", "constant")


class ConvergenceWarning(UserWarning):
    pass


@dataclass(eq=False)
class PathFunctional:
    """Terminal constraint or bounded terminal cost.

    kinds: ``point`` (phi_T = z), ``halfspace`` (phi_T[coord] >= z),
    ``ball`` (|phi_T - z| <= radius), ``sup`` (max_t phi_t[coord] >= z),
    ``cost`` (g(phi_T[coord]) with g piecewise linear through ``table``,
    constant beyond the end knots) and ``constant`` (c).
    """

    kind: str
    z: Optional[object] = None
    coord: int = 0
    radius: float = 0.0
    table: Optional[tuple] = None
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in CONSTRAINTS + COSTS:
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind in CONSTRAINTS and self.z is None:
            raise ValueError(f"{self.kind} functional needs a target z")
        if self.kind == "cost":
            knots, vals = (np.asarray(a, dtype=float) for a in self.table)
            if knots.ndim != 1 or knots.shape != vals.shape or len(knots) < 2 or np.any(np.diff(knots) <= 0):
                raise ValueError("cost table needs >= 2 strictly increasing knots with matching values")
            self.table = (knots, vals)

    @classmethod
    def point(cls, z):
        return cls("point", np.atleast_1d(np.asarray(z, dtype=float)))

    @classmethod
    def halfspace(cls, z, coord=0):
        return cls("halfspace", float(z), coord)

    @classmethod
    def ball(cls, z, radius):
        return cls("ball", np.atleast_1d(np.asarray(z, dtype=float)), radius=float(radius))

    @classmethod
    def sup(cls, z, coord=0):
        return cls("sup", float(z), coord)

    @classmethod
    def table_cost(cls, knots, values, coord=0):
        return cls("cost", coord=coord, table=(knots, values))

    @classmethod
    def constant(cls, c):
        return cls("constant", c=float(c))

    @property
    def is_constraint(self) -> bool:
        return self.kind in CONSTRAINTS

    @property
    def bound(self) -> float:
        if self.kind == "cost":
            return float(np.max(np.abs(self.table[1])))
        return abs(self.c) if self.kind == "constant" else math.inf

    # -- constraints: squared distance to the feasible set and its gradient
    def penalty(self, phi: np.ndarray):
        grad = np.zeros_like(phi)
        if self.kind == "point":
            r = phi[-1] - self.z
            grad[-1] = 2 * r
            return float(r @ r), grad
        if self.kind == "halfspace":
            gap = max(0.0, self.z - phi[-1, self.coord])
            grad[-1, self.coord] = -2 * gap
            return gap * gap, grad
        if self.kind == "ball":
            r = phi[-1] - self.z
            dist = float(np.linalg.norm(r))
            gap = max(0.0, dist - self.radius)
            if gap > 0:
                grad[-1] = 2 * gap * r / dist
            return gap * gap, grad
        if self.kind == "sup":
            k = int(np.argmax(phi[:, self.coord]))
            gap = max(0.0, self.z - phi[k, self.coord])
            grad[k, self.coord] = -2 * gap
            return gap * gap, grad
        raise TypeError(f"{self.kind} is not a constraint")

    def violation(self, phi: np.ndarray) -> float:
        return math.sqrt(self.penalty(phi)[0])

    # -- costs: F(phi) and its gradient
    def terminal_values(self, x: np.ndarray) -> np.ndarray:
        """F evaluated on terminal states of shape (batch, d)."""
        if self.kind == "constant":
            return np.full(x.shape[0], self.c)
        if self.kind == "cost":
            knots, vals = self.table
            return np.interp(x[:, self.coord], knots, vals)
        raise TypeError(f"{self.kind} is not a cost")

    def cost(self, phi: np.ndarray):
        grad = np.zeros_like(phi)
        if self.kind == "constant":
            return self.c, grad
        knots, vals = self.table
        z = phi[-1, self.coord]
        value = float(np.interp(z, knots, vals))
        if knots[0] <= z < knots[-1]:
            i = int(np.searchsorted(knots, z, side="right")) - 1
            grad[-1, self.coord] = (vals[i + 1] - vals[i]) / (knots[i + 1] - knots[i])
        return value, grad

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.z is not None:
            out["z"] = np.asarray(self.z).tolist()
        if self.kind in ("halfspace", "sup", "cost"):
            out["coord"] = self.coord
        if self.kind == "ball":
            out["radius"] = self.radius
        if self.kind == "cost":
            out["table"] = [self.table[0].tolist(), self.table[1].tolist()]
        if self.kind == "constant":
            out["c"] = self.c
        return out


@dataclass(eq=False)
class ActionSolution:
    control: Control
    path: StatePath
    value: float  # I* = 1/2 ||f*||^2
    objective: float  # J* = I* + F(phi*) for costs, I* for constraints
    gradient_norm: float
    iterations: int
    converged: bool
    feasible: bool = True
    violation: float = 0.0
    restarts: int = 1
    upper_bound: bool = True
    penalty_weight: Optional[float] = None

    @property
    def flags(self) -> list:
        out = []
        if not self.converged:
            out.append("not_converged")
        if not self.feasible:
            out.append("infeasible")
        return out

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "objective": self.objective,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
            "restarts": self.restarts,
            "converged": self.converged,
            "feasible": self.feasible,
            "violation": self.violation,
            "value_is_upper_bound": self.upper_bound,
            "flags": self.flags,
            "control": self.control.values.tolist(),
            "path": self.path.values.tolist(),
        }

    def to_csv(self) -> str:
        from .skeleton import SkeletonSolution, skeleton_csv
        return skeleton_csv(SkeletonSolution(self.control, self.path, float("nan")))


def action_of_control(f: Control) -> float:
    return 0.5 * f.norm_sq


def rate_explicit(path: StatePath, model: Model, x0=None, min_dispersion: float = 1e-10) -> float:
    """1/2 int (phi' - b)^T (sigma sigma^T)^{-1} (phi' - b) dt with forward differences.

    Returns ``math.inf`` when the path does not start at ``x0``.
    """
    grid = path.grid
    phi = np.asarray(path.values, dtype=float)
    if x0 is not None and not np.allclose(phi[0], np.atleast_1d(x0), rtol=0, atol=1e-12):
        return math.inf
    if model.d != model.m:
        raise ValueError("explicit rate needs a square dispersion")
    buf = phi[None]
    dt = grid.dt
    total = 0.0
    for k in range(grid.n_steps):
        b = model.drift(grid, k, buf)[0]
        s = model.dispersion(grid, k, buf)[0]
        a = s @ s.T
        if np.min(np.abs(np.linalg.eigvalsh(a))) < min_dispersion ** 2:
            raise ValueError(f"dispersion degenerate along the path at t={grid.nodes[k]:.6g}")
        r = (phi[k + 1] - phi[k]) / dt - b
        total += float(r @ np.linalg.solve(a, r)) * dt
    return 0.5 * total


# ---------------------------------------------------------------- adjoint

def objective(model: Model, grid: TimeGrid, x0: np.ndarray, f: np.ndarray, terminal):
    """J(f) = 1/2 ||f||^2 + G(phi) and dJ/df via the discrete adjoint.

    ``terminal(phi)`` returns ``(G, dG/dphi)`` with dG/dphi of shape (n+1, d).
    Returns ``(J, grad, phi, G)``.
    """
    n, dt = grid.n_steps, grid.dt
    paths, bad = integrate(model, grid, x0[None], 0.0, f)
    if bad[0] >= 0:
        return math.inf, np.zeros_like(f), paths[0], math.inf
    phi = paths[0]
    G, lam = terminal(phi)
    lam = np.array(lam, dtype=float)
    sigma, parts = model.linearize(grid, phi)
    # per-step transition Jacobians (b_x + sigma_x f) dt for each lag
    trans = {lag: np.swapaxes((Jb + np.einsum("kimj,km->kij", Js, f)) * dt, 1, 2)
             for lag, (Jb, Js) in parts.items()}
    lags = sorted(trans)
    for k in range(n - 1, -1, -1):
        nxt = lam[k + 1]
        lam[k] += nxt
        for lag in lags:
            j = k - lag
            if j >= 0:
                lam[j] += trans[lag][k] @ nxt
    grad = f * dt + np.einsum("kij,ki->kj", sigma, lam[1:]) * dt
    J = 0.5 * float(np.sum(f * f)) * dt + G
    return J, grad, phi, G


def _penalty_terminal(functional, mu):
    def terminal(phi):
        p, g = functional.penalty(phi)
        return mu * p, mu * g
    return terminal


def gradient_check(model, grid, init, f: np.ndarray, terminal, h: float = 1e-6) -> float:
    """Relative L2 error between adjoint and central finite-difference gradients."""
    model = _bind_segment(model, init)
    x0 = initial_point(init, model.d)
    _, g, _, _ = objective(model, grid, x0, f, terminal)
    fd = np.zeros_like(f)
    for idx in np.ndindex(f.shape):
        fp, fm = f.copy(), f.copy()
        fp[idx] += h
        fm[idx] -= h
        fd[idx] = (objective(model, grid, x0, fp, terminal)[0] - objective(model, grid, x0, fm, terminal)[0]) / (2 * h)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))


def _lbfgs(model, grid, x0, terminal, f0, tol, max_iter):
    n, m = f0.shape
    scale = math.sqrt(grid.dt)
    count = {"nfev": 0}

    def fun(u):
        count["nfev"] += 1
        J, g, _, _ = objective(model, grid, x0, u.reshape(n, m) / scale, terminal)
        return J, (g / scale).ravel()

    res = optimize.minimize(fun, (f0 * scale).ravel(), jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "maxcor": 20, "ftol": 1e-16,
                                     "gtol": tol / math.sqrt(n * m), "maxls": 50})
    f = res.x.reshape(n, m) / scale
    J, g, phi, G = objective(model, grid, x0, f, terminal)
    gnorm = float(np.linalg.norm(g / scale))
    return f, J, gnorm, int(res.nit), phi, G


def _restart_guess(grid, m, seed, index, scale):
    if index == 0:
        return np.zeros((grid.n_steps, m))
    g = rng.generator(seed, index, rng.RESTART)
    # smooth random start: a few low-frequency modes
    t = grid.nodes[:-1] / grid.T
    modes = np.arange(4)
    coef = g.standard_normal((len(modes), m)) * scale
    return np.cos(np.pi * np.outer(t, modes)) @ coef


def min_action(model: Model, grid: TimeGrid, init, functional: PathFunctional, N_cap: Optional[float] = None,
               tol: float = 1e-6, constraint_tol: float = 1e-4, restarts: int = 1, seed: int = 0,
               max_iter: int = 2000, mu0: float = 1.0, mu_factor: float = 10.0, max_stages: int = 6,
               f0: Optional[np.ndarray] = None) -> ActionSolution:
    """Minimize the control action subject to a terminal constraint, or plus a cost."""
    model = _bind_segment(model, init)
    x0 = initial_point(init, model.d)
    best = None
    for r in range(max(1, restarts)):
        guess = f0 if (f0 is not None and r == 0) else _restart_guess(grid, model.m, seed, r, 1.0)
        sol = _solve_once(model, grid, x0, functional, N_cap, tol, constraint_tol, max_iter,
                          mu0, mu_factor, max_stages, np.array(guess, dtype=float))
        key = (not sol.feasible, sol.objective)
        if best is None or key < (not best.feasible, best.objective):
            best = sol
    best.restarts = max(1, restarts)
    seg = init if isinstance(init, Segment) else None
    best.path.segment = seg
    return best


def _solve_once(model, grid, x0, functional, N_cap, tol, constraint_tol, max_iter, mu0, mu_factor,
                max_stages, f):
    nit_total = 0
    if functional.is_constraint:
        mu = mu0
        for _ in range(max_stages):
            f, J, gnorm, nit, phi, G = _lbfgs(model, grid, x0, _penalty_terminal(functional, mu), f, tol, max_iter)
            nit_total += nit
            viol = functional.violation(phi)
            if viol < constraint_tol:
                break
            mu *= mu_factor
        I = 0.5 * float(np.sum(f * f)) * grid.dt
        feasible = viol < constraint_tol
        objective_value = I
        weight = mu
    else:
        def terminal(phi):
            return functional.cost(phi)
        f, J, gnorm, nit, phi, G = _lbfgs(model, grid, x0, terminal, f, tol, max_iter)
        nit_total = nit
        I = 0.5 * float(np.sum(f * f)) * grid.dt
        viol, feasible, objective_value, weight = 0.0, True, J, None
    if N_cap is not None and 2 * I > N_cap * (1 + 1e-9):
        feasible = False
    control = Control(grid, f)
    return ActionSolution(control, StatePath(grid, phi, 0.0), I, objective_value, gnorm, nit_total,
                          gnorm < tol, feasible, viol, penalty_weight=weight)


def laplace_minimizer(model, grid, init, F: PathFunctional, tol=1e-6, restarts=8, seed=0,
                      max_iter=2000) -> ActionSolution:
    """Best local minimizer of 1/2 ||f||^2 + F(Gamma_x(f)) over restarts (f = 0 first)."""
    if F.is_constraint:
        raise ValueError("Laplace infimum needs a bounded cost functional")
    return min_action(model, grid, init, F, None, tol, restarts=restarts, seed=seed, max_iter=max_iter)


def laplace_infimum(model, grid, init, F: PathFunctional, tol=1e-6, restarts=8, seed=0) -> float:
    """inf_phi { I_x(phi) + F(phi) } over piecewise-constant controls (an upper bound)."""
    return laplace_minimizer(model, grid, init, F, tol, restarts, seed).objective
