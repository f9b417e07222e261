"""Deterministic limit: the controlled skeleton map and its diagnostics."""

import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate as quad_integrate
from scipy import optimize

from .models import DelayModel, Model, Segment, TimeGrid, initial_point
from .simulate import Control, DivergenceError, StatePath, _bind_segment, _step, integrate, random_controls


class CapViolation(ValueError):
    pass


class PositivityError(ValueError):
    pass


@dataclass(eq=False)
class SkeletonSolution:
    control: Control
    path: StatePath
    residual: float


def _residual(model, grid, x0, values, f):
    """Max over nodes of |phi_t - x - int_0^t (b + sigma f) ds| by the trapezoid rule."""
    buf = values[None]
    n, dt = grid.n_steps, grid.dt
    b = np.stack([model.drift(grid, k, buf)[0] for k in range(n + 1)])
    s = np.stack([model.dispersion(grid, k, buf)[0] for k in range(n + 1)])
    left = b[:-1] + np.einsum("kij,kj->ki", s[:-1], f)
    right = b[1:] + np.einsum("kij,kj->ki", s[1:], f)
    integral = np.vstack([np.zeros((1, model.d)), np.cumsum(0.5 * (left + right) * dt, axis=0)])
    return float(np.max(np.linalg.norm(values - x0 - integral, axis=1)))


def _method_of_steps(model: DelayModel, grid: TimeGrid, segment: Segment, f: np.ndarray) -> np.ndarray:
    """Delay skeleton on the extended grid [-tau, T], reading the lag directly."""
    lag = model.lag(grid)
    psi = model.with_segment(segment).segment_values(grid)
    n, dt = grid.n_steps, grid.dt
    ext = np.full((1, lag + n + 1, model.d), np.nan)
    ext[0, : lag + 1] = psi
    for k in range(n):
        t = grid.nodes[k]
        x, y = ext[:, lag + k], ext[:, k]
        b = model.bbar(t, x, y)
        s = model.sigmabar(t, x, y)
        ext[:, lag + k + 1] = _step(x, b, s, dt, f[k][None])
        if not np.isfinite(ext[:, lag + k + 1]).all():
            raise DivergenceError(k)
    return ext[0]


def solve_skeleton(model: Model, init, f: Control, grid: Optional[TimeGrid] = None) -> SkeletonSolution:
    """phi = Gamma_x(f) by the explicit Euler recursion.

    For delay models with a Segment as ``init`` the method of steps is used
    on [-tau, T]; the returned path carries the segment.
    """
    grid = grid or f.grid
    if f.grid != grid:
        raise ValueError("control grid does not match")
    if f.m != model.m:
        raise ValueError(f"control dimension {f.m} does not match model m={model.m}")
    x0 = initial_point(init, model.d)
    if isinstance(model, DelayModel) and isinstance(init, Segment):
        ext = _method_of_steps(model, grid, init, f.values)
        values = ext[model.lag(grid):]
        seg = init
        model = model.with_segment(init)
    else:
        model = _bind_segment(model, init)
        paths, bad = integrate(model, grid, x0[None], 0.0, f.values)
        if bad[0] >= 0:
            raise DivergenceError(int(bad[0]))
        values = paths[0]
        seg = None
    res = _residual(model, grid, x0, values, f.values)
    return SkeletonSolution(f, StatePath(grid, values, 0.0, seg), res)


def growth_bound(x, M: float, t: float, f_norm_sq: float) -> float:
    """Gronwall bound on sup_{s<=t} |phi_s|^2 for the skeleton."""
    if M < 0 or t < 0 or f_norm_sq < 0:
        raise ValueError("M, t and ||f||^2 must be non-negative")
    x2 = float(np.sum(np.asarray(x, dtype=float) ** 2))
    M2 = M * M
    return (3 * x2 + 6 * M2 * t * t + 6 * M2 * t * f_norm_sq) * math.exp(6 * M2 * t * (t + f_norm_sq))


@dataclass
class GrowthCheck:
    n_controls: int
    violations: int
    worst_ratio: float

    @property
    def passed(self):
        return self.violations == 0


def check_skeleton_growth(model, grid, init, N=1.0, n_controls=200, seed=0) -> GrowthCheck:
    """Every skeleton from a random control in S_N obeys the growth bound at all nodes."""
    x0 = initial_point(init, model.d)
    ctrls = random_controls(grid, model.m, N, seed, 0, n_controls)
    violations, worst = 0, 0.0
    for v in ctrls:
        f = Control(grid, v)
        phi = solve_skeleton(model, init, f).path.values
        running = np.maximum.accumulate(np.sum(phi ** 2, axis=1))
        bounds = np.array([growth_bound(x0, model.growth_constant, t, f.norm_sq) for t in grid.nodes])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(bounds > 0, running / bounds, np.where(running > 0, np.inf, 0.0))
        worst = max(worst, float(ratio.max()))
        violations += int(np.any(ratio > 1.0))
    return GrowthCheck(n_controls, violations, worst)


@dataclass
class ContinuityReport:
    frequencies: list
    errors: list
    tolerance: float

    @property
    def passed(self) -> bool:
        e = self.errors
        return len(e) > 0 and (e[-1] < e[0] or e[0] == 0.0) and e[-1] <= self.tolerance


def weak_l2_continuity_probe(model, init, f: Control, amplitude=1.0, frequencies=(1, 4, 16, 64),
                             N=None, tol=0.02) -> ContinuityReport:
    """Sup-norm response of the skeleton to oscillatory perturbations A sin(2 pi n t).

    The perturbation enters as its cell averages over the grid, i.e. its L2
    projection onto piecewise-constant controls.
    """
    grid = f.grid
    base = solve_skeleton(model, init, f).path.values
    t = grid.nodes
    errors = []
    freqs = sorted(frequencies)
    for n in freqs:
        # cell averages of A sin(2 pi n t): exact integrals at the nodes, no aliasing on coarse grids
        w = 2 * np.pi * n
        avg = (np.cos(w * t[:-1]) - np.cos(w * t[1:])) / (w * grid.dt)
        pert = f.values + amplitude * avg[:, None]
        fn = Control(grid, pert)
        if N is not None and fn.norm_sq > N:
            raise CapViolation(f"perturbed control at n={n} has energy {fn.norm_sq:.4g} > N={N}")
        phi = solve_skeleton(model, init, fn).path.values
        errors.append(float(np.max(np.linalg.norm(phi - base, axis=1))))
    return ContinuityReport(freqs, errors, tol)


@dataclass
class PositivityCertificate:
    x_bar: float
    beta: float
    xi: float
    N: float

    @property
    def eta(self) -> float:
        return self.xi


def _inv_rho2_integral(rho, lo, hi):
    # substitute u = e^s so the integrand stays smooth near zero
    val, _ = quad_integrate.quad(lambda s: math.exp(s) / rho(math.exp(s)) ** 2,
                                 math.log(lo), math.log(hi), epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def positivity_floor(model, N: float, x_bar_search, x0: float, rho=None, n_grid: int = 2001) -> PositivityCertificate:
    """Uniform lower bound xi on skeleton paths with ||f||^2 <= N.

    Picks x_bar in the search bracket (below x0) with drift floor
    beta = min_{[0, x_bar]} b > 0 and solves beta int_xi^x_bar rho^-2 = 2 N
    by bisection. Among bracket candidates the largest xi is kept.
    """
    if N < 0:
        raise ValueError("N must be non-negative")
    rho = rho or model.holder_modulus
    if rho is None:
        raise ValueError("model has no Hoelder modulus rho")
    bbar = model.bbar if hasattr(model, "bbar") and not isinstance(model, DelayModel) else (
        lambda x: model.b(0.0, np.asarray(x, dtype=float)[..., None])[..., 0])
    b0 = float(bbar(np.array([0.0]))[0])
    if not b0 > 0:
        raise PositivityError(f"drift at zero is {b0:.4g}; a positivity floor needs b(0) > 0")
    lo, hi = (x_bar_search, x_bar_search) if np.isscalar(x_bar_search) else x_bar_search
    hi = min(hi, x0 * (1 - 1e-12))
    if lo <= 0 or lo > hi:
        raise ValueError(f"empty search bracket for x_bar below x0={x0}")
    candidates = np.unique(np.linspace(lo, hi, 1 if lo == hi else 33))
    best = None
    target = 2.0 * N
    for xb in candidates:
        beta = float(np.min(bbar(np.linspace(0.0, xb, n_grid))))
        if beta <= 0:
            continue
        if target == 0:
            cert = PositivityCertificate(float(xb), beta, float(xb), N)
        else:
            floor = xb * 1e-100
            if beta * _inv_rho2_integral(rho, floor, xb) <= target:
                raise PositivityError("integral of rho^-2 does not diverge at 0+; no floor exists")
            g = lambda xi: beta * _inv_rho2_integral(rho, xi, xb) - target
            xi = optimize.bisect(g, floor, xb, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
            cert = PositivityCertificate(float(xb), beta, float(xi), N)
        if best is None or cert.xi > best.xi:
            best = cert
    if best is None:
        raise PositivityError("no x_bar in the bracket has a positive drift floor; needs b(0) > 0")
    return best


@dataclass
class FloorCheck:
    n_controls: int
    violations: int
    min_value: float
    xi: float

    @property
    def passed(self):
        return self.violations == 0


def check_floor(model, grid, x0, cert: PositivityCertificate, n_controls=1000, seed=0) -> FloorCheck:
    """Skeletons from random controls in S_N must stay above the certified floor."""
    ctrls = random_controls(grid, model.m, cert.N, seed, 0, n_controls)
    # deterministic worst cases: full energy pushing straight down, early and late
    n = grid.n_steps
    down = -math.sqrt(cert.N / grid.T) * np.ones((n, model.m))
    ctrls[0] = down
    if n_controls > 1:
        burst = np.zeros((n, model.m))
        w = max(1, n // 20)
        burst[:w] = -math.sqrt(cert.N / (w * grid.dt))
        ctrls[1] = burst
    paths, bad = integrate(model, grid, np.full((n_controls, 1), float(x0)), 0.0, ctrls)
    mins = paths[:, :, 0].min(axis=1)
    mins[bad >= 0] = -np.inf
    return FloorCheck(n_controls, int(np.sum(mins < cert.xi)), float(mins.min()), cert.xi)


def skeleton_csv(sol: SkeletonSolution) -> str:
    buf = io.StringIO()
    d, m = sol.path.d, sol.control.m
    buf.write(",".join(["t"] + [f"phi_{i + 1}" for i in range(d)] + [f"f_{j + 1}" for j in range(m)]) + "\n")
    n = sol.control.grid.n_steps
    for k, t in enumerate(sol.path.times):
        row = [repr(float(t))] + [repr(float(v)) for v in sol.path.values[k]]
        row += [repr(float(v)) for v in sol.control.values[k]] if k < n else [""] * m
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
