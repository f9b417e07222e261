"""Coefficient interface for predictable path-dependent SDEs and the built-in zoo.

Coefficients are evaluated on grid-sampled paths. ``drift(grid, k, path)``
receives the whole path buffer of shape ``(batch, n_steps + 1, d)`` but must
read only rows ``0..k``; rows after ``k`` are undefined (the simulator fills
them with NaN). Dispersion returns ``(batch, d, m)``.

For the adjoint gradient, models expose ``linearize(grid, path)`` which
returns the dispersion along a single path together with the Jacobians of
drift and dispersion with respect to the path nodes they read, grouped by
lag (node ``k - lag`` influences step ``k``).
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from . import rng


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or not np.isclose(self.nodes[k], t, rtol=0, atol=1e-9 * self.dt + 1e-15):
            raise ValueError(f"t={t} is not a node of the grid (T={self.T}, n_steps={self.n_steps})")
        return k

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * factor)


def lag_steps(tau: float, dt: float) -> int:
    """Number of grid steps in a delay; ``tau`` must be a multiple of ``dt``."""
    lag = int(round(tau / dt))
    if lag < 1 or abs(lag * dt - tau) > 1e-9 * max(tau, dt):
        raise ValueError(f"delay tau={tau} is not an integer multiple of dt={dt}")
    return lag


@dataclass(frozen=True, eq=False)
class Segment:
    """Initial segment psi sampled on nodes -tau, -tau+dt, ..., 0."""

    values: np.ndarray
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError("segment needs at least two nodes")
        object.__setattr__(self, "values", v)

    @property
    def tau(self) -> float:
        return (self.values.shape[0] - 1) * self.dt

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.values[-1].copy()

    @classmethod
    def from_function(cls, psi: Callable, tau: float, dt: float, d: int = 1) -> "Segment":
        lag = lag_steps(tau, dt)
        s = np.linspace(-tau, 0.0, lag + 1)
        vals = np.array([np.broadcast_to(np.asarray(psi(si), dtype=float), (d,)) for si in s])
        return cls(vals, dt)

    @classmethod
    def constant(cls, value, tau: float, dt: float, d: int = 1) -> "Segment":
        return cls.from_function(lambda s: value, tau, dt, d)


def initial_point(init, d: int) -> np.ndarray:
    if isinstance(init, Segment):
        x0 = init.x0
    else:
        x0 = np.atleast_1d(np.asarray(init, dtype=float))
    if x0.shape != (d,):
        raise ValueError(f"initial point has shape {x0.shape}, model expects ({d},)")
    return x0


def _fd_jacobian(fun, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a batched map; appends an axis of size d."""
    d = x.shape[-1]
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


class Model:
    """Predictable coefficient pair (b, sigma) on grid-sampled paths."""

    name = "model"
    d = 1
    m = 1
    growth_constant = 0.0
    holder_modulus: Optional[Callable] = None
    delay: Optional[float] = None

    def drift(self, grid: TimeGrid, k: int, path: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dispersion(self, grid: TimeGrid, k: int, path: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def linearize(self, grid: TimeGrid, path: np.ndarray):
        """Dispersion and Jacobians along a single path of shape (n+1, d).

        Returns ``(sigma, parts)`` with ``sigma`` of shape (n, d, m) and
        ``parts`` mapping lag -> (Jb (n, d, d), Jsigma (n, d, m, d)).
        """
        raise NotImplementedError(f"{self.name} does not provide derivatives")

    def params(self) -> dict:
        return {}

    def __repr__(self):
        inner = ", ".join(f"{k}={v}" for k, v in self.params().items())
        return f"{type(self).__name__}({inner})"


class MarkovModel(Model):
    """Coefficients reading only the current state: b(t, x_t), sigma(t, x_t).

    Subclasses implement ``b``, ``sigma`` (batched over the leading axis, with
    ``t`` a scalar or an array broadcasting against it) and optionally the
    derivatives ``db`` (batch, d, d) and ``dsigma`` (batch, d, m, d).
    """

    def b(self, t, x):
        raise NotImplementedError

    def sigma(self, t, x):
        raise NotImplementedError

    def db(self, t, x):
        return _fd_jacobian(lambda y: self.b(t, y), x)

    def dsigma(self, t, x):
        return _fd_jacobian(lambda y: self.sigma(t, y), x)

    def drift(self, grid, k, path):
        return self.b(grid.nodes[k], path[:, k])

    def dispersion(self, grid, k, path):
        return self.sigma(grid.nodes[k], path[:, k])

    def linearize(self, grid, path):
        t = grid.nodes[:-1]
        x = path[:-1]
        return self.sigma(t, x), {0: (self.db(t, x), self.dsigma(t, x))}


class Schilder(MarkovModel):
    """b = 0, sigma = I: small-noise Brownian motion."""

    name = "schilder"

    def __init__(self, d: int = 1):
        self.d = self.m = int(d)
        self.growth_constant = float(np.sqrt(self.d))

    def b(self, t, x):
        return np.zeros_like(x)

    def sigma(self, t, x):
        return np.broadcast_to(np.eye(self.d), x.shape[:-1] + (self.d, self.d)).copy()

    def db(self, t, x):
        return np.zeros(x.shape + (self.d,))

    def dsigma(self, t, x):
        return np.zeros(x.shape[:-1] + (self.d, self.d, self.d))

    def params(self):
        return {"d": self.d}


class OrnsteinUhlenbeck(MarkovModel):
    """b(x) = -a x, sigma = s I."""

    name = "ou"

    def __init__(self, a: float = 1.0, s: float = 1.0, d: int = 1):
        self.a = float(a)
        self.s = float(s)
        self.d = self.m = int(d)
        self.growth_constant = max(abs(self.a), abs(self.s) * np.sqrt(self.d))

    def b(self, t, x):
        return -self.a * x

    def sigma(self, t, x):
        return np.broadcast_to(self.s * np.eye(self.d), x.shape[:-1] + (self.d, self.d)).copy()

    def db(self, t, x):
        return np.broadcast_to(-self.a * np.eye(self.d), x.shape + (self.d,)).copy()

    def dsigma(self, t, x):
        return np.zeros(x.shape[:-1] + (self.d, self.d, self.d))

    def params(self):
        return {"a": self.a, "s": self.s, "d": self.d}


class Diffusion(MarkovModel):
    """Nondegenerate diffusion with user-supplied smooth coefficients.

    ``b(t, x)`` maps (batch, d) -> (batch, d); ``sigma(t, x)`` maps to
    (batch, d, m). Missing derivatives fall back to central differences.
    """

    name = "fw"

    def __init__(self, b, sigma, d=1, m=1, growth_constant=1.0, db=None, dsigma=None, label=None):
        self._b = b
        self._sigma = sigma
        self._db = db
        self._dsigma = dsigma
        self.d = int(d)
        self.m = int(m)
        self.growth_constant = float(growth_constant)
        self.label = label

    @classmethod
    def scalar(cls, b, sigma, growth_constant=1.0, db=None, dsigma=None, label=None):
        """Wrap elementwise scalar functions b(t, x), sigma(t, x) for d = m = 1."""
        wrap_db = (lambda t, x: db(t, x)[..., None]) if db else None
        wrap_ds = (lambda t, x: dsigma(t, x)[..., None, None]) if dsigma else None
        return cls(
            lambda t, x: np.asarray(b(_col(t, x), x), dtype=float) * np.ones_like(x),
            lambda t, x: (np.asarray(sigma(_col(t, x), x), dtype=float) * np.ones_like(x))[..., None],
            1, 1, growth_constant,
            (lambda t, x: wrap_db(_col(t, x), x) * np.ones(x.shape + (1,))) if db else None,
            (lambda t, x: wrap_ds(_col(t, x), x) * np.ones(x.shape + (1, 1))) if dsigma else None,
            label,
        )

    @classmethod
    def from_expressions(cls, drift: str, dispersion: str, growth_constant: float = 1.0):
        """Scalar model from sympy expressions in ``t`` and ``x``."""
        import sympy

        t, x = sympy.symbols("t x")
        eb = sympy.sympify(drift)
        es = sympy.sympify(dispersion)
        fb = sympy.lambdify((t, x), eb, "numpy")
        fs = sympy.lambdify((t, x), es, "numpy")
        fdb = sympy.lambdify((t, x), sympy.diff(eb, x), "numpy")
        fds = sympy.lambdify((t, x), sympy.diff(es, x), "numpy")
        return cls.scalar(fb, fs, growth_constant, fdb, fds, label=(drift, dispersion))

    def b(self, t, x):
        return self._b(t, x)

    def sigma(self, t, x):
        return self._sigma(t, x)

    def db(self, t, x):
        return self._db(t, x) if self._db else super().db(t, x)

    def dsigma(self, t, x):
        return self._dsigma(t, x) if self._dsigma else super().dsigma(t, x)

    def params(self):
        return {"label": self.label, "d": self.d, "m": self.m, "M": self.growth_constant}


def _col(t, x):
    """Make a time argument broadcast against a (batch, d) state."""
    t = np.asarray(t, dtype=float)
    return t[..., None] if t.ndim == 1 else t


class CIR(MarkovModel):
    """b(x) = kappa (mu - x), sigma(x) = c sqrt(x v 0) (full truncation)."""

    name = "cir"

    def __init__(self, kappa: float = 1.0, mu: float = 1.0, c: float = 1.0):
        self.kappa = float(kappa)
        self.mu = float(mu)
        self.c = float(c)
        self.d = self.m = 1
        self.growth_constant = max(abs(self.kappa * self.mu), abs(self.kappa), abs(self.c))

    def holder_modulus(self, u):
        return self.c * np.sqrt(u)

    def bbar(self, x):
        return self.kappa * (self.mu - np.asarray(x, dtype=float))

    def b(self, t, x):
        return self.kappa * (self.mu - x)

    def sigma(self, t, x):
        return (self.c * np.sqrt(np.maximum(x, 0.0)))[..., None]

    def db(self, t, x):
        return np.full(x.shape + (1,), -self.kappa)

    def dsigma(self, t, x):
        pos = x > 0
        out = np.where(pos, self.c / (2 * np.sqrt(np.where(pos, x, 1.0))), 0.0)
        return out[..., None, None]

    def params(self):
        return {"kappa": self.kappa, "mu": self.mu, "c": self.c}


class DelayModel(Model):
    """Single fixed-lag delay equation dX = b(t, X_t, X_{t-tau}) dt + ...

    Evaluated through the reduction b(s, phi) = bbar(s, phi_s, psi_{s-tau})
    for s < tau and bbar(s, phi_s, phi_{s-tau}) afterwards, so the model is
    an ordinary predictable coefficient on [0, T] paths. ``bbar(t, x, y)``
    and ``sigmabar(t, x, y)`` are batched like MarkovModel coefficients.
    ``partials(t, x, y)``, when given, returns (db/dx, db/dy, dsigma/dx,
    dsigma/dy); otherwise central differences are used.
    """

    name = "delay"

    def __init__(self, bbar, sigmabar, tau, segment=None, d=1, m=1, growth_constant=1.0,
                 partials=None, label=None):
        if not tau > 0:
            raise ValueError("delay must be positive")
        self.bbar = bbar
        self.sigmabar = sigmabar
        self.delay = float(tau)
        self.segment = segment
        self.d = int(d)
        self.m = int(m)
        self.growth_constant = float(growth_constant)
        self.partials = partials
        self.label = label
        self._cache = {}

    @classmethod
    def from_expressions(cls, drift, dispersion, tau, segment=None, growth_constant=1.0):
        """Scalar delay model from sympy expressions in ``t``, ``x``, ``y``."""
        import sympy

        t, x, y = sympy.symbols("t x y")
        eb, es = sympy.sympify(drift), sympy.sympify(dispersion)
        args = (t, x, y)
        fb, fs = sympy.lambdify(args, eb, "numpy"), sympy.lambdify(args, es, "numpy")
        derivs = [sympy.lambdify(args, sympy.diff(e, v), "numpy") for e in (eb, es) for v in (x, y)]

        def shaped(fn, tt, xx, yy, extra=()):
            tt = _col(tt, xx)
            return np.asarray(fn(tt, xx, yy), dtype=float) * np.ones(xx.shape + extra)

        def partials(tt, xx, yy):
            bx, by, sx, sy = (shaped(fn, tt, xx, yy) for fn in derivs)
            return bx[..., None], by[..., None], sx[..., None, None], sy[..., None, None]

        return cls(
            lambda tt, xx, yy: shaped(fb, tt, xx, yy),
            lambda tt, xx, yy: shaped(fs, tt, xx, yy)[..., None],
            tau, segment, 1, 1, growth_constant, partials, label=(drift, dispersion),
        )

    def with_segment(self, segment) -> "DelayModel":
        return DelayModel(self.bbar, self.sigmabar, self.delay, segment, self.d, self.m,
                          self.growth_constant, self.partials, self.label)

    def segment_values(self, grid: TimeGrid) -> np.ndarray:
        """psi on nodes -lag..0 as an array of shape (lag+1, d)."""
        if self.segment is None:
            raise ValueError("delay model has no initial segment")
        key = (grid.T, grid.n_steps)
        if key not in self._cache:
            lag = self.lag(grid)
            if isinstance(self.segment, Segment):
                if not np.isclose(self.segment.dt, grid.dt, rtol=1e-9) or self.segment.values.shape[0] != lag + 1:
                    raise ValueError(
                        f"segment spacing {self.segment.dt} / length {self.segment.values.shape[0]} "
                        f"incompatible with dt={grid.dt}, lag={lag}")
                vals = self.segment.values
            else:
                vals = Segment.from_function(self.segment, self.delay, grid.dt, self.d).values
            if vals.shape[1] != self.d:
                raise ValueError("segment dimension does not match the model")
            self._cache[key] = vals
        return self._cache[key]

    def lag(self, grid: TimeGrid) -> int:
        return lag_steps(self.delay, grid.dt)

    def _lagged(self, grid, k, path):
        lag = self.lag(grid)
        if k < lag:
            psi = self.segment_values(grid)
            return np.broadcast_to(psi[k], path[:, k].shape)
        return path[:, k - lag]

    def drift(self, grid, k, path):
        return self.bbar(grid.nodes[k], path[:, k], self._lagged(grid, k, path))

    def dispersion(self, grid, k, path):
        return self.sigmabar(grid.nodes[k], path[:, k], self._lagged(grid, k, path))

    def _partials(self, t, x, y):
        if self.partials is not None:
            return self.partials(t, x, y)
        return (
            _fd_jacobian(lambda z: self.bbar(t, z, y), x),
            _fd_jacobian(lambda z: self.bbar(t, x, z), y),
            _fd_jacobian(lambda z: self.sigmabar(t, z, y), x),
            _fd_jacobian(lambda z: self.sigmabar(t, x, z), y),
        )

    def linearize(self, grid, path):
        n = grid.n_steps
        lag = self.lag(grid)
        psi = self.segment_values(grid)
        t = grid.nodes[:-1]
        x = path[:-1]
        y = np.concatenate([psi[:min(lag, n)], path[: max(n - lag, 0)]], axis=0)
        bx, by, sx, sy = self._partials(t, x, y)
        by = np.array(by, copy=True)
        sy = np.array(sy, copy=True)
        # steps before the lag read psi, not the path
        by[:lag] = 0.0
        sy[:lag] = 0.0
        return self.sigmabar(t, x, y), {0: (bx, sx), lag: (by, sy)}

    def params(self):
        return {"label": self.label, "tau": self.delay, "M": self.growth_constant}


def linear_delay(a: float = -1.0, c: float = 0.5, s: float = 0.5, tau: float = 1.0,
                 segment=None) -> DelayModel:
    """bbar(t, x, y) = a x + c y, sigmabar = s (scalar)."""
    lip = max(abs(a), abs(c))
    sup_psi = 1.0
    if isinstance(segment, Segment):
        sup_psi = float(np.max(np.abs(segment.values)))
    M = max(2 * lip, lip * sup_psi, abs(s))

    def partials(t, x, y):
        return (np.full(x.shape + (1,), a), np.full(x.shape + (1,), c),
                np.zeros(x.shape + (1, 1)), np.zeros(x.shape + (1, 1)))

    return DelayModel(
        lambda t, x, y: a * x + c * y,
        lambda t, x, y: np.full(x.shape + (1,), s),
        tau, segment, 1, 1, M, partials, label=f"{a}*x + {c}*y",
    )


# ---------------------------------------------------------------- evaluation

def _buffer(model, prefix):
    grid = prefix.grid
    vals = np.asarray(prefix.values, dtype=float)
    if vals.ndim != 2 or vals.shape[1] != model.d:
        raise ValueError(f"path dimension {vals.shape[-1]} does not match model d={model.d}")
    buf = np.full((1, grid.n_steps + 1, model.d), np.nan)
    buf[0, : vals.shape[0]] = vals
    return grid, vals.shape[0], buf


def _prepare(model, prefix):
    if isinstance(model, DelayModel):
        seg = getattr(prefix, "segment", None)
        if seg is not None:
            model = model.with_segment(seg)
        if model.segment is None:
            raise ValueError("delay model evaluated without an initial segment")
    return model


def eval_drift(model: Model, t: float, prefix) -> np.ndarray:
    """b(t, prefix) for a StatePath-like prefix (``.grid``, ``.values``)."""
    model = _prepare(model, prefix)
    grid, n_rows, buf = _buffer(model, prefix)
    k = grid.index_of(t)
    if k >= n_rows:
        raise ValueError(f"prefix ends before t={t}")
    return model.drift(grid, k, buf)[0]


def eval_dispersion(model: Model, t: float, prefix) -> np.ndarray:
    model = _prepare(model, prefix)
    grid, n_rows, buf = _buffer(model, prefix)
    k = grid.index_of(t)
    if k >= n_rows:
        raise ValueError(f"prefix ends before t={t}")
    return model.dispersion(grid, k, buf)[0]


# ---------------------------------------------------------------- diagnostics

@dataclass
class PredictabilityReport:
    trials: int
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def check_predictability(model: Model, grid: TimeGrid, trials: int = 100, seed: int = 0) -> PredictabilityReport:
    """Perturb random paths strictly after random nodes; outputs must not move."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = PredictabilityReport(trials)
    n = grid.n_steps
    for i in range(trials):
        g = rng.generator(seed, i, rng.PROBE)
        path = np.cumsum(g.standard_normal((1, n + 1, model.d)) * np.sqrt(grid.dt), axis=1)
        k = int(g.integers(0, n))
        scale = float(10.0 ** g.uniform(-3, 3))
        bumped = path.copy()
        bumped[:, k + 1:] += scale * g.standard_normal(bumped[:, k + 1:].shape)
        same = (np.array_equal(model.drift(grid, k, path), model.drift(grid, k, bumped))
                and np.array_equal(model.dispersion(grid, k, path), model.dispersion(grid, k, bumped)))
        if not same:
            report.violations.append((float(grid.nodes[k]), scale))
    return report


@dataclass
class GrowthReport:
    probes: int
    max_ratio: float
    growth_constant: float

    @property
    def passed(self) -> bool:
        return self.max_ratio <= 1.0 + 1e-12


def check_growth(model: Model, grid: TimeGrid, probes: int = 10_000, seed: int = 0) -> GrowthReport:
    """Sampled sublinear-growth check |b| v |sigma| <= M (1 + sup_{s<=t} |phi_s|)."""
    g = rng.generator(seed, 0, rng.PROBE)
    n = grid.n_steps
    amp = 10.0 ** g.uniform(-2, 3, size=(probes, 1, 1))
    paths = amp * np.cumsum(g.standard_normal((probes, n + 1, model.d)), axis=1) / np.sqrt(n)
    paths += amp * g.standard_normal((probes, 1, model.d))
    ks = g.integers(0, n + 1, size=probes)
    worst = 0.0
    for k in np.unique(ks):
        sel = paths[ks == k]
        bnorm = np.linalg.norm(model.drift(grid, int(k), sel), axis=-1)
        snorm = np.linalg.norm(model.dispersion(grid, int(k), sel), axis=(-2, -1))
        sup = np.max(np.linalg.norm(sel[:, : k + 1], axis=-1), axis=1)
        ratio = np.maximum(bnorm, snorm) / (model.growth_constant * (1.0 + sup))
        worst = max(worst, float(np.max(ratio)))
    return GrowthReport(probes, worst, model.growth_constant)


def builtin_zoo(grid: Optional[TimeGrid] = None) -> dict:
    """One instance of every built-in family with a sensible initial point.

    Returns ``{name: (model, init)}``. The delay model uses tau = T/2 on the
    given grid (default T = 1) with a constant unit segment.
    """
    T = grid.T if grid is not None else 1.0
    dt = grid.dt if grid is not None else T / 100
    tau = dt * max(1, round(T / 2 / dt))
    seg = Segment.constant(1.0, tau, dt)
    fw = Diffusion.scalar(
        lambda t, x: -np.sin(x), lambda t, x: 1.0 + 0.5 * np.cos(x), growth_constant=1.5,
        db=lambda t, x: -np.cos(x), dsigma=lambda t, x: -0.5 * np.sin(x), label="-sin(x), 1+0.5cos(x)",
    )
    return {
        "schilder": (Schilder(), np.array([0.0])),
        "ou": (OrnsteinUhlenbeck(1.0), np.array([0.0])),
        "fw": (fw, np.array([0.5])),
        "delay": (linear_delay(tau=tau, segment=seg), seg),
        "cir": (CIR(1.0, 1.0, 1.0), np.array([1.0])),
    }
