"""Euler-Maruyama simulation of the prelimit and controlled equations.

One explicit step is shared by the stochastic simulator and the skeleton
solver:

    X_{k+1} = X_k + b_k dt + sigma_k f_k dt + sqrt(eps) sigma_k dW_k

with the control and noise terms skipped when absent, so the skeleton is
bit-identical to the simulator at eps = 0.
"""

import io
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .models import DelayModel, Model, Segment, TimeGrid, initial_point

CHUNK = 2048
DIVERGENCE_LIMIT = 1e-3


class DivergenceError(FloatingPointError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"state became non-finite at step {step}")


@dataclass(eq=False)
class BrownianPath:
    grid: TimeGrid
    increments: np.ndarray  # (n_steps, m)

    @property
    def m(self) -> int:
        return self.increments.shape[1]

    @property
    def values(self) -> np.ndarray:
        out = np.zeros((self.grid.n_steps + 1, self.m))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


@dataclass(eq=False)
class StatePath:
    grid: TimeGrid
    values: np.ndarray  # (n_steps + 1, d)
    noise_level: float = 0.0
    segment: Optional[Segment] = None

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))


@dataclass(eq=False)
class Control:
    """Piecewise-constant control, ``values[k]`` held on [t_k, t_{k+1})."""

    grid: TimeGrid
    values: np.ndarray  # (n_steps, m)
    cap: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_steps:
            raise ValueError(f"control has {v.shape[0]} values, grid has {self.grid.n_steps} steps")
        self.values = v
        if self.cap is not None and self.norm_sq > self.cap * (1 + 1e-12):
            raise ValueError(f"control energy {self.norm_sq:.6g} exceeds cap N={self.cap}")

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def norm_sq(self) -> float:
        return float(np.sum(self.values ** 2) * self.grid.dt)

    @classmethod
    def constant(cls, grid, value, m=None, cap=None):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        if m is not None:
            value = np.broadcast_to(value, (m,))
        return cls(grid, np.tile(value, (grid.n_steps, 1)), cap)

    @classmethod
    def zeros(cls, grid, m=1):
        return cls(grid, np.zeros((grid.n_steps, m)))

    @classmethod
    def from_function(cls, grid, fn, m=1, cap=None):
        vals = np.array([np.broadcast_to(np.asarray(fn(t), dtype=float), (m,)) for t in grid.nodes[:-1]])
        return cls(grid, vals, cap)


def sample_brownian(grid: TimeGrid, m: int = 1, seed: int = 0, index: int = 0) -> BrownianPath:
    """Brownian increments N(0, dt I_m) for sample ``index`` of stream ``seed``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    z = rng.normals(seed, index, 1, (grid.n_steps, m))[0]
    return BrownianPath(grid, z * math.sqrt(grid.dt))


def refine_brownian(path: BrownianPath, seed: int = 0) -> BrownianPath:
    """Halve the step by inserting Brownian-bridge midpoints."""
    inc = path.increments
    n, m = inc.shape
    z = rng.generator(seed, n, rng.PROBE).standard_normal((n, m))
    # given W over [a, a+h], the midpoint deviates by N(0, h/4)
    half = 0.5 * inc + 0.5 * math.sqrt(path.grid.dt) * z
    fine = np.empty((2 * n, m))
    fine[0::2] = half
    fine[1::2] = inc - half
    return BrownianPath(path.grid.refine(2), fine)


# ---------------------------------------------------------------- the scheme

def _step(x, b, s, dt, v=None, sqrt_eps=0.0, dw=None):
    incr = b * dt
    if v is not None:
        incr = incr + np.einsum("bij,bj->bi", s, v) * dt
    if dw is not None:
        incr = incr + sqrt_eps * np.einsum("bij,bj->bi", s, dw)
    return x + incr


def _bind_segment(model, init):
    if isinstance(model, DelayModel):
        if isinstance(init, Segment):
            return model.with_segment(init)
        if model.segment is None:
            raise ValueError("delay model requires an initial segment")
    return model


def integrate(model: Model, grid: TimeGrid, x0: np.ndarray, eps: float = 0.0,
              control: Optional[np.ndarray] = None, dW: Optional[np.ndarray] = None):
    """Batched Euler-Maruyama on a fixed grid.

    ``x0`` has shape (batch, d); ``control`` is (n, m) shared or
    (batch, n, m); ``dW`` is (batch, n, m) and only read when eps > 0.
    Returns ``(paths, first_bad)`` where ``first_bad[i]`` is the first step
    producing a non-finite state for sample i, or -1.
    """
    x0 = np.asarray(x0, dtype=float)
    batch = x0.shape[0]
    n, dt = grid.n_steps, grid.dt
    path = np.full((batch, n + 1, model.d), np.nan)
    path[:, 0] = x0
    first_bad = np.full(batch, -1)
    sqrt_eps = math.sqrt(eps) if eps > 0 else 0.0
    noisy = eps > 0 and dW is not None
    shared = control is not None and control.ndim == 2
    for k in range(n):
        b = model.drift(grid, k, path)
        s = model.dispersion(grid, k, path)
        v = None
        if control is not None:
            v = np.broadcast_to(control[k], (batch, model.m)) if shared else control[:, k]
        path[:, k + 1] = _step(path[:, k], b, s, dt, v, sqrt_eps, dW[:, k] if noisy else None)
        ok = np.isfinite(path[:, k + 1]).all(axis=1)
        if not ok.all():
            newly = (~ok) & (first_bad < 0)
            first_bad[newly] = k
            # keep diverged samples from poisoning later arithmetic
            path[~ok, k + 1] = 0.0
    return path, first_bad


def euler_maruyama(model: Model, eps: float, init, noise: BrownianPath,
                   control: Optional[Control] = None) -> StatePath:
    """One path of the (controlled) SDE driven by ``noise``."""
    if eps < 0:
        raise ValueError("noise level must be non-negative")
    grid = noise.grid
    model = _bind_segment(model, init)
    if noise.m != model.m:
        raise ValueError(f"noise dimension {noise.m} does not match model m={model.m}")
    if control is not None and (control.grid != grid or control.m != model.m):
        raise ValueError("control grid or dimension does not match")
    x0 = initial_point(init, model.d)
    path, bad = integrate(model, grid, x0[None], eps,
                          None if control is None else control.values,
                          noise.increments[None])
    if bad[0] >= 0:
        raise DivergenceError(int(bad[0]))
    seg = init if isinstance(init, Segment) else None
    return StatePath(grid, path[0], eps, seg)


# ---------------------------------------------------------------- Monte Carlo

@dataclass
class Batch:
    paths: np.ndarray  # (count, n+1, d)
    dW: np.ndarray  # (count, n, m)
    ok: np.ndarray  # (count,) bool


def simulate_samples(model, grid, init, eps, start, count, seed, control=None):
    """Samples ``start .. start+count-1`` of the Monte Carlo stream ``seed``."""
    model = _bind_segment(model, init)
    x0 = initial_point(init, model.d)
    dW = rng.normals(seed, start, count, (grid.n_steps, model.m)) * math.sqrt(grid.dt)
    ctrl = None
    if control is not None:
        ctrl = control(start, count) if callable(control) else np.asarray(control)
    paths, bad = integrate(model, grid, np.tile(x0, (count, 1)), eps, ctrl, dW)
    return Batch(paths, dW, bad < 0)


def map_chunks(fn, n_samples, threads=1, chunk=CHUNK):
    """Apply ``fn(start, count)`` over fixed-size chunks, results in chunk order."""
    spans = [(s, min(chunk, n_samples - s)) for s in range(0, n_samples, chunk)]
    if threads <= 1 or len(spans) == 1:
        return [fn(s, c) for s, c in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda sc: fn(*sc), spans))


def random_controls(grid: TimeGrid, m: int, N: float, seed: int, start: int, count: int) -> np.ndarray:
    """Random piecewise-constant controls with ||v||^2 <= N, shape (count, n, m).

    Mixes smooth random directions, constant pushes and short bursts so the
    admissible ball is explored beyond its centre.
    """
    n = grid.n_steps
    out = np.empty((count, n, m))
    for j in range(count):
        g = rng.generator(seed, start + j, rng.CONTROL)
        kind = j % 3
        if kind == 0:
            v = np.cumsum(g.standard_normal((n, m)), axis=0)
        elif kind == 1:
            v = np.tile(g.standard_normal(m), (n, 1))
        else:
            v = np.zeros((n, m))
            width = max(1, int(g.integers(1, max(2, n // 4))))
            lo = int(g.integers(0, n - width + 1))
            v[lo: lo + width] = g.standard_normal(m)
        energy = float(np.sum(v ** 2) * grid.dt)
        target = N * g.random() ** 0.5
        out[j] = v * math.sqrt(target / energy) if energy > 0 else 0.0
    return out


# ---------------------------------------------------------------- moment bound

def bdg_constant(p: float) -> float:
    return (p / (p - 1)) ** (p * p / 2)


def moment_constant(p: float, T: float, N: float, M: float) -> float:
    """C_p(T, N, M) = K_p exp(K_p T) from the Gronwall argument."""
    K = max(4 ** (p - 1),
            2 ** (3 * p - 3) * M ** p * T ** ((p - 2) / 2) * max(1.0, T)
            * (T ** (p / 2) + bdg_constant(p) + N ** (p / 2)))
    return K * math.exp(K * T)


@dataclass
class MomentReport:
    p: float
    eps: float
    N: float
    empirical: float
    stderr: float
    bound: float
    n_samples: int
    diverged: int

    @property
    def passed(self) -> bool:
        return self.empirical + 3 * self.stderr <= self.bound

    @property
    def margin(self) -> float:
        return self.bound - (self.empirical + 3 * self.stderr)


def moment_bound_check(model, grid, eps, init, N, p=2.0, n_samples=10_000, seed=0, threads=1) -> MomentReport:
    """Monte Carlo E[sup_t |X^{eps,v}_t|^p] over random controls in S_N vs C_p (1 + |x|^p)."""
    if eps > 1:
        raise ValueError("moment bound is stated for eps <= 1")
    if p < 2:
        raise ValueError("p must be >= 2")
    m = model.m

    def job(start, count):
        ctrl = random_controls(grid, m, N, seed, start, count)
        b = simulate_samples(model, grid, init, eps, start, count, seed, ctrl)
        sup = np.max(np.linalg.norm(b.paths, axis=2), axis=1) ** p
        return sup[b.ok], int((~b.ok).sum())

    parts = map_chunks(job, n_samples, threads)
    vals = np.concatenate([v for v, _ in parts])
    diverged = sum(d for _, d in parts)
    x0 = initial_point(init, model.d)
    bound = moment_constant(p, grid.T, N, model.growth_constant) * (1 + np.linalg.norm(x0) ** p)
    se = float(vals.std() / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return MomentReport(p, eps, N, float(vals.mean()), se, float(bound), n_samples, diverged)


@dataclass
class TightnessReport:
    lags: np.ndarray  # in steps
    ratios: np.ndarray  # E|X_{t+h} - X_t|^4 / h^2 per lag
    beta: float  # least-squares fit of E|dX|^4 = beta h^2

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.beta))


def tightness_modulus(model, grid, eps, init, N=0.0, n_samples=2000, seed=0, lags=None) -> TightnessReport:
    """Fit E|X_t - X_s|^4 <= beta |t - s|^2 from simulated increments."""
    n = grid.n_steps
    if lags is None:
        lags = [h for h in (1, 2, 4, 8, 16, 32) if h <= n // 2] or [1]
    lags = np.asarray(lags)
    ctrl = random_controls(grid, model.m, N, seed, 0, n_samples) if N > 0 else None
    b = simulate_samples(model, grid, init, eps, 0, n_samples, seed, ctrl)
    X = b.paths[b.ok]
    h = lags * grid.dt
    m4 = np.array([np.mean(np.sum((X[:, L:] - X[:, :-L]) ** 2, axis=2) ** 2) for L in lags])
    beta = float(np.sum(m4 * h ** 2) / np.sum(h ** 4))
    return TightnessReport(lags, m4 / h ** 2, beta)


# ---------------------------------------------------------------- IO

_MAGIC = b"LDPK"
_HEADER = struct.Struct("<4sqqqddq")


def dump_paths(paths: np.ndarray, grid: TimeGrid, m: int, eps: float, seed: int) -> bytes:
    """Header (d, m, n_steps, T, eps, seed) followed by row-major float64 values."""
    paths = np.ascontiguousarray(paths, dtype="<f8")
    if paths.ndim == 2:
        paths = paths[None]
    d = paths.shape[-1]
    head = _HEADER.pack(_MAGIC, d, m, grid.n_steps, grid.T, eps, seed)
    return head + paths.tobytes()


def load_paths(blob: bytes):
    magic, d, m, n, T, eps, seed = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise ValueError("not a path dump")
    vals = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(-1, n + 1, d)
    meta = {"d": d, "m": m, "n_steps": n, "T": T, "eps": eps, "seed": seed}
    return vals, meta


def paths_csv(path: StatePath) -> str:
    buf = io.StringIO()
    cols = ["t"] + [f"X_{i + 1}" for i in range(path.d)]
    buf.write(",".join(cols) + "\n")
    for t, row in zip(path.times, path.values):
        buf.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")
    return buf.getvalue()
