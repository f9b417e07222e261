"""Monte Carlo side: rare-event probabilities and Laplace functionals over eps.

Naive and importance-sampling estimators share one code path. The tilted
estimator simulates the controlled equation with a deterministic control v
and reweights each sample by the Girsanov density

    exp(-(1/sqrt(eps)) sum_k v_k . dW_k - (1/(2 eps)) sum_k |v_k|^2 dt),

so v = 0 reproduces the naive estimator sample for sample.
"""

import io
import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from .action import PathFunctional, laplace_minimizer, min_action
from .models import Model, TimeGrid
from .simulate import DIVERGENCE_LIMIT, Control, DivergenceError, map_chunks, simulate_samples

LOG_WEIGHT_LIMIT = 700.0


@dataclass(frozen=True)
class EventSet:
    """Terminal half-space, terminal ball or sup-exceedance of one coordinate."""

    kind: str
    z: Union[float, tuple]
    coord: int = 0
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("halfspace", "ball", "sup"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        zs = np.atleast_1d(np.asarray(self.z, dtype=float))
        if not np.all(np.isfinite(zs)) or not math.isfinite(self.radius):
            raise ValueError("event parameters must be finite")
        if self.kind == "ball":
            object.__setattr__(self, "z", tuple(zs.tolist()))

    @classmethod
    def halfspace(cls, z, coord=0):
        return cls("halfspace", float(z), coord)

    @classmethod
    def ball(cls, z, radius):
        return cls("ball", tuple(np.atleast_1d(z).tolist()), radius=float(radius))

    @classmethod
    def sup(cls, z, coord=0):
        return cls("sup", float(z), coord)

    def hits(self, paths: np.ndarray) -> np.ndarray:
        """Indicator per sample for paths of shape (batch, n+1, d)."""
        if self.kind == "halfspace":
            return paths[:, -1, self.coord] >= self.z
        if self.kind == "ball":
            return np.linalg.norm(paths[:, -1] - np.asarray(self.z), axis=1) <= self.radius
        return np.max(paths[:, :, self.coord], axis=1) >= self.z

    def closure(self) -> PathFunctional:
        """Constraint describing the closure of the event, for the action side."""
        if self.kind == "halfspace":
            return PathFunctional.halfspace(self.z, self.coord)
        if self.kind == "ball":
            return PathFunctional.ball(self.z, self.radius)
        return PathFunctional.sup(self.z, self.coord)

    def to_dict(self):
        out = {"kind": self.kind, "z": self.z if self.kind != "ball" else list(self.z)}
        if self.kind == "ball":
            out["radius"] = self.radius
        else:
            out["coord"] = self.coord
        return out


@dataclass
class EstimationRow:
    eps: float
    method: str
    estimate: float
    stderr: float
    n_samples: int
    n_hits: int
    weight_sum: float
    quantity: str = "probability"  # or "laplace"
    rejected: int = 0
    diverged: int = 0
    minus_eps_log: Optional[float] = None
    minus_eps_log_stderr: Optional[float] = None
    action_reference: Optional[float] = None

    @property
    def resolved(self) -> bool:
        return self.minus_eps_log is not None

    @property
    def hits_or_weightsum(self):
        return self.n_hits if self.method == "naive" else self.weight_sum


@dataclass
class EstimationReport:
    rows: list
    seed: int
    grid: TimeGrid
    method: str
    target: dict
    tilt: Optional[list] = None
    reference: Optional[dict] = None
    model: Optional[str] = None

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("eps,method,n,hits_or_weightsum,estimate,stderr,minus_eps_log,action_reference\n")
        for r in self.rows:
            mel = "unresolved" if r.minus_eps_log is None else repr(r.minus_eps_log)
            ref = "" if r.action_reference is None else repr(r.action_reference)
            buf.write(f"{r.eps!r},{r.method},{r.n_samples},{r.hits_or_weightsum!r},"
                      f"{r.estimate!r},{r.stderr!r},{mel},{ref}\n")
        return buf.getvalue()

    def to_dat(self) -> str:
        """Whitespace-separated: eps minus_eps_log stderr action_reference (resolved rows)."""
        lines = ["# eps minus_eps_log stderr action_reference"]
        for r in self.rows:
            if r.resolved:
                ref = r.action_reference if r.action_reference is not None else float("nan")
                lines.append(f"{r.eps!r} {r.minus_eps_log!r} {r.minus_eps_log_stderr!r} {ref!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "grid": {"T": self.grid.T, "n_steps": self.grid.n_steps},
            "method": self.method,
            "target": self.target,
            "model": self.model,
            "tilt": self.tilt,
            "reference": self.reference,
            "rows": [asdict(r) | {"resolved": r.resolved} for r in self.rows],
        }


# ---------------------------------------------------------------- core

def _sample(model, grid, init, eps, n_samples, seed, tilt, evaluate, threads):
    """Per-sample values y_i and log-weights (extended precision) in index order."""
    v = None if tilt is None else np.asarray(tilt.values, dtype=float)

    def job(start, count):
        b = simulate_samples(model, grid, init, eps, start, count, seed, v)
        y = np.where(b.ok, evaluate(np.where(b.ok[:, None, None], b.paths, 0.0)), 0.0)
        if v is None:
            lw = np.zeros(count, dtype=np.longdouble)
        else:
            vl = v.astype(np.longdouble)
            dw = b.dW.astype(np.longdouble)
            lin = np.sum(dw * vl[None], axis=(1, 2))
            quad = np.sum(vl * vl) * np.longdouble(grid.dt)
            lw = -lin / np.sqrt(np.longdouble(eps)) - quad / (2 * np.longdouble(eps))
        return y, lw, b.ok

    parts = map_chunks(job, n_samples, threads)
    y = np.concatenate([p[0] for p in parts])
    lw = np.concatenate([p[1] for p in parts])
    ok = np.concatenate([p[2] for p in parts])
    diverged = int((~ok).sum())
    if diverged == n_samples:
        raise DivergenceError(-1, "every sample diverged")
    if diverged > DIVERGENCE_LIMIT * n_samples:
        raise DivergenceError(-1, f"{diverged} of {n_samples} samples diverged")
    return y, lw, ok, diverged


def _mean_and_se(terms: np.ndarray, n: int):
    mean = np.sum(terms) / n
    se = np.sqrt(np.sum((terms - mean) ** 2) / n / n)
    return float(mean), float(se)


def _probability_row(model, grid, init, eps, event, n_samples, seed, tilt, threads, method):
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    y, lw, ok, diverged = _sample(model, grid, init, eps, n_samples, seed, tilt,
                                  lambda P: event.hits(P).astype(float), threads)
    keep = ok & (lw <= LOG_WEIGHT_LIMIT)
    rejected = int((ok & ~keep).sum())
    w = np.where(keep, np.exp(np.where(keep, lw, 0)), 0).astype(np.longdouble)
    terms = w * y.astype(np.longdouble)
    p, se = _mean_and_se(terms, n_samples)
    row = EstimationRow(eps, method, p, se, n_samples, int(np.sum(y[keep] > 0)), float(np.sum(terms)),
                        rejected=rejected, diverged=diverged)
    if p > 0:
        row.minus_eps_log = -eps * math.log(p)
        row.minus_eps_log_stderr = eps * se / p
    return row


def _laplace_row(model, grid, init, eps, F, n_samples, seed, tilt, threads, method):
    if eps <= 0:
        raise ValueError("eps must be positive")
    if F.is_constraint:
        raise ValueError("Laplace estimation needs a bounded cost functional")
    y, lw, ok, diverged = _sample(model, grid, init, eps, n_samples, seed, tilt,
                                  lambda P: F.terminal_values(P[:, -1]), threads)
    keep = ok & (lw <= LOG_WEIGHT_LIMIT)
    rejected = int((ok & ~keep).sum())
    Fmin = float(np.min(y[keep]))
    a = np.where(keep, -(y - Fmin) / eps + lw, -np.inf).astype(np.longdouble)
    shift = np.max(a)
    r = np.exp(a - shift)
    mean, se = _mean_and_se(r, n_samples)
    value = Fmin - eps * float(shift + np.log(np.longdouble(mean)))
    rel = se / mean
    row = EstimationRow(eps, method, value, eps * rel, n_samples, int(keep.sum()),
                        float(np.sum(np.exp(np.where(keep, lw, -np.inf)))), "laplace", rejected, diverged)
    row.minus_eps_log = value
    row.minus_eps_log_stderr = eps * rel
    return row


def mc_probability(model: Model, grid: TimeGrid, init, eps: float, event: EventSet, n_samples: int,
                   seed: int, threads: int = 1) -> EstimationRow:
    """Hit fraction over independent Euler-Maruyama paths."""
    return _probability_row(model, grid, init, eps, event, n_samples, seed, None, threads, "naive")


def mc_laplace(model: Model, grid: TimeGrid, init, eps: float, F: PathFunctional, n_samples: int,
               seed: int, threads: int = 1) -> EstimationRow:
    """-eps log( mean exp(-F(X_i)/eps) )."""
    return _laplace_row(model, grid, init, eps, F, n_samples, seed, None, threads, "naive")


def importance_sampling(model: Model, grid: TimeGrid, init, eps: float, target, tilt: Control,
                        n_samples: int, seed: int, threads: int = 1) -> EstimationRow:
    """Girsanov-reweighted estimator under the controlled dynamics with control ``tilt``."""
    if tilt.grid != grid or tilt.m != model.m:
        raise ValueError("tilt control does not match grid or noise dimension")
    if isinstance(target, EventSet):
        return _probability_row(model, grid, init, eps, target, n_samples, seed, tilt, threads, "importance")
    return _laplace_row(model, grid, init, eps, target, n_samples, seed, tilt, threads, "importance")


def naive_stderr(p: float, n: int) -> float:
    """Bernoulli standard error of a naive estimator with n samples at probability p."""
    return math.sqrt(p * (1 - p) / n)


def action_reference(model, grid, init, target, tol=1e-6, restarts=1, seed=0):
    """Action side of the comparison: min over the event closure, or the Laplace infimum."""
    if isinstance(target, EventSet):
        return min_action(model, grid, init, target.closure(), tol=tol, restarts=restarts, seed=seed)
    return laplace_minimizer(model, grid, init, target, tol=tol, restarts=max(restarts, 1), seed=seed)


def epsilon_sweep(model: Model, grid: TimeGrid, init, target, eps_list, n_samples: int, seed: int,
                  method: str = "importance", threads: int = 1, reference=None,
                  tilt: Optional[Control] = None, restarts: int = 1) -> EstimationReport:
    """Run one estimator per eps and attach the eps-independent action reference."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list or any(e <= 0 for e in eps_list) or any(a <= b for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be positive and strictly decreasing")
    if method not in ("naive", "importance"):
        raise ValueError(f"unknown method {method!r}")
    if reference is None:
        reference = action_reference(model, grid, init, target, restarts=restarts, seed=seed)
    if method == "importance" and tilt is None:
        tilt = reference.control
    rows = []
    for eps in eps_list:
        if method == "naive":
            if isinstance(target, EventSet):
                row = mc_probability(model, grid, init, eps, target, n_samples, seed, threads)
            else:
                row = mc_laplace(model, grid, init, eps, target, n_samples, seed, threads)
        else:
            row = importance_sampling(model, grid, init, eps, target, tilt, n_samples, seed, threads)
        row.action_reference = reference.objective
        rows.append(row)
    ref_info = {"value": reference.objective, "action": reference.value, "flags": reference.flags,
                "gradient_norm": reference.gradient_norm, "value_is_upper_bound": True}
    return EstimationReport(rows, seed, grid, method, target.to_dict(),
                            None if tilt is None else tilt.values.tolist(), ref_info, repr(model))
