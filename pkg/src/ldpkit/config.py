"""Experiment configuration: strict JSON, one task per file.

Schema (all keys other than those listed are rejected)::

    {
      "model":  {"family": "schilder|ou|fw|delay|cir", "params": {...},
                 "x0": [...], "M": float?, "segment": {"constant": c} | {"values": [...]}},
      "grid":   {"T": float, "n_steps": int},
      "task":   {"<simulate|skeleton|minimize|sweep|verify>": {...}},
      "output": {"directory": str, "formats": ["csv", "json", "dat", "paths", "bin"]}
    }

Task fields and defaults are listed in ``TASK_FIELDS``.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .action import PathFunctional
from .estimate import EventSet
from .models import CIR, DelayModel, Diffusion, OrnsteinUhlenbeck, Schilder, Segment, TimeGrid, lag_steps


class ConfigError(ValueError):
    pass


REQUIRED = object()

FAMILY_PARAMS = {
    "schilder": {"d": 1},
    "ou": {"a": 1.0, "s": 1.0, "d": 1},
    "fw": {"drift": REQUIRED, "dispersion": REQUIRED},
    "delay": {"drift": "-x + 0.5*y", "dispersion": "0.5", "tau": REQUIRED},
    "cir": {"kappa": 1.0, "mu": 1.0, "c": 1.0},
}

TASK_FIELDS = {
    "simulate": {"eps": REQUIRED, "seed": REQUIRED, "n_paths": 1, "control": None},
    "skeleton": {"control": None},
    "minimize": {"functional": REQUIRED, "N_cap": None, "tol": 1e-6, "constraint_tol": 1e-4,
                 "restarts": 1, "seed": 0},
    "sweep": {"eps_list": REQUIRED, "event": None, "functional": None, "n_samples": REQUIRED,
              "seed": REQUIRED, "method": "importance", "restarts": 1},
    "verify": {"seed": REQUIRED, "trials": 100, "probes": 10_000, "n_samples": 10_000, "N": 1.0,
               "eps_list": [1.0, 0.1], "p": 2.0, "gradient_instances": 20, "floor_controls": 1000,
               "x_bar": None, "amplitude": 1.0, "frequencies": [1, 4, 16, 64]},
}
SEEDED = {"simulate", "sweep", "verify"}
FORMATS = {"csv", "json", "dat", "paths", "bin"}


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"duplicate key {k!r} in config")
        out[k] = v
    return out


def _strict(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"unknown field(s) in {where}: {', '.join(extra)}")


def _fill(block, spec, where):
    _strict(block, spec, where)
    out = {}
    for key, default in spec.items():
        if key in block:
            out[key] = block[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing field {where}.{key}")
        else:
            out[key] = copy.deepcopy(default)
    return out


@dataclass
class ModelSpec:
    family: str
    params: dict
    x0: list = None
    M: float = None
    segment: dict = None

    def to_dict(self):
        out = {"family": self.family, "params": dict(self.params)}
        for k in ("x0", "M", "segment"):
            if getattr(self, k) is not None:
                out[k] = copy.deepcopy(getattr(self, k))
        return out


@dataclass
class ExperimentConfig:
    model: ModelSpec
    grid: dict
    task: str
    params: dict
    output: dict = field(default_factory=lambda: {"directory": "out", "formats": ["csv", "json", "dat"]})

    def to_dict(self):
        return {"model": self.model.to_dict(), "grid": dict(self.grid), "task": {self.task: copy.deepcopy(self.params)},
                "output": copy.deepcopy(self.output)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(float(self.grid["T"]), int(self.grid["n_steps"]))

    # -- builders
    def build_model(self):
        return build_model(self.model, self.time_grid)

    def build_init(self):
        return build_init(self.model, self.time_grid)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def from_dict(raw: dict) -> ExperimentConfig:
    _strict(raw, {"model", "grid", "task", "output"}, "config")
    for key in ("model", "grid", "task"):
        if key not in raw:
            raise ConfigError(f"missing {key} block")

    # grid
    grid = _fill(raw["grid"], {"T": REQUIRED, "n_steps": REQUIRED}, "grid")
    try:
        tg = TimeGrid(float(grid["T"]), grid["n_steps"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    # model
    mb = raw["model"]
    _strict(mb, {"family", "params", "x0", "M", "segment"}, "model")
    family = mb.get("family")
    if family not in FAMILY_PARAMS:
        raise ConfigError(f"unknown model family {family!r}")
    params = _fill(mb.get("params", {}), FAMILY_PARAMS[family], f"model.params[{family}]")
    spec = ModelSpec(family, params, mb.get("x0"), mb.get("M"), mb.get("segment"))
    if family == "delay":
        if spec.segment is None:
            raise ConfigError("delay model needs a segment block")
        _strict(spec.segment, {"constant", "values"}, "model.segment")
        if len(spec.segment) != 1:
            raise ConfigError("segment needs exactly one of constant, values")
        try:
            lag = lag_steps(float(params["tau"]), tg.dt)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if "values" in spec.segment and len(spec.segment["values"]) != lag + 1:
            raise ConfigError(f"segment table needs {lag + 1} values (spacing dt={tg.dt})")
        if not 0 < float(params["tau"]) < tg.T:
            raise ConfigError("delay tau must lie in (0, T)")
    elif spec.segment is not None:
        raise ConfigError("segment is only valid for delay models")
    if family in ("fw", "delay") and spec.M is None:
        raise ConfigError(f"model.M (growth constant) is required for the {family} family")
    if family != "delay" and spec.x0 is None:
        raise ConfigError("model.x0 is required")
    try:
        model = build_model(spec, tg)
    except (ValueError, TypeError, SyntaxError) as exc:
        raise ConfigError(f"cannot build model: {exc}") from None
    if spec.x0 is not None and len(np.atleast_1d(spec.x0)) != model.d:
        raise ConfigError(f"x0 has {len(np.atleast_1d(spec.x0))} entries, model dimension is {model.d}")

    # task
    tb = raw["task"]
    if not isinstance(tb, dict) or not tb:
        raise ConfigError("task block must hold exactly one task")
    kinds = list(tb)
    unknown = [k for k in kinds if k not in TASK_FIELDS]
    if unknown:
        raise ConfigError(f"unknown task(s): {', '.join(unknown)}")
    if len(kinds) > 1:
        raise ConfigError(f"duplicate task blocks: {', '.join(kinds)}; exactly one task is allowed")
    kind = kinds[0]
    if kind in SEEDED and "seed" not in (tb[kind] or {}):
        raise ConfigError(f"task {kind} needs a seed")
    params_t = _fill(tb[kind], TASK_FIELDS[kind], f"task.{kind}")
    _validate_task(kind, params_t, model)

    out = {"directory": "out", "formats": ["csv", "json", "dat"]}
    if "output" in raw:
        ob = _fill(raw["output"], {"directory": "out", "formats": ["csv", "json", "dat"]}, "output")
        bad = set(ob["formats"]) - FORMATS
        if bad:
            raise ConfigError(f"unknown output format(s): {', '.join(sorted(bad))}")
        out = ob
    return ExperimentConfig(spec, grid, kind, params_t, out)


def _validate_task(kind, p, model):
    if kind == "sweep":
        if (p["event"] is None) == (p["functional"] is None):
            raise ConfigError("sweep needs exactly one of event, functional")
        eps = p["eps_list"]
        if not eps or any(e <= 0 for e in eps) or any(a <= b for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps_list must be positive and strictly decreasing")
        if p["method"] not in ("naive", "importance"):
            raise ConfigError(f"unknown method {p['method']!r}")
        if p["event"] is not None:
            ev = parse_event(p["event"])
            if ev.kind == "ball" and len(ev.z) != model.d:
                raise ConfigError("event centre dimension does not match the model")
        else:
            if parse_functional(p["functional"], model.d).is_constraint:
                raise ConfigError("sweep functional must be a bounded cost")
        if int(p["n_samples"]) < 1:
            raise ConfigError("n_samples must be >= 1")
    elif kind == "minimize":
        parse_functional(p["functional"], model.d)
        if p["restarts"] > 1 and p.get("seed") is None:
            raise ConfigError("random restarts need a seed")
    elif kind == "simulate":
        if p["eps"] < 0:
            raise ConfigError("eps must be non-negative")
    if kind in ("simulate", "skeleton") and p["control"] is not None:
        _strict(p["control"], {"constant", "values"}, f"task.{kind}.control")


def parse_event(block) -> EventSet:
    _strict(block, {"kind", "z", "coord", "radius"}, "event")
    try:
        kind = block["kind"]
        if kind == "ball":
            return EventSet.ball(block["z"], block["radius"])
        return EventSet(kind, float(block["z"]), int(block.get("coord", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad event: {exc}") from None


def parse_functional(block, d=1) -> PathFunctional:
    _strict(block, {"kind", "z", "coord", "radius", "table", "c"}, "functional")
    try:
        kind = block["kind"]
        if kind == "point":
            f = PathFunctional.point(block["z"])
            if len(f.z) != d:
                raise ConfigError("point target dimension does not match the model")
            return f
        if kind in ("halfspace", "sup"):
            return PathFunctional(kind, float(block["z"]), int(block.get("coord", 0)))
        if kind == "ball":
            return PathFunctional.ball(block["z"], block["radius"])
        if kind == "cost":
            knots, vals = block["table"]
            return PathFunctional.table_cost(knots, vals, int(block.get("coord", 0)))
        if kind == "constant":
            return PathFunctional.constant(block["c"])
        raise ConfigError(f"unknown functional kind {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad functional: {exc}") from None


def build_model(spec: ModelSpec, grid: TimeGrid):
    p = spec.params
    fam = spec.family
    if fam == "schilder":
        model = Schilder(int(p["d"]))
    elif fam == "ou":
        model = OrnsteinUhlenbeck(p["a"], p["s"], int(p["d"]))
    elif fam == "cir":
        model = CIR(p["kappa"], p["mu"], p["c"])
    elif fam == "fw":
        model = Diffusion.from_expressions(p["drift"], p["dispersion"], spec.M)
    else:
        seg = build_segment(spec, grid)
        model = DelayModel.from_expressions(p["drift"], p["dispersion"], float(p["tau"]), seg,
                                            spec.M)
    if spec.M is not None:
        model.growth_constant = float(spec.M)
    return model


def build_segment(spec: ModelSpec, grid: TimeGrid) -> Segment:
    seg = spec.segment
    tau = float(spec.params["tau"])
    if "constant" in seg:
        return Segment.constant(float(seg["constant"]), tau, grid.dt)
    return Segment(np.asarray(seg["values"], dtype=float), grid.dt)


def build_init(spec: ModelSpec, grid: TimeGrid):
    if spec.family == "delay":
        return build_segment(spec, grid)
    return np.atleast_1d(np.asarray(spec.x0, dtype=float))
