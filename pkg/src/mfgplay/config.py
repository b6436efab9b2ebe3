"""Experiment configuration: a flat ``key = value`` format with dotted sections.

Example::

    name = fig10a
    seed = 2024
    model.d = 2
    model.kappa = 10
    numerics.N = 50000
    annealing.schedule = 1.0, 0.9, 0.8

Lines starting with ``#`` are comments, as is anything after `` #`` on a
line. Keys are case-sensitive and must appear in :data:`SCHEMA`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional

from mfgplay.model import LQModel, make_coupling
from mfgplay.noise import TimeGrid
from mfgplay.play import SCHEMES, PlayConfig


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every violation found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _float_list(text: str) -> tuple:
    items = [t.strip() for t in text.strip().strip("[]").split(",")]
    return tuple(float(t) for t in items if t)


def _optional_float(text: str) -> Optional[float]:
    return None if text.lower() in ("", "auto", "none") else float(text)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    parse.options = options
    return parse


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    help: str


DEFAULT_SCHEDULE = tuple(round(1.0 - 0.1 * q, 10) for q in range(10))

SCHEMA = {
    "name": Field(str, None, "experiment name (required)"),
    "kind": Field(_choice("play", "costcompare", "anneal"), "play", "what `run` executes"),
    "seed": Field(_int, 0, "noise bank seed"),
    "output": Field(str, "", "output directory (overridden by --out)"),
    "model.d": Field(_int, 1, "state dimension"),
    "model.coupling": Field(_choice("cos_kappa", "cos_shifted", "table"), "cos_kappa", "terminal coupling g"),
    "model.kappa": Field(float, 1.0, "frequency of the cosine couplings"),
    "model.x0": Field(_optional_float, None, "shift of cos_shifted; auto picks the root of cos(kappa x) = 2x"),
    "model.table_x": Field(_float_list, (), "abscissae of a table coupling"),
    "model.table_g": Field(_float_list, (), "values of a table coupling"),
    "model.sigma": Field(float, 0.0, "idiosyncratic noise intensity"),
    "model.epsilon": Field(float, 1.0, "common noise intensity"),
    "model.T": Field(float, 1.0, "horizon"),
    "model.x0_state": Field(float, 0.0, "initial state, every coordinate"),
    "numerics.p": Field(_int, 10, "time steps"),
    "numerics.M": Field(_int, 1, "particles per common-noise realization"),
    "numerics.N": Field(_int, 1000, "common-noise realizations"),
    "numerics.D": Field(_int, 4, "total Hermite degree"),
    "numerics.n_iters": Field(_int, 10, "fictitious-play iterations"),
    "numerics.picard_iters": Field(_int, 10, "Picard iterations of the reference solver"),
    "numerics.clamp": Field(float, 1.0, "clip bound on the reference intercept"),
    "numerics.scheme": Field(_choice(*SCHEMES), "common_only", "noise scheme"),
    "numerics.variant": Field(_choice("standard", "averaged_guess"), "standard", "tilt rule"),
    "numerics.riccati": Field(_choice("learned", "known"), "learned", "learn the gain or freeze it"),
    "numerics.standardize": Field(_choice("diag", "cholesky"), "diag", "feature standardization"),
    "numerics.weighting": Field(_choice("tail", "step", "full"), "tail", "weights of the analytic regressions"),
    "numerics.reference": Field(_bool, True, "solve the reference and report the L2 error"),
    "optimizer.backend": Field(_choice("adam", "analytic"), "adam", "best-response backend"),
    "optimizer.lr": Field(float, 0.01, "learning rate"),
    "optimizer.epochs": Field(_int, 15, "full-batch steps per best response"),
    "optimizer.beta1": Field(float, 0.9, "first-moment decay"),
    "optimizer.beta2": Field(float, 0.999, "second-moment decay"),
    "optimizer.eps": Field(float, 1e-8, "denominator guard"),
    "optimizer.warm_start": Field(_bool, True, "start each best response from the previous policy"),
    "annealing.schedule": Field(_float_list, DEFAULT_SCHEDULE, "strictly decreasing noise levels"),
    "annealing.warm_start_policy": Field(_bool, True, "carry the policy across stages"),
    "annealing.bins": Field(_int, 30, "histogram bins per stage"),
    "compare.M": Field(_int, 0, "particles of the idiosyncratic run; 0 means numerics.N"),
    "compare.sigma": Field(float, 1.0, "idiosyncratic intensity of the idiosyncratic run"),
    "equilibria.lo": Field(float, -2.0, "left end of the root bracket"),
    "equilibria.hi": Field(float, 2.0, "right end of the root bracket"),
    "equilibria.samples": Field(_int, 2001, "points of the potential table"),
}

# Keys that do not change any numerical output.
NON_NUMERIC = ("output",)


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def name(self) -> str:
        return self.values["name"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def fingerprint(self) -> str:
        items = {k: v for k, v in self.values.items() if k not in NON_NUMERIC}
        text = json.dumps(items, sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def coupling(self):
        v = self.values
        table = (v["model.table_x"], v["model.table_g"]) if v["model.coupling"] == "table" else None
        return make_coupling(v["model.coupling"], d=v["model.d"], kappa=v["model.kappa"], x0=v["model.x0"], table=table)

    def model(self, **overrides) -> LQModel:
        v = self.values
        kw = dict(
            g=self.coupling(),
            d=v["model.d"],
            sigma=v["model.sigma"],
            epsilon=v["model.epsilon"],
            T=v["model.T"],
            x0=v["model.x0_state"],
        )
        kw.update(overrides)
        return LQModel(**kw)

    def grid(self) -> TimeGrid:
        return TimeGrid(self.values["model.T"], self.values["numerics.p"])

    def play_config(self, **overrides) -> PlayConfig:
        v = self.values
        kw = dict(
            scheme=v["numerics.scheme"],
            n_iters=v["numerics.n_iters"],
            D=v["numerics.D"],
            best_response=v["optimizer.backend"],
            variant=v["numerics.variant"],
            riccati=v["numerics.riccati"],
            lr=v["optimizer.lr"],
            epochs=v["optimizer.epochs"],
            beta1=v["optimizer.beta1"],
            beta2=v["optimizer.beta2"],
            adam_eps=v["optimizer.eps"],
            standardize=v["numerics.standardize"],
            weighting=v["numerics.weighting"],
            warm_start=v["optimizer.warm_start"],
        )
        kw.update(overrides)
        return PlayConfig(**kw)

    def with_overrides(self, pairs) -> "ExperimentConfig":
        """Apply ``key=value`` strings and revalidate."""
        lines = [f"{k} = {_render(v)}" for k, v in self.values.items() if v is not None and v != ()]
        lines += list(pairs)
        return parse_config_text("\n".join(lines), "<overrides>", allow_repeats=True)


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(x) for x in value)
    return str(value)


def _constraints(v: dict) -> list:
    out = []

    def need(cond: bool, message: str):
        if not cond:
            out.append(message)

    need(bool(v["name"]), "name: required")
    for key in ("numerics.p", "numerics.M", "numerics.N", "numerics.n_iters", "numerics.picard_iters",
                "optimizer.epochs", "annealing.bins", "model.d"):
        need(v[key] >= 1, f"{key}: must be at least 1, got {v[key]}")
    need(v["numerics.D"] >= 0, f"numerics.D: must be non-negative, got {v['numerics.D']}")
    need(v["compare.M"] >= 0, f"compare.M: must be non-negative, got {v['compare.M']}")
    need(v["equilibria.samples"] >= 2, f"equilibria.samples: must be at least 2, got {v['equilibria.samples']}")
    for key in ("model.sigma", "model.epsilon", "compare.sigma"):
        need(v[key] >= 0, f"{key}: must be non-negative, got {v[key]}")
    for key in ("model.T", "numerics.clamp", "optimizer.lr", "optimizer.eps"):
        need(v[key] > 0, f"{key}: must be positive, got {v[key]}")
    for key in ("optimizer.beta1", "optimizer.beta2"):
        need(0 <= v[key] < 1, f"{key}: must lie in [0, 1), got {v[key]}")
    floats = [k for k, f in SCHEMA.items() if f.parse is float]
    for key in floats:
        need(math.isfinite(v[key]), f"{key}: must be finite")
    need(v["equilibria.lo"] < v["equilibria.hi"], "equilibria: lo must be below hi")
    sched = v["annealing.schedule"]
    need(len(sched) >= 1, "annealing.schedule: must not be empty")
    need(all(e > 0 for e in sched), "annealing.schedule: levels must be positive")
    need(all(b < a for a, b in zip(sched, sched[1:])), "annealing.schedule: must be strictly decreasing")
    coupling = v["model.coupling"]
    if coupling == "cos_kappa":
        need(v["model.d"] in (1, 2), "model.coupling: cos_kappa needs model.d = 1 or 2")
    if coupling == "cos_shifted":
        need(v["model.d"] == 1, "model.coupling: cos_shifted needs model.d = 1")
    if coupling == "table":
        xs, gs = v["model.table_x"], v["model.table_g"]
        need(v["model.d"] == 1, "model.coupling: table needs model.d = 1")
        need(len(xs) >= 2 and len(xs) == len(gs), "model.table_x/table_g: need two or more points of equal count")
        need(all(b > a for a, b in zip(xs, xs[1:])), "model.table_x: must be strictly increasing")
    scheme = v["numerics.scheme"]
    if v["kind"] != "costcompare":
        if scheme == "common_only":
            need(v["model.sigma"] == 0, "numerics.scheme: common_only needs model.sigma = 0")
            need(v["model.epsilon"] > 0, "numerics.scheme: common_only needs model.epsilon > 0")
        elif scheme == "idio_only":
            need(v["model.epsilon"] == 0, "numerics.scheme: idio_only needs model.epsilon = 0")
            need(v["numerics.N"] == 1, "numerics.scheme: idio_only needs numerics.N = 1")
            need(v["numerics.D"] == 0, "numerics.scheme: idio_only needs numerics.D = 0")
        else:
            need(v["model.epsilon"] > 0, "numerics.scheme: two_noise needs model.epsilon > 0")
    return out


def parse_config_text(text: str, source: str = "<string>", allow_repeats: bool = False) -> ExperimentConfig:
    """Parse and validate configuration text; raise :class:`ConfigError` listing every problem."""
    values = {k: f.default for k, f in SCHEMA.items()}
    seen = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(" #", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in seen and not allow_repeats:
            problems.append(f"{source}:{lineno}: {key!r} already set on line {seen[key]}")
            continue
        seen[key] = lineno
        try:
            values[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            problems.append(f"{source}:{lineno}: {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    problems = _constraints(values)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(values)


def recipe_names() -> list:
    return sorted(p.name[:-4] for p in resources.files("mfgplay.recipes").iterdir() if p.name.endswith(".cfg"))


def recipe_text(name: str) -> str:
    return resources.files("mfgplay.recipes").joinpath(f"{name}.cfg").read_text()


def parse_config(path) -> ExperimentConfig:
    """Parse a file, or a shipped recipe when ``path`` names one and no such file exists."""
    path = Path(path)
    if not path.exists():
        if str(path) in recipe_names():
            return parse_config_text(recipe_text(str(path)), f"recipe:{path}")
        raise ConfigError([f"{path}: no such file or shipped recipe"])
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return parse_config_text(text, str(path))
