"""Experiment config files.

INI-style sections ``[problem]``, ``[topology]``, ``[algorithm]`` and
``[run]``. The keys ``n``, ``B``, ``tag`` and ``seeds`` accept
comma-separated lists; a sweep runs their Cartesian product.
"""

from __future__ import annotations

import configparser
import itertools
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

from btpp.algorithms import StepSizeSchedule, effective_stepsize
from btpp.simulator import ProblemSpec, RunConfig
from btpp.topology import tree_diameter


class ConfigError(ValueError):
    pass


def _bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "yes", "1", "on"):
        return True
    if value in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _list(cast: Callable) -> Callable:
    def parse(raw: str) -> list:
        items = [item.strip() for item in raw.split(",")]
        if not all(items):
            raise ValueError(f"empty item in list {raw!r}")
        return [cast(item) for item in items]

    return parse


SCHEMA: dict[str, dict[str, Callable]] = {
    "problem": {
        "type": str,
        "n": _list(int),
        "p": int,
        "J": int,
        "sigma_h": float,
        "reg_coeff": float,
        "kappa": float,
        "noise_sigma": float,
        "batch": int,
    },
    "topology": {"B": _list(int)},
    "algorithm": {
        "tag": _list(str),
        "schedule": str,
        "gamma": float,
        "decay_factor": float,
        "decay_interval": int,
        "rescale_by_n": _bool,
        "delta_f": float,
        "sigma_sq": float,
        "L": float,
        "mu": float,
    },
    "run": {"T": int, "seeds": _list(int), "stride": int, "engine": str},
}

REQUIRED = {"problem": ("type", "n", "p"), "algorithm": ("tag",), "run": ("T",)}


@dataclass(frozen=True)
class ExperimentConfig:
    source: str
    problem: dict
    ns: tuple[int, ...]
    Bs: tuple[int, ...]
    tags: tuple[str, ...]
    seeds: tuple[int, ...]
    algorithm: dict
    T: int
    stride: int
    engine: str

    @property
    def is_single(self) -> bool:
        return len(self.ns) == len(self.Bs) == len(self.tags) == 1

    def run_config(self, n: int, B: int, tag: str, seed: int) -> RunConfig:
        a = self.algorithm
        schedule = StepSizeSchedule(
            kind=a.get("schedule", "constant"),
            base=a.get("gamma", 0.1),
            rescale_by_n=bool(a.get("rescale_by_n", False)) and tag == "btpp",
            n=n,
            decay_factor=a.get("decay_factor", 1.0),
            decay_interval=a.get("decay_interval", 1),
            delta_f=a.get("delta_f"),
            sigma_sq=a.get("sigma_sq"),
            L=a.get("L"),
            mu=a.get("mu"),
            T=self.T,
        )
        spec = ProblemSpec(kind=self.problem["type"], n=n, **{k: v for k, v in self.problem.items() if k not in ("type", "n")})
        return RunConfig(
            algorithm=tag, problem=spec, schedule=schedule, T=self.T, B=B, seed=seed,
            stride=self.stride, engine=self.engine,
        )

    def expand(self, seeds: Optional[Sequence[int]] = None) -> list[RunConfig]:
        """Run configs in fixed coordinate order: n, B, tag, then seed."""
        seeds = tuple(seeds) if seeds is not None else self.seeds
        return [
            self.run_config(n, B, tag, seed)
            for n, B, tag, seed in itertools.product(self.ns, self.Bs, self.tags, seeds)
        ]


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"\s*\[([^\]]+)\]", line)
        if header:
            section = header.group(1).strip()
            continue
        m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1))] = lineno
    return lines


def preset_path(name: str) -> Path:
    path = resources.files("btpp") / "presets" / f"{name}.ini"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return Path(str(path))


def resolve(ref: str) -> Path:
    """A filesystem path, or ``preset:NAME`` for a bundled preset."""
    if ref.startswith("preset:"):
        return preset_path(ref.split(":", 1)[1])
    return Path(ref)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    lines = _key_lines(text)

    def where(section: str, key: Optional[str] = None) -> str:
        line = lines.get((section, key)) if key else None
        return f"{source}:{line}" if line else f"{source} [{section}]"

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where(section, key)}: unknown key {key!r} in [{section}]")
            try:
                values[section][key] = SCHEMA[section][key](raw)
            except ValueError as err:
                raise ConfigError(f"{where(section, key)}: bad value for {key}: {err}") from None
    for section, keys in REQUIRED.items():
        for key in keys:
            if key not in values.get(section, {}):
                raise ConfigError(f"{source}: missing required key {key!r} in [{section}]")

    problem = dict(values["problem"])
    ns = tuple(problem.pop("n"))
    topo = values.get("topology", {})
    algo = dict(values["algorithm"])
    tags = tuple(algo.pop("tag"))
    run = values["run"]
    config = ExperimentConfig(
        source=source,
        problem=problem,
        ns=ns,
        Bs=tuple(topo.get("B", [2])),
        tags=tags,
        seeds=tuple(run.get("seeds", [0])),
        algorithm=algo,
        T=run["T"],
        stride=run.get("stride", 10),
        engine=run.get("engine", "matrix"),
    )
    validate(config, where)
    return config


def validate(config: ExperimentConfig, where: Callable = lambda s, k=None: f"[{s}]") -> None:
    """Check every expanded run against its preconditions before anything executes."""
    kind = config.algorithm.get("schedule", "constant")
    if kind in ("constant", "decayed") and "gamma" not in config.algorithm:
        raise ConfigError(f"{where('algorithm')}: schedule {kind!r} needs gamma")
    for n, B, tag in itertools.product(config.ns, config.Bs, config.tags):
        try:
            rc = config.run_config(n, B, tag, config.seeds[0])
            _check_problem(rc.problem)
            d = tree_diameter(n, B) if tag == "btpp" else None
            effective_stepsize(rc.schedule.with_n(n, d), 0)
        except ValueError as err:
            raise ConfigError(f"{config.source}: invalid run (n={n}, B={B}, tag={tag}): {err}") from None


def _check_problem(spec: ProblemSpec) -> None:
    if spec.kind not in ("logistic", "quadratic"):
        raise ValueError(f"unknown problem type {spec.kind!r}")
    if spec.n < 1 or spec.p < 1 or spec.J < 1:
        raise ValueError("n, p and J must be positive")
    if not 1 <= spec.batch <= spec.J:
        raise ValueError(f"batch must be in 1..J={spec.J}")
    if spec.sigma_h < 0 or spec.reg_coeff < 0 or spec.noise_sigma < 0:
        raise ValueError("sigma_h, reg_coeff and noise_sigma must be non-negative")
    if spec.kappa < 1:
        raise ValueError("kappa must be >= 1")


def load_config(ref: str) -> ExperimentConfig:
    path = resolve(ref)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {ref}: {err}") from None
    return parse_config(text, source=str(path) if not ref.startswith("preset:") else ref)
