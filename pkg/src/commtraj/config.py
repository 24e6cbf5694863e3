"""JSON run configuration: schema, validation, defaults and template."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .channel import ChannelParams, RateLadder, reference_ladder
from .dynamics import QuadrotorParams
from .errors import ConfigError, ParameterError
from .planner import Obstacle, PlanProblem, SAConfig
from .simulate import SimConfig

SEED_ENV = "COMMTRAJ_SEED"

_GOAL_ANGLE = 5 * math.pi / 9


@dataclass(frozen=True)
class LadderConfig:
    target_ber: float = 1e-3
    modulations: tuple[int, ...] = (2, 4, 6)
    symbol_rate: float = 1.0
    period: float = 1.0
    t_tx: float = 0.5

    def build(self) -> RateLadder:
        return reference_ladder(self.target_ber, self.symbol_rate, self.period, self.t_tx,
                            tuple(int(b) for b in self.modulations))


@dataclass(frozen=True)
class QuantizerConfig:
    Q: int = 6
    domain_radius: float | None = None   # None: farthest of start/goal from the AP
    n_grid: int = 4001
    sa_iterations: int = 2000


@dataclass(frozen=True)
class ProblemConfig:
    s: tuple[float, float] = (75.0, 0.0)
    g: tuple[float, float] = (80 * math.cos(_GOAL_ANGLE), 80 * math.sin(_GOAL_ANGLE))
    t_f: float = 100.0
    lam: float = 0.98
    w_kind: str = "max_data"
    quota: float | None = None
    eta: float | None = None
    obstacles: tuple[dict, ...] = ()

    def build(self, lam: float | None = None) -> PlanProblem:
        obs = []
        for i, o in enumerate(self.obstacles):
            unknown = set(o) - {"center", "radius", "K1", "K2"}
            if unknown:
                raise ConfigError(f"problem.obstacles[{i}]: unknown keys {sorted(unknown)}")
            obs.append(Obstacle(**o))
        return PlanProblem(self.s, self.g, self.t_f, self.lam if lam is None else lam,
                           self.w_kind, self.quota, self.eta, tuple(obs))


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[float, ...] = (1.0, 0.98, 0.8, 0.5, 0.2, 0.1)


@dataclass(frozen=True)
class ValidateConfig:
    dt: float = 1e-2
    iterations: int = 3
    angle_bound: float = math.pi / 3


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    path_dt: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    quadrotor: QuadrotorParams = field(default_factory=QuadrotorParams)
    channel: ChannelParams = field(default_factory=ChannelParams)
    ladder: LadderConfig = field(default_factory=LadderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    sa: SAConfig = field(default_factory=SAConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "seed"}
# fields fixed by the CLI rather than the file
_EXCLUDED = {"sim": {"seed"}}

_DOCS = {
    "_about": "Run configuration. Keys starting with '_' are comments and are ignored.",
    "quadrotor": "Airframe constants (SI units) and the altitude/yaw feedback gains az1, az2, apsi1, apsi2.",
    "channel": "Path-loss exponent alpha, SNR in dB at 1 m, shadowing variance in dB^2, AP position, minimum AP distance.",
    "ladder": "Square-QAM rate ladder: target BER, bits per symbol per mode, symbol rate, duplexing period T and uplink slot T_tx.",
    "quantizer": "Number of rate levels Q, radius of the quantized domain (null: farthest of start/goal from the AP), integration grid size, border annealing steps.",
    "problem": "Start s, goal g, horizon t_f, weight lam in [0,1], w_kind 'max_data' or 'quota' (needs quota, eta), obstacles [{center, radius, K1, K2}].",
    "sa": "Trajectory annealing settings per depth; region_penalty is the relative cost per metre a leg leaves its booked region.",
    "sim": "Monte-Carlo trials; dt_sample null means one sample per duplexing period; report_units 'normalized' or 'bits'.",
    "sweep": "Lambda values for the sweep table.",
    "validate": "Nonlinear check: integration step, refinement passes, tilt bound in rad.",
    "output": "Output directory and the sampling step of path.csv.",
    "seed": "Master seed; --seed and COMMTRAJ_SEED take precedence.",
}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _coerce(value, default):
    """Convert JSON lists back to tuples where the default is a tuple."""
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(_coerce(v, None) if not isinstance(v, dict) else v for v in value)
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    return value


def _build_section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in _EXCLUDED.get(name, ())}
    kwargs = {}
    for key, value in raw.items():
        if key.startswith("_"):
            continue
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}' (allowed: {sorted(known)})")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[key] = _coerce(value, default)
    try:
        return cls(**kwargs)
    except (ParameterError, TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be an object")
    kwargs = {}
    for key, value in data.items():
        if key.startswith("_"):
            continue
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"seed must be an integer, got {value!r}")
            kwargs["seed"] = value
        elif key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key].default_factory, value)
        else:
            raise ConfigError(f"unknown top-level key '{key}' (allowed: {sorted(_SECTIONS) + ['seed']})")
    cfg = RunConfig(**kwargs)
    if cfg.quantizer.Q < 2:
        raise ConfigError(f"quantizer.Q must be >= 2, got {cfg.quantizer.Q}")
    try:
        cfg.problem.build()
        cfg.ladder.build()
    except (ParameterError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig, with_docs: bool = False) -> dict:
    out: dict = {}
    if with_docs:
        out["_about"] = _DOCS["_about"]
    for name in _SECTIONS:
        section = {}
        if with_docs:
            section["_doc"] = _DOCS[name]
        section.update({k: _plain(v) for k, v in dataclasses.asdict(getattr(cfg, name)).items()
                        if k not in _EXCLUDED.get(name, ())})
        out[name] = section
    if with_docs:
        out["_seed"] = _DOCS["seed"]
    out["seed"] = cfg.seed
    return out


def template_text() -> str:
    return json.dumps(config_to_dict(RunConfig(), with_docs=True), indent=2) + "\n"


def resolve_seed(flag: int | None, cfg: RunConfig) -> int:
    """--seed beats COMMTRAJ_SEED, which beats the config file."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return int(cfg.seed)
