"""Run configuration: a line-oriented ``section.key = value`` file.

Missing keys take their defaults, unknown keys and ill-typed values are
errors that cite the offending line.  Any key can also be overridden from
the environment as ``PTDFCONT_<SECTION>__<KEY>`` (``PTDFCONT_SEED`` for
top-level keys).
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import DERIV_RATIO, PendulumParams

ENV_PREFIX = "PTDFCONT_"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = ""):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else (f"{source}: " if source else "")
        super().__init__(where + message)


@dataclass(frozen=True)
class ModelSection:
    m: float = 1.0
    l: float = 0.3
    b: float = 0.01
    g: float = 9.81
    omega: float = 6.0 * math.pi


@dataclass(frozen=True)
class ControlSection:
    gain: float = 4.0
    deriv_ratio: float = DERIV_RATIO
    relaxation: float = 1.0
    projection_order: int = 0


@dataclass(frozen=True)
class SimSection:
    steps_per_period: int = 512


@dataclass(frozen=True)
class TransientSection:
    eps: float = 1e-6
    consecutive: int = 3
    max_periods: int = 500
    u_escape: float = 1.0


@dataclass(frozen=True)
class SimulateSection:
    p: float = 0.02
    phi0: float = math.nan  # nan: start from rest and measure the phase
    periods: int = 200
    orbit_phase: float = math.nan  # finite: start on the oracle orbit with this average phase


@dataclass(frozen=True)
class ContinuationSection:
    p_start: float = 0.02
    phi0_start: float = math.nan
    sigma_p: float = 2e-4
    sigma_phi: float = 1e-4
    fd_dp: float = 1.0
    fd_dphi: float = 10.0
    newton_tol: float = 5e-3
    max_iter: int = 8
    h: float = 5.0
    h_min: float = 0.05
    h_max: float = 200.0
    grow: float = 1.3
    max_points: int = 400
    points_after_fold: int = 15
    p_max: float = 0.05
    transient_ratio: float = 0.2


@dataclass(frozen=True)
class OracleSection:
    rtol: float = 1e-11
    atol: float = 1e-12
    nodes: int = 128
    tol: float = 1e-10
    p_start: float = 0.02
    h: float = 0.05
    h_max: float = 0.1
    max_points: int = 200
    phase_span: float = 3.5


@dataclass(frozen=True)
class ChartsSection:
    g_min: float = 0.0
    g_max: float = 15.0
    g_cells: int = 60
    phase_halfwidth: float = 0.3
    phase_cells: int = 60
    mesh: int = 64
    tangent: str = "exact"


@dataclass(frozen=True)
class CalibrateSection:
    l_values: str = "0.10,0.15,0.20,0.25,0.30,0.35,0.40"
    b: float = 0.01
    p_start: float = 0.02
    p0_min: float = 5e-4
    p0_max: float = 1.5e-2
    margin: float = 0.98
    g_from: float = 1.0


_SECTIONS = {
    "model": ModelSection,
    "control": ControlSection,
    "sim": SimSection,
    "transient": TransientSection,
    "simulate": SimulateSection,
    "continuation": ContinuationSection,
    "oracle": OracleSection,
    "charts": ChartsSection,
    "calibrate": CalibrateSection,
}
_TOP = {"output_dir": str, "seed": int}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    control: ControlSection = field(default_factory=ControlSection)
    sim: SimSection = field(default_factory=SimSection)
    transient: TransientSection = field(default_factory=TransientSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    continuation: ContinuationSection = field(default_factory=ContinuationSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    charts: ChartsSection = field(default_factory=ChartsSection)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    output_dir: str = "out"
    seed: int = 0

    @classmethod
    def defaults(cls) -> "RunConfig":
        """Built-in defaults with the calibrated model constants."""
        d = PendulumParams.default()
        return cls(model=ModelSection(d.m, d.l, d.b, d.g, d.omega))

    def params(self) -> PendulumParams:
        m = self.model
        return PendulumParams(m=m.m, l=m.l, b=m.b, g=m.g, omega=m.omega)

    def render(self) -> str:
        """Canonical text form; parsing it gives back an equal config."""
        lines = [f"output_dir = {self.output_dir}", f"seed = {self.seed}"]
        for name in _SECTIONS:
            sec = getattr(self, name)
            for f in fields(sec):
                lines.append(f"{name}.{f.name} = {_fmt(getattr(sec, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of every result-affecting setting (the output directory is excluded)."""
        body = self.render().split("\n", 1)[1]
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def header(self, kind: str) -> list[str]:
        return [f"ptdfcont {kind}", f"config-sha256 {self.digest()}"]

    def write_resolved(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "resolved.cfg"
        path.write_text(self.render())
        return path


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(text: str, typ, key: str, line: int | None, source: str):
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {text!r}", line, source) from None


def _field_type(cls, name: str):
    for f in fields(cls):
        if f.name == name:
            t = f.type if isinstance(f.type, type) else {"float": float, "int": int, "str": str}[f.type]
            return t
    return None


def _assign(values: dict, key: str, raw: str, line: int | None, source: str) -> None:
    if "." not in key:
        if key not in _TOP:
            raise ConfigError(f"unknown key {key!r}", line, source)
        values[key] = _convert(raw, _TOP[key], key, line, source)
        return
    section, name = key.split(".", 1)
    cls = _SECTIONS.get(section)
    typ = _field_type(cls, name) if cls else None
    if typ is None:
        raise ConfigError(f"unknown key {key!r}", line, source)
    values.setdefault(section, {})[name] = (_convert(raw, typ, key, line, source), (line, source))


def _validate(cfg: RunConfig, origins: dict, source: str) -> None:
    def fail(key, message):
        raise ConfigError(message, *origins.get(key, (None, source)))

    R = cfg.control.relaxation
    if not (0.0 < R <= 1.0):
        fail("control.relaxation", f"control.relaxation = {R}: the relaxation must satisfy 0 < R <= 1")
    if cfg.control.projection_order < 0:
        fail("control.projection_order", "control.projection_order must be >= 0")
    if cfg.charts.tangent not in ("exact", "branch"):
        fail("charts.tangent", "charts.tangent must be 'exact' or 'branch'")
    try:
        cfg.params()
    except ValueError as exc:
        raise ConfigError(str(exc), None, source) from None


def parse_text(text: str, source: str = "<string>", env: dict | None = None) -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, val = (s.strip() for s in line.split("=", 1))
        _assign(values, key, val, lineno, source)
    env = os.environ if env is None else env
    for name, val in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        key = rest.replace("__", ".", 1)
        _assign(values, key, val, None, f"${name}")
    return _build(values, source)


def _build(values: dict, source: str) -> RunConfig:
    cfg = RunConfig.defaults()
    origins = {}
    changes = {}
    for name in _SECTIONS:
        if name in values:
            sec = getattr(cfg, name)
            upd = {k: v for k, (v, _) in values[name].items()}
            origins.update({f"{name}.{k}": where for k, (_, where) in values[name].items()})
            changes[name] = replace(sec, **upd)
    for key in _TOP:
        if key in values:
            changes[key] = values[key]
    cfg = replace(cfg, **changes)
    _validate(cfg, origins, source)
    return cfg


def parse_config(path, env: dict | None = None) -> RunConfig:
    """Read a configuration file; an empty file yields the defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", None, str(path))
    return parse_text(path.read_text(), str(path), env)
