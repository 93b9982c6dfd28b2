from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

_REQUIRED = object()


def _parse_bool_env(name: str, default: bool = False) -> bool:
    raw = os.getenv(name, "").strip().lower()
    if raw == "":
        return default
    return raw in ("1", "true", "yes", "on")


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass(frozen=True)
class ObservabilitySettings:
    service_name: str = "crossfv"
    tracing_enabled: bool = False
    otlp_endpoint: str = ""
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "ObservabilitySettings":
        return cls(
            service_name=os.getenv("OTEL_SERVICE_NAME", "crossfv").strip() or "crossfv",
            tracing_enabled=_parse_bool_env("CROSSFV_TRACING_ENABLED", False),
            otlp_endpoint=os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT", "").strip(),
            log_level=os.getenv("CROSSFV_LOG_LEVEL", "INFO").strip().upper() or "INFO",
        )

    def is_configured_for_tracing(self) -> bool:
        return self.tracing_enabled


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    dt_shrink: float = 0.2
    dt_grow: float = 1.1
    dt_min: float = 1e-8
    dt_max: float = 1e-2
    dt_initial: float = 1e-5
    adaptive: bool = True
    fixed_dt: float | None = None
    damping_min: float = 2.0**-30
    fd_step: float = 1e-8

    def __post_init__(self) -> None:
        if not (0 < self.dt_min <= self.dt_initial <= self.dt_max):
            raise ConfigError(
                f"time step bounds must satisfy 0 < dt_min <= dt_initial <= dt_max, "
                f"got {self.dt_min}, {self.dt_initial}, {self.dt_max}"
            )
        if not (0 < self.dt_shrink < 1 < self.dt_grow):
            raise ConfigError(
                f"step factors must satisfy 0 < dt_shrink < 1 < dt_grow, got {self.dt_shrink}, {self.dt_grow}"
            )
        if self.newton_tol <= 0 or self.newton_max_iter < 1:
            raise ConfigError("newton_tol must be positive and newton_max_iter at least 1")
        if not (0 < self.damping_min < 1):
            raise ConfigError("damping_min must lie in (0, 1)")
        if not self.adaptive and (self.fixed_dt is None or self.fixed_dt <= 0):
            raise ConfigError("fixed time stepping needs a positive time.fixed_dt")

    @classmethod
    def from_section(cls, section: Mapping[str, str], *, name: str = "time") -> "SolverConfig":
        mode = section.get("mode", "adaptive").strip().lower()
        if mode not in ("adaptive", "fixed"):
            raise ConfigError(f"{name}.mode must be 'adaptive' or 'fixed', got {mode!r}")
        kwargs: dict[str, Any] = {"adaptive": mode == "adaptive"}
        for key in ("newton_tol", "dt_shrink", "dt_grow", "dt_min", "dt_max", "dt_initial", "damping_min", "fd_step"):
            if key in section:
                kwargs[key] = _to_float(section[key], f"{name}.{key}")
        if "newton_max_iter" in section:
            kwargs["newton_max_iter"] = _to_int(section["newton_max_iter"], f"{name}.newton_max_iter")
        if "fixed_dt" in section:
            kwargs["fixed_dt"] = _to_float(section["fixed_dt"], f"{name}.fixed_dt")
        return cls(**kwargs)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    params: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class MeshSpec:
    kind: str = "interval"
    a: float = 0.0
    b: float = 1.0
    n_cells: int = 40
    lx: float = 1.0
    ly: float = 1.0
    nx: int = 32
    ny: int = 32
    path: Path | None = None


@dataclass(frozen=True)
class Block:
    x0: float
    x1: float
    y0: float
    y1: float
    values: tuple[float, ...]


@dataclass(frozen=True)
class InitialSpec:
    preset: str = "testcase1"
    values: tuple[float, ...] = ()
    background: tuple[float, ...] = ()
    blocks: tuple[Block, ...] = ()


@dataclass(frozen=True)
class ConvergenceSpec:
    reference: int = 1280
    ladder: tuple[int, ...] = (40, 80, 160, 320)
    t_end: float = 1e-2
    full_scale: bool = False


@dataclass(frozen=True)
class DecaySpec:
    nx: int = 32
    ny: int = 32
    t_end: float = 15.0
    window_start: float | None = None
    window_end: float | None = None
    initial: str = "testcase2"


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    mesh: MeshSpec = field(default_factory=MeshSpec)
    initial: InitialSpec = field(default_factory=InitialSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    t_end: float = 1e-2
    output_dir: Path = Path("out")
    snapshot_every: int = 0
    steady: str = "auto"
    convergence: ConvergenceSpec = field(default_factory=ConvergenceSpec)
    decay: DecaySpec = field(default_factory=DecaySpec)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as err:
            raise ConfigError(f"cannot parse {path}: {err}") from err
        return cls.from_parser(parser, base_dir=path.parent)

    @classmethod
    def from_text(cls, text: str, *, base_dir: Path | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"cannot parse config: {err}") from err
        return cls.from_parser(parser, base_dir=base_dir or Path.cwd())

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser, *, base_dir: Path) -> "RunConfig":
        model_section = _section(parser, "model")
        name = _get(model_section, "model", "name").strip().lower()
        model = ModelSpec(name=name, params={k: v for k, v in model_section.items() if k != "name"})

        time_section = _section(parser, "time", required=False)
        solver = SolverConfig.from_section(time_section)
        t_end = _to_float(_get(time_section, "time", "t_end", "1e-2"), "time.t_end")
        if t_end < 0:
            raise ConfigError("time.t_end must be nonnegative")

        output_section = _section(parser, "output", required=False)
        output_dir = Path(_get(output_section, "output", "directory", "out"))
        if not output_dir.is_absolute():
            output_dir = base_dir / output_dir
        snapshot_every = _to_int(_get(output_section, "output", "snapshot_every", "0"), "output.snapshot_every")

        diagnostics_section = _section(parser, "diagnostics", required=False)
        steady = _get(diagnostics_section, "diagnostics", "steady", "auto").strip().lower()

        return cls(
            model=model,
            mesh=_parse_mesh(_section(parser, "mesh", required=False), base_dir),
            initial=_parse_initial(_section(parser, "initial", required=False)),
            solver=solver,
            t_end=t_end,
            output_dir=output_dir,
            snapshot_every=snapshot_every,
            steady=steady,
            convergence=_parse_convergence(_section(parser, "convergence", required=False)),
            decay=_parse_decay(_section(parser, "decay", required=False)),
        )


def _section(parser: configparser.ConfigParser, name: str, *, required: bool = True) -> Mapping[str, str]:
    if parser.has_section(name):
        return dict(parser.items(name))
    if required:
        raise ConfigError(f"missing config key: {name} (section [{name}] not found)")
    return {}


def _get(section: Mapping[str, str], section_name: str, key: str, default: Any = _REQUIRED) -> str:
    if key in section:
        return section[key]
    if default is _REQUIRED:
        raise ConfigError(f"missing config key: {section_name}.{key}")
    return default


def _to_float(raw: str, key: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from err


def _to_int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from err


def parse_floats(raw: str, key: str) -> tuple[float, ...]:
    parts = [p for p in raw.replace(",", " ").split() if p]
    return tuple(_to_float(p, key) for p in parts)


def parse_table(raw: str, key: str) -> tuple[tuple[float, ...], ...]:
    rows = [row for row in raw.split(";") if row.strip()]
    table = tuple(parse_floats(row, key) for row in rows)
    if not table or any(len(row) != len(table) for row in table):
        raise ConfigError(f"{key}: expected a square table with rows separated by ';'")
    return table


def _parse_mesh(section: Mapping[str, str], base_dir: Path) -> MeshSpec:
    kind = _get(section, "mesh", "kind", "interval").strip().lower()
    if kind == "interval":
        return MeshSpec(
            kind=kind,
            a=_to_float(_get(section, "mesh", "a", "0"), "mesh.a"),
            b=_to_float(_get(section, "mesh", "b", "1"), "mesh.b"),
            n_cells=_to_int(_get(section, "mesh", "n_cells", "40"), "mesh.n_cells"),
        )
    if kind == "rectangle":
        return MeshSpec(
            kind=kind,
            lx=_to_float(_get(section, "mesh", "lx", "1"), "mesh.lx"),
            ly=_to_float(_get(section, "mesh", "ly", "1"), "mesh.ly"),
            nx=_to_int(_get(section, "mesh", "nx", "32"), "mesh.nx"),
            ny=_to_int(_get(section, "mesh", "ny", "32"), "mesh.ny"),
        )
    if kind == "file":
        path = Path(_get(section, "mesh", "path"))
        if not path.is_absolute():
            path = base_dir / path
        if not path.is_file():
            raise ConfigError(f"mesh.path: file not found: {path}")
        return MeshSpec(kind=kind, path=path)
    raise ConfigError(f"mesh.kind must be interval, rectangle or file, got {kind!r}")


def _parse_initial(section: Mapping[str, str]) -> InitialSpec:
    preset = _get(section, "initial", "preset", "testcase1").strip().lower()
    if preset in ("testcase1", "testcase2", "steady"):
        return InitialSpec(preset=preset)
    if preset == "constant":
        return InitialSpec(preset=preset, values=parse_floats(_get(section, "initial", "values"), "initial.values"))
    if preset == "blocks":
        background = parse_floats(_get(section, "initial", "background"), "initial.background")
        blocks = []
        for key in sorted(k for k in section if k.startswith("block")):
            raw = section[key]
            if "|" not in raw:
                raise ConfigError(f"initial.{key}: expected 'x0 x1 y0 y1 | v1 v2 ...'")
            box_raw, values_raw = raw.split("|", 1)
            box = parse_floats(box_raw, f"initial.{key}")
            if len(box) != 4:
                raise ConfigError(f"initial.{key}: expected four box coordinates, got {len(box)}")
            values = parse_floats(values_raw, f"initial.{key}")
            if len(values) != len(background):
                raise ConfigError(f"initial.{key}: expected {len(background)} species values")
            blocks.append(Block(box[0], box[1], box[2], box[3], values))
        return InitialSpec(preset=preset, background=background, blocks=tuple(blocks))
    raise ConfigError(f"initial.preset must be testcase1, testcase2, steady, constant or blocks, got {preset!r}")


def _parse_convergence(section: Mapping[str, str]) -> ConvergenceSpec:
    ladder_raw = _get(section, "convergence", "ladder", "40, 80, 160, 320")
    ladder = tuple(_to_int(p, "convergence.ladder") for p in ladder_raw.replace(",", " ").split())
    scale_key = "full_scale" if "full_scale" in section else "paper_scale"
    return ConvergenceSpec(
        reference=_to_int(_get(section, "convergence", "reference", "1280"), "convergence.reference"),
        ladder=ladder,
        t_end=_to_float(_get(section, "convergence", "t_end", "1e-2"), "convergence.t_end"),
        full_scale=parse_config_bool(_get(section, "convergence", scale_key, "false"), f"convergence.{scale_key}"),
    )


def _parse_decay(section: Mapping[str, str]) -> DecaySpec:
    def optional_float(key: str) -> float | None:
        raw = section.get(key, "").strip()
        return _to_float(raw, f"decay.{key}") if raw else None

    return DecaySpec(
        nx=_to_int(_get(section, "decay", "nx", "32"), "decay.nx"),
        ny=_to_int(_get(section, "decay", "ny", "32"), "decay.ny"),
        t_end=_to_float(_get(section, "decay", "t_end", "15"), "decay.t_end"),
        window_start=optional_float("window_start"),
        window_end=optional_float("window_end"),
        initial=_decay_initial(_get(section, "decay", "initial", "testcase2")),
    )


def parse_config_bool(raw: str, key: str) -> bool:
    try:
        return _parse_bool(raw)
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from err


def _decay_initial(raw: str) -> str:
    preset = raw.strip().lower()
    if preset not in ("testcase2", "steady"):
        raise ConfigError(f"decay.initial must be testcase2 or steady, got {preset!r}")
    return preset
