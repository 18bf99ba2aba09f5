"""INI study configuration with strict validation."""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

from .averaging import WeightSpec
from .corrector import FrameFields
from .expressions import ExpressionError, parse_expression
from .fields import FieldError, MatrixFieldSpec, VectorFieldSpec

KINDS = ("rotation-reference", "convergence", "cfl-demo", "corrector-check")

SECTIONS = {
    "study": {"kind", "epsilon", "T", "dt", "tol", "scheme", "seed", "out", "orbit_nodes",
              "relax_nodes", "radii", "t_relax", "dt_factors", "ratio_tol", "cfl_steps"},
    "grid": {"n", "L"},
    "b": {"kind", "params", "b1", "b2", "period"},
    "D": {"D11", "D12", "D22"},
    "weight": {"kind", "R11", "R12", "R21", "R22"},
    "initial": {"u_in", "v_in"},
    "frame": {"kind", "u0_1", "u0_2", "u1_1", "u1_2"},
}

DEFAULT_D = ("2 + cos(|y|)", "0", "1")
DEFAULT_U = "exp(-((y1 - 1)^2 + y2^2) / 0.72)"


class ConfigError(ValueError):
    """Invalid study configuration; the message names the file, line and key when known."""


@dataclass
class StudyConfig:
    """Validated study description."""

    kind: str
    b: VectorFieldSpec
    D: MatrixFieldSpec
    weight: WeightSpec
    frame: FrameFields | None
    n: int = 128
    L: float = 4.0
    epsilons: list = field(default_factory=lambda: [1e-2])
    T: float = 0.5
    dt: float = 0.01
    tol: float = 1e-10
    scheme: str = "backward-euler"
    u_in: str = DEFAULT_U
    v_in: str = "0"
    out: Path = Path("anisoavg-out")
    seed: int = 0
    orbit_nodes: int = 256
    relax_nodes: int = 128
    radii: int = 32
    t_relax: float = 6.0
    dt_factors: list = field(default_factory=lambda: [0.5, 1.0, 4.0])
    ratio_tol: float | None = None
    cfl_steps: int = 200
    period: float | None = None
    source: str = ""
    path: Path | None = None


def _key_lines(text: str) -> dict:
    lines, section = {}, None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[(.+)\]$", stripped)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = number
            continue
        m = re.match(r"([^=:;#\s][^=:]*?)\s*[=:]", stripped)
        if m and section is not None:
            lines[(section, m.group(1))] = number
    return lines


class _Reader:
    def __init__(self, parser: configparser.ConfigParser, lines: dict, path: str):
        self.parser, self.lines, self.path = parser, lines, path

    def error(self, section: str, key: str | None, message: str) -> ConfigError:
        line = self.lines.get((section, key))
        where = f"{self.path}:{line}" if line else self.path
        name = f"{key}" if key else f"[{section}]"
        return ConfigError(f"{where}: {name}: {message}")

    def raw(self, section, key, default=None):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key)
        return default

    def number(self, section, key, default, cast=float, lo=None, hi=None, lo_open=False):
        raw = self.raw(section, key)
        if raw is None:
            return default
        try:
            value = cast(raw)
        except ValueError:
            raise self.error(section, key, f"expected a number, got {raw!r}") from None
        if lo is not None and (value < lo or (lo_open and value == lo)):
            raise self.error(section, key, f"value {value} below {'or at ' if lo_open else ''}{lo}")
        if hi is not None and value > hi:
            raise self.error(section, key, f"value {value} above {hi}")
        return value

    def numbers(self, section, key, default):
        raw = self.raw(section, key)
        if raw is None:
            return list(default)
        try:
            return [float(v) for v in raw.replace(",", " ").split()]
        except ValueError:
            raise self.error(section, key, f"expected a list of numbers, got {raw!r}") from None

    def expr(self, section, key, default):
        raw = self.raw(section, key, default)
        try:
            parse_expression(raw)
        except ExpressionError as exc:
            raise self.error(section, key, str(exc)) from None
        return raw


def parse_config(path, text: str | None = None) -> StudyConfig:
    """Read and validate a study configuration.

    ``text`` may be given instead of reading ``path`` (which is then only
    used in messages).
    """
    path = Path(path)
    if text is None:
        if not path.is_file():
            raise ConfigError(f"{path}: configuration file not found")
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: key outside of any section") from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else "?"
        raise ConfigError(f"{path}:{lineno}: cannot parse line") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.message if hasattr(exc, 'message') else exc}") from None

    lines = _key_lines(text)
    rd = _Reader(parser, lines, str(path))
    for section in parser.sections():
        if section not in SECTIONS:
            raise rd.error(section, None, "unknown section")
        for key in parser.options(section):
            if key not in SECTIONS[section]:
                raise rd.error(section, key, f"unknown key in [{section}]")

    kind = rd.raw("study", "kind")
    if kind is None:
        raise rd.error("study", None, "missing required key 'kind'")
    if kind not in KINDS:
        raise rd.error("study", "kind", f"unknown experiment kind {kind!r}")

    eps_default = [1e-1, 3e-2, 1e-2, 3e-3] if kind == "convergence" else [1e-2]
    epsilons = rd.numbers("study", "epsilon", eps_default)
    lower_ok = kind == "corrector-check"
    for e in epsilons:
        if not ((0.0 <= e if lower_ok else 0.0 < e) and e <= 1.0):
            interval = "[0, 1]" if lower_ok else "(0, 1]"
            raise rd.error("study", "epsilon", f"value {e} outside {interval}")
    if kind == "convergence" and len(epsilons) < 3:
        raise rd.error("study", "epsilon", "a convergence study needs at least 3 values")
    if kind == "convergence" and sorted(epsilons, reverse=True) != epsilons:
        raise rd.error("study", "epsilon", "values must be listed in decreasing order")

    T = rd.number("study", "T", 0.5, lo=0.0, lo_open=True)
    dt = rd.number("study", "dt", 0.01, lo=0.0, lo_open=True)
    if dt > T:
        raise rd.error("study", "dt", f"time step {dt} exceeds final time {T}")
    tol = rd.number("study", "tol", 1e-10, lo=0.0, hi=1e-4, lo_open=True)
    scheme = rd.raw("study", "scheme", "backward-euler")
    if scheme not in ("backward-euler", "crank-nicolson"):
        raise rd.error("study", "scheme", f"unsupported implicit scheme {scheme!r}")
    dt_factors = rd.numbers("study", "dt_factors", [0.5, 1.0, 4.0])
    for f in dt_factors:
        if f <= 0 or 1.0 < f < 4.0:
            raise rd.error("study", "dt_factors", f"factor {f} must lie in (0, 1] or [4, inf)")
    ratio_tol = rd.raw("study", "ratio_tol")
    if ratio_tol is not None:
        ratio_tol = rd.number("study", "ratio_tol", None, lo=0.0, lo_open=True)

    n = rd.number("grid", "n", 128, cast=int, lo=16)
    L = rd.number("grid", "L", 4.0, lo=0.0, lo_open=True)

    b_kind = rd.raw("b", "kind", "rotation")
    try:
        if b_kind in ("rotation", "shear"):
            params = rd.numbers("b", "params", [1.0])
            b = VectorFieldSpec(b_kind, params)
        elif b_kind == "custom-analytic":
            b = VectorFieldSpec("custom-analytic", exprs=(rd.expr("b", "b1", None), rd.expr("b", "b2", None)))
        else:
            raise rd.error("b", "kind", f"unknown vector field kind {b_kind!r}")
    except (FieldError, TypeError) as exc:
        raise rd.error("b", "kind", str(exc)) from None
    period = rd.raw("b", "period")
    period = rd.number("b", "period", None, lo=0.0, lo_open=True) if period is not None else b.period

    D = MatrixFieldSpec.from_entries(*(rd.expr("D", k, v) for k, v in zip(("D11", "D12", "D22"), DEFAULT_D)),
                                     name="D")

    w_kind = rd.raw("weight", "kind", "rotation-frame" if b_kind == "rotation" else "identity")
    if w_kind == "identity":
        weight = WeightSpec.identity()
    elif w_kind == "rotation-frame":
        if b_kind != "rotation":
            raise rd.error("weight", "kind", "the rotation frame needs b of kind rotation")
        weight = WeightSpec.rotation_frame()
    elif w_kind == "frame":
        entries = [[rd.expr("weight", f"R{i}{j}", None) for j in (1, 2)] for i in (1, 2)]
        weight = WeightSpec.from_frame(entries)
    else:
        raise rd.error("weight", "kind", f"unknown weight kind {w_kind!r}")

    f_kind = rd.raw("frame", "kind", "rotation" if b_kind == "rotation" else None)
    if f_kind is None:
        frame = None
    elif f_kind == "rotation":
        frame = FrameFields.rotation(b.params[0] if b.params else 1.0)
    elif f_kind == "custom":
        keys = ("u0_1", "u0_2", "u1_1", "u1_2")
        e = [rd.expr("frame", k, None) for k in keys]
        frame = FrameFields.from_exprs(e[:2], [e[2:]])
    else:
        raise rd.error("frame", "kind", f"unknown frame kind {f_kind!r}")
    if kind == "corrector-check" and (period is None or frame is None):
        raise rd.error("b", "kind", "corrector-check needs a periodic flow and a frame")

    return StudyConfig(
        kind=kind, b=b, D=D, weight=weight, frame=frame, n=n, L=L, epsilons=epsilons, T=T, dt=dt,
        tol=tol, scheme=scheme, u_in=rd.expr("initial", "u_in", DEFAULT_U),
        v_in=rd.expr("initial", "v_in", "0"), out=Path(rd.raw("study", "out", "anisoavg-out")),
        seed=rd.number("study", "seed", 0, cast=int),
        orbit_nodes=rd.number("study", "orbit_nodes", 256, cast=int, lo=8),
        relax_nodes=rd.number("study", "relax_nodes", 128, cast=int, lo=8),
        radii=rd.number("study", "radii", 32, cast=int, lo=1),
        t_relax=rd.number("study", "t_relax", 6.0, lo=0.0, lo_open=True),
        dt_factors=dt_factors, ratio_tol=ratio_tol,
        cfl_steps=rd.number("study", "cfl_steps", 200, cast=int, lo=1),
        period=period, source=text, path=path,
    )
