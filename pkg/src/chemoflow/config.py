"""Run configuration: a line-based ``key = value`` format with sections.

Grammar::

    file    := line*
    line    := blank | comment | section | entry
    comment := '#' text            (also allowed after a value)
    section := '[' name ']'
    entry   := key '=' value

Sections and keys (required keys marked ``*``)::

    [run]     mode*     simulate | convergence-space | convergence-time
              initial*  test2-manufactured | competition-2d | custom-expression
    [mesh]    resolutions*   comma list of subdivisions per side (h = 1/k)
    [time]    dt*  one value or a comma list;  T*
    [params]  chi1 chi2 Dn Dw Dc Du mu1 mu2 a1 a2 alpha beta gamma lambda k
              (all default to 1), grad_phi = <expr>, <expr>  (default 0, 0)
    [initial] n w c u1 u2   expressions in x and y (custom-expression only;
              u1 and u2 default to 0)
    [output]  dir (default "out"), snapshots (comma list of times)
    [solver]  tol (default 1e-10)

Expressions use Python syntax with ``x``, ``y``, ``pi``, ``exp``, ``sin``,
``cos``, ``sqrt`` and friends; derivatives are taken symbolically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import sympy

from .linsolve import DEFAULT_TOL
from .scheme import ModelParams, n_steps

MODES = ("simulate", "convergence-space", "convergence-time")
INITIALS = ("test2-manufactured", "competition-2d", "custom-expression")

PARAM_KEYS = ("chi1", "chi2", "Dn", "Dw", "Dc", "Du", "mu1", "mu2", "a1", "a2",
              "alpha", "beta", "gamma", "lambda", "k")
_PARAM_FIELD = {"lambda": "lam"}

SCHEMA = {
    "run": ("mode", "initial"),
    "mesh": ("resolutions",),
    "time": ("dt", "T"),
    "params": PARAM_KEYS + ("grad_phi",),
    "initial": ("n", "w", "c", "u1", "u2"),
    "output": ("dir", "snapshots"),
    "solver": ("tol",),
}
REQUIRED = (("run", "mode"), ("run", "initial"), ("mesh", "resolutions"), ("time", "dt"), ("time", "T"))


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and line when known."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key, self.line = key, line


@dataclass(frozen=True)
class RunConfig:
    mode: str
    initial: str
    resolutions: tuple
    dts: tuple
    T: float
    params: dict = field(default_factory=dict)
    grad_phi: tuple = ("0", "0")
    expressions: dict = field(default_factory=dict)
    out_dir: str = "out"
    snapshots: tuple = ()
    tol: float = DEFAULT_TOL

    @property
    def dt(self) -> float:
        return self.dts[0]

    def model_params(self) -> ModelParams:
        kw = {_PARAM_FIELD.get(k, k): v for k, v in self.params.items()}
        return ModelParams(grad_phi=expression_pair(self.grad_phi), **kw)

    def with_overrides(self, out_dir=None, tol=None, snapshots=None) -> "RunConfig":
        kw = {}
        if out_dir is not None:
            kw["out_dir"] = str(out_dir)
        if tol is not None:
            kw["tol"] = float(tol)
        if snapshots is not None:
            kw["snapshots"] = tuple(float(s) for s in snapshots)
        return replace(self, **kw)


# -- expressions --------------------------------------------------------

_X, _Y = sympy.symbols("x y", real=True)
_NAMES = {"x": _X, "y": _Y, "pi": sympy.pi, "e": sympy.E}
for _f in ("exp", "log", "sin", "cos", "tan", "sinh", "cosh", "tanh", "sqrt", "Abs", "atan", "atan2"):
    _NAMES[_f] = getattr(sympy, _f)
_NAMES["abs"] = sympy.Abs


def parse_expression(text: str) -> sympy.Expr:
    try:
        expr = sympy.sympify(text, locals=_NAMES, convert_xor=True)
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ValueError(f"cannot parse expression {text!r}: {exc}") from None
    if not isinstance(expr, sympy.Expr):
        raise ValueError(f"{text!r} is not a scalar expression")
    extra = expr.free_symbols - {_X, _Y}
    if extra:
        raise ValueError(f"unknown symbols {sorted(map(str, extra))} in {text!r}")
    return expr


def _lambdify(expr):
    f = sympy.lambdify((_X, _Y), expr, modules="numpy")

    def call(x, y):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(f(x, np.asarray(y, dtype=float)), dtype=float), np.broadcast(x, y).shape)
    return call


def expression_function(text: str):
    """``f(x, y)`` evaluating ``text`` on arrays."""
    return _lambdify(parse_expression(text))


def expression_pair(texts):
    f, g = (expression_function(t) for t in texts)
    return lambda x, y: (f(x, y), g(x, y))


def expression_gradient(text: str):
    expr = parse_expression(text)
    gx, gy = (_lambdify(sympy.diff(expr, v)) for v in (_X, _Y))
    return lambda x, y: (gx(x, y), gy(x, y))


def expression_laplacian(text: str):
    expr = parse_expression(text)
    return _lambdify(sympy.diff(expr, _X, 2) + sympy.diff(expr, _Y, 2))


# -- parsing ------------------------------------------------------------


def _strip_comment(line: str) -> str:
    i = line.find("#")
    return line if i < 0 else line[:i]


def _float(text, key, line):
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}", key, line) from None
    if not math.isfinite(v):
        raise ConfigError(f"value must be finite, got {text!r}", key, line)
    return v


def _float_list(text, key, line):
    items = [t.strip() for t in text.split(",")]
    if not items or any(t == "" for t in items):
        raise ConfigError(f"expected a comma-separated list, got {text!r}", key, line)
    return tuple(_float(t, key, line) for t in items)


def _int_list(text, key, line):
    out = []
    for t in (t.strip() for t in text.split(",")):
        try:
            v = int(t)
        except ValueError:
            raise ConfigError(f"expected integers, got {t!r}", key, line) from None
        if v < 1:
            raise ConfigError(f"resolutions must be >= 1, got {v}", key, line)
        out.append(v)
    return tuple(out)


def read_entries(text: str) -> dict:
    """``{(section, key): (value, line)}`` with basic syntax checks."""
    entries = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", line=lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if section is None:
            raise ConfigError("entry before any [section]", key, lineno)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key in [{section}]", key, lineno)
        if (section, key) in entries:
            raise ConfigError(f"duplicate key (first set on line {entries[(section, key)][1]})", key, lineno)
        if value == "":
            raise ConfigError("missing value", key, lineno)
        entries[(section, key)] = (value, lineno)
    return entries


def parse_config_text(text: str) -> RunConfig:
    e = read_entries(text)
    for sec, key in REQUIRED:
        if (sec, key) not in e:
            raise ConfigError(f"required key missing from [{sec}]", key)

    def get(sec, key):
        return e[(sec, key)]

    mode, ln = get("run", "mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}", "mode", ln)
    initial, ln = get("run", "initial")
    if initial not in INITIALS:
        raise ConfigError(f"initial must be one of {', '.join(INITIALS)}", "initial", ln)

    v, ln = get("mesh", "resolutions")
    res = _int_list(v, "resolutions", ln)
    v, ln = get("time", "dt")
    dts = _float_list(v, "dt", ln)
    if any(d <= 0 for d in dts):
        raise ConfigError("time steps must be positive", "dt", ln)
    v, ln = get("time", "T")
    T = _float(v, "T", ln)
    if T <= 0:
        raise ConfigError("T must be positive", "T", ln)

    params = {}
    for key in PARAM_KEYS:
        if ("params", key) in e:
            v, ln = e[("params", key)]
            params[key] = _float(v, key, ln)
    grad_phi = ("0", "0")
    if ("params", "grad_phi") in e:
        v, ln = e[("params", "grad_phi")]
        parts = tuple(p.strip() for p in v.split(","))
        if len(parts) != 2 or any(p == "" for p in parts):
            raise ConfigError("grad_phi needs two comma-separated expressions", "grad_phi", ln)
        for p in parts:
            try:
                parse_expression(p)
            except ValueError as exc:
                raise ConfigError(str(exc), "grad_phi", ln) from None
        grad_phi = parts

    expressions = {}
    for key in SCHEMA["initial"]:
        if ("initial", key) in e:
            v, ln = e[("initial", key)]
            if initial != "custom-expression":
                raise ConfigError("[initial] expressions need initial = custom-expression", key, ln)
            try:
                parse_expression(v)
            except ValueError as exc:
                raise ConfigError(str(exc), key, ln) from None
            expressions[key] = v

    out_dir = e[("output", "dir")][0] if ("output", "dir") in e else "out"
    snaps = ()
    if ("output", "snapshots") in e:
        v, ln = e[("output", "snapshots")]
        snaps = _float_list(v, "snapshots", ln)
        if any(s < 0 for s in snaps):
            raise ConfigError("snapshot times must be non-negative", "snapshots", ln)
    tol = DEFAULT_TOL
    if ("solver", "tol") in e:
        v, ln = e[("solver", "tol")]
        tol = _float(v, "tol", ln)
        if tol <= 0:
            raise ConfigError("tol must be positive", "tol", ln)

    cfg = RunConfig(mode, initial, res, dts, T, params, grad_phi, expressions, out_dir, snaps, tol)
    validate(cfg, lines={k: ln for (s, k), (_, ln) in e.items()})
    return cfg


def validate(cfg: RunConfig, lines=None):
    """Cross-field checks; raises ``ConfigError``."""
    lines = lines or {}

    def fail(msg, key):
        raise ConfigError(msg, key, lines.get(key))

    for key, value in cfg.params.items():
        if key not in PARAM_KEYS:
            fail("unknown parameter", key)
        try:
            ModelParams(**{_PARAM_FIELD.get(key, key): value})
        except ValueError as exc:
            fail(str(exc), key)
    if cfg.mode == "simulate":
        if len(cfg.resolutions) != 1:
            fail("simulate mode takes exactly one resolution", "resolutions")
        if len(cfg.dts) != 1:
            fail("simulate mode takes exactly one dt", "dt")
    elif cfg.mode == "convergence-space":
        if len(cfg.resolutions) < 2:
            fail("convergence-space needs at least two resolutions", "resolutions")
        if len(cfg.dts) != 1:
            fail("convergence-space takes exactly one dt", "dt")
        if len(set(cfg.resolutions)) != len(cfg.resolutions):
            fail("resolutions must be distinct", "resolutions")
    else:
        if len(cfg.dts) < 2:
            fail("convergence-time needs at least two dt values", "dt")
        if len(cfg.resolutions) != 1:
            fail("convergence-time takes exactly one resolution", "resolutions")
        if len(set(cfg.dts)) != len(cfg.dts):
            fail("dt values must be distinct", "dt")
    if cfg.mode != "simulate" and cfg.initial != "test2-manufactured":
        fail("convergence studies need initial = test2-manufactured", "initial")
    if cfg.initial == "test2-manufactured":
        # the manufactured forcing is written for unit coefficients and no potential
        for key, value in cfg.params.items():
            if value != 1.0:
                fail("test2-manufactured requires every parameter equal to 1", key)
        if any(parse_expression(g) != 0 for g in cfg.grad_phi):
            fail("test2-manufactured requires grad_phi = 0, 0", "grad_phi")
    if cfg.initial == "custom-expression":
        for key in ("n", "w", "c"):
            if key not in cfg.expressions:
                fail(f"custom-expression needs an [initial] {key} expression", key)
    for dt in cfg.dts:
        try:
            n_steps(cfg.T, dt)
        except ValueError as exc:
            fail(str(exc), "dt")


def parse_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)


# -- serialization ------------------------------------------------------


def _num(v: float) -> str:
    return repr(float(v))


def serialize_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"mode = {cfg.mode}", f"initial = {cfg.initial}", "",
             "[mesh]", "resolutions = " + ", ".join(str(r) for r in cfg.resolutions), "",
             "[time]", "dt = " + ", ".join(_num(d) for d in cfg.dts), f"T = {_num(cfg.T)}", ""]
    lines.append("[params]")
    for key in PARAM_KEYS:
        if key in cfg.params:
            lines.append(f"{key} = {_num(cfg.params[key])}")
    lines.append(f"grad_phi = {cfg.grad_phi[0]}, {cfg.grad_phi[1]}")
    lines.append("")
    if cfg.expressions:
        lines.append("[initial]")
        for key in SCHEMA["initial"]:
            if key in cfg.expressions:
                lines.append(f"{key} = {cfg.expressions[key]}")
        lines.append("")
    lines += ["[output]", f"dir = {cfg.out_dir}"]
    if cfg.snapshots:
        lines.append("snapshots = " + ", ".join(_num(s) for s in cfg.snapshots))
    lines += ["", "[solver]", f"tol = {_num(cfg.tol)}", ""]
    return "\n".join(lines)
