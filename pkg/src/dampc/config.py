"""Experiment configuration: sectioned ``key = value`` text with matrix rows on continuation lines.

Example::

    [model]
    source = two-state

    [horizon]
    T = 60
    N = 8
    N_theta = 5

    [reference]
    levels =
        0 0
        1.5 1

A value that is left empty after ``=`` continues on the following indented
lines, one matrix row per line. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from dampc.errors import ParseError, ValidationError
from dampc.model import (
    MASS_SPRING_LEVELS,
    TWO_STATE_LEVELS,
    UncertainModel,
    build_mass_spring_model,
    build_two_state_model,
    mass_spring_design,
    offline_design,
    piecewise_reference,
)
from dampc.opt_engine import EngineOptions
from dampc.polytope import Polytope
from dampc.simulate import CONTROLLERS, SimOptions

BUILTINS = ("two-state", "mass-spring")

__all__ = [
    "ModelSection",
    "HorizonSection",
    "DesignSection",
    "IdentSection",
    "SolverSection",
    "ExperimentSection",
    "ExperimentConfig",
    "parse_config",
    "parse_text",
    "emit_config",
    "build_model",
    "build_design",
    "sim_options",
]


@dataclass
class ModelSection:
    source: str = "two-state"
    # inline models only: A0, A1, ..., B0, B1, ... as matrices
    A: list = field(default_factory=list)
    B: list = field(default_factory=list)
    C: Optional[np.ndarray] = None
    theta_bar0: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None


@dataclass
class HorizonSection:
    T: int = 60
    N: int = 8
    N_theta: int = 5


@dataclass
class SetsSection:
    # empty fields fall back to the builtin model's sets
    theta_H: Optional[np.ndarray] = None
    theta_h: Optional[np.ndarray] = None
    w_H: Optional[np.ndarray] = None
    w_h: Optional[np.ndarray] = None
    F: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None


@dataclass
class WeightsSection:
    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None


@dataclass
class ReferenceSection:
    levels: Optional[np.ndarray] = None
    refs: Optional[np.ndarray] = None


@dataclass
class DesignSection:
    lambda_c: Optional[float] = None
    gain: str = "lqr"
    lqr_Q: Optional[np.ndarray] = None
    lqr_R: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    X0_H: Optional[np.ndarray] = None


@dataclass
class IdentSection:
    tau: int = 10
    mu: float = 1e-3


@dataclass
class SolverSection:
    max_outer: int = 15
    rel_tol: float = 1e-6
    residual_tol: float = 1e-6
    mu_theta: float = 1.0
    probe_scale: float = 0.25
    approx: bool = False
    approx_passive: Optional[bool] = None
    approx_oracle: Optional[bool] = None


@dataclass
class ExperimentSection:
    controllers: tuple = CONTROLLERS
    n_theta_draws: int = 10
    n_noise_draws: int = 2
    master_seed: int = 0
    output_dir: str = "out"
    ntheta_sweep: tuple = ()
    jobs: int = 1


SECTIONS = {
    "model": ModelSection,
    "horizon": HorizonSection,
    "sets": SetsSection,
    "weights": WeightsSection,
    "reference": ReferenceSection,
    "design": DesignSection,
    "identification": IdentSection,
    "solver": SolverSection,
    "experiment": ExperimentSection,
}


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    horizon: HorizonSection = field(default_factory=HorizonSection)
    sets: SetsSection = field(default_factory=SetsSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    reference: ReferenceSection = field(default_factory=ReferenceSection)
    design: DesignSection = field(default_factory=DesignSection)
    identification: IdentSection = field(default_factory=IdentSection)
    solver: SolverSection = field(default_factory=SolverSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return all(_section_eq(getattr(self, s), getattr(other, s)) for s in SECTIONS)


def _section_eq(a, b):
    for f in fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, list) or isinstance(y, list):
            if len(x) != len(y) or not all(np.array_equal(u, v) for u, v in zip(x, y)):
                return False
        elif isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if x is None or y is None or not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True


# ------------------------------------------------------------------ parsing


def _lines(text):
    """(line number, key, value lines) per assignment, with the section of each."""
    section = None
    current = None
    out = []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if line.startswith((" ", "\t")):
            if current is None:
                raise ParseError("continuation line without a key", line=no)
            current[3].append(line.strip())
            continue
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ParseError(f"unknown section [{section}]", line=no)
            current = None
            continue
        if "=" not in stripped:
            raise ParseError("expected 'key = value'", line=no)
        if section is None:
            raise ParseError("assignment outside a section", line=no)
        key, _, val = stripped.partition("=")
        current = [no, section, key.strip(), [val.strip()] if val.strip() else []]
        out.append(current)
    return out


def _matrix(rows, no, key):
    try:
        data = [[float(v) for v in r.split()] for r in rows]
    except ValueError as exc:
        raise ParseError(f"non-numeric matrix entry ({exc})", line=no, field=key) from None
    if not data or len({len(r) for r in data}) != 1:
        raise ParseError("matrix rows must be non-empty and of equal length", line=no, field=key)
    return np.array(data)


def _bool(s, no, key):
    low = s.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ParseError(f"expected on/off, got {s!r}", line=no, field=key)


def _convert(section_obj, key, rows, no):
    """Typed value for field ``key`` of a section dataclass."""
    name = key
    if isinstance(section_obj, ModelSection) and key[:1] in ("A", "B") and key[1:].isdigit():
        return None  # handled by the caller
    f = {f.name: f for f in fields(section_obj)}.get(name)
    if f is None:
        raise ParseError("unknown field", line=no, field=key)
    default = getattr(type(section_obj)(), name)
    text = " ".join(rows)
    typ = str(f.type)
    try:
        if "ndarray" in typ:
            m = _matrix(rows, no, key)
            return m.ravel() if name in ("theta_bar0", "x0", "theta_h", "w_h") else m
        if "bool" in typ:
            return None if text.lower() == "none" else _bool(text, no, key)
        if name in ("controllers",):
            return tuple(text.replace(",", " ").split())
        if name == "ntheta_sweep":
            return tuple(int(v) for v in text.replace(",", " ").split())
        if "float" in typ:
            return None if text.lower() == "none" else float(text)
        if "int" in typ:
            return int(text)
        if isinstance(default, str) or "str" in typ:
            return text
    except ValueError as exc:
        raise ParseError(f"bad value {text!r} ({exc})", line=no, field=key) from None
    return text


def parse_text(text) -> ExperimentConfig:
    cfg = ExperimentConfig()
    A, B = {}, {}
    seen = set()
    for no, section, key, rows in _lines(text):
        if (section, key) in seen:
            raise ParseError("duplicate key", line=no, field=key)
        seen.add((section, key))
        obj = getattr(cfg, section)
        if not rows:
            raise ParseError("missing value", line=no, field=key)
        if section == "model" and key[:1] in ("A", "B") and key[1:].isdigit():
            (A if key[0] == "A" else B)[int(key[1:])] = _matrix(rows, no, key)
            continue
        setattr(obj, key, _convert(obj, key, rows, no))
    for store, attr in ((A, "A"), (B, "B")):
        if store:
            if sorted(store) != list(range(len(store))):
                raise ParseError(f"{attr} matrices must be numbered 0..p without gaps", field=attr)
            setattr(cfg.model, attr, [store[i] for i in range(len(store))])
    validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_text(fh.read())


# ------------------------------------------------------------------ validation


def validate(cfg: ExperimentConfig):
    """Raise ValidationError listing every violation found."""
    v = []
    h = cfg.horizon
    if cfg.model.source not in BUILTINS + ("inline",):
        v.append(f"model.source: unknown source {cfg.model.source!r}")
    if h.T < 1:
        v.append("horizon.T: must be at least 1")
    if h.N < 1:
        v.append("horizon.N: must be at least 1")
    if h.N_theta < 2:
        v.append("horizon.N_theta: the lookahead needs at least 2 steps (one transition to learn from and one to exploit)")
    if h.N_theta > h.N:
        v.append("horizon.N_theta: must not exceed N")
    for s in cfg.experiment.ntheta_sweep:
        if s < 2 or s > h.N:
            v.append(f"experiment.ntheta_sweep: value {s} outside [2, N]")
    for c in cfg.experiment.controllers:
        if c not in CONTROLLERS:
            v.append(f"experiment.controllers: unknown controller {c!r}")
    if cfg.experiment.n_theta_draws < 1 or cfg.experiment.n_noise_draws < 1:
        v.append("experiment: draw counts must be positive")
    if cfg.experiment.jobs < 1:
        v.append("experiment.jobs: must be positive")
    if cfg.design.lambda_c is not None and not 0 < cfg.design.lambda_c < 1:
        v.append("design.lambda_c: must lie in (0, 1)")
    if cfg.design.gain not in ("lqr", "vertex-lp"):
        v.append(f"design.gain: unknown gain synthesis {cfg.design.gain!r}")
    if cfg.identification.tau < 1:
        v.append("identification.tau: must be at least 1")
    if cfg.identification.mu <= 0:
        v.append("identification.mu: must be positive")
    if cfg.solver.max_outer < 1:
        v.append("solver.max_outer: must be at least 1")
    v.extend(_dimension_violations(cfg))
    if v:
        raise ValidationError(v)


def _dimension_violations(cfg):
    v = []
    m = cfg.model
    if m.source == "inline":
        if not m.A or not m.B:
            v.append("model: inline models need A0.. and B0..")
            return v
        if len(m.A) != len(m.B):
            v.append(f"model: {len(m.A)} A matrices but {len(m.B)} B matrices")
        n = m.A[0].shape[0]
        mm = m.B[0].shape[1]
        for i, a in enumerate(m.A):
            if a.shape != (n, n):
                v.append(f"model.A{i}: expected {n}x{n}, got {a.shape[0]}x{a.shape[1]}")
        for i, b in enumerate(m.B):
            if b.shape != (n, mm):
                v.append(f"model.B{i}: expected {n}x{mm}, got {b.shape[0]}x{b.shape[1]}")
        p = len(m.A) - 1
        if m.C is None:
            v.append("model.C: required for inline models")
        elif m.C.shape[1] != n:
            v.append(f"model.C: expected {n} columns")
        s = cfg.sets
        for name in ("theta_H", "theta_h", "w_H", "w_h", "F", "G"):
            if getattr(s, name) is None:
                v.append(f"sets.{name}: required for inline models")
        if s.theta_H is not None and s.theta_H.shape[1] != p:
            v.append(f"sets.theta_H: expected {p} columns")
        if s.theta_H is not None and s.theta_h is not None and s.theta_H.shape[0] != s.theta_h.size:
            v.append("sets.theta_h: length must match theta_H rows")
        if s.w_H is not None and s.w_H.shape[1] != n:
            v.append(f"sets.w_H: expected {n} columns")
        if s.w_H is not None and s.w_h is not None and s.w_H.shape[0] != s.w_h.size:
            v.append("sets.w_h: length must match w_H rows")
        if s.F is not None and s.F.shape[1] != n:
            v.append(f"sets.F: expected {n} columns")
        if s.G is not None and s.G.shape[1] != mm:
            v.append(f"sets.G: expected {mm} columns")
        if s.F is not None and s.G is not None and s.F.shape[0] != s.G.shape[0]:
            v.append("sets.G: row count must match F")
        if cfg.weights.Q is None or cfg.weights.R is None:
            v.append("weights: Q and R are required for inline models")
        if m.theta_bar0 is not None and m.theta_bar0.size != p:
            v.append(f"model.theta_bar0: expected {p} entries")
        if cfg.reference.levels is None and cfg.reference.refs is None:
            v.append("reference: levels or refs required for inline models")
    r = cfg.reference
    if r.refs is not None and r.refs.shape[0] != cfg.horizon.T + 1:
        v.append(f"reference.refs: expected T+1 = {cfg.horizon.T + 1} rows")
    return v


# ------------------------------------------------------------------ emitting


def _emit_value(val):
    if isinstance(val, np.ndarray):
        mat = np.atleast_2d(val)
        return "\n" + "\n".join("    " + " ".join(repr(float(x)) for x in row) for row in mat)
    if isinstance(val, bool):
        return " on" if val else " off"
    if isinstance(val, tuple):
        return " " + (", ".join(str(x) for x in val) if val else "")
    if isinstance(val, float):
        return " " + repr(val)
    return f" {val}"


def emit_config(cfg: ExperimentConfig) -> str:
    out = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        body = []
        for f in fields(obj):
            val = getattr(obj, f.name)
            if val is None or (isinstance(val, (list, tuple)) and len(val) == 0):
                continue
            if sec == "model" and f.name in ("A", "B"):
                for i, mat in enumerate(val):
                    body.append(f"{f.name}{i} =" + _emit_value(np.asarray(mat)))
                continue
            body.append(f"{f.name} =" + _emit_value(val))
        if body:
            out.append(f"[{sec}]")
            out.extend(body)
            out.append("")
    return "\n".join(out)


# ------------------------------------------------------------------ construction


def build_model(cfg: ExperimentConfig, N_theta=None) -> UncertainModel:
    h = cfg.horizon
    nt = h.N_theta if N_theta is None else int(N_theta)
    src = cfg.model.source
    if src == "two-state":
        model = build_two_state_model(T=h.T, N=h.N, N_theta=nt)
        levels = TWO_STATE_LEVELS
    elif src == "mass-spring":
        model = build_mass_spring_model(T=h.T, N=h.N, N_theta=nt)
        levels = MASS_SPRING_LEVELS
    else:
        s = cfg.sets
        levels = None
        model = UncertainModel(
            A_list=tuple(cfg.model.A),
            B_list=tuple(cfg.model.B),
            C=cfg.model.C,
            Theta0=Polytope(s.theta_H, s.theta_h),
            W=Polytope(s.w_H, s.w_h),
            F=s.F,
            G=s.G,
            Q=cfg.weights.Q,
            R=cfg.weights.R,
            T=h.T,
            N=h.N,
            N_theta=nt,
            refs=np.zeros((h.T + 1, cfg.model.C.shape[0])),
            theta_bar0=cfg.model.theta_bar0 if cfg.model.theta_bar0 is not None else np.zeros(len(cfg.model.A) - 1),
            name="inline",
        )
    changes = {}
    r = cfg.reference
    if r.refs is not None:
        changes["refs"] = r.refs
    elif r.levels is not None:
        changes["refs"] = piecewise_reference(h.T, r.levels)
    elif levels is not None:
        changes["refs"] = piecewise_reference(h.T, levels)
    if src != "inline":
        s, w = cfg.sets, cfg.weights
        if s.theta_H is not None:
            changes["Theta0"] = Polytope(s.theta_H, s.theta_h)
        if s.w_H is not None:
            changes["W"] = Polytope(s.w_H, s.w_h)
        if s.F is not None:
            changes["F"], changes["G"] = s.F, s.G
        if w.Q is not None:
            changes["Q"] = w.Q
        if w.R is not None:
            changes["R"] = w.R
        if cfg.model.theta_bar0 is not None:
            changes["theta_bar0"] = cfg.model.theta_bar0
    if cfg.model.x0 is not None:
        changes["x0"] = cfg.model.x0
    return model.with_(**changes) if changes else model


def build_design(cfg: ExperimentConfig, model):
    d = cfg.design
    if cfg.model.source == "mass-spring" and d.K is None and d.X0_H is None and d.lqr_Q is None:
        return mass_spring_design(model) if d.lambda_c is None else mass_spring_design(model, d.lambda_c)
    lam = 0.96 if d.lambda_c is None else d.lambda_c
    X0 = None
    if d.X0_H is not None:
        X0 = Polytope(d.X0_H, np.ones(d.X0_H.shape[0]))
    weights = None if d.lqr_Q is None else (d.lqr_Q, d.lqr_R if d.lqr_R is not None else np.eye(model.m))
    return offline_design(model, lam, lqr_weights=weights, K=d.K, X0=X0, gain=d.gain)


def sim_options(cfg: ExperimentConfig, approx=None) -> SimOptions:
    s = cfg.solver
    eng = EngineOptions(
        approx=s.approx if approx is None else bool(approx),
        mu_theta=s.mu_theta,
        max_outer=s.max_outer,
        rel_tol=s.rel_tol,
        residual_tol=s.residual_tol,
        probe_scale=s.probe_scale,
    )
    return SimOptions(
        engine=eng,
        tau=cfg.identification.tau,
        mu=cfg.identification.mu,
        approx_passive=s.approx_passive,
        approx_oracle=s.approx_oracle,
    )


def replace_section(cfg: ExperimentConfig, section, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})
