"""JSON experiment configuration and the custom linear-quadratic coefficient family."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .backward import PenaltySchedule
from .model import GalerkinModel, ObstacleProblem
from .presets import PRESETS, Preset, get_preset
from .regression import BasisSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    s: float = 0.0
    T: float | None = None  # None: the preset horizon
    n_steps: int | None = None  # None: the preset step count


@dataclass(frozen=True)
class AnalysisToggles:
    zeta: bool = True
    supersolution: bool = True
    lipschitz: bool = False


@dataclass(frozen=True)
class ControlToggles:
    verify: bool = True
    closed_loop: bool = True
    n_random_controls: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str | None = "bermudan_put"
    preset_params: dict = field(default_factory=dict)
    custom: dict | None = None
    grid: GridConfig = GridConfig()
    n_paths: int = 20_000
    seed: int = 0
    basis: dict | None = None  # None: the preset basis
    schedule: dict = field(default_factory=lambda: {"levels": [2.0**j for j in range(11)],
                                                    "tol": None})
    scheme: str = "both"
    penalty_kind: str = "hard"
    analysis: AnalysisToggles = AnalysisToggles()
    control: ControlToggles = ControlToggles()
    eval_points: list | None = None
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def basis_spec(self, default: BasisSpec) -> BasisSpec:
        return default if self.basis is None else BasisSpec(**self.basis)

    def penalty_schedule(self) -> PenaltySchedule:
        return PenaltySchedule(tuple(self.schedule["levels"]), self.schedule.get("tol"))


_SECTIONS = {"grid": GridConfig, "analysis": AnalysisToggles, "control": ControlToggles}
_TOP = {f.name for f in fields(ExperimentConfig)}


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _fail(text, key, msg):
    raise ConfigError(f"line {_line_of(text, key)}: key '{key}': {msg}")


def _section(text, name, raw, cls):
    if not isinstance(raw, dict):
        _fail(text, name, "expected an object")
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            _fail(text, k, f"unknown key in '{name}' (expected one of {sorted(known)})")
    return cls(**raw)


def _check(text, cfg: ExperimentConfig):
    if cfg.preset is None and cfg.custom is None:
        _fail(text, "preset", "either 'preset' or 'custom' must be given")
    if cfg.preset is not None and cfg.custom is not None:
        _fail(text, "custom", "give 'preset' or 'custom', not both")
    if cfg.preset is not None and cfg.preset not in PRESETS:
        _fail(text, "preset", f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    if not isinstance(cfg.n_paths, int) or isinstance(cfg.n_paths, bool) or cfg.n_paths < 1:
        _fail(text, "n_paths", "must be a positive integer")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        _fail(text, "seed", "must be a nonnegative integer")
    if cfg.scheme not in ("penalized", "reflected", "both"):
        _fail(text, "scheme", "must be 'penalized', 'reflected' or 'both'")
    if cfg.penalty_kind not in ("hard", "smooth"):
        _fail(text, "penalty_kind", "must be 'hard' or 'smooth'")
    g = cfg.grid
    if g.n_steps is not None and (not isinstance(g.n_steps, int) or g.n_steps < 1):
        _fail(text, "n_steps", "must be a positive integer")
    if g.T is not None and not g.s < g.T:
        _fail(text, "T", "must exceed s")
    if g.s < 0:
        _fail(text, "s", "must be nonnegative")
    if cfg.control.n_random_controls < 1:
        _fail(text, "n_random_controls", "must be >= 1")
    try:
        cfg.penalty_schedule()
    except (ValueError, TypeError, KeyError) as e:
        _fail(text, "schedule", str(e))
    if cfg.basis is not None:
        try:
            BasisSpec(**cfg.basis)
        except (ValueError, TypeError) as e:
            _fail(text, "basis", str(e))
    if cfg.custom is not None:
        try:
            custom_model(cfg.custom)
        except (ValueError, TypeError, KeyError) as e:
            _fail(text, "custom", str(e))
    elif cfg.preset_params:
        try:
            get_preset(cfg.preset, **cfg.preset_params)
        except TypeError as e:
            _fail(text, "preset_params", str(e))


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config; errors name the line and the key."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}: malformed JSON: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("line 1: top level must be a JSON object")
    for k in raw:
        if k not in _TOP:
            _fail(text, k, f"unknown key (expected one of {sorted(_TOP)})")
    kw = dict(raw)
    for name, cls in _SECTIONS.items():
        if name in kw:
            kw[name] = _section(text, name, kw[name], cls)
    try:
        cfg = ExperimentConfig(**kw)
    except TypeError as e:
        raise ConfigError(f"line 1: {e}") from None
    _check(text, cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# --- custom linear-quadratic family -------------------------------------------


def _poly(spec, d):
    """``c + l.x + x^T Q x`` from ``{"const", "linear", "quadratic"}``."""
    c = float(spec.get("const", 0.0))
    lin = np.asarray(spec.get("linear", np.zeros(d)), dtype=float)
    quad = np.asarray(spec.get("quadratic", np.zeros((d, d))), dtype=float)
    if lin.shape != (d,) or quad.shape != (d, d):
        raise ValueError(f"polynomial coefficients must have shapes ({d},) and ({d},{d})")

    def f(x):
        return c + x @ lin + np.einsum("ni,ij,nj->n", x, quad, x)
    return f


def custom_model(spec: dict) -> Preset:
    """Build a model from an affine / diagonal-affine / polynomial coefficient family.

    ``F(x) = b + B x``; ``G(x) = diag(c + D * x)`` (noise dimension d);
    ``phi``, ``h`` and the x-part of ``psi`` are quadratic polynomials;
    ``psi = poly(x) + k_y y + k_z . z``.
    """
    d = int(spec["state_dim"])
    if d < 1:
        raise ValueError("state_dim must be >= 1")
    a = np.asarray(spec.get("a_matrix", np.zeros((d, d))), dtype=float)
    if a.ndim == 1:
        a = np.diag(a)
    drift = spec.get("drift", {})
    b = np.asarray(drift.get("b", np.zeros(d)), dtype=float)
    bm = np.asarray(drift.get("B", np.zeros((d, d))), dtype=float)
    diff = spec.get("diffusion", {})
    cvec = np.asarray(diff.get("c", np.ones(d)), dtype=float)
    dvec = np.asarray(diff.get("D", np.zeros(d)), dtype=float)
    if b.shape != (d,) or bm.shape != (d, d) or cvec.shape != (d,) or dvec.shape != (d,):
        raise ValueError("drift/diffusion coefficient shapes do not match state_dim")
    gen = spec.get("generator", {})
    ky = float(gen.get("y", 0.0))
    kz = np.asarray(gen.get("z", np.zeros(d)), dtype=float)
    gx = _poly(gen.get("x", {}), d)
    phi = _poly(spec.get("terminal", {}), d)
    h = _poly(spec.get("obstacle", {"const": -1e6}), d)
    lip = float(spec.get("lipschitz_bound",
                         max(np.linalg.norm(bm, 2), float(np.max(np.abs(dvec))))))
    model = GalerkinModel(
        d, d, a,
        lambda t, x: b + x @ bm.T,
        lambda t, x: np.einsum("nj,jk->njk", cvec + dvec * x, np.eye(d)),
        lip, "custom",
    )
    problem = ObstacleProblem(
        lambda t, x, y, z: gx(x) + ky * y + z @ kz,
        phi,
        lambda t, x: h(x),
        float(spec.get("growth_m", 0.0)),
        max(abs(ky), float(np.linalg.norm(kz)), 1e-12),
        bool(spec.get("terminal_fallback", False)),
    )
    x0 = np.asarray(spec.get("x0", np.zeros(d)), dtype=float)
    return Preset("custom", model, problem, x0, float(spec.get("T", 1.0)),
                  int(spec.get("n_steps", 50)), BasisSpec(int(spec.get("poly_degree", 2)), True),
                  params={})


def build(cfg: ExperimentConfig) -> Preset:
    """The preset (or custom model) selected by ``cfg``."""
    if cfg.custom is not None:
        return custom_model(cfg.custom)
    return get_preset(cfg.preset, **cfg.preset_params)
