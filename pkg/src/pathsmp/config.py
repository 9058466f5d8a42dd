"""Strict experiment configuration (JSON text)."""
from __future__ import annotations

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator

from .measures import FiniteMeasure
from .spaces import GridError, build_grid


class ConfigError(ValueError):
    """First validation error, prefixed by the dotted key path."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridCfg(_Strict):
    T: float = 1.0
    n_steps: int = 32
    K: float = 0.25

    @field_validator("K")
    @classmethod
    def _aligned(cls, K: float, info: ValidationInfo) -> float:
        T, n = info.data.get("T"), info.data.get("n_steps")
        if T is None or n is None:
            return K
        try:
            build_grid(T, K, n)
        except GridError as exc:
            raise ValueError(str(exc)) from None
        return K


class MeasureCfg(_Strict):
    """``dirac`` at ``at`` (<= 0), ``trapezoid`` over [-K, 0], or explicit ``atoms`` [[s, w], ...]."""

    kind: Literal["dirac", "trapezoid", "atoms"] = "dirac"
    at: float = 0.0
    weight: float = 1.0
    atoms: list[tuple[float, float]] = Field(default_factory=list)

    @field_validator("weight")
    @classmethod
    def _weight(cls, w: float) -> float:
        if w < 0:
            raise ValueError("FiniteMeasure weights must be nonnegative (signed measures unsupported)")
        return w

    @field_validator("atoms")
    @classmethod
    def _atoms(cls, atoms):
        for i, (s, w) in enumerate(atoms):
            if w < 0:
                raise ValueError(f"FiniteMeasure weights must be nonnegative; atom {i} has weight {w}")
            if s > 0:
                raise ValueError(f"FiniteMeasure atoms must lie in [-K, 0]; atom {i} at {s}")
        return atoms

    def build(self, dt: float, K: float) -> tuple[FiniteMeasure, float]:
        if self.kind == "dirac":
            return FiniteMeasure.from_pairs([(self.at, self.weight)], dt, K)
        if self.kind == "trapezoid":
            return FiniteMeasure.trapezoid(K, dt).scaled(self.weight), 0.0
        if not self.atoms:
            return FiniteMeasure.zero(dt), 0.0
        return FiniteMeasure.from_pairs(self.atoms, dt, K)


class MeasuresCfg(_Strict):
    mu1: MeasureCfg = MeasureCfg()
    mu2: MeasureCfg = MeasureCfg()


class MonteCarloCfg(_Strict):
    n_paths: int = Field(4096, ge=1)
    seed: int = Field(0, ge=0)


class RegressionCfg(_Strict):
    degree: int = Field(1, ge=0, le=4)
    use_delay: bool = True
    ridge: float = Field(0.0, ge=0.0)
    adjoint: Literal["regression", "pathwise"] = "pathwise"
    control_variate: bool = True


class ConstraintCfg(_Strict):
    kind: Literal["none", "box", "ball"] = "none"
    lo: float = float("-inf")
    hi: float = float("inf")
    radius: float = float("inf")


class OptimizerCfg(_Strict):
    step: float = Field(1.0, gt=0)
    max_iter: int = Field(200, ge=0)
    tol: float = Field(1e-3, gt=0)
    armijo: float = Field(1e-4, gt=0, lt=1)
    budget: int = Field(30, ge=1)
    constraint: ConstraintCfg = ConstraintCfg()


class GradCheckCfg(_Strict):
    rhos: list[float] = Field(default_factory=lambda: [1e-1, 1e-2, 1e-3])
    direction_seed: int = 1
    scheme: Literal["forward", "central"] = "forward"


class LQBasicCfg(_Strict):
    """Scalar LQ with a delayed drift term and multiplicative noise."""

    a: float = -0.5          # A
    a1: float = 0.3          # delayed drift at -K
    c: float = 1.0           # C
    b1: float = 0.2          # current-state diffusion
    b1_delay: float = 0.1    # delayed diffusion
    dv: float = 0.2          # D
    sigma0: float = 0.1      # additive noise
    F: float = 1.0
    N: float = Field(1.0, gt=0)
    Phi: float = 1.0
    G1: float = 0.0
    G2: float = 0.0
    gamma: float = 1.0       # constant initial segment


class HeatCfg(_Strict):
    """Periodic heat equation in a real Fourier basis of ``n_modes`` harmonics."""

    n_modes: int = Field(3, ge=1, le=3)   # state dimension 2 n_modes + 1
    diffusivity: float = Field(0.02, gt=0)
    beta: float = 0.1                     # first-order noise coefficient
    delay_drift: float = 0.5
    delay_diffusion: float = 0.0
    control_gain: float = 1.0
    control_noise: float = 0.0
    additive_noise: float = 0.1
    control_penalty: float = Field(1.0, gt=0)
    terminal_weight: float = 1.0
    noise: bool = True

    @field_validator("beta")
    @classmethod
    def _super_parabolic(cls, beta: float, info: ValidationInfo) -> float:
        a = info.data.get("diffusivity")
        if a is not None and beta * beta >= 2 * a:
            raise ValueError(f"super-parabolicity needs beta^2 < 2*diffusivity (beta^2={beta * beta:g}, "
                             f"2a={2 * a:g})")
        return beta


class NonlinearCfg(_Strict):
    """Scalar sine-delay system with quadratic cost."""

    a: float = -0.5
    c1: float = 1.0
    cv: float = 1.0
    s0: float = 0.1
    s1: float = 0.2
    s2: float = 0.1
    sv: float = 0.1
    F: float = 1.0
    N: float = Field(1.0, gt=0)
    Phi: float = 1.0
    gamma: float = 1.0


class OutputCfg(_Strict):
    dir: str = "out"


class ExperimentConfig(_Strict):
    scenario: Literal["lq_basic", "heat_spde", "nonlinear_delay"] = "lq_basic"
    grid: GridCfg = GridCfg()
    measures: MeasuresCfg = MeasuresCfg()
    mc: MonteCarloCfg = MonteCarloCfg()
    regression: RegressionCfg = RegressionCfg()
    optimizer: OptimizerCfg = OptimizerCfg()
    gradcheck: GradCheckCfg = GradCheckCfg()
    lq_basic: LQBasicCfg = LQBasicCfg()
    heat_spde: HeatCfg = HeatCfg()
    nonlinear_delay: NonlinearCfg = NonlinearCfg()
    output: OutputCfg = OutputCfg()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _first_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    path = ".".join(str(p) for p in err["loc"])
    msg = err["msg"]
    if msg.startswith("Value error, "):
        msg = msg[len("Value error, "):]
    if err["type"] == "extra_forbidden":
        msg = "unknown key"
    return ConfigError(path, msg)


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise _first_error(exc) from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"malformed JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be an object")
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
