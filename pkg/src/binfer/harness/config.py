"""Experiment configuration schema; unknown keys are rejected everywhere."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

TASKS = ("sgld", "sghmc", "vi", "predict", "ebm", "score", "diffuse", "vae", "gradcheck", "oracle")
SEED_ENV = "BINFER_SEED"


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class ArchSpec(Strict):
    layer_sizes: list[int] = Field(min_length=2)
    activation: Literal["tanh", "relu"] = "tanh"

    @field_validator("layer_sizes")
    @classmethod
    def _positive(cls, v):
        if any(s < 1 for s in v):
            raise ValueError("layer sizes must be >= 1")
        return v


class LikelihoodSpec(Strict):
    kind: Literal["gaussian", "categorical"]
    sigma: float | None = Field(default=None, gt=0)
    n_classes: int | None = Field(default=None, ge=2)

    @model_validator(mode="after")
    def _fields(self):
        if self.kind == "gaussian" and self.sigma is None:
            raise ValueError("gaussian likelihood needs sigma")
        if self.kind == "categorical" and self.n_classes is None:
            raise ValueError("categorical likelihood needs n_classes")
        return self


class PriorSpec(Strict):
    scale: float = Field(default=1.0, gt=0)


class ModelSpec(Strict):
    arch: ArchSpec
    likelihood: LikelihoodSpec | None = None  # not needed for energy models
    prior: PriorSpec = PriorSpec()


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

class Regression1DSpec(Strict):
    kind: Literal["regression_1d"]
    n: int = Field(ge=1)
    noise: float = Field(ge=0)
    seed: int | None = None


class TwoMoonsSpec(Strict):
    kind: Literal["two_moons"]
    n: int = Field(ge=2)
    noise: float = Field(default=0.1, ge=0)
    seed: int | None = None


class Mixture1DSpec(Strict):
    kind: Literal["gaussian_mixture_1d"]
    weights: list[float]
    means: list[float]
    stds: list[float]
    n: int = Field(ge=1)
    seed: int | None = None


class CorrelatedGaussianSpec(Strict):
    kind: Literal["correlated_gaussian_2d"]
    mean: list[float] = [0.0, 0.0]
    cov: list[list[float]] = [[2.0, 1.5], [1.5, 1.6]]
    seed: int | None = None


class BLRSpec(Strict):
    kind: Literal["blr"]
    n: int = Field(ge=0)
    d: int = Field(ge=1)
    sigma: float = Field(gt=0)
    tau: float = Field(gt=0)
    true_w: list[float] | None = None
    seed: int | None = None


class PPCASpec(Strict):
    kind: Literal["ppca"]
    n: int = Field(ge=1)
    W: list[list[float]]
    b: list[float]
    sigma: float = Field(gt=0)
    seed: int | None = None


DatasetSpec = Annotated[
    Union[Regression1DSpec, TwoMoonsSpec, Mixture1DSpec, CorrelatedGaussianSpec, BLRSpec, PPCASpec],
    Field(discriminator="kind"),
]


# ---------------------------------------------------------------------------
# per-task method settings
# ---------------------------------------------------------------------------

class SamplerMethod(Strict):
    n_steps: int = Field(ge=1)
    schedule: dict = {"kind": "constant", "alpha0": 1e-4}
    batch_size: int | None = Field(default=None, ge=1)
    burn_in: int | None = Field(default=None, ge=0)
    thin: int = Field(default=10, ge=1)
    friction: float = Field(default=1.0, gt=0)
    mass: float = Field(default=1.0, gt=0)
    collect_below: float | None = 0.1


class VIMethod(Strict):
    family: Literal["meanfield", "lowrank"] = "meanfield"
    rank: int = Field(default=1, ge=1)
    objective: Literal["elbo", "alpha"] = "elbo"
    alpha: float = 1.0
    mc_samples: int = Field(default=1, ge=1)
    steps: int = Field(default=1000, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    schedule: dict | None = None
    batch_size: int | None = Field(default=None, ge=1)
    sigma_scale: float = Field(default=0.05, gt=0)
    tau: float = Field(default=1.0, gt=0)
    init_mu_scale: float = Field(default=1.0, ge=0)
    average_tail: float = Field(default=0.0, ge=0, lt=1)
    gradient: Literal["reparam", "dreg"] = "reparam"


class PredictMethod(Strict):
    posterior: str  # path to a fitted-q JSON or a chain file
    n_draws: int = Field(default=1000, ge=1)
    x_star: list[list[float]] | None = None


class InitSpec(Strict):
    kind: Literal["data", "noise", "persistent"] = "data"
    noise: Literal["uniform", "gaussian"] = "uniform"
    reinit_prob: float = Field(default=0.05, ge=0, le=1)
    capacity: int | None = Field(default=None, ge=1)


class EBMMethod(Strict):
    steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=128, ge=1)
    langevin_steps: int = Field(default=60, ge=1)
    langevin_alpha: float = Field(default=0.01, gt=0)
    lr: float = Field(default=1e-3, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    init: InitSpec = InitSpec()
    box: tuple[float, float] | None = (-6.0, 6.0)
    energy_l2: float = Field(default=0.0, ge=0)
    anneal_t0: float = Field(default=1.0, ge=1.0)
    ais: bool = False
    grid_points: int = Field(default=2048, ge=16)


class ScoreMethod(Strict):
    mode: Literal["ncsn", "vp"] = "ncsn"
    hidden: list[int] = [64, 64]
    activation: Literal["tanh", "relu"] = "relu"
    steps: int = Field(default=3000, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    lr_floor: float = Field(default=0.02, gt=0, le=1)
    sigma_max: float = Field(default=1.0, gt=0)
    sigma_min: float = Field(default=0.1, gt=0)
    n_scales: int = Field(default=11, ge=1)
    beta_min: float = Field(default=0.1, gt=0)
    beta_max: float = Field(default=20.0, gt=0)
    ema: float = Field(default=0.999, ge=0, lt=1)
    steps_per_scale: int = Field(default=100, ge=1)
    eps0: float = Field(default=2e-3, gt=0)
    n_samples: int = Field(default=2000, ge=1)
    eval_sigmas: list[float] = [1.0, 0.5, 0.1]


class DiffuseMethod(Strict):
    score: Literal["analytic", "learned"] = "analytic"
    beta_min: float = Field(default=0.1, gt=0)
    beta_max: float = Field(default=20.0, gt=0)
    n_steps: int = Field(default=1000, ge=1)
    corrector_steps: int = Field(default=0, ge=0)
    snr: float = Field(default=0.16, gt=0)
    n_samples: int = Field(default=2000, ge=1)
    train: ScoreMethod | None = None  # used when score == "learned"; mode forced to vp


class RefineSpec(Strict):
    steps: int = Field(default=0, ge=0)
    step_size: float = Field(default=1e-3, gt=0)


class VAEMethod(Strict):
    d_z: int = Field(default=1, ge=1)
    enc_hidden: list[int] = []
    dec_hidden: list[int] = []
    activation: Literal["tanh", "relu"] = "tanh"
    lik_sigma: float = Field(default=1.0, gt=0)
    objective: Literal["elbo", "iwae"] = "elbo"
    iwae_samples: int = Field(default=16, ge=1)
    steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-2, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    refine: RefineSpec = RefineSpec()
    eval_m: list[int] = [1, 4, 16, 64]


class GradcheckMethod(Strict):
    instances: int = Field(default=20, ge=1)
    h: float = Field(default=1e-5, gt=0)
    tol: float = Field(default=1e-5, gt=0)


class EmptyMethod(Strict):
    pass


METHODS = {
    "sgld": SamplerMethod, "sghmc": SamplerMethod, "vi": VIMethod, "predict": PredictMethod,
    "ebm": EBMMethod, "score": ScoreMethod, "diffuse": DiffuseMethod, "vae": VAEMethod,
    "gradcheck": GradcheckMethod, "oracle": EmptyMethod,
}
NEEDS_DATA = {"sgld", "sghmc", "vi", "ebm", "score", "vae"}
NEEDS_MODEL = {"sgld", "sghmc"}


class ExperimentConfig(Strict):
    task: Literal["sgld", "sghmc", "vi", "predict", "ebm", "score", "diffuse", "vae", "gradcheck", "oracle"]
    model: ModelSpec | None = None
    data: DatasetSpec | None = None
    method: dict = {}
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    out_dir: str = "runs/out"

    @model_validator(mode="after")
    def _check_task(self):
        METHODS[self.task].model_validate(self.method)
        if self.task in NEEDS_DATA and self.data is None:
            raise ValueError(f"task {self.task!r} needs a data section")
        if self.task in NEEDS_MODEL and (self.model is None or self.model.likelihood is None):
            raise ValueError(f"task {self.task!r} needs a model section with a likelihood")
        if self.task == "vi" and self.model is None and self.data is not None \
                and self.data.kind != "correlated_gaussian_2d":
            raise ValueError("vi on a dataset needs a model section")
        return self

    def method_settings(self):
        return METHODS[self.task].model_validate(self.method)

    def data_seed(self) -> int:
        s = getattr(self.data, "seed", None)
        return self.seed if s is None else s

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path, seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    """Read and validate a JSON config; BINFER_SEED and explicit overrides apply on top."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        raw["seed"] = int(env_seed)
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    return ExperimentConfig.model_validate(raw)
