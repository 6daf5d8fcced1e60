"""Experiment configuration: YAML files validated against a pydantic schema."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .adversarial import AdvTrainConfig
from .data import LatentTask
from .dit import DiTConfig
from .errors import SchemaError
from .pruning import PruneBudget
from .vae import StudyConfig

STAGES = ("pretrain", "prune", "kd", "adv-distill", "vae-study", "bench", "report")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DiTSection(_Section):
    num_blocks: int = Field(8, ge=1)
    hidden_dim: int = Field(128, ge=1)
    num_heads: int = Field(8, ge=1)
    head_dim: int = Field(16, ge=1)
    ffn_dim: int = Field(512, ge=1)
    patch: tuple[int, int, int] = (1, 2, 2)
    latent_channels: int = Field(8, ge=1)
    cond_dim: int = Field(64, ge=1)
    cond_vocab: int = Field(16, ge=1)
    cond_tokens: int = Field(4, ge=1)
    rope: bool = True

    def build(self) -> DiTConfig:
        return DiTConfig(**self.model_dump())


class TaskSection(_Section):
    shape: tuple[int, int, int, int] = (8, 2, 8, 8)
    num_prompts: int = Field(4, ge=1)
    modes: int = Field(2, ge=1)
    jitter: float = Field(0.05, ge=0)

    def build(self, seed: int) -> LatentTask:
        return LatentTask(tuple(self.shape), self.num_prompts, self.modes, self.jitter, seed)


class PretrainSection(_Section):
    iters: int = Field(600, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    t_sampler: Literal["uniform", "logit_normal"] = "uniform"


class PruneSection(_Section):
    max_params: int = Field(10**12, gt=0)
    blocks_to_prune: int | None = Field(None, ge=0)
    heads_to_prune: int | None = Field(None, ge=0)
    ffn_keep_fraction: float | None = Field(None, gt=0, le=1)
    group_size: int | dict[str, int] = 2
    cap: int = Field(16, ge=1)
    mode: Literal["enumerate", "learn"] = "enumerate"
    mask_iters: int = Field(50, ge=0)
    mask_lr: float = Field(0.05, gt=0)
    eval_batches: int = Field(4, ge=1)
    eval_batch_size: int = Field(32, ge=1)
    sweep_axes: list[Literal["blocks", "heads", "ffn"]] = Field(default_factory=list)
    sweep_fractions: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    bench_runs: int = Field(11, ge=3)

    @field_validator("sweep_fractions")
    @classmethod
    def _fractions(cls, v):
        if any(not 0 < f <= 1 for f in v):
            raise ValueError("keep fractions must lie in (0, 1]")
        return v

    def budget(self) -> PruneBudget:
        return PruneBudget(self.max_params, self.blocks_to_prune, self.heads_to_prune, self.ffn_keep_fraction)


class KDSection(_Section):
    iters: int = Field(300, ge=1)
    alpha: float = Field(0.01, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    groups: int = Field(2, ge=1)
    sim: Literal["cosine", "l2"] = "cosine"


class AdvSection(_Section):
    iters: int = Field(200, ge=1)
    k: int = Field(4, ge=2)
    K: int = Field(2, ge=1)
    L: int = Field(2, ge=1)
    ema_rate: float = Field(0.95, ge=0, lt=1)
    c: float = Field(0.03, gt=0)
    lr_gen: float = Field(1e-4, gt=0)
    lr_disc: float = Field(1e-4, gt=0)
    lambda_adv: float = Field(1.0, ge=0)
    batch_size: int = Field(16, ge=1)
    head: Literal["dit", "resblock2d_temporal", "conv3d"] = "dit"
    convention: Literal["mirrored", "standard"] = "mirrored"

    def build(self) -> AdvTrainConfig:
        return AdvTrainConfig(**self.model_dump(exclude={"iters"}))


class VAESection(_Section):
    specs: list[tuple[int, int, int]] = Field(default_factory=lambda: [(4, 16, 16), (4, 32, 32), (8, 32, 32), (8, 64, 64)])
    seeds: list[int] = Field(default_factory=lambda: [0])
    clip_shape: tuple[int, int, int] = (16, 64, 64)
    bench_shape: tuple[int, int, int] = (32, 256, 256)
    n_train: int = Field(32, ge=1)
    n_eval: int = Field(8, ge=1)
    vae_iters: int = Field(300, ge=1)
    vae_width: int = Field(64, ge=1)
    dit_iters: int = Field(30, ge=1)
    bench_runs: int = Field(11, ge=3)
    latent_channels: int = Field(16, ge=1)
    data_dir: str | None = None

    def study(self) -> StudyConfig:
        return StudyConfig(tuple(self.clip_shape), tuple(self.bench_shape), self.n_train, self.n_eval,
                           self.vae_iters, self.vae_width, self.dit_iters, self.bench_runs, self.latent_channels)


class BenchSection(_Section):
    checkpoint: str | None = None
    latent_shapes: list[tuple[int, int, int, int]] = Field(default_factory=lambda: [(8, 2, 8, 8), (8, 4, 16, 16)])
    runs: int = Field(50, ge=3)


class ExperimentConfig(_Section):
    stage: Literal["pretrain", "prune", "kd", "adv-distill", "vae-study", "bench", "report"] = "pretrain"
    seed: int = 0
    out_dir: str = "runs/toy"
    threads: int = Field(1, ge=1)
    parallel: int = Field(1, ge=1)
    dit: DiTSection = Field(default_factory=DiTSection)
    task: TaskSection = Field(default_factory=TaskSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    prune: PruneSection = Field(default_factory=PruneSection)
    kd: KDSection = Field(default_factory=KDSection)
    adv: AdvSection = Field(default_factory=AdvSection)
    vae: VAESection = Field(default_factory=VAESection)
    bench: BenchSection = Field(default_factory=BenchSection)


def parse_config(data: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as e:
        err = e.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise SchemaError(f"invalid config at {path}: {err['msg']}", path=path) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"config file {path} does not exist", path=str(path))
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise SchemaError(f"cannot parse {path}: {e}", path=str(path)) from None
    if data is not None and not isinstance(data, dict):
        raise SchemaError(f"{path} must hold a mapping at top level", path="")
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
