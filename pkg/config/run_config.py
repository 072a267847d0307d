from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing_extensions import Literal

from config.settings import settings
from core.toy_lvlm import ModelConfig, SceneParams

Command = Literal["calibrate", "rank-heads", "generate", "eval", "make-scenes", "pipeline"]


class RunConfig(BaseModel):
    """Everything one pipeline command needs, with knob ranges enforced."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Command = "pipeline"
    scenes: int = Field(default=settings.N_SCENES, ge=1)
    seed: int = Field(default=settings.SEED, ge=0)
    layers: int = Field(default=settings.LAYERS, ge=1)
    heads: int = Field(default=settings.HEADS, ge=1)
    dmodel: int = Field(default=settings.D_MODEL, ge=1)
    vocab: int = Field(default=settings.VOCAB, ge=1)
    nvision: int = Field(default=settings.N_VISION, ge=1)
    max_seq: int = Field(default=settings.MAX_SEQ, ge=1)
    n_inert: int = Field(default=2, ge=0)
    alpha: float = Field(default=settings.ALPHA, ge=0.0)
    beta: float = Field(default=settings.BETA, ge=0.0, le=1.0)
    k: int = Field(default=settings.K, ge=1)
    iqr_mult: float = Field(default=settings.IQR_MULT, ge=0.0)
    salient_frac: float = Field(default=settings.SALIENT_FRAC, gt=0.0, le=1.0)
    skip_salient: bool = False
    renormalize: bool = False
    no_gt: bool = False
    t: int = Field(default=settings.T, ge=1)
    ktop: int = Field(default=settings.KTOP, ge=1)
    max_new: int = Field(default=settings.MAX_NEW, ge=1)
    criterion: Literal["nhar", "total_attention"] = "nhar"
    compare_persist: bool = False
    trace: bool = False
    out: str = settings.OUTPUT_DIR
    profile: Optional[str] = None
    scene_dir: Optional[str] = None
    workers: int = Field(default=settings.WORKERS, ge=1)

    @field_validator("out")
    @classmethod
    def _non_empty_path(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("output path must not be empty")
        return value

    def toy_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self.layers,
            n_heads=self.heads,
            d_model=self.dmodel,
            d_head=max(1, self.dmodel // self.heads),
            vocab_size=self.vocab,
            n_vision=self.nvision,
            max_seq=self.max_seq,
            seed=self.seed,
        ).validate()

    def scene_params(self) -> SceneParams:
        return SceneParams(n_inert=self.n_inert)

    @property
    def profile_path(self) -> Path:
        return Path(self.profile) if self.profile else Path(self.out) / "profile.json"
