from datetime import datetime, timezone
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Method(str, Enum):
    vsd_lora_spaced = "vsd_lora_spaced"
    vsd_lora = "vsd_lora"
    sds = "sds"
    identity = "identity"


class LossMode(str, Enum):
    score_shortcut = "score_shortcut"
    literal_l1 = "literal_l1"


class Weighting(str, Enum):
    constant = "constant"
    one_minus_alpha_bar = "one_minus_alpha_bar"
    snr = "snr"


class ScheduleKind(str, Enum):
    cosine = "cosine"
    linear = "linear"


class SceneSource(str, Enum):
    synthetic = "synthetic"
    llff = "llff"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneConfig(StrictModel):
    source: SceneSource = SceneSource.synthetic
    seed: int = 7
    grid_res: int = Field(64, ge=16)
    n_views: int = Field(20, ge=2)
    hr_size: int = Field(128, ge=4)
    llff_path: Optional[str] = None
    # Scene-level prompt; mapped to an id through the persisted vocabulary
    prompt: str = "synthetic textured blobs"
    # Every k-th view is held out for evaluation
    held_out_every: int = Field(5, ge=2)
    camera_radius: float = Field(3.0, gt=0)
    focal_factor: float = Field(1.2, gt=0)
    near: float = Field(1.0, gt=0)
    far: float = Field(5.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.hr_size % 4 != 0:
            raise ValueError(f"hr_size must be divisible by 4, got {self.hr_size}")
        if self.near >= self.far:
            raise ValueError("near must be smaller than far")
        if self.source == SceneSource.llff and not self.llff_path:
            raise ValueError("llff_path is required when source is 'llff'")
        return self


class ScheduleConfig(StrictModel):
    kind: ScheduleKind = ScheduleKind.cosine
    T: int = Field(1000, ge=2)
    cosine_s: float = Field(0.008, gt=0)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)


class CodecConfig(StrictModel):
    latent_channels: int = Field(4, ge=1)
    widths: Tuple[int, int, int] = (32, 64, 64)
    scale: int = Field(4, ge=4, le=4)
    epochs: int = Field(30, ge=0)
    lr: float = Field(2e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    # Stop after this many consecutive epochs without validation improvement
    patience: int = Field(3, ge=1)
    min_images: int = Field(100, ge=2)


class DenoiserConfig(StrictModel):
    widths: Tuple[int, int, int] = (32, 64, 128)
    emb_dim: int = Field(128, ge=4)
    n_classes: int = Field(8, ge=1)
    steps: int = Field(3000, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    p_unknown_prompt: float = Field(0.1, ge=0, le=1)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    log_every: int = Field(100, ge=1)


class LoRAConfig(StrictModel):
    rank: int = Field(4, ge=1)
    scale: float = 1.0
    init_std: float = Field(0.01, ge=0)
    layers: List[str] = Field(default_factory=lambda: ["time_mlp.0", "time_mlp.2", "mid.conv1", "mid.proj", "mid.conv2"])
    max_param_fraction: float = Field(0.1, gt=0, le=1)


class FieldConfig(StrictModel):
    lr_grid_res: int = Field(64, ge=2)
    sr_grid_res: int = Field(128, ge=2)
    n_samples: int = Field(64, ge=2)
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lr: float = Field(0.05, ge=0)
    fit_steps: int = Field(2000, ge=0)
    ray_batch: int = Field(1024, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    init_density: float = -2.0
    divergence_factor: float = Field(10.0, gt=1)
    divergence_patience: int = Field(100, ge=1)
    log_every: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if any(not 0.0 <= c <= 1.0 for c in self.background):
            raise ValueError("background color must lie in [0, 1]")
        return self


class VSDConfig(StrictModel):
    max_steps: int = Field(200, ge=0)  # M
    lr_residual: float = Field(0.1, ge=0)  # eta_1
    lr_lora: float = Field(1e-3, ge=0)  # eta_2
    lora_interval: int = Field(3, ge=1)  # k
    weighting: Weighting = Weighting.constant
    # Multiplies w(t) for every weighting kind
    omega_scale: float = Field(1.0, gt=0)
    t_min: int = Field(20, ge=0)
    t_max: int = Field(980, ge=1)
    loss_mode: LossMode = LossMode.score_shortcut
    # Run the LoRA forward of the diffusion loss under bfloat16 autocast
    lora_autocast: bool = False
    use_lora: bool = True
    sds: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.t_min >= self.t_max:
            raise ValueError(f"t_min ({self.t_min}) must be smaller than t_max ({self.t_max})")
        return self


class I3DSConfig(StrictModel):
    rounds: int = Field(4, ge=1)
    max_sync_iter: int = Field(500, ge=1)
    ray_batch: int = Field(1024, ge=1)
    sync_lr: float = Field(0.05, ge=0)
    # Jittered sample depths while syncing; off renders at bin midpoints like render_image
    sync_stratified: bool = True
    seed: int = 0
    # Re-initialize the LoRA adapters at the start of every round
    reset_lora: bool = False
    vsd: VSDConfig = Field(default_factory=VSDConfig)


class MetricsConfig(StrictModel):
    niqe_patch_size: int = Field(32, ge=8)
    niqe_min_side: int = Field(96, ge=16)
    max_val: float = Field(1.0, gt=0)


class PretrainConfig(StrictModel):
    corpus_seeds: List[int] = Field(default_factory=lambda: [101, 102, 103, 104, 105, 106])
    corpus_views: int = Field(20, ge=2)
    seed: int = 0


class RunConfig(StrictModel):
    scene: SceneConfig = Field(default_factory=SceneConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    lora: LoRAConfig = Field(default_factory=LoRAConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    i3ds: I3DSConfig = Field(default_factory=I3DSConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    method: Method = Method.vsd_lora_spaced
    output_dir: str = "runs/default"
    # Defaults to <data_root>/checkpoints
    checkpoints_dir: Optional[str] = None
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.i3ds.vsd.t_max > self.schedule.T:
            raise ValueError(f"vsd.t_max ({self.i3ds.vsd.t_max}) exceeds schedule T ({self.schedule.T})")
        if self.field.sr_grid_res < self.field.lr_grid_res:
            raise ValueError("field.sr_grid_res must be >= field.lr_grid_res")
        return self

    def vsd_for_method(self) -> VSDConfig:
        """VSD settings with the method preset applied."""
        vsd = self.i3ds.vsd
        if self.method == Method.vsd_lora_spaced:
            return vsd.model_copy(update={"lora_interval": 3, "use_lora": True, "sds": False})
        if self.method == Method.vsd_lora:
            return vsd.model_copy(update={"lora_interval": 1, "use_lora": True, "sds": False})
        if self.method == Method.sds:
            return vsd.model_copy(update={"use_lora": False, "sds": True})
        return vsd.model_copy(update={"max_steps": 0, "use_lora": False, "sds": False})


class CodecMetadata(BaseModel):
    epochs_run: int = 0
    final_val_mse: Optional[float] = None
    history: List[float] = Field(default_factory=list)
    seed: int = 0
    weights_hash: Optional[str] = None


class DenoiserMetadata(BaseModel):
    steps_run: int = 0
    final_val_mse: Optional[float] = None
    seed: int = 0
    weights_hash: Optional[str] = None


class RoundReport(BaseModel):
    round_index: int
    vsd_final_losses: List[float]
    sync_losses: List[float]
    psnr_targets: Optional[float] = None
    psnr_renders: Optional[float] = None
    consistency_targets: Optional[float] = None
    consistency_renders: Optional[float] = None
    wall_clock: Dict[str, float] = Field(default_factory=dict)
    field_hash: Optional[str] = None
    adapter_hash: Optional[str] = None


class MetricReport(BaseModel):
    method: str
    # None when ground truth is unavailable or the PSNR is infinite (see psnr_infinite)
    psnr_db: Optional[float] = None
    psnr_infinite: bool = False
    niqe: Optional[float] = None
    perc_proxy: Optional[float] = None
    n_views: int
    config_hash: str
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class RunStatus(BaseModel):
    state: str  # running, completed, failed
    stage: Optional[str] = None
    round_index: Optional[int] = None
    error: Optional[str] = None
    exit_code: Optional[int] = None
    updated: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
