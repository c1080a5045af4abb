"""Request/response models for the maekit service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ArchOverrides(BaseModel):
    image_size: Optional[int] = None
    patch_size: Optional[int] = None
    enc_dim: Optional[int] = None
    enc_depth: Optional[int] = None
    enc_heads: Optional[int] = None
    dec_dim: Optional[int] = None
    dec_depth: Optional[int] = None
    dec_heads: Optional[int] = None
    mlp_ratio: Optional[int] = None


class PretrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    preset: str = "desk"
    mask_ratio: float = 0.75
    epochs: int = 1
    batch_size: int = Field(default=8, gt=0)
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_frac: float = 0.05
    seed: int = 0
    arch: Optional[ArchOverrides] = None


class PretrainResponse(BaseModel):
    out_dir: str
    latest_ckpt: str
    best_ckpt: str
    run_log: str
    config_file: str
    rejection_report: Optional[str]
    n_images: int
    n_rejected: int
    epochs: int
    steps: int
    initial_loss: Optional[float]
    final_loss: Optional[float]
    epoch_losses: list[float]


class ProbeRequest(BaseModel):
    ckpt: str
    data_dir: str
    num_classes: int
    out_dir: str
    mode: Literal["linear_probe", "full_finetune"] = "linear_probe"
    epochs: int = 300
    batch_size: int = Field(default=8, gt=0)
    base_lr: float = 1e-3
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    test_data_dir: Optional[str] = None


class SegmentRequest(BaseModel):
    ckpt: str
    data_dir: str
    out_dir: str
    mode: Literal["linear_probe", "full_finetune"] = "linear_probe"
    epochs: int = 300
    batch_size: int = Field(default=8, gt=0)
    base_lr: float = 1e-3
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    test_data_dir: Optional[str] = None


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    metric: float


class HeadResponse(BaseModel):
    out_dir: str
    head_ckpt: str
    metrics_file: str
    history_file: str
    train_log: str
    config_file: str
    metric_name: str
    metric_value: float
    n_train: int
    n_test: int
    mode: str
    backbone_checksum_before: str
    backbone_checksum_after: str
    backbone_unchanged: bool
    finetuned_ckpt: Optional[str]
    history: list[EpochRecord]


class ReconstructRequest(BaseModel):
    ckpt: str
    image: str
    out_dir: str
    mask_ratio: float = 0.75
    seed: int = 0


class ReconstructResponse(BaseModel):
    out_dir: str
    original: str
    masked: str
    reconstruction: str
    config_file: str
    n_patches: int
    n_masked: int
    keep_count: int


class GradcheckRequest(BaseModel):
    include_corrupted: bool = False


class CheckRecord(BaseModel):
    op: str
    max_rel_err: float
    tol: float
    passed: bool


class GradcheckResponse(BaseModel):
    passed: bool
    elapsed_seconds: float
    checks: list[CheckRecord]


class SyntheticRequest(BaseModel):
    kind: Literal["pretrain", "classify", "segment"]
    n: int = Field(gt=0)
    out_dir: str
    size: int = 64
    seed: int = 0


class SyntheticResponse(BaseModel):
    out_dir: str
    manifest: str
    kind: str
    n: int
    size: int


class HealthResponse(BaseModel):
    status: str
    version: str
