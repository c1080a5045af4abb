"""Downstream task heads and the freeze/fine-tune training contract.

Classification attaches a single fully connected layer over mean-pooled
encoder tokens; segmentation upsamples the token grid through four
2x2-stride-2 transposed convolutions (256/128/64/32 channels, GeLU) and a
final 1x1 convolution with a sigmoid. In ``linear_probe`` mode only head
parameters move and the backbone stays bit-identical; ``full_finetune``
updates everything.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, UnsupportedConfigError
from .metrics import argmax_classes, f_score, segmentation_confusion
from .model import (
    MaeModel,
    encode,
    pooled_features,
    read_container,
    trunc_normal,
    write_container,
)
from .optim import AdamState, Schedule, train_epoch
from .patches import full_plan
from .tensor import (
    Tensor,
    active_dtype,
    add,
    bce_with_logits,
    conv_transpose2d,
    cross_entropy,
    gelu,
    matmul,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

SEG_CHANNELS = (256, 128, 64, 32)
SEG_PATCH_SIZE = 16  # 4 doubling stages -> x16 upscale, so P must be 16

TRAIN_MODES = ("linear_probe", "full_finetune")


@dataclass
class LinearProbeHead:
    enc_dim: int
    num_classes: int
    params: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class SegmentationHead:
    enc_dim: int
    params: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class HeadTrainResult:
    history: list[dict]
    log_lines: list[str]


@dataclass(frozen=True)
class HeadTrainOptions:
    epochs: int = 100
    batch_size: int = 8
    base_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.base_lr <= 0:
            raise ConfigError("epochs, batch_size, and base_lr must be positive")


def init_linear_head(enc_dim: int, num_classes: int, seed: int) -> LinearProbeHead:
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dtype = active_dtype()
    params = {
        "w": Tensor(trunc_normal(rng, (enc_dim, num_classes), 0.02).astype(dtype),
                    requires_grad=True),
        "b": Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True),
    }
    return LinearProbeHead(enc_dim, num_classes, params)


def init_segmentation_head(enc_dim: int, seed: int) -> SegmentationHead:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dtype = active_dtype()
    params: dict[str, Tensor] = {}
    c_in = enc_dim
    for i, c_out in enumerate(SEG_CHANNELS):
        params[f"up{i}.w"] = Tensor(
            trunc_normal(rng, (c_in, c_out, 2, 2), 0.02).astype(dtype), requires_grad=True)
        params[f"up{i}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        c_in = c_out
    params["out.w"] = Tensor(trunc_normal(rng, (SEG_CHANNELS[-1], 1), 0.02).astype(dtype),
                             requires_grad=True)
    params["out.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    return SegmentationHead(enc_dim, params)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def classify_logits(features: Tensor, head: LinearProbeHead) -> Tensor:
    if features.data.shape[-1] != head.enc_dim:
        raise ConfigError(
            f"features have dim {features.data.shape[-1]}, head expects {head.enc_dim}"
        )
    return add(matmul(features, head.params["w"]), head.params["b"])


def classify_forward(images: Tensor, model: MaeModel, head: LinearProbeHead) -> Tensor:
    """Class probabilities [B, num_classes]: encode everything visible,
    mean-pool the tokens, apply the probe, softmax."""
    if head.enc_dim != model.config.enc_dim:
        raise ConfigError(
            f"head was built for enc_dim {head.enc_dim}, model has {model.config.enc_dim}"
        )
    return softmax(classify_logits(pooled_features(images, model), head), axis=-1)


def token_grid(images: Tensor, model: MaeModel) -> Tensor:
    """Encoder tokens rearranged into a [B, enc_dim, G, G] feature map
    (row-major token order)."""
    cfg = model.config
    b = images.data.shape[0]
    tokens = encode(images, [full_plan(cfg.patch.num_patches)] * b, model)
    g = cfg.patch.grid
    return reshape(transpose(tokens, (0, 2, 1)), (b, cfg.enc_dim, g, g))


def seg_head_logits(grid: Tensor, head: SegmentationHead) -> Tensor:
    if grid.data.shape[1] != head.enc_dim:
        raise ConfigError(
            f"feature grid has {grid.data.shape[1]} channels, head expects {head.enc_dim}"
        )
    x = grid
    for i in range(len(SEG_CHANNELS)):
        x = gelu(conv_transpose2d(x, head.params[f"up{i}.w"], head.params[f"up{i}.b"]))
    x = transpose(x, (0, 2, 3, 1))
    x = add(matmul(x, head.params["out.w"]), head.params["out.b"])
    return transpose(x, (0, 3, 1, 2))


def segment_logits(images: Tensor, model: MaeModel, head: SegmentationHead) -> Tensor:
    if model.config.patch.patch_size != SEG_PATCH_SIZE:
        raise UnsupportedConfigError(
            f"segmentation head upscales exactly 16x through its 4 stages;"
            f" patch size must be 16, got {model.config.patch.patch_size}"
        )
    if head.enc_dim != model.config.enc_dim:
        raise ConfigError(
            f"head was built for enc_dim {head.enc_dim}, model has {model.config.enc_dim}"
        )
    return seg_head_logits(token_grid(images, model), head)


def segment_forward(images: Tensor, model: MaeModel, head: SegmentationHead) -> Tensor:
    """Per-pixel foreground probabilities, same spatial size as the input."""
    return sigmoid(segment_logits(images, model, head))


def binarize_mask(probs, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities to a {0, 1} mask; ties go to foreground."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (arr >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# feature extraction (frozen backbone)
# ---------------------------------------------------------------------------

def extract_pooled_features(model: MaeModel, images: np.ndarray,
                            chunk: int = 32) -> np.ndarray:
    out = []
    for ofs in range(0, images.shape[0], chunk):
        out.append(pooled_features(Tensor(images[ofs:ofs + chunk]), model).data)
    return np.concatenate(out)


def extract_token_grids(model: MaeModel, images: np.ndarray,
                        chunk: int = 32) -> np.ndarray:
    out = []
    for ofs in range(0, images.shape[0], chunk):
        out.append(token_grid(Tensor(images[ofs:ofs + chunk]), model).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _classifier_metric(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(argmax_classes(logits) == labels))


def _segmentation_metric(probs: np.ndarray, masks: np.ndarray) -> float:
    return f_score(segmentation_confusion(binarize_mask(probs), masks.astype(np.uint8)))


def train_head(model: MaeModel, head, images: np.ndarray, targets: np.ndarray,
               mode: str, opts: HeadTrainOptions) -> HeadTrainResult:
    """Train a task head, optionally fine-tuning the backbone in place.

    ``images`` is [n, 1, H, W]; ``targets`` is an int label vector for a
    LinearProbeHead or a [n, 1, H, W] binary mask stack for a
    SegmentationHead. Returns per-epoch loss and train-set metric history.
    """
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    n = images.shape[0]
    if n == 0:
        raise ConfigError("cannot train a head on an empty dataset")
    is_classifier = isinstance(head, LinearProbeHead)
    if is_classifier:
        labels = np.asarray(targets, dtype=np.int64)
        if labels.shape != (n,):
            raise ConfigError(f"expected {n} class labels, got shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= head.num_classes:
            raise ConfigError(
                f"labels must lie in [0, {head.num_classes}), found"
                f" [{labels.min()}, {labels.max()}]"
            )
    else:
        masks = np.asarray(targets, dtype=active_dtype())
        if masks.shape != images.shape:
            raise ConfigError(
                f"mask stack shape {masks.shape} does not match images {images.shape}"
            )

    frozen = mode == "linear_probe"
    if frozen:
        params = dict(head.params)
        if is_classifier:
            feats = extract_pooled_features(model, images)

            def loss_fn(batch):
                logits = classify_logits(Tensor(feats[batch]), head)
                return cross_entropy(logits, labels[batch])

            def epoch_metric():
                logits = feats @ head.params["w"].data + head.params["b"].data
                return _classifier_metric(logits, labels)
        else:
            grids = extract_token_grids(model, images)

            def loss_fn(batch):
                logits = seg_head_logits(Tensor(grids[batch]), head)
                return bce_with_logits(logits, Tensor(masks[batch]))

            def epoch_metric():
                probs = _frozen_seg_probs(head, grids)
                return _segmentation_metric(probs, masks)
    else:
        params = {f"backbone.{k}": v for k, v in model.params.items()}
        params.update({f"head.{k}": v for k, v in head.params.items()})
        if is_classifier:
            def loss_fn(batch):
                feats_t = pooled_features(Tensor(images[batch]), model)
                return cross_entropy(classify_logits(feats_t, head), labels[batch])

            def epoch_metric():
                logits = _full_classifier_logits(model, head, images)
                return _classifier_metric(logits, labels)
        else:
            def loss_fn(batch):
                logits = segment_logits(Tensor(images[batch]), model, head)
                return bce_with_logits(logits, Tensor(masks[batch]))

            def epoch_metric():
                probs = _full_seg_probs(model, head, images)
                return _segmentation_metric(probs, masks)

    sched = Schedule(opts.base_lr, 0, opts.epochs * math.ceil(n / opts.batch_size),
                     "constant")
    state = AdamState(params, opts.betas, opts.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([opts.seed, 7])))
    log_lines: list[str] = []
    history = []
    step = 0
    for epoch in range(opts.epochs):
        loss, step = train_epoch(params, state, n, loss_fn, sched,
                                 opts.batch_size, rng, log_lines, step)
        history.append({"epoch": epoch, "loss": loss, "metric": epoch_metric()})
    return HeadTrainResult(history, log_lines)


def _frozen_seg_probs(head: SegmentationHead, grids: np.ndarray,
                      chunk: int = 32) -> np.ndarray:
    out = []
    for ofs in range(0, grids.shape[0], chunk):
        logits = seg_head_logits(Tensor(grids[ofs:ofs + chunk]), head)
        out.append(sigmoid(logits).data)
    return np.concatenate(out)


def _full_classifier_logits(model: MaeModel, head: LinearProbeHead,
                            images: np.ndarray, chunk: int = 32) -> np.ndarray:
    out = []
    for ofs in range(0, images.shape[0], chunk):
        feats = pooled_features(Tensor(images[ofs:ofs + chunk]), model)
        out.append(classify_logits(feats, head).data)
    return np.concatenate(out)


def _full_seg_probs(model: MaeModel, head: SegmentationHead,
                    images: np.ndarray, chunk: int = 32) -> np.ndarray:
    out = []
    for ofs in range(0, images.shape[0], chunk):
        logits = segment_logits(Tensor(images[ofs:ofs + chunk]), model, head)
        out.append(sigmoid(logits).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# head checkpoints
# ---------------------------------------------------------------------------

def head_checkpoint_bytes(head) -> bytes:
    if isinstance(head, LinearProbeHead):
        header = {"kind": "linear_probe", "enc_dim": str(head.enc_dim),
                  "num_classes": str(head.num_classes)}
    elif isinstance(head, SegmentationHead):
        header = {"kind": "segmentation", "enc_dim": str(head.enc_dim)}
    else:
        raise ContractError(f"unknown head type {type(head).__name__}")
    buf = io.BytesIO()
    write_container(buf, header, {k: v.data for k, v in head.params.items()})
    return buf.getvalue()


def save_head_checkpoint(head, path) -> None:
    with open(path, "wb") as fh:
        fh.write(head_checkpoint_bytes(head))


def load_head_checkpoint(path):
    with open(path, "rb") as fh:
        header, tensors = read_container(fh)
    kind = header.get("kind")
    dtype = active_dtype()
    params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in tensors.items()}
    try:
        if kind == "linear_probe":
            return LinearProbeHead(int(header["enc_dim"]), int(header["num_classes"]), params)
        if kind == "segmentation":
            return SegmentationHead(int(header["enc_dim"]), params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed head checkpoint header: {exc}") from exc
    raise CheckpointError(f"checkpoint kind {kind!r} is not a task head")
