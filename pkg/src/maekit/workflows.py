"""End-to-end runs: pretraining, probing, segmentation, reconstruction,
gradient checking, and synthetic data generation.

Every run writes its fully resolved configuration next to its outputs so
the run can be replayed from the directory alone.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from .errors import ConfigError, ContractError, DataError
from .heads import (
    HeadTrainOptions,
    _full_classifier_logits,
    _full_seg_probs,
    binarize_mask,
    head_checkpoint_bytes,
    init_linear_head,
    init_segmentation_head,
    train_head,
)
from .metrics import (
    accuracy,
    argmax_classes,
    f_score,
    per_image_f_scores,
    segmentation_confusion,
    write_metrics_report,
)
from .model import (
    ArchConfig,
    MaeModel,
    PRESETS,
    checkpoint_bytes,
    decode,
    encode,
    init_params,
    load_checkpoint,
    mae_loss,
    patchify_array,
    save_checkpoint,
)
from .optim import AdamState, OptimConfig, schedule_for, train_epoch
from .patches import PatchConfig, full_plan, make_mask_plan
from .tensor import Tensor, precision
from . import gradchecks

TARGET_EPS = 1e-6

ARCH_OVERRIDE_KEYS = ("image_size", "patch_size", "enc_dim", "enc_depth", "enc_heads",
                      "dec_dim", "dec_depth", "dec_heads", "mlp_ratio")


def resolve_arch(preset: str, overrides: dict | None = None) -> ArchConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(ov) - set(ARCH_OVERRIDE_KEYS)
    if unknown:
        raise ConfigError(f"unknown architecture overrides: {sorted(unknown)}")
    if not ov:
        return base
    patch = PatchConfig(ov.get("image_size", base.patch.image_size),
                        ov.get("patch_size", base.patch.patch_size))
    return ArchConfig(
        patch,
        enc_dim=ov.get("enc_dim", base.enc_dim),
        enc_depth=ov.get("enc_depth", base.enc_depth),
        enc_heads=ov.get("enc_heads", base.enc_heads),
        dec_dim=ov.get("dec_dim", base.dec_dim),
        dec_depth=ov.get("dec_depth", base.dec_depth),
        dec_heads=ov.get("dec_heads", base.dec_heads),
        mlp_ratio=ov.get("mlp_ratio", base.mlp_ratio),
    )


def _write_config(path: Path, values: dict) -> None:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _arch_config_values(cfg: ArchConfig) -> dict:
    return {
        "image_size": cfg.patch.image_size, "patch_size": cfg.patch.patch_size,
        "enc_dim": cfg.enc_dim, "enc_depth": cfg.enc_depth, "enc_heads": cfg.enc_heads,
        "dec_dim": cfg.dec_dim, "dec_depth": cfg.dec_depth, "dec_heads": cfg.dec_heads,
        "mlp_ratio": cfg.mlp_ratio,
    }


def _sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _handle_rejections(rejections, out_dir: Path) -> str | None:
    if not rejections:
        return None
    path = out_dir / "rejections.tsv"
    datamod.write_rejection_report(rejections, path)
    return str(path)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainOutcome:
    out_dir: str
    latest_ckpt: str
    best_ckpt: str
    run_log: str
    config_file: str
    rejection_report: str | None
    n_images: int
    n_rejected: int
    epochs: int
    steps: int
    initial_loss: float | None
    final_loss: float | None
    epoch_losses: list[float] = field(default_factory=list)


def run_pretrain(*, data_dir: str, out_dir: str, preset: str = "desk",
                 arch_overrides: dict | None = None, mask_ratio: float = 0.75,
                 epochs: int = 1, batch_size: int = 8, base_lr: float = 1e-3,
                 weight_decay: float = 0.05, betas: tuple = (0.9, 0.95),
                 warmup_frac: float = 0.05, seed: int = 0) -> PretrainOutcome:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(
            f"pretraining needs a mask ratio in (0, 1), got {mask_ratio}"
        )
    if epochs < 0:
        raise ConfigError(f"epochs must be non-negative, got {epochs}")

    manifest, rejections = datamod.scan_and_validate(data_dir, "pretrain")
    rejects = _handle_rejections(rejections, out)
    if not manifest.entries:
        hint = f"; see rejection report {rejects}" if rejects else ""
        raise DataError(f"no valid training images under {data_dir}{hint}")

    cfg = resolve_arch(preset, arch_overrides)
    images = datamod.load_images(manifest, cfg.patch.image_size)
    model = init_params(cfg, seed)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / batch_size)
    ocfg = OptimConfig(base_lr=base_lr, batch_size=batch_size, betas=tuple(betas),
                       weight_decay=weight_decay, epochs=epochs,
                       warmup_epochs=warmup_frac * epochs, schedule="cosine", seed=seed)
    sched = schedule_for(ocfg, steps_per_epoch)
    state = AdamState(model.params, ocfg.betas, ocfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    n_patches = cfg.patch.num_patches

    def loss_fn(batch):
        imgs = Tensor(images[batch])
        plans = [make_mask_plan(n_patches, mask_ratio, rng) for _ in range(len(batch))]
        pred = decode(encode(imgs, plans, model), plans, model)
        return mae_loss(pred, imgs, plans, TARGET_EPS)

    run_log = out / "run.log"
    run_log.write_text("", encoding="utf-8")
    epoch_losses: list[float] = []
    initial = final = None
    best = math.inf
    step = 0
    for _ in range(epochs):
        lines: list[str] = []
        mean_loss, step = train_epoch(model.params, state, n, loss_fn, sched,
                                      batch_size, rng, lines, step)
        with open(run_log, "a", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        if initial is None:
            initial = float(lines[0].split("\t")[2])
        final = float(lines[-1].split("\t")[2])
        epoch_losses.append(mean_loss)
        if mean_loss < best:
            best = mean_loss
            save_checkpoint(model, out / "best.ckpt")
    save_checkpoint(model, out / "latest.ckpt")
    if not (out / "best.ckpt").exists():
        save_checkpoint(model, out / "best.ckpt")

    config_file = out / "config.txt"
    _write_config(config_file, {
        "command": "pretrain", "data_dir": data_dir, "out_dir": str(out),
        "preset": preset, "mask_ratio": mask_ratio, "epochs": epochs,
        "batch_size": batch_size, "base_lr": base_lr, "weight_decay": weight_decay,
        "betas": f"{ocfg.betas[0]},{ocfg.betas[1]}", "warmup_frac": warmup_frac,
        "schedule": "cosine", "seed": seed, **_arch_config_values(cfg),
    })
    return PretrainOutcome(
        out_dir=str(out), latest_ckpt=str(out / "latest.ckpt"),
        best_ckpt=str(out / "best.ckpt"), run_log=str(run_log),
        config_file=str(config_file), rejection_report=rejects,
        n_images=n, n_rejected=len(rejections), epochs=epochs, steps=step,
        initial_loss=initial, final_loss=final, epoch_losses=epoch_losses,
    )


# ---------------------------------------------------------------------------
# downstream heads
# ---------------------------------------------------------------------------

@dataclass
class HeadOutcome:
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
    finetuned_ckpt: str | None = None
    history: list[dict] = field(default_factory=list)


def _assert_freeze_contract(mode: str, unchanged: bool) -> None:
    if mode == "linear_probe" and not unchanged:
        raise ContractError("linear probing must leave the backbone bit-identical")


def _write_history(path: Path, history: list[dict]) -> None:
    lines = [f"{h['epoch']}\t{h['loss']:.8e}\t{h['metric']:.6f}" for h in history]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _load_task_data(data_dir: str, task: str, out: Path, image_size: int,
                    split_ratios, seed: int, test_data_dir: str | None):
    """Train/test arrays for a head run: either a seeded three-way split of
    one directory, or an explicit held-out test directory."""
    manifest, rejections = datamod.scan_and_validate(data_dir, task)
    rejects = _handle_rejections(rejections, out)
    if not manifest.entries:
        hint = f"; see rejection report {rejects}" if rejects else ""
        raise DataError(f"no valid {task} images under {data_dir}{hint}")
    if test_data_dir is not None:
        train_m = manifest
        test_m, _ = datamod.scan_and_validate(test_data_dir, task)
        if not test_m.entries:
            raise DataError(f"no valid {task} images under {test_data_dir}")
    else:
        spec = datamod.SplitSpec(tuple(split_ratios), seed)
        train_m, _, test_m = datamod.split(manifest, spec)
        if not train_m.entries or not test_m.entries:
            raise ConfigError(
                f"split of {len(manifest)} entries left an empty train or test set"
            )
    return train_m, test_m, rejects


def run_probe(*, ckpt: str, data_dir: str, num_classes: int, out_dir: str,
              mode: str = "linear_probe", epochs: int = 300, batch_size: int = 8,
              base_lr: float = 1e-3, seed: int = 0,
              split_ratios=(0.7, 0.15, 0.15), test_data_dir: str | None = None
              ) -> HeadOutcome:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(ckpt)
    cfg = model.config
    train_m, test_m, _ = _load_task_data(data_dir, "classify", out,
                                         cfg.patch.image_size, split_ratios, seed,
                                         test_data_dir)
    train_images = datamod.load_images(train_m, cfg.patch.image_size)
    train_labels = datamod.load_labels(train_m)
    test_images = datamod.load_images(test_m, cfg.patch.image_size)
    test_labels = datamod.load_labels(test_m)
    observed = len(np.unique(np.concatenate([train_labels, test_labels])))
    if observed != num_classes:
        raise ConfigError(
            f"dataset has {observed} classes but the run asked for {num_classes}"
        )

    checksum_before = _sha256(checkpoint_bytes(model))
    head = init_linear_head(cfg.enc_dim, num_classes, seed)
    opts = HeadTrainOptions(epochs=epochs, batch_size=batch_size, base_lr=base_lr,
                            seed=seed)
    result = train_head(model, head, train_images, train_labels, mode, opts)
    checksum_after = _sha256(checkpoint_bytes(model))
    unchanged = checksum_before == checksum_after
    _assert_freeze_contract(mode, unchanged)

    test_logits = _full_classifier_logits(model, head, test_images)
    test_accuracy = accuracy(argmax_classes(test_logits), test_labels)

    head_path = out / "head.ckpt"
    with open(head_path, "wb") as fh:
        fh.write(head_checkpoint_bytes(head))
    finetuned = None
    if mode == "full_finetune":
        finetuned = out / "backbone_finetuned.ckpt"
        save_checkpoint(model, finetuned)

    metrics_file = out / "metrics.tsv"
    write_metrics_report(metrics_file, {"accuracy": test_accuracy})
    history_file = out / "history.tsv"
    _write_history(history_file, result.history)
    train_log = out / "train.log"
    train_log.write_text("\n".join(result.log_lines) + "\n", encoding="utf-8")
    config_file = out / "config.txt"
    _write_config(config_file, {
        "command": "probe", "ckpt": ckpt, "data_dir": data_dir,
        "test_data_dir": test_data_dir or "", "out_dir": str(out),
        "num_classes": num_classes, "mode": mode, "epochs": epochs,
        "batch_size": batch_size, "base_lr": base_lr, "seed": seed,
        "split_ratios": ",".join(str(r) for r in split_ratios),
    })
    return HeadOutcome(
        out_dir=str(out), head_ckpt=str(head_path), metrics_file=str(metrics_file),
        history_file=str(history_file), train_log=str(train_log),
        config_file=str(config_file), metric_name="accuracy",
        metric_value=test_accuracy, n_train=len(train_labels),
        n_test=len(test_labels), mode=mode,
        backbone_checksum_before=checksum_before,
        backbone_checksum_after=checksum_after, backbone_unchanged=unchanged,
        finetuned_ckpt=str(finetuned) if finetuned else None,
        history=result.history,
    )


def run_segment(*, ckpt: str, data_dir: str, out_dir: str,
                mode: str = "linear_probe", epochs: int = 300, batch_size: int = 8,
                base_lr: float = 1e-3, seed: int = 0,
                split_ratios=(0.7, 0.15, 0.15), test_data_dir: str | None = None
                ) -> HeadOutcome:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(ckpt)
    cfg = model.config
    train_m, test_m, _ = _load_task_data(data_dir, "segment", out,
                                         cfg.patch.image_size, split_ratios, seed,
                                         test_data_dir)
    size = cfg.patch.image_size
    train_images = datamod.load_images(train_m, size)
    train_masks = datamod.load_masks(train_m, size)
    test_images = datamod.load_images(test_m, size)
    test_masks = datamod.load_masks(test_m, size)

    checksum_before = _sha256(checkpoint_bytes(model))
    head = init_segmentation_head(cfg.enc_dim, seed)
    opts = HeadTrainOptions(epochs=epochs, batch_size=batch_size, base_lr=base_lr,
                            seed=seed)
    result = train_head(model, head, train_images, train_masks, mode, opts)
    checksum_after = _sha256(checkpoint_bytes(model))
    unchanged = checksum_before == checksum_after
    _assert_freeze_contract(mode, unchanged)

    test_probs = _full_seg_probs(model, head, test_images)
    if test_probs.shape != test_images.shape:
        raise ConfigError(
            f"segmentation output {test_probs.shape} does not match input"
            f" resolution {test_images.shape}"
        )
    pred_masks = binarize_mask(test_probs)
    micro = f_score(segmentation_confusion(pred_masks, test_masks.astype(np.uint8)))
    per_image = per_image_f_scores(pred_masks, test_masks.astype(np.uint8))

    head_path = out / "head.ckpt"
    with open(head_path, "wb") as fh:
        fh.write(head_checkpoint_bytes(head))
    finetuned = None
    if mode == "full_finetune":
        finetuned = out / "backbone_finetuned.ckpt"
        save_checkpoint(model, finetuned)

    metrics_file = out / "metrics.tsv"
    write_metrics_report(metrics_file, {
        "f_score": micro,
        "f_score_per_image_mean": float(np.mean(per_image)),
    })
    history_file = out / "history.tsv"
    _write_history(history_file, result.history)
    train_log = out / "train.log"
    train_log.write_text("\n".join(result.log_lines) + "\n", encoding="utf-8")
    config_file = out / "config.txt"
    _write_config(config_file, {
        "command": "segment", "ckpt": ckpt, "data_dir": data_dir,
        "test_data_dir": test_data_dir or "", "out_dir": str(out), "mode": mode,
        "epochs": epochs, "batch_size": batch_size, "base_lr": base_lr,
        "seed": seed, "split_ratios": ",".join(str(r) for r in split_ratios),
    })
    return HeadOutcome(
        out_dir=str(out), head_ckpt=str(head_path), metrics_file=str(metrics_file),
        history_file=str(history_file), train_log=str(train_log),
        config_file=str(config_file), metric_name="f_score", metric_value=micro,
        n_train=train_images.shape[0], n_test=test_images.shape[0], mode=mode,
        backbone_checksum_before=checksum_before,
        backbone_checksum_after=checksum_after, backbone_unchanged=unchanged,
        finetuned_ckpt=str(finetuned) if finetuned else None,
        history=result.history,
    )


# ---------------------------------------------------------------------------
# reconstruction demo
# ---------------------------------------------------------------------------

@dataclass
class ReconstructOutcome:
    out_dir: str
    original: str
    masked: str
    reconstruction: str
    config_file: str
    n_patches: int
    n_masked: int
    keep_count: int


def _paint_patch(img: np.ndarray, grid: int, patch: int, index: int,
                 values: np.ndarray) -> None:
    gy, gx = divmod(index, grid)
    img[gy * patch:(gy + 1) * patch, gx * patch:(gx + 1) * patch] = values


def run_reconstruct(*, ckpt: str, image_path: str, out_dir: str,
                    mask_ratio: float = 0.75, seed: int = 0) -> ReconstructOutcome:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {mask_ratio}")
    model = load_checkpoint(ckpt)
    cfg = model.config
    pc = cfg.patch
    img = datamod.resize_bilinear(datamod.load_image(image_path), pc.image_size)
    n = pc.num_patches
    if mask_ratio == 0.0:
        plan = full_plan(n)
    else:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
        plan = make_mask_plan(n, mask_ratio, rng)

    imgs = Tensor(img[None].astype(np.float32))
    pred = decode(encode(imgs, [plan], model), [plan], model).data[0]

    orig_patches = patchify_array(img[None].astype(np.float64), pc)[0]
    mu = orig_patches.mean(axis=-1, keepdims=True)
    var = orig_patches.var(axis=-1, keepdims=True)
    denorm = pred.astype(np.float64) * np.sqrt(var + TARGET_EPS) + mu

    orig_u8 = np.rint(np.clip(img[0], 0.0, 1.0) * 255.0).astype(np.uint8)
    masked_u8 = orig_u8.copy()
    recon_u8 = orig_u8.copy()
    for index in plan.masked_idx:
        block = np.rint(np.clip(denorm[index], 0.0, 1.0) * 255.0).astype(np.uint8)
        _paint_patch(masked_u8, pc.grid, pc.patch_size, int(index),
                     np.full((pc.patch_size, pc.patch_size), 128, dtype=np.uint8))
        _paint_patch(recon_u8, pc.grid, pc.patch_size, int(index),
                     block.reshape(pc.patch_size, pc.patch_size))

    paths = {name: out / f"{name}.pgm" for name in ("original", "masked", "reconstruction")}
    datamod.write_image_bytes(paths["original"], orig_u8)
    datamod.write_image_bytes(paths["masked"], masked_u8)
    datamod.write_image_bytes(paths["reconstruction"], recon_u8)
    config_file = out / "config.txt"
    _write_config(config_file, {
        "command": "reconstruct", "ckpt": ckpt, "image": image_path,
        "out_dir": str(out), "mask_ratio": mask_ratio, "seed": seed,
    })
    return ReconstructOutcome(
        out_dir=str(out), original=str(paths["original"]),
        masked=str(paths["masked"]), reconstruction=str(paths["reconstruction"]),
        config_file=str(config_file), n_patches=n,
        n_masked=int(plan.mask_flags.sum()), keep_count=plan.keep_count,
    )


# ---------------------------------------------------------------------------
# gradient-check suite and synthetic data
# ---------------------------------------------------------------------------

@dataclass
class GradcheckOutcome:
    passed: bool
    elapsed_seconds: float
    checks: list[dict] = field(default_factory=list)


def run_gradcheck(include_corrupted: bool = False) -> GradcheckOutcome:
    """Run the double-precision gradient-check suite over every op plus the
    full MAE loss on a micro configuration."""
    started = time.monotonic()
    results = []
    with precision("double"):
        for name, fn, tol in gradchecks.suite(include_corrupted):
            err = fn()
            results.append({"op": name, "max_rel_err": err, "tol": tol,
                            "passed": bool(err < tol)})
    return GradcheckOutcome(
        passed=all(r["passed"] for r in results),
        elapsed_seconds=time.monotonic() - started,
        checks=results,
    )


@dataclass
class SyntheticOutcome:
    out_dir: str
    manifest: str
    kind: str
    n: int
    size: int


def run_gen_synthetic(*, kind: str, n: int, size: int = 64, seed: int = 0,
                      out_dir: str) -> SyntheticOutcome:
    manifest = datamod.gen_synthetic(kind, n, size, seed, out_dir)
    return SyntheticOutcome(out_dir=str(manifest.root),
                            manifest=str(Path(out_dir) / "manifest.tsv"),
                            kind=kind, n=n, size=size)
