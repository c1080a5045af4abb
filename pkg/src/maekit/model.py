"""ViT encoder on visible patches, mask-token decoder, and checkpoints."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from .errors import CheckpointError, ContractError
from .patches import (
    MaskPlan,
    PatchConfig,
    full_plan,
    normalize_patch_targets,
    patchify,
    positional_embedding,
)
from .tensor import (
    Tensor,
    active_dtype,
    add,
    concat,
    expand,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    narrow,
    reshape,
    scale,
    softmax,
    sum_,
    sub,
    transpose,
)

LAYER_NORM_EPS = 1e-6
CHECKPOINT_MAGIC = b"MAEKIT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    patch: PatchConfig
    enc_dim: int
    enc_depth: int
    enc_heads: int
    dec_dim: int
    dec_depth: int
    dec_heads: int
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.enc_dim % self.enc_heads != 0:
            raise ContractError(
                f"enc_dim {self.enc_dim} not divisible by enc_heads {self.enc_heads}"
            )
        if self.dec_dim % self.dec_heads != 0:
            raise ContractError(
                f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}"
            )


PRESETS = {
    "desk": ArchConfig(PatchConfig(64, 16), enc_dim=64, enc_depth=4, enc_heads=4,
                       dec_dim=32, dec_depth=2, dec_heads=4),
    "vit-b": ArchConfig(PatchConfig(224, 16), enc_dim=768, enc_depth=12, enc_heads=12,
                        dec_dim=512, dec_depth=8, dec_heads=16),
}


@dataclass
class MaeModel:
    config: ArchConfig
    params: dict[str, Tensor]

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _block_param_specs(prefix: str, dim: int, ratio: int) -> Iterator[tuple[str, tuple, str]]:
    hidden = dim * ratio
    yield f"{prefix}.ln1.g", (dim,), "gain"
    yield f"{prefix}.ln1.b", (dim,), "bias"
    yield f"{prefix}.attn.qkv.w", (dim, 3 * dim), "weight"
    yield f"{prefix}.attn.qkv.b", (3 * dim,), "bias"
    yield f"{prefix}.attn.proj.w", (dim, dim), "weight"
    yield f"{prefix}.attn.proj.b", (dim,), "bias"
    yield f"{prefix}.ln2.g", (dim,), "gain"
    yield f"{prefix}.ln2.b", (dim,), "bias"
    yield f"{prefix}.mlp.fc1.w", (dim, hidden), "weight"
    yield f"{prefix}.mlp.fc1.b", (hidden,), "bias"
    yield f"{prefix}.mlp.fc2.w", (hidden, dim), "weight"
    yield f"{prefix}.mlp.fc2.b", (dim,), "bias"


def param_specs(cfg: ArchConfig) -> Iterator[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every parameter, in fixed draw order."""
    pd = cfg.patch.patch_dim
    yield "patch_embed.w", (pd, cfg.enc_dim), "weight"
    yield "patch_embed.b", (cfg.enc_dim,), "bias"
    for i in range(cfg.enc_depth):
        yield from _block_param_specs(f"enc.{i}", cfg.enc_dim, cfg.mlp_ratio)
    yield "enc.norm.g", (cfg.enc_dim,), "gain"
    yield "enc.norm.b", (cfg.enc_dim,), "bias"
    yield "enc2dec.w", (cfg.enc_dim, cfg.dec_dim), "weight"
    yield "enc2dec.b", (cfg.dec_dim,), "bias"
    yield "mask_token", (cfg.dec_dim,), "normal"
    for i in range(cfg.dec_depth):
        yield from _block_param_specs(f"dec.{i}", cfg.dec_dim, cfg.mlp_ratio)
    yield "dec.norm.g", (cfg.dec_dim,), "gain"
    yield "dec.norm.b", (cfg.dec_dim,), "bias"
    yield "pred.w", (cfg.dec_dim, cfg.patch.patch_dim), "weight"
    yield "pred.b", (cfg.patch.patch_dim,), "bias"


def parameter_count(cfg: ArchConfig) -> int:
    """Closed-form parameter count; asserted against enumeration in tests."""
    def block(d: int) -> int:
        r = cfg.mlp_ratio
        return (4 + 2 * r) * d * d + (9 + r) * d

    pd = cfg.patch.patch_dim
    e, d = cfg.enc_dim, cfg.dec_dim
    total = pd * e + e                       # patch embed
    total += cfg.enc_depth * block(e) + 2 * e
    total += e * d + d + d                   # enc->dec projection + mask token
    total += cfg.dec_depth * block(d) + 2 * d
    total += d * pd + pd                     # prediction head
    return total


def trunc_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    """Normal(0, std) with resampling of draws beyond two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def init_params(cfg: ArchConfig, seed: int) -> MaeModel:
    """Fresh model: truncated-normal weights (std 0.02), zero biases,
    unit layer-norm gains, normal mask token. Deterministic in the seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dtype = active_dtype()
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(cfg):
        if kind == "weight":
            data = trunc_normal(rng, shape, 0.02)
        elif kind == "normal":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return MaeModel(cfg, params)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _affine_norm(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    normed = layer_norm(x, axis=-1, eps=LAYER_NORM_EPS)
    return add(mul(normed, params[f"{prefix}.g"]), params[f"{prefix}.b"])


def _attention(params: dict[str, Tensor], prefix: str, x: Tensor, heads: int) -> Tensor:
    b, t, e = x.data.shape
    hd = e // heads
    qkv = add(matmul(x, params[f"{prefix}.qkv.w"]), params[f"{prefix}.qkv.b"])
    parts = []
    for j in range(3):
        z = narrow(qkv, 2, j * e, e)
        z = transpose(reshape(z, (b, t, heads, hd)), (0, 2, 1, 3))
        parts.append(z)
    q, k, v = parts
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, t, e))
    return add(matmul(ctx, params[f"{prefix}.proj.w"]), params[f"{prefix}.proj.b"])


def _mlp(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = gelu(add(matmul(x, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"]))
    return add(matmul(h, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])


def _transformer_block(params: dict[str, Tensor], prefix: str, x: Tensor, heads: int) -> Tensor:
    x = add(x, _attention(params, f"{prefix}.attn", _affine_norm(params, f"{prefix}.ln1", x), heads))
    x = add(x, _mlp(params, f"{prefix}.mlp", _affine_norm(params, f"{prefix}.ln2", x)))
    return x


def _check_plans(plans: Sequence[MaskPlan], cfg: ArchConfig, batch: int) -> int:
    if len(plans) != batch:
        raise ContractError(f"got {len(plans)} mask plans for a batch of {batch}")
    n = cfg.patch.num_patches
    keeps = {p.keep_count for p in plans}
    for p in plans:
        if p.num_patches != n:
            raise ContractError(
                f"mask plan covers {p.num_patches} patches, model expects {n}"
            )
    if len(keeps) != 1:
        raise ContractError(f"mask plans disagree on keep_count: {sorted(keeps)}")
    return keeps.pop()


def encode(images: Tensor, plans: Sequence[MaskPlan], model: MaeModel) -> Tensor:
    """Embed patches, add positions, keep only visible tokens, run the
    encoder stack. Output: [B, keep_count, enc_dim]."""
    cfg = model.config
    params = model.params
    x = patchify(images, cfg.patch)
    b = x.data.shape[0]
    keep = _check_plans(plans, cfg, b)
    x = add(matmul(x, params["patch_embed.w"]), params["patch_embed.b"])
    x = add(x, Tensor(positional_embedding(cfg.patch.num_patches, cfg.enc_dim)))
    x = gather_rows(x, np.stack([p.visible_idx for p in plans]))
    for i in range(cfg.enc_depth):
        x = _transformer_block(params, f"enc.{i}", x, cfg.enc_heads)
    return _affine_norm(params, "enc.norm", x)


def _decoder_inputs(latent: Tensor, plans: Sequence[MaskPlan], model: MaeModel) -> Tensor:
    """Decoder token sequence: projected visible tokens plus mask tokens,
    unshuffled to grid order, with decoder positional codes added."""
    cfg = model.config
    params = model.params
    b, keep, _ = latent.data.shape
    plan_keep = _check_plans(plans, cfg, b)
    if plan_keep != keep:
        raise ContractError(
            f"latent has {keep} tokens but plans keep {plan_keep}"
        )
    n = cfg.patch.num_patches
    x = add(matmul(latent, params["enc2dec.w"]), params["enc2dec.b"])
    n_masked = n - keep
    if n_masked > 0:
        mask_tok = expand(reshape(params["mask_token"], (1, 1, cfg.dec_dim)),
                          (b, n_masked, cfg.dec_dim))
        x = concat([x, mask_tok], axis=1)
    x = gather_rows(x, np.stack([p.restore_idx for p in plans]))
    return add(x, Tensor(positional_embedding(n, cfg.dec_dim)))


def decode(latent: Tensor, plans: Sequence[MaskPlan], model: MaeModel) -> Tensor:
    """Reconstruct per-patch pixel predictions for all N positions."""
    cfg = model.config
    params = model.params
    x = _decoder_inputs(latent, plans, model)
    for i in range(cfg.dec_depth):
        x = _transformer_block(params, f"dec.{i}", x, cfg.dec_heads)
    x = _affine_norm(params, "dec.norm", x)
    return add(matmul(x, params["pred.w"]), params["pred.b"])


def patchify_array(images: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """Plain-numpy patchify for building loss targets."""
    b = images.shape[0]
    g, p = cfg.grid, cfg.patch_size
    return (images.reshape(b, g, p, g, p)
            .transpose(0, 1, 3, 2, 4)
            .reshape(b, cfg.num_patches, cfg.patch_dim))


def mae_loss(pred: Tensor, images: Tensor, plans: Sequence[MaskPlan],
             eps: float = 1e-6) -> Tensor:
    """Mean squared error against per-patch-normalized targets, averaged
    over pixel dims, then each sample's masked patches, then the batch.
    Visible patches contribute exactly zero."""
    b = pred.data.shape[0]
    if len(plans) != b:
        raise ContractError(f"got {len(plans)} mask plans for a batch of {b}")
    n = plans[0].num_patches
    grid = math.isqrt(n)
    h = images.data.shape[-1]
    if grid * grid != n or h % grid != 0:
        raise ContractError(
            f"plan patch count {n} does not tile a {h}x{h} image"
        )
    patch_cfg = PatchConfig(h, h // grid)
    targets = normalize_patch_targets(patchify_array(images.data, patch_cfg), eps)
    if targets.shape != pred.data.shape:
        raise ContractError(
            f"prediction shape {pred.data.shape} does not match patch targets {targets.shape}"
        )
    flags = np.stack([p.mask_flags for p in plans]).astype(pred.data.dtype)
    counts = flags.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError(
            "mae_loss is undefined when a sample has no masked patches (ratio 0)"
        )
    weights = flags / counts[:, None]
    diff = sub(pred, Tensor(targets))
    per_patch = mean(mul(diff, diff), axis=-1)
    per_sample = sum_(mul(per_patch, Tensor(weights)), axis=1)
    return mean(per_sample)


def pooled_features(images: Tensor, model: MaeModel) -> Tensor:
    """Mean-pooled encoder tokens with nothing masked: [B, enc_dim]."""
    b = images.data.shape[0] if images.data.ndim == 4 else 1
    plans = [full_plan(model.config.patch.num_patches)] * b
    tokens = encode(images, plans, model)
    return mean(tokens, axis=1)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def write_container(fh: BinaryIO, header: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    """Binary container: magic, u16 version, key-sorted textual header,
    then name-sorted tensors (name, rank, dims, little-endian f32 data)."""
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<H", CHECKPOINT_VERSION))
    blob = "".join(f"{k}={header[k]}\n" for k in sorted(header)).encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_container(fh: BinaryIO) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a MAEKIT checkpoint (magic {magic!r})")
    (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    header_text = _read_exact(fh, header_len, "header").decode("utf-8")
    header: dict[str, str] = {}
    for line in header_text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        header[key] = value
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
        name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = _read_exact(fh, 4 * n_values, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    trailing = fh.read(1)
    if trailing:
        raise CheckpointError("trailing bytes after the last tensor")
    return header, tensors


def _config_header(cfg: ArchConfig, kind: str) -> dict[str, str]:
    return {
        "kind": kind,
        "image_size": str(cfg.patch.image_size),
        "patch_size": str(cfg.patch.patch_size),
        "channels": str(cfg.patch.channels),
        "enc_dim": str(cfg.enc_dim),
        "enc_depth": str(cfg.enc_depth),
        "enc_heads": str(cfg.enc_heads),
        "dec_dim": str(cfg.dec_dim),
        "dec_depth": str(cfg.dec_depth),
        "dec_heads": str(cfg.dec_heads),
        "mlp_ratio": str(cfg.mlp_ratio),
    }


def _config_from_header(header: dict[str, str]) -> ArchConfig:
    try:
        patch = PatchConfig(int(header["image_size"]), int(header["patch_size"]),
                            int(header["channels"]))
        return ArchConfig(
            patch,
            enc_dim=int(header["enc_dim"]), enc_depth=int(header["enc_depth"]),
            enc_heads=int(header["enc_heads"]),
            dec_dim=int(header["dec_dim"]), dec_depth=int(header["dec_depth"]),
            dec_heads=int(header["dec_heads"]),
            mlp_ratio=int(header["mlp_ratio"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc


def checkpoint_bytes(model: MaeModel) -> bytes:
    buf = io.BytesIO()
    write_container(buf, _config_header(model.config, "mae"),
                    {k: v.data for k, v in model.params.items()})
    return buf.getvalue()


def save_checkpoint(model: MaeModel, path) -> None:
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> MaeModel:
    with open(path, "rb") as fh:
        header, tensors = read_container(fh)
    if header.get("kind") != "mae":
        raise CheckpointError(
            f"checkpoint kind {header.get('kind')!r} is not a backbone checkpoint"
        )
    cfg = _config_from_header(header)
    expected = {name: shape for name, shape, _ in param_specs(cfg)}
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(
            f"checkpoint tensors do not match the config (missing {missing}, extra {extra})"
        )
    dtype = active_dtype()
    params = {}
    for name, shape in expected.items():
        arr = tensors[name]
        if arr.shape != shape:
            raise CheckpointError(
                f"tensor {name} has shape {arr.shape}, expected {shape}"
            )
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return MaeModel(cfg, params)
