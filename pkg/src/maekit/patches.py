"""Image/patch-sequence conversion, random masking, and positional codes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, active_dtype, reshape, transpose


@dataclass(frozen=True)
class PatchConfig:
    """Square grayscale image cut into non-overlapping square patches."""

    image_size: int
    patch_size: int
    channels: int = 1

    def __post_init__(self):
        if self.channels != 1:
            raise ConfigError("only single-channel (grayscale) images are supported")
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size


@dataclass(frozen=True)
class MaskPlan:
    """Per-sample record of the visible/masked split at ratio ``ratio``.

    ``shuffle_idx`` is a permutation of [0, N); its first ``keep_count``
    entries are the visible patches. ``restore_idx`` is the inverse
    permutation; ``mask_flags[j]`` is 1 iff patch j is masked.
    """

    ratio: float
    keep_count: int
    shuffle_idx: np.ndarray
    restore_idx: np.ndarray
    mask_flags: np.ndarray

    @property
    def num_patches(self) -> int:
        return self.shuffle_idx.shape[0]

    @property
    def visible_idx(self) -> np.ndarray:
        return self.shuffle_idx[: self.keep_count]

    @property
    def masked_idx(self) -> np.ndarray:
        return self.shuffle_idx[self.keep_count:]


def make_mask_plan(num_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Draw a uniformly random visible subset by argsorting i.i.d. noise."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    if num_patches <= 0:
        raise ConfigError(f"patch count must be positive, got {num_patches}")
    keep = math.floor(num_patches * (1.0 - ratio))
    noise = rng.random(num_patches)
    shuffle_idx = np.argsort(noise, kind="stable")
    restore_idx = np.argsort(shuffle_idx, kind="stable")
    mask_flags = np.zeros(num_patches, dtype=np.int64)
    mask_flags[shuffle_idx[keep:]] = 1
    return MaskPlan(ratio, keep, shuffle_idx, restore_idx, mask_flags)


def full_plan(num_patches: int) -> MaskPlan:
    """The degenerate ratio-0 plan: every patch visible, identity order."""
    idx = np.arange(num_patches, dtype=np.int64)
    return MaskPlan(0.0, num_patches, idx, idx.copy(), np.zeros(num_patches, dtype=np.int64))


def patchify(images: Tensor, cfg: PatchConfig) -> Tensor:
    """[B, 1, H, W] -> [B, N, P*P] (or unbatched [1, H, W] -> [N, P*P]).

    Patch k covers grid cell (k // G, k % G); each patch is flattened
    row-major, so unpatchify(patchify(x)) == x bit-exactly.
    """
    squeeze = images.data.ndim == 3
    shape = images.data.shape
    expect = (cfg.channels, cfg.image_size, cfg.image_size)
    if (squeeze and shape != expect) or (not squeeze and shape[1:] != expect):
        raise ConfigError(
            f"patchify: image shape {shape} does not match configured"
            f" {cfg.image_size}x{cfg.image_size} grayscale input"
        )
    g, p = cfg.grid, cfg.patch_size
    x = reshape(images, (1,) + shape) if squeeze else images
    b = x.data.shape[0]
    x = reshape(x, (b, g, p, g, p))
    x = transpose(x, (0, 1, 3, 2, 4))
    x = reshape(x, (b, cfg.num_patches, cfg.patch_dim))
    return reshape(x, x.data.shape[1:]) if squeeze else x


def unpatchify(patches: Tensor, cfg: PatchConfig) -> Tensor:
    """Inverse of patchify."""
    squeeze = patches.data.ndim == 2
    shape = patches.data.shape
    expect = (cfg.num_patches, cfg.patch_dim)
    if (squeeze and shape != expect) or (not squeeze and shape[1:] != expect):
        raise ConfigError(
            f"unpatchify: patch tensor shape {shape} does not match"
            f" {expect} from the config"
        )
    g, p = cfg.grid, cfg.patch_size
    x = reshape(patches, (1,) + shape) if squeeze else patches
    b = x.data.shape[0]
    x = reshape(x, (b, g, g, p, p))
    x = transpose(x, (0, 1, 3, 2, 4))
    x = reshape(x, (b, cfg.channels, cfg.image_size, cfg.image_size))
    return reshape(x, x.data.shape[1:]) if squeeze else x


def positional_embedding(num_patches: int, dim: int) -> np.ndarray:
    """Fixed 2-d sine/cosine embedding over the patch grid, shape [N, dim].

    Half the channels encode the row coordinate, half the column; entries
    are bounded by 1 in magnitude and the map is deterministic.
    """
    if dim % 4 != 0:
        raise ConfigError(f"embedding dim must be divisible by 4, got {dim}")
    grid = math.isqrt(num_patches)
    if grid * grid != num_patches:
        raise ConfigError(f"patch count must be a perfect square, got {num_patches}")
    rows = np.repeat(np.arange(grid, dtype=np.float64), grid)
    cols = np.tile(np.arange(grid, dtype=np.float64), grid)
    half = dim // 2
    emb = np.concatenate([_sincos_1d(rows, half), _sincos_1d(cols, half)], axis=1)
    return emb.astype(active_dtype())


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / (10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2)))
    angles = positions[:, None] * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def normalize_patch_targets(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Standardize each patch row: (x - mean) / sqrt(population var + eps)."""
    patches = np.asarray(patches)
    mu = patches.mean(axis=-1, keepdims=True)
    centered = patches - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)
