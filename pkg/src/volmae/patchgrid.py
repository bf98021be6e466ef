"""MRI-patch geometry: tokenization, 3D positional embeddings, masking.

An MRI-patch (a crop of the full volume) is divided into a raster grid of
ViT-patches ("tokens"). Token order is x-fastest, matching volume memory
order. Axis convention everywhere: x = lateral (sagittal flips reverse x),
y = posterior (coronal flips reverse y), z = superior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .seeding import as_rng
from .volio import Volume, crop


@dataclass(frozen=True)
class PatchSpec:
    """Geometry of an MRI-patch and its ViT-patch decomposition."""

    mri_patch_dims: tuple[int, int, int] = (240, 168, 8)  # (X, Y, Z)
    vit_patch_dims: tuple[int, int, int] = (8, 8, 2)  # (p_x, p_y, p_z)
    channels: int = 2

    def __post_init__(self):
        for m, p in zip(self.mri_patch_dims, self.vit_patch_dims):
            if p < 1 or m < 1 or m % p != 0:
                raise ConfigError(
                    f"mri patch {self.mri_patch_dims} not divisible by "
                    f"vit patch {self.vit_patch_dims}"
                )
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        """Tokens per axis, (g_x, g_y, g_z)."""
        return tuple(m // p for m, p in zip(self.mri_patch_dims, self.vit_patch_dims))

    @property
    def token_count(self) -> int:
        gx, gy, gz = self.grid_shape
        return gx * gy * gz

    @property
    def token_dim(self) -> int:
        px, py, pz = self.vit_patch_dims
        return self.channels * px * py * pz


@dataclass(frozen=True)
class TokenGrid:
    """Tokenized MRI-patch: one row per ViT-patch, raster order x-fastest."""

    tokens: np.ndarray  # (token_count, token_dim)
    grid_shape: tuple[int, int, int]
    pos_embed: np.ndarray | None = None  # (token_count, d) when requested


def tokenize(patch: Volume, spec: PatchSpec, embed_dim: int | None = None) -> TokenGrid:
    """Split a patch into flattened C×p_z×p_y×p_x token rows.

    Token t corresponds to grid coordinate (i_x, i_y, i_z) with
    t = (i_z · g_y + i_y) · g_x + i_x.
    """
    px, py, pz = spec.vit_patch_dims
    gx, gy, gz = spec.grid_shape
    expected = (spec.channels, gz * pz, gy * py, gx * px)
    if patch.data.shape != expected:
        raise DimensionError(
            f"patch shape {patch.data.shape} does not match spec "
            f"(C, Z, Y, X) = {expected}"
        )
    blocks = patch.data.reshape(spec.channels, gz, pz, gy, py, gx, px)
    tokens = blocks.transpose(1, 3, 5, 0, 2, 4, 6).reshape(spec.token_count, spec.token_dim)
    pos = sincos_pos_embed_3d(spec.grid_shape, embed_dim) if embed_dim else None
    return TokenGrid(np.ascontiguousarray(tokens), spec.grid_shape, pos)


def detokenize(tokens: np.ndarray, spec: PatchSpec, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Inverse of tokenize; bit-exact round trip."""
    px, py, pz = spec.vit_patch_dims
    gx, gy, gz = spec.grid_shape
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (spec.token_count, spec.token_dim):
        raise DimensionError(
            f"token matrix {tokens.shape} does not match spec "
            f"({spec.token_count}, {spec.token_dim})"
        )
    blocks = tokens.reshape(gz, gy, gx, spec.channels, pz, py, px)
    data = blocks.transpose(3, 0, 4, 1, 5, 2, 6).reshape(
        spec.channels, gz * pz, gy * py, gx * px
    )
    return Volume(data.copy(), spacing)


def sincos_pos_embed_3d(grid_shape: tuple[int, int, int], d: int) -> np.ndarray:
    """Fixed sin-cos positional embedding over a 3D token grid.

    d splits into three equal groups, ordered (x, y, z); each group is the
    standard 1D embedding of that grid coordinate with d/6 frequencies.
    """
    if d % 6 != 0 or d < 6:
        raise ConfigError(f"embed dim must be a positive multiple of 6, got {d}")
    gx, gy, gz = grid_shape
    zz, yy, xx = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    group = d // 3
    half = group // 2
    omega = 1.0 / 10000.0 ** (np.arange(half, dtype=np.float64) / half)

    def embed_1d(coord: np.ndarray) -> np.ndarray:
        angles = coord.reshape(-1, 1).astype(np.float64) * omega
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    return np.concatenate([embed_1d(xx), embed_1d(yy), embed_1d(zz)], axis=1)


@dataclass(frozen=True)
class MaskPlan:
    """A seeded partition of token indices into kept and masked sets."""

    seed: int
    ratio: float
    kept_indices: np.ndarray  # sorted
    masked_indices: np.ndarray  # sorted
    permutation: np.ndarray = field(repr=False, default=None)

    @property
    def n_tokens(self) -> int:
        return self.kept_indices.size + self.masked_indices.size


def kept_count(token_count: int, ratio: float) -> int:
    return max(1, round(token_count * (1.0 - ratio)))


def sample_mask(token_count: int, ratio: float, seed) -> MaskPlan:
    """Uniform random token subset via seeded shuffle.

    The kept-token count is max(1, round(N·(1−ρ))), so the encoder input is
    never empty. ρ=0 keeps every token (nothing masked).
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    if token_count < 1:
        raise DimensionError(f"token_count must be >= 1, got {token_count}")
    rng = as_rng(seed)
    perm = rng.permutation(token_count)
    k = kept_count(token_count, ratio)
    return MaskPlan(
        seed=seed if isinstance(seed, (int, np.integer)) else -1,
        ratio=float(ratio),
        kept_indices=np.sort(perm[:k]),
        masked_indices=np.sort(perm[k:]),
        permutation=perm,
    )


def random_crop(volume: Volume, spec: PatchSpec, seed) -> tuple[Volume, tuple[int, int, int]]:
    """Crop an MRI-patch at a uniformly random valid origin (x, y, z)."""
    px, py, pz = spec.mri_patch_dims
    x, y, z = volume.dims
    if volume.n_channels != spec.channels:
        raise DimensionError(
            f"volume has {volume.n_channels} channels, spec wants {spec.channels}"
        )
    if px > x or py > y or pz > z:
        raise DimensionError(f"volume dims {volume.dims} smaller than patch {spec.mri_patch_dims}")
    rng = as_rng(seed)
    origin = (
        int(rng.integers(0, x - px + 1)),
        int(rng.integers(0, y - py + 1)),
        int(rng.integers(0, z - pz + 1)),
    )
    return crop(volume, origin, spec.mri_patch_dims), origin


def flip_augment(patch: Volume, flip_coronal: bool, flip_sagittal: bool) -> Volume:
    """Reverse the y axis (coronal flip) and/or x axis (sagittal flip)."""
    data = patch.data
    if flip_coronal:
        data = data[:, :, ::-1, :]
    if flip_sagittal:
        data = data[:, :, :, ::-1]
    if data is patch.data:
        return patch
    return Volume(np.ascontiguousarray(data), patch.spacing)
