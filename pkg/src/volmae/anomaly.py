"""Sliding-window anomaly inference.

A trained model reconstructs each MRI-patch several times under fresh random
masks. Squared reconstruction error, min-filtered per sequence, is
accumulated at masked voxels only (the decoder only meaningfully predicts
masked tokens). Per-voxel scores are the mean over all such predictions;
the per-sequence maps are then averaged and min-filtered once more into the
final anomaly map.

Patch positions are processed independently; `MAEMI_THREADS` (default 1)
caps the worker pool. Partial sums are reduced in canonical grid order, so
results do not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import ndnum
from .errors import ConfigError, DimensionError, ValidationError
from .ndnum import Tensor
from .patchgrid import MaskPlan, PatchSpec, sample_mask, tokenize, detokenize
from .seeding import derive_seed, rng_from
from .volio import Volume, crop, min_filter

_FILTER_KERNEL = (3, 3, 2)


@dataclass(frozen=True)
class InferenceConfig:
    stride: tuple[int, int, int] = (64, 42, 2)
    repetitions: int = 6
    mask_ratio: float = 0.9
    seed: int = 0
    include_visible: bool = False  # also score reconstruction of visible tokens

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if any(s < 1 for s in self.stride):
            raise ConfigError(f"stride extents must be >= 1, got {self.stride}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")


@dataclass(frozen=True)
class AnomalyResult:
    error_maps: Volume  # (C, Z, Y, X) per-sequence mean masked error
    fused: Volume  # (1, Z, Y, X) final anomaly map
    coverage: np.ndarray  # (Z, Y, X) masked-prediction counts
    uncovered_voxels: int
    n_forwards: int


def worker_count() -> int:
    """Worker cap from MAEMI_THREADS (default 1)."""
    raw = os.environ.get("MAEMI_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MAEMI_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MAEMI_THREADS must be >= 1, got {n}")
    return n


class IdentityReconstructor:
    """Drop-in model stub that reconstructs every token perfectly.

    Feeding it through the full inference stack must yield an exactly zero
    anomaly map — the pipeline null test.
    """

    def __init__(self, config):
        self.config = config

    def forward(self, tokens, plan: MaskPlan) -> Tensor:
        data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
        n = self.config.spec.token_count
        if data.shape != (n, self.config.spec.token_dim):
            raise DimensionError(
                f"token matrix {data.shape} does not match spec "
                f"({n}, {self.config.spec.token_dim})"
            )
        if plan.n_tokens != n:
            raise DimensionError(f"mask plan covers {plan.n_tokens} tokens, model has {n}")
        return Tensor(data.copy())


def mask_footprint(plan: MaskPlan, spec: PatchSpec) -> np.ndarray:
    """(Z, Y, X) boolean map of voxels inside masked ViT-patches."""
    gx, gy, gz = spec.grid_shape
    px, py, pz = spec.vit_patch_dims
    grid = np.zeros(gx * gy * gz, dtype=bool)
    grid[plan.masked_indices] = True
    grid = grid.reshape(gz, gy, gx)  # token index: x fastest, z slowest
    return grid.repeat(pz, axis=0).repeat(py, axis=1).repeat(px, axis=2)


def squared_error_map(patch: Volume, recon: Volume) -> Volume:
    """Per-sequence min-filtered squared reconstruction error."""
    if patch.data.shape != recon.data.shape:
        raise DimensionError(
            f"patch {patch.data.shape} vs reconstruction {recon.data.shape}"
        )
    err = Volume((patch.data - recon.data) ** 2, patch.spacing)
    return min_filter(err, _FILTER_KERNEL)


def patch_error_maps(
    model, patch: Volume, cfg: InferenceConfig, base_seed: int | None = None
) -> list[tuple[Volume, np.ndarray]]:
    """One (error patch, mask footprint) pair per masking repetition.

    Each repetition draws a fresh MaskPlan from a seed derived off
    `base_seed` (default: cfg.seed), reconstructs, and min-filters the
    squared error per sequence.
    """
    spec = model.config.spec
    px, py, pz = spec.mri_patch_dims
    if patch.data.shape != (spec.channels, pz, py, px):
        raise DimensionError(
            f"patch shape {patch.data.shape} does not match model spec "
            f"({spec.channels}, {pz}, {py}, {px})"
        )
    root = cfg.seed if base_seed is None else base_seed
    grid = tokenize(patch, spec)
    out = []
    for rep in range(cfg.repetitions):
        plan = sample_mask(spec.token_count, cfg.mask_ratio, rng_from(root, "rep", rep))
        with ndnum.no_grad():
            recon_tokens = model.forward(grid.tokens, plan)
        recon = detokenize(recon_tokens.data, spec, patch.spacing)
        err = squared_error_map(patch, recon)
        if cfg.include_visible:
            footprint = np.ones(patch.data.shape[1:], dtype=bool)
        else:
            footprint = mask_footprint(plan, spec)
        out.append((err, footprint))
    return out


def stride_origins(dim: int, patch: int, stride: int) -> list[int]:
    """Origins 0, stride, 2·stride, ... plus a final clamped origin so the
    last patch ends exactly at the volume border."""
    if patch > dim:
        raise DimensionError(f"patch extent {patch} exceeds volume extent {dim}")
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


def sliding_window_infer(
    model, volume: Volume, cfg: InferenceConfig, origin_order=None
) -> AnomalyResult:
    """Aggregate masked reconstruction error over the stride grid.

    `origin_order` (a permutation of grid indices) only reorders processing
    and accumulation; it exists to demonstrate order-independence.
    """
    spec = model.config.spec
    mx, my, mz = spec.mri_patch_dims
    x, y, z = volume.dims
    if volume.n_channels != spec.channels:
        raise DimensionError(
            f"volume has {volume.n_channels} channels, model wants {spec.channels}"
        )
    sx, sy, sz = cfg.stride
    if sx > mx or sy > my or sz > mz:
        raise ConfigError(f"stride {cfg.stride} exceeds patch dims {spec.mri_patch_dims}")
    origins = [
        (ox, oy, oz)
        for oz in stride_origins(z, mz, sz)
        for oy in stride_origins(y, my, sy)
        for ox in stride_origins(x, mx, sx)
    ]
    process_order = list(range(len(origins)))
    if origin_order is not None:
        if sorted(origin_order) != process_order:
            raise ConfigError("origin_order must be a permutation of the origin indices")
        process_order = list(origin_order)

    def one(origin):
        ox, oy, oz = origin
        patch = crop(volume, origin, spec.mri_patch_dims)
        err_sum = np.zeros_like(patch.data)
        cov = np.zeros(patch.data.shape[1:], dtype=np.int64)
        for err, footprint in patch_error_maps(
            model, patch, cfg, base_seed=derive_seed(cfg.seed, "origin", ox, oy, oz)
        ):
            err_sum += err.data * footprint
            cov += footprint
        return err_sum, cov

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            processed = list(pool.map(one, [origins[i] for i in process_order]))
    else:
        processed = [one(origins[i]) for i in process_order]
    # reduce in canonical origin order no matter how the work was scheduled
    parts: list = [None] * len(origins)
    for slot, part in zip(process_order, processed):
        parts[slot] = part

    err_total = np.zeros_like(volume.data)
    coverage = np.zeros(volume.data.shape[1:], dtype=np.int64)
    for (ox, oy, oz), (err_sum, cov) in zip(origins, parts):
        sl = (slice(oz, oz + mz), slice(oy, oy + my), slice(ox, ox + mx))
        err_total[(slice(None),) + sl] += err_sum
        coverage[sl] += cov

    covered = coverage > 0
    per_voxel = np.where(covered, err_total, 0.0)
    np.divide(per_voxel, coverage, out=per_voxel, where=covered)
    error_maps = Volume(per_voxel, volume.spacing)
    fused = min_filter(
        Volume(per_voxel.mean(axis=0, keepdims=True), volume.spacing), _FILTER_KERNEL
    )
    return AnomalyResult(
        error_maps=error_maps,
        fused=fused,
        coverage=coverage,
        uncovered_voxels=int(np.count_nonzero(~covered)),
        n_forwards=len(origins) * cfg.repetitions,
    )


def fuse_maps(e_nfs: Volume, e_fs: Volume) -> Volume:
    """Voxelwise mean of the two per-sequence maps, then the min filter."""
    if e_nfs.data.shape != e_fs.data.shape:
        raise DimensionError(f"map dims differ: {e_nfs.data.shape} vs {e_fs.data.shape}")
    mean = Volume(0.5 * (e_nfs.data + e_fs.data), e_nfs.spacing)
    return min_filter(mean, _FILTER_KERNEL)


def apply_tissue_mask(anomaly_map: Volume, mask: Volume) -> Volume:
    """Zero the map outside the binary tissue mask (voxelwise product)."""
    if anomaly_map.data.shape[1:] != mask.data.shape[1:]:
        raise DimensionError(
            f"map dims {anomaly_map.data.shape} vs mask dims {mask.data.shape}"
        )
    mdata = mask.data
    if not np.all((mdata == 0.0) | (mdata == 1.0)):
        raise ValidationError("tissue mask must be binary (0/1)")
    return Volume(anomaly_map.data * mdata, anomaly_map.spacing)
