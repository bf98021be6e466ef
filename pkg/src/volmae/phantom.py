"""Seeded synthetic two-sequence volumetric cases with optional lesions.

Each case is a pair of correlated band-limited random fields (an NFS-like
and an FS-like channel) inside an ellipsoidal tissue region, normalized to
mean 0.5 / std 0.25. Lesions are rounded superellipsoid blobs, hyperintense
in the FS channel and hypointense in the NFS channel, sized so that their
bounding boxes hit a target fraction of the tissue-mask volume. A DCE-style
series (pre-contrast field plus genuine enhancement inside lesions plus
acquisition noise) is generated alongside, decoupled from the anomaly
channels so the subtraction baseline is a fair independent detector.

Everything is a pure function of the config seed: regenerating a dataset
yields byte-identical files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .dcebaseline import DceSeries
from .errors import ConfigError, DataError, GenerationError
from .seeding import derive_seed, rng_from
from .volio import BoundingBox, Volume, normalize, write_mvol, write_sidecar

SEQUENCES = ("NFS", "FS")


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (96, 84, 8)  # (X, Y, Z)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    # background texture: each field is a two-scale band-limited mix — a
    # coarse component plus a fine one whose correlation length sits below
    # the ViT token size, so context interpolation cannot reach it
    texture_sigma: tuple[float, float, float] = (5.0, 5.0, 1.2)
    texture_fine_sigma: tuple[float, float, float] = (1.1, 1.1, 0.55)
    texture_fine_weight: float = 0.8  # fine/coarse amplitude ratio
    shared_weight: float = 0.8  # field common to both sequences
    own_weight: float = 0.55  # per-sequence field
    noise_weight: float = 0.06  # voxel white noise
    tissue_fractions: tuple[float, float, float] = (0.42, 0.42, 0.46)
    # lesions
    lesion_count: int = 1
    lesion_radius: tuple[float, float] = (3.0, 10.0)  # admissible x/y radius range
    lesion_rz_factor: float = 0.32  # z radius = rz_factor * xy radius, clipped
    lesion_edge_power: float = 6.0  # 2 -> ellipsoid, higher -> rounded box
    fs_offset: float = 0.55  # added to the FS channel inside the lesion
    nfs_offset: float = 0.45  # subtracted from the NFS channel
    enhancement: float = 0.4  # DCE uptake inside the lesion
    dce_noise: float = 0.03
    n_posts: int = 3
    prevalence: float = 0.046  # target box volume / tissue-mask volume
    seed: int = 0

    def __post_init__(self):
        if not 0.001 <= self.prevalence <= 0.5:
            raise ConfigError(f"prevalence must lie in [0.001, 0.5], got {self.prevalence}")
        if any(d < 4 for d in self.dims):
            raise ConfigError(f"dims too small: {self.dims}")
        if self.texture_fine_weight < 0:
            raise ConfigError("texture_fine_weight must be >= 0")
        if self.lesion_count < 1:
            raise ConfigError("lesion_count must be >= 1")
        if not 0 < self.lesion_radius[0] <= self.lesion_radius[1]:
            raise ConfigError(f"bad lesion radius range {self.lesion_radius}")
        if self.n_posts < 1:
            raise ConfigError("n_posts must be >= 1")

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "texture_sigma": list(self.texture_sigma),
            "texture_fine_sigma": list(self.texture_fine_sigma),
            "texture_fine_weight": self.texture_fine_weight,
            "shared_weight": self.shared_weight,
            "own_weight": self.own_weight,
            "noise_weight": self.noise_weight,
            "tissue_fractions": list(self.tissue_fractions),
            "lesion_count": self.lesion_count,
            "lesion_radius": list(self.lesion_radius),
            "lesion_rz_factor": self.lesion_rz_factor,
            "lesion_edge_power": self.lesion_edge_power,
            "fs_offset": self.fs_offset,
            "nfs_offset": self.nfs_offset,
            "enhancement": self.enhancement,
            "dce_noise": self.dce_noise,
            "n_posts": self.n_posts,
            "prevalence": self.prevalence,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "PhantomConfig":
        kwargs = dict(obj)
        tuple_keys = (
            "dims",
            "spacing",
            "texture_sigma",
            "texture_fine_sigma",
            "tissue_fractions",
            "lesion_radius",
        )
        for key in tuple_keys:
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return PhantomConfig(**kwargs)


def tissue_ellipsoid(cfg: PhantomConfig) -> np.ndarray:
    """(Z, Y, X) boolean ellipsoidal tissue region."""
    x, y, z = cfg.dims
    fx, fy, fz = cfg.tissue_fractions
    zz, yy, xx = np.meshgrid(np.arange(z), np.arange(y), np.arange(x), indexing="ij")
    cz, cy, cx = (z - 1) / 2.0, (y - 1) / 2.0, (x - 1) / 2.0
    return (
        ((xx - cx) / (fx * x)) ** 2
        + ((yy - cy) / (fy * y)) ** 2
        + ((zz - cz) / (fz * z)) ** 2
    ) <= 1.0


def _smooth_field(rng: np.random.Generator, cfg: PhantomConfig) -> np.ndarray:
    """Standardized band-limited random field, (Z, Y, X).

    One white-noise draw filtered at two scales and mixed: the coarse
    component carries volume-level structure, the fine one keeps the field
    unpredictable across ViT tokens.
    """
    x, y, z = cfg.dims
    sx, sy, sz = cfg.texture_sigma
    white = rng.standard_normal((z, y, x))
    field = gaussian_filter(white, sigma=(sz, sy, sx), mode="reflect")
    field = (field - field.mean()) / field.std()
    if cfg.texture_fine_weight > 0:
        fx, fy, fz = cfg.texture_fine_sigma
        fine = gaussian_filter(white, sigma=(fz, fy, fx), mode="reflect")
        fine = (fine - fine.mean()) / fine.std()
        field = field + cfg.texture_fine_weight * fine
    return (field - field.mean()) / field.std()


def _lesion_support(
    center: tuple[int, int, int], radius: float, cfg: PhantomConfig
) -> np.ndarray:
    """(Z, Y, X) boolean superellipsoid support around `center` (x, y, z)."""
    x, y, z = cfg.dims
    cx, cy, cz = center
    rx = ry = radius
    rz = float(np.clip(radius * cfg.lesion_rz_factor, 1.0, max(1.0, z / 3.0)))
    p = cfg.lesion_edge_power
    zz, yy, xx = np.meshgrid(np.arange(z), np.arange(y), np.arange(x), indexing="ij")
    return (
        np.abs((xx - cx) / rx) ** p
        + np.abs((yy - cy) / ry) ** p
        + np.abs((zz - cz) / rz) ** p
    ) <= 1.0


def _support_box(support: np.ndarray, label: str) -> BoundingBox:
    zs, ys, xs = np.nonzero(support)
    return BoundingBox(
        (int(xs.min()), int(ys.min()), int(zs.min())),
        (int(xs.max()), int(ys.max()), int(zs.max())),
        label,
    )


def _place_lesion(
    rng: np.random.Generator, tissue: np.ndarray, cfg: PhantomConfig, target_box_voxels: float
) -> np.ndarray:
    """Find a lesion support inside the tissue whose bounding box is close
    to the target voxel count. Bisection on the radius per candidate center;
    bounded retries over centers."""
    lo_r, hi_r = cfg.lesion_radius
    candidates = np.flatnonzero(tissue)
    for _ in range(100):
        flat = int(rng.choice(candidates))
        cz, cy, cx = np.unravel_index(flat, tissue.shape)
        lo, hi = lo_r, hi_r
        best, best_gap = None, np.inf
        for _ in range(24):
            mid = 0.5 * (lo + hi)
            cand = _lesion_support((cx, cy, cz), mid, cfg)
            n = _support_box(cand, "").voxel_count() if cand.any() else 0
            gap = abs(n - target_box_voxels)
            if gap < best_gap and n > 0:
                best, best_gap = cand, gap
            if n < target_box_voxels:
                lo = mid
            else:
                hi = mid
        if best is None:
            continue
        box_n = _support_box(best, "").voxel_count()
        if not 0.7 * target_box_voxels <= box_n <= 1.3 * target_box_voxels:
            continue  # radius range cannot hit the target from this center
        if np.any(best & ~tissue):
            continue  # must lie entirely inside the tissue mask
        return best
    raise GenerationError(
        "could not place a lesion inside the tissue mask after bounded retries"
    )


def lesion_profile(support: np.ndarray) -> np.ndarray:
    """Intensity profile: 1 on the lesion, decaying one- and two-voxel
    shoulders around it (peritumoral rim), 0 elsewhere.

    The shoulders keep the 3×3×2 minimum filter from eroding box-edge
    voxels down to the background floor: every window centered inside the
    bounding box still sees elevated signal.
    """
    ring1 = binary_dilation(support, structure=np.ones((3, 3, 3), dtype=bool))
    ring2 = binary_dilation(ring1, structure=np.ones((3, 3, 3), dtype=bool))
    profile = np.where(support, 1.0, 0.0)
    profile[ring1 & ~support] = 0.55
    profile[ring2 & ~ring1] = 0.25
    return profile


def generate_case(
    cfg: PhantomConfig, healthy: bool
) -> tuple[Volume, Volume, list[BoundingBox], DceSeries]:
    """One synthetic case: (two-channel image, tissue mask, boxes, DCE series)."""
    tissue = tissue_ellipsoid(cfg)
    shared = _smooth_field(rng_from(cfg.seed, "texture", "shared"), cfg)
    channels = []
    for ci, name in enumerate(SEQUENCES):
        own = _smooth_field(rng_from(cfg.seed, "texture", name), cfg)
        white = rng_from(cfg.seed, "noise", name).standard_normal(shared.shape)
        mix = cfg.shared_weight * shared + cfg.own_weight * own + cfg.noise_weight * white
        raw = np.where(tissue, 1.0 + 0.35 * mix, 0.05 + 0.02 * white)
        channels.append(raw)
    image = normalize(Volume(np.stack(channels), cfg.spacing))
    data = image.data.copy()

    boxes: list[BoundingBox] = []
    lesion_union = np.zeros(tissue.shape, dtype=bool)
    profile = np.zeros(tissue.shape)
    if not healthy:
        rng = rng_from(cfg.seed, "lesion")
        target = cfg.prevalence * tissue.sum() / cfg.lesion_count
        for li in range(cfg.lesion_count):
            support = _place_lesion(rng, tissue & ~lesion_union, cfg, target)
            lesion_union |= support
            boxes.append(_support_box(support, f"lesion{li}"))
        profile = lesion_profile(lesion_union)
        data[0] -= cfg.nfs_offset * profile  # NFS: hypointense
        data[1] += cfg.fs_offset * profile  # FS: hyperintense
    image = Volume(data, cfg.spacing)

    mask = Volume(tissue[None].astype(np.float64), cfg.spacing)

    # DCE series: enhancement is planted independently of the anomaly
    # channels, so the subtraction baseline detects real uptake.
    pre = Volume(image.data[1:2].copy(), cfg.spacing)
    posts = []
    for k in range(cfg.n_posts):
        noise = rng_from(cfg.seed, "dce", k).standard_normal(tissue.shape)
        post = pre.data[0] + cfg.enhancement * profile + cfg.dce_noise * noise
        posts.append(Volume(post[None], cfg.spacing))
    series = DceSeries(pre, tuple(posts))
    return image, mask, boxes, series


# ---------------------------------------------------------------------------
# dataset on disk


def _write_case(out_dir: Path, stem: str, cfg: PhantomConfig, healthy: bool) -> dict:
    image, mask, boxes, series = generate_case(cfg, healthy)
    img_path = out_dir / f"{stem}.mvol"
    write_mvol(image, img_path)
    write_sidecar(img_path, sequences=SEQUENCES, boxes=boxes, role="image")
    mask_path = out_dir / f"{stem}_mask.mvol"
    write_mvol(mask, mask_path)
    write_sidecar(mask_path, role="mask")
    pre_path = out_dir / f"{stem}_dce_pre.mvol"
    write_mvol(series.pre, pre_path)
    write_sidecar(pre_path, sequences=["FS"], role="dce_pre")
    post_paths = []
    for k, post in enumerate(series.posts):
        p = out_dir / f"{stem}_dce_post{k}.mvol"
        write_mvol(post, p)
        write_sidecar(p, sequences=["FS"], role="dce_post")
        post_paths.append(str(p))
    return {
        "image": str(img_path),
        "mask": str(mask_path),
        "boxes_in_sidecar": True,
        "dce_pre": str(pre_path),
        "dce_posts": post_paths,
    }


def generate_dataset(
    cfg: PhantomConfig,
    n_train_healthy: int,
    n_test_mixed: int,
    out_dir,
    n_val_healthy: int = 0,
) -> dict:
    """Write MVOL cases + sidecars + a manifest; returns the manifest.

    Test cases alternate healthy/lesioned (odd indices carry lesions), so
    `n_test_mixed` of 2k yields k of each. Manifest paths are absolute, so
    the manifest loads regardless of the caller's working directory.
    """
    out = Path(os.path.abspath(out_dir))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    manifest = {"train": [], "val": [], "test": [], "config": cfg.to_json()}
    for i in range(n_train_healthy):
        case_cfg = replace(cfg, seed=derive_seed(cfg.seed, "case", "train", i))
        entry = _write_case(out, f"train_{i:03d}", case_cfg, healthy=True)
        manifest["train"].append(entry["image"])
    for i in range(n_val_healthy):
        case_cfg = replace(cfg, seed=derive_seed(cfg.seed, "case", "val", i))
        entry = _write_case(out, f"val_{i:03d}", case_cfg, healthy=True)
        manifest["val"].append(entry["image"])
    for i in range(n_test_mixed):
        case_cfg = replace(cfg, seed=derive_seed(cfg.seed, "case", "test", i))
        entry = _write_case(out, f"test_{i:03d}", case_cfg, healthy=(i % 2 == 0))
        manifest["test"].append(entry)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
