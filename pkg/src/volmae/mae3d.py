"""3D masked autoencoder: ViT encoder over visible tokens, lightweight
decoder with a learnable mask token, masked-MSE objective, training loop,
and the on-disk checkpoint format.

Checkpoint layout (little-endian):
    "MAE3D01"  7 bytes magic
    u32        length of the JSON-encoded MaeConfig that follows
    JSON       model configuration
    f64 * P    parameters, contiguous, in canonical order (the order of
               MaeModel.params(): embed, encoder blocks, encoder norm,
               encoder→decoder projection, mask token, decoder blocks,
               decoder norm, output head)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndnum
from .errors import CheckpointError, ConfigError, ContractError, DataError, DimensionError
from .ndnum import Tensor
from .patchgrid import PatchSpec, MaskPlan, flip_augment, random_crop, sample_mask, sincos_pos_embed_3d, tokenize
from .seeding import rng_from


@dataclass(frozen=True)
class MaeConfig:
    """Architecture hyperparameters. Dims must divide by 6 (positional
    embedding groups) and by their head counts."""

    spec: PatchSpec
    encoder_depth: int = 12
    encoder_dim: int = 768
    encoder_heads: int = 12
    decoder_depth: int = 4
    decoder_dim: int = 384
    decoder_heads: int = 16
    mlp_ratio: int = 4
    mask_ratio: float = 0.9

    def __post_init__(self):
        for label, dim, heads in (
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ):
            if dim % 6 != 0:
                raise ConfigError(f"{label}_dim {dim} must be divisible by 6")
            if heads < 1 or dim % heads != 0:
                raise ConfigError(f"{label}_dim {dim} must be divisible by {label}_heads {heads}")
        if min(self.encoder_depth, self.decoder_depth) < 1 or self.mlp_ratio < 1:
            raise ConfigError("depths and mlp_ratio must be >= 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")

    def to_json(self) -> dict:
        return {
            "mri_patch_dims": list(self.spec.mri_patch_dims),
            "vit_patch_dims": list(self.spec.vit_patch_dims),
            "channels": self.spec.channels,
            "encoder_depth": self.encoder_depth,
            "encoder_dim": self.encoder_dim,
            "encoder_heads": self.encoder_heads,
            "decoder_depth": self.decoder_depth,
            "decoder_dim": self.decoder_dim,
            "decoder_heads": self.decoder_heads,
            "mlp_ratio": self.mlp_ratio,
            "mask_ratio": self.mask_ratio,
        }

    @staticmethod
    def from_json(obj: dict) -> "MaeConfig":
        spec = PatchSpec(
            tuple(obj["mri_patch_dims"]), tuple(obj["vit_patch_dims"]), obj["channels"]
        )
        return MaeConfig(
            spec=spec,
            encoder_depth=obj["encoder_depth"],
            encoder_dim=obj["encoder_dim"],
            encoder_heads=obj["encoder_heads"],
            decoder_depth=obj["decoder_depth"],
            decoder_dim=obj["decoder_dim"],
            decoder_heads=obj["decoder_heads"],
            mlp_ratio=obj["mlp_ratio"],
            mask_ratio=obj["mask_ratio"],
        )


def paper_config(channels: int = 2) -> MaeConfig:
    """Full-size architecture from the original training setup."""
    return MaeConfig(spec=PatchSpec(channels=channels))


def desk_config(channels: int = 2) -> MaeConfig:
    """Tiny architecture suitable for CPU training in seconds."""
    return MaeConfig(
        spec=PatchSpec((48, 42, 8), (6, 6, 2), channels),
        encoder_depth=2,
        encoder_dim=24,
        encoder_heads=4,
        decoder_depth=1,
        decoder_dim=12,
        decoder_heads=2,
    )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    base_lr: float = 1e-3
    epochs: int = 1000
    warmup_epochs: int = 7
    seed: int = 0
    flip_coronal_prob: float = 0.5
    flip_sagittal_prob: float = 0.5
    loss_all_tokens: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})"
            )


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draw clipped at two deviations — the usual ViT weight init."""
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


class MaeModel:
    """Parameter container plus the forward pass.

    Parameters live in an insertion-ordered dict of name -> Tensor; that
    order is the canonical checkpoint order.
    """

    def __init__(self, config: MaeConfig, init_seed: int = 0):
        self.config = config
        spec = config.spec
        rng = rng_from(init_seed, "init")
        p: dict[str, Tensor] = {}

        def w(name, shape):
            p[name] = Tensor(_trunc_normal(rng, shape), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape), requires_grad=True)

        d_e, d_d, td = config.encoder_dim, config.decoder_dim, spec.token_dim
        w("embed.W", (td, d_e))
        zeros("embed.b", (d_e,))
        for i in range(config.encoder_depth):
            self._block_params(p, f"enc{i}", d_e, config.mlp_ratio, w, zeros, ones)
        ones("enc_norm.g", (d_e,))
        zeros("enc_norm.b", (d_e,))
        w("enc2dec.W", (d_e, d_d))
        zeros("enc2dec.b", (d_d,))
        w("mask_token", (d_d,))
        for i in range(config.decoder_depth):
            self._block_params(p, f"dec{i}", d_d, config.mlp_ratio, w, zeros, ones)
        ones("dec_norm.g", (d_d,))
        zeros("dec_norm.b", (d_d,))
        w("head.W", (d_d, td))
        zeros("head.b", (td,))

        self._params = p
        self.enc_pos = sincos_pos_embed_3d(spec.grid_shape, d_e)
        self.dec_pos = sincos_pos_embed_3d(spec.grid_shape, d_d)

    @staticmethod
    def _block_params(p, prefix, dim, mlp_ratio, w, zeros, ones):
        hidden = dim * mlp_ratio
        ones(f"{prefix}.ln1.g", (dim,))
        zeros(f"{prefix}.ln1.b", (dim,))
        for proj in ("q", "k", "v", "o"):
            w(f"{prefix}.attn.W{proj}", (dim, dim))
            zeros(f"{prefix}.attn.b{proj}", (dim,))
        ones(f"{prefix}.ln2.g", (dim,))
        zeros(f"{prefix}.ln2.b", (dim,))
        w(f"{prefix}.mlp.W1", (dim, hidden))
        zeros(f"{prefix}.mlp.b1", (hidden,))
        w(f"{prefix}.mlp.W2", (hidden, dim))
        zeros(f"{prefix}.mlp.b2", (dim,))

    def params(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    @property
    def n_params(self) -> int:
        return sum(t.data.size for _, t in self.params())

    def zero_grad(self) -> None:
        for _, t in self.params():
            t.grad = None

    # -- forward ----------------------------------------------------------

    def _attention(self, x: Tensor, prefix: str, heads: int) -> Tensor:
        p = self._params
        n, dim = x.data.shape
        hd = dim // heads
        parts = []
        for proj in ("q", "k", "v"):
            h = ndnum.add(
                ndnum.matmul(x, p[f"{prefix}.attn.W{proj}"]), p[f"{prefix}.attn.b{proj}"]
            )
            parts.append(ndnum.transpose(ndnum.reshape(h, (n, heads, hd)), (1, 0, 2)))
        q, k, v = parts
        out = ndnum.softmax_attention(q, k, v, 1.0 / math.sqrt(hd))
        out = ndnum.reshape(ndnum.transpose(out, (1, 0, 2)), (n, dim))
        return ndnum.add(ndnum.matmul(out, p[f"{prefix}.attn.Wo"]), p[f"{prefix}.attn.bo"])

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        p = self._params
        h = ndnum.gelu(ndnum.add(ndnum.matmul(x, p[f"{prefix}.mlp.W1"]), p[f"{prefix}.mlp.b1"]))
        return ndnum.add(ndnum.matmul(h, p[f"{prefix}.mlp.W2"]), p[f"{prefix}.mlp.b2"])

    def _transformer_block(self, x: Tensor, prefix: str, heads: int) -> Tensor:
        p = self._params
        h = ndnum.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        x = ndnum.add(x, self._attention(h, prefix, heads))
        h = ndnum.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        return ndnum.add(x, self._mlp(h, prefix))

    def encode(self, tokens, plan: MaskPlan) -> Tensor:
        """Embed + positional-encode all tokens, keep the visible subset,
        run the encoder stack. Returns (K, encoder_dim)."""
        p = self._params
        cfg = self.config
        t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        n = cfg.spec.token_count
        if t.data.shape != (n, cfg.spec.token_dim):
            raise DimensionError(
                f"token matrix {t.data.shape} does not match model spec "
                f"({n}, {cfg.spec.token_dim})"
            )
        if plan.n_tokens != n:
            raise DimensionError(f"mask plan covers {plan.n_tokens} tokens, model has {n}")
        x = ndnum.add(ndnum.matmul(t, p["embed.W"]), p["embed.b"])
        x = ndnum.add(x, Tensor(self.enc_pos))
        x = ndnum.take_tokens(x, plan.kept_indices)
        for i in range(cfg.encoder_depth):
            x = self._transformer_block(x, f"enc{i}", cfg.encoder_heads)
        return ndnum.layer_norm(x, p["enc_norm.g"], p["enc_norm.b"])

    def decode(self, latent: Tensor, plan: MaskPlan) -> Tensor:
        """Project to decoder width, restore full token order with the mask
        token at masked slots, decode, map back to pixel space."""
        p = self._params
        cfg = self.config
        x = ndnum.add(ndnum.matmul(latent, p["enc2dec.W"]), p["enc2dec.b"])
        x = ndnum.place_tokens(
            x, p["mask_token"], plan.kept_indices, plan.masked_indices, plan.n_tokens
        )
        x = ndnum.add(x, Tensor(self.dec_pos))
        for i in range(cfg.decoder_depth):
            x = self._transformer_block(x, f"dec{i}", cfg.decoder_heads)
        x = ndnum.layer_norm(x, p["dec_norm.g"], p["dec_norm.b"])
        return ndnum.add(ndnum.matmul(x, p["head.W"]), p["head.b"])

    def forward(self, tokens, plan: MaskPlan) -> Tensor:
        """Full masked-autoencoding pass: (N, token_dim) -> (N, token_dim)."""
        return self.decode(self.encode(tokens, plan), plan)


def masked_mse_loss(recon: Tensor, target, plan: MaskPlan, all_tokens: bool = False) -> Tensor:
    """Mean squared error over masked-token pixels (optionally all tokens)."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if recon.data.shape != t.data.shape:
        raise DimensionError(f"recon {recon.data.shape} vs target {t.data.shape}")
    diff = ndnum.add(recon, ndnum.neg(t))
    if not all_tokens:
        if plan.masked_indices.size == 0:
            raise ContractError("no masked tokens: masked-only loss is undefined")
        diff = ndnum.take_tokens(diff, plan.masked_indices)
    return ndnum.tmean(ndnum.power(diff, 2.0))


# ---------------------------------------------------------------------------
# training loop


def _check_dataset(volumes, spec: PatchSpec) -> None:
    if not volumes:
        raise DataError("training dataset is empty")
    for i, v in enumerate(volumes):
        if v.n_channels != spec.channels:
            raise DataError(
                f"volume {i} has {v.n_channels} channels, patch spec wants {spec.channels}"
            )
        if any(d < m for d, m in zip(v.dims, spec.mri_patch_dims)):
            raise DataError(
                f"volume {i} dims {v.dims} smaller than MRI-patch {spec.mri_patch_dims}"
            )


def train_epoch(
    model: MaeModel,
    volumes,
    cfg: TrainConfig,
    epoch: int,
    opt_state: ndnum.AdamState,
) -> float:
    """One pass over the (shuffled) dataset; returns the mean sample loss.

    Per sample the epoch RNG stream draws, in order: crop origin, the two
    flip coins, the mask permutation — so runs are bit-reproducible for a
    fixed (seed, epoch) pair regardless of platform.
    """
    _check_dataset(volumes, model.config.spec)
    spec = model.config.spec
    rng = rng_from(cfg.seed, "train", epoch)
    order = rng.permutation(len(volumes))
    lr = ndnum.lr_schedule(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.epochs)
    losses: list[float] = []
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        model.zero_grad()
        for vol_idx in batch:
            patch, _ = random_crop(volumes[vol_idx], spec, rng)
            do_cor = rng.random() < cfg.flip_coronal_prob
            do_sag = rng.random() < cfg.flip_sagittal_prob
            patch = flip_augment(patch, do_cor, do_sag)
            grid = tokenize(patch, spec)
            plan = sample_mask(spec.token_count, model.config.mask_ratio, rng)
            recon = model.forward(grid.tokens, plan)
            loss = masked_mse_loss(recon, grid.tokens, plan, all_tokens=cfg.loss_all_tokens)
            losses.append(float(loss.data))
            ndnum.backward(ndnum.mul(loss, 1.0 / len(batch)))
        ndnum.adam_step(model.params(), opt_state, lr)
    model.zero_grad()
    return float(np.mean(losses))


def train(
    model: MaeModel,
    volumes,
    cfg: TrainConfig,
    opt_state: ndnum.AdamState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> tuple[list[float], ndnum.AdamState]:
    """Run epochs [start_epoch, cfg.epochs); returns per-epoch mean losses."""
    _check_dataset(volumes, model.config.spec)
    if opt_state is None:
        opt_state = ndnum.AdamState()
    losses = []
    for epoch in range(start_epoch, cfg.epochs):
        loss = train_epoch(model, volumes, cfg, epoch, opt_state)
        losses.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    return losses, opt_state


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"MAE3D01"


def save_checkpoint(model: MaeModel, path) -> None:
    cfg_bytes = json.dumps(model.config.to_json(), sort_keys=True).encode("utf-8")
    chunks = [_CKPT_MAGIC, struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    for _, t in model.params():
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expect: MaeConfig | None = None) -> MaeModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 4 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    off = len(_CKPT_MAGIC)
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + cfg_len > len(raw):
        raise CheckpointError(f"{path}: truncated config block")
    try:
        config = MaeConfig.from_json(json.loads(raw[off : off + cfg_len]))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: unreadable config block ({e})") from e
    off += cfg_len
    if expect is not None and config != expect:
        raise CheckpointError(
            f"{path}: checkpoint config does not match the expected configuration"
        )
    model = MaeModel(config)
    n_floats = (len(raw) - off) // 8
    if n_floats * 8 != len(raw) - off or n_floats != model.n_params:
        raise CheckpointError(
            f"{path}: parameter payload holds {n_floats} floats, "
            f"config implies {model.n_params}"
        )
    flat = np.frombuffer(raw, dtype="<f8", offset=off)
    pos = 0
    for _, t in model.params():
        n = t.data.size
        t.data = flat[pos : pos + n].reshape(t.data.shape).astype(np.float64)
        pos += n
    return model


def opt_state_path(ckpt_path) -> Path:
    return Path(ckpt_path).with_suffix(Path(ckpt_path).suffix + ".opt.npz")


def save_opt_state(state: ndnum.AdamState, ckpt_path) -> None:
    """Optimizer sidecar so an interrupted run can resume exactly."""
    arrays = {"step": np.array([state.step], dtype=np.int64)}
    for name, m in state.m.items():
        arrays["m:" + name] = m
        arrays["v:" + name] = state.v[name]
    np.savez(opt_state_path(ckpt_path), **arrays)


def load_opt_state(ckpt_path) -> ndnum.AdamState:
    with np.load(opt_state_path(ckpt_path)) as z:
        state = ndnum.AdamState(step=int(z["step"][0]))
        for key in z.files:
            if key.startswith("m:"):
                state.m[key[2:]] = z[key]
            elif key.startswith("v:"):
                state.v[key[2:]] = z[key]
    return state
