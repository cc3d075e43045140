"""
Fus-MAE forward pass: patch embedding, masking, the three encoder variants,
per-modality decoders and the masked reconstruction objective.

Token layout inside the encoder is [modality 1 | modality 2 | CLS] for the
xad / xaed variants, so latents split back into per-modality views by
position. The early_concat baseline stacks both images along channels,
prepends CLS and masks the single token stream once.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Union

import numpy as np

import functional as F
from errors import ConfigError, MaskError, ShapeError
from models import ModelParams
from schemas import MaskPlan, ModalityCondition, ModelConfig
from services.nn_blocks import transformer_block, xattn_decoder_block, xattn_encoder_block
from services.synth_data import SamplePair
from tensor import Tensor, no_grad, resolve_dtype

logger = logging.getLogger(__name__)


@dataclass
class ModalityTokens:
    tokens: Tensor  # z_{0,i}, [T, d]
    pos: Tensor  # shared positional embedding, [T, d]
    modality: int


@dataclass
class Latents:
    z_N: Tensor
    z_1: Tensor
    z_2: Tensor
    cls: Tensor


@dataclass
class Reconstruction:
    image_1: np.ndarray
    image_2: np.ndarray
    pred_1: np.ndarray
    pred_2: np.ndarray


@dataclass
class PretrainOutput:
    loss: Tensor
    loss_1: Tensor
    loss_2: Tensor
    reconstruction: Reconstruction
    plan: MaskPlan


# --- patches and positions ---

def patchify(image: Union[Tensor, np.ndarray], P: int) -> Tensor:
    """[H, W, C] -> [T, P*P*C]; patch grid row-major, then pixel row-major, then channel."""
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects [H, W, C], got {image.shape}")
    H, W, C = image.shape
    if H % P or W % P:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {P}")
    gh, gw = H // P, W // P
    x = F.reshape(image, (gh, P, gw, P, C))
    x = F.permute(x, (0, 2, 1, 3, 4))
    return F.reshape(x, (gh * gw, P * P * C))


def unpatchify(patches: Union[Tensor, np.ndarray], H: int, W: int, C: int, P: int) -> Tensor:
    if not isinstance(patches, Tensor):
        patches = Tensor(patches)
    gh, gw = H // P, W // P
    if patches.shape != (gh * gw, P * P * C):
        raise ShapeError(f"cannot unpatchify {patches.shape} into {H}x{W}x{C} with P={P}")
    x = F.reshape(patches, (gh, gw, P, P, C))
    x = F.permute(x, (0, 2, 1, 3, 4))
    return F.reshape(x, (H, W, C))


def _sincos_1d(d: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(d // 2, dtype=np.float64) / (d / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum("m,k->mk", positions.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@lru_cache(maxsize=32)
def _pos_embed_cached(grid_h: int, grid_w: int, d: int, dtype: str) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb = np.concatenate([_sincos_1d(d // 2, rows), _sincos_1d(d // 2, cols)], axis=1)
    emb = emb.astype(resolve_dtype(dtype))
    emb.setflags(write=False)
    return emb


def build_pos_embed(grid_h: int, grid_w: int, d: int, dtype: str = "f64") -> Tensor:
    """Fixed 2-D sine-cosine table [grid_h*grid_w, d]: rows in the first half, columns in the second."""
    if d % 4:
        raise ShapeError(f"positional width {d} must be divisible by 4")
    return Tensor(_pos_embed_cached(grid_h, grid_w, d, dtype))


# --- masking ---

def sample_mask(T: int, r: float, strategy: str, rng: np.random.Generator) -> MaskPlan:
    """Uniform masking without replacement of floor(r*T) patches per modality."""
    n_masked = math.floor(r * T)
    if not 0 < n_masked < T:
        raise MaskError(f"mask ratio {r} masks {n_masked} of {T} patches")

    def draw():
        perm = rng.permutation(T)
        return sorted(int(i) for i in perm[n_masked:]), sorted(int(i) for i in perm[:n_masked])

    visible_1, masked_1 = draw()
    if strategy == "consistent":
        visible_2, masked_2 = list(visible_1), list(masked_1)
    elif strategy == "independent":
        visible_2, masked_2 = draw()
    else:
        raise ConfigError(f"unknown masking strategy {strategy!r}")
    return MaskPlan(visible_1=visible_1, masked_1=masked_1, visible_2=visible_2, masked_2=masked_2,
                    ratio=r, strategy=strategy)


def pretrain_mask(config: ModelConfig, rng: np.random.Generator) -> MaskPlan:
    """Mask plan for one pretraining sample; the single-stream baseline is always consistent."""
    strategy = "consistent" if config.variant == "early_concat" else config.strategy
    return sample_mask(config.num_patches, config.r, strategy, rng)


# --- encoder ---

def patch_embed(image: Tensor, weight: Tensor, bias: Tensor, pos: Tensor, P: int, modality: int = 0) -> ModalityTokens:
    """z_{0,i} = proj_i(patchify(I_i)) + E_emb."""
    channels = image.shape[-1]
    if weight.shape[0] != P * P * channels:
        raise ShapeError(
            f"modality {modality}: projection expects {weight.shape[0]} inputs, image gives P*P*C={P * P * channels}"
        )
    tokens = F.add(F.linear(patchify(image, P), weight, bias), pos)
    return ModalityTokens(tokens=tokens, pos=pos, modality=modality)


def _check_pair(pair: SamplePair, config: ModelConfig) -> None:
    expected_1 = (config.H, config.W, config.C_1)
    expected_2 = (config.H, config.W, config.C_2)
    if pair.image_1.shape != expected_1 or pair.image_2.shape != expected_2:
        raise ShapeError(
            f"pair shapes {pair.image_1.shape} / {pair.image_2.shape} do not match config {expected_1} / {expected_2}"
        )


def _missing_tokens(params: ModelParams, modality: int, pos: Tensor) -> Tensor:
    d = params.config.d
    rows = F.gather(F.reshape(params[f"missing_{modality}"], (1, d)), [0] * pos.shape[0])
    return F.add(rows, pos)


def _cls_row(params: ModelParams) -> Tensor:
    return F.reshape(params["cls_token"], (1, params.config.d))


def encode(
    pair: SamplePair,
    plan: MaskPlan,
    params: ModelParams,
    variant: Optional[str] = None,
    modality: ModalityCondition = "s1s2",
) -> Latents:
    config = params.config
    if variant is not None and variant != config.variant:
        raise ConfigError(f"variant {variant!r} requested but parameters were built for {config.variant!r}")
    _check_pair(pair, config)
    if plan.num_patches != config.num_patches:
        raise ShapeError(f"mask plan covers {plan.num_patches} patches, config has {config.num_patches}")

    dtype = params.dtype
    gh, gw = config.grid
    pos = build_pos_embed(gh, gw, config.d, dtype)

    if config.variant == "early_concat":
        image_1 = pair.image_1 if modality != "s2" else np.zeros_like(pair.image_1)
        image_2 = pair.image_2 if modality != "s1" else np.zeros_like(pair.image_2)
        stacked = Tensor(np.concatenate([image_1, image_2], axis=-1), dtype=dtype)
        tokens = patch_embed(stacked, params["patch_embed.w"], params["patch_embed.b"], pos, config.P).tokens
        visible = F.gather(tokens, plan.visible_1)
        z = F.concat([_cls_row(params), visible], axis=0)
        for b, block in enumerate(params.encoder_blocks()):
            z = transformer_block(z, block, tag=f"encoder.blocks.{b}")
        n_visible = len(plan.visible_1)
        body = F.gather(z, list(range(1, n_visible + 1)))
        cls = F.reshape(F.gather(z, [0]), (config.d,))
        return Latents(z_N=z, z_1=body, z_2=body, cls=cls)

    streams = []
    for i, image in ((1, pair.image_1), (2, pair.image_2)):
        absent = (modality == "s1" and i == 2) or (modality == "s2" and i == 1)
        if absent:
            tokens = _missing_tokens(params, i, pos)
        else:
            tokens = patch_embed(Tensor(image, dtype=dtype), params[f"patch_embed_{i}.w"],
                                 params[f"patch_embed_{i}.b"], pos, config.P, modality=i).tokens
        streams.append(F.gather(tokens, plan.visible(i)))
    x, y = streams

    if config.variant == "xaed":
        fused = xattn_encoder_block(x, y, params.block("encoder.xattn", config.h), tag="encoder.xattn")
        z = F.concat([fused, _cls_row(params)], axis=0)
    else:
        z = F.concat([x, y, _cls_row(params)], axis=0)
    for b, block in enumerate(params.encoder_blocks()):
        z = transformer_block(z, block, tag=f"encoder.blocks.{b}")

    v1, v2 = len(plan.visible_1), len(plan.visible_2)
    return Latents(
        z_N=z,
        z_1=F.gather(z, list(range(v1))),
        z_2=F.gather(z, list(range(v1, v1 + v2))),
        cls=F.reshape(F.gather(z, [v1 + v2]), (config.d,)),
    )


# --- decoders ---

def decoder_sequence(z: Tensor, visible: Sequence[int], params: ModelParams, modality: int) -> Tensor:
    """Project latents to decoder width, fill masked slots with the mask token, add positions."""
    config = params.config
    prefix = f"decoder_{modality}"
    T, dd = config.num_patches, config.d_dec
    if z.shape[0] != len(visible):
        raise ShapeError(f"{len(visible)} visible indices but {z.shape[0]} latents for modality {modality}")

    embedded = F.linear(z, params[f"{prefix}.embed.w"], params[f"{prefix}.embed.b"])
    visible_set = set(visible)
    masked = [t for t in range(T) if t not in visible_set]
    parts = [embedded]
    if masked:
        parts.append(F.gather(F.reshape(params[f"{prefix}.mask_token"], (1, dd)), [0] * len(masked)))
    restore = np.argsort(np.asarray(list(visible) + masked))
    seq = F.gather(F.concat(parts, axis=0), restore)
    gh, gw = config.grid
    return F.add(seq, build_pos_embed(gh, gw, dd, params.dtype))


def _decode(seq_i: Tensor, seq_j: Optional[Tensor], visible_j: Sequence[int], params: ModelParams, modality: int) -> Tensor:
    config = params.config
    prefix = f"decoder_{modality}"
    x = seq_i
    if config.variant != "early_concat":
        kv = seq_j if config.xattn_decoder_kv == "full" else F.gather(seq_j, visible_j)
        x = xattn_decoder_block(x, kv, params.block(f"{prefix}.xattn", config.h_dec), tag=f"{prefix}.xattn")
    for b, block in enumerate(params.decoder_blocks(modality)):
        x = transformer_block(x, block, tag=f"{prefix}.blocks.{b}")
    norm = params.norm(f"{prefix}.norm")
    x = F.layer_norm(x, norm.gain, norm.bias, config.ln_eps)
    return F.linear(x, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])


def decode_modality(z_i: Tensor, z_j: Tensor, plan: MaskPlan, params: ModelParams, modality: int) -> Tensor:
    """Per-patch predictions [T, P*P*C_i] for modality i, cross-attending to modality j."""
    other = 2 if modality == 1 else 1
    seq_i = decoder_sequence(z_i, plan.visible(modality), params, modality)
    seq_j = None
    if params.config.variant != "early_concat":
        seq_j = decoder_sequence(z_j, plan.visible(other), params, other)
    return _decode(seq_i, seq_j, plan.visible(other), params, modality)


# --- objective ---

def normalize_patches(target: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = target.mean(axis=-1, keepdims=True)
    var = target.var(axis=-1, keepdims=True)
    return (target - mean) / np.sqrt(var + eps)


def masked_mse_loss(pred: Tensor, target: Union[Tensor, np.ndarray], masked: Sequence[int]) -> Tensor:
    """Mean squared error over the masked patches only."""
    if len(masked) == 0:
        raise MaskError("masked_mse_loss needs at least one masked patch")
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if target_data.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target_data.shape} differ")
    index = list(masked)
    diff = F.sub(F.gather(pred, index), Tensor(target_data[index].astype(pred.data.dtype)))
    return F.mean(F.mul(diff, diff))


def assemble_reconstruction(pred: np.ndarray, target: np.ndarray, masked: Sequence[int]) -> np.ndarray:
    """Predicted patches at masked positions, target patches everywhere else."""
    out = np.array(target, copy=True)
    index = list(masked)
    out[index] = pred[index]
    return out


def forward_pretrain(
    pair: SamplePair,
    params: ModelParams,
    config: Optional[ModelConfig] = None,
    rng: Optional[np.random.Generator] = None,
    plan: Optional[MaskPlan] = None,
) -> PretrainOutput:
    """
    Mask, encode, decode both modalities and average their masked MSE.

    The early_concat baseline masks its single stream once, so its plan is
    always consistent. A precomputed `plan` skips sampling.
    """
    config = config or params.config
    if plan is None:
        if rng is None:
            raise ValueError("forward_pretrain needs an rng or a precomputed plan")
        plan = pretrain_mask(config, rng)

    latents = encode(pair, plan, params)
    seq_1 = decoder_sequence(latents.z_1, plan.visible_1, params, 1)
    seq_2 = decoder_sequence(latents.z_2, plan.visible_2, params, 2)
    pred_1 = _decode(seq_1, seq_2, plan.visible_2, params, 1)
    pred_2 = _decode(seq_2, seq_1, plan.visible_1, params, 2)

    dtype = resolve_dtype(params.dtype)
    with no_grad():
        target_1 = patchify(Tensor(pair.image_1, dtype=dtype), config.P).data
        target_2 = patchify(Tensor(pair.image_2, dtype=dtype), config.P).data
    loss_target_1 = normalize_patches(target_1) if config.norm_pix_loss else target_1
    loss_target_2 = normalize_patches(target_2) if config.norm_pix_loss else target_2

    loss_1 = masked_mse_loss(pred_1, loss_target_1, plan.masked_1)
    loss_2 = masked_mse_loss(pred_2, loss_target_2, plan.masked_2)
    loss = F.scale(F.add(loss_1, loss_2), 0.5)

    reconstruction = Reconstruction(
        image_1=_inspection_image(pred_1.data, target_1, plan.masked_1, config, config.C_1),
        image_2=_inspection_image(pred_2.data, target_2, plan.masked_2, config, config.C_2),
        pred_1=pred_1.data.copy(),
        pred_2=pred_2.data.copy(),
    )
    return PretrainOutput(loss=loss, loss_1=loss_1, loss_2=loss_2, reconstruction=reconstruction, plan=plan)


def _inspection_image(pred: np.ndarray, target: np.ndarray, masked: List[int], config: ModelConfig, channels: int) -> np.ndarray:
    if config.norm_pix_loss:
        mean = target.mean(axis=-1, keepdims=True)
        std = np.sqrt(target.var(axis=-1, keepdims=True) + 1e-6)
        pred = pred * std + mean
    patches = assemble_reconstruction(pred, target, masked)
    with no_grad():
        return unpatchify(patches, config.H, config.W, channels, config.P).data


# --- downstream features ---

def encode_cls(pair: SamplePair, params: ModelParams, modality: ModalityCondition = "s1s2") -> Tensor:
    """CLS latent of an unmasked forward pass; differentiable, used for fine-tuning."""
    plan = MaskPlan.unmasked(params.config.num_patches)
    return encode(pair, plan, params, modality=modality).cls


def extract_features(
    pair: SamplePair,
    params: ModelParams,
    config: Optional[ModelConfig] = None,
    modality: ModalityCondition = "s1s2",
) -> Tensor:
    if config is not None and config.variant != params.config.variant:
        raise ConfigError(f"config variant {config.variant!r} does not match parameters {params.config.variant!r}")
    with no_grad():
        return encode_cls(pair, params, modality)
