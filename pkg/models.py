"""
Learned parameters of a Fus-MAE model.

ModelParams is an ordered table of named tensors. Names are hierarchical
(`encoder.blocks.0.attn.w_q`, `decoder_1.head.w`, ...) and depend only on
the ModelConfig, so the table itself tells the variants apart. Typed views
(`block`, `attention`, ...) hand the shared tensors to the blocks.
"""
import logging
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from schemas import ModelConfig
from services.nn_blocks import AttentionParams, BlockParams, MlpParams, NormParams
from tensor import Tensor, resolve_dtype

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]

# Learned tokens drawn from N(0, 0.02); weight matrices Xavier-uniform.
TOKEN_STD = 0.02


def _attention_shapes(prefix: str, d: int) -> List[Tuple[str, Shape]]:
    return [(f"{prefix}.{w}", (d, d)) for w in ("w_q", "w_k", "w_v", "w_o")]


def _norm_shapes(prefix: str, d: int) -> List[Tuple[str, Shape]]:
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def _mlp_shapes(prefix: str, d: int, ratio: int) -> List[Tuple[str, Shape]]:
    d_ff = d * ratio
    return [
        (f"{prefix}.w_1", (d, d_ff)),
        (f"{prefix}.b_1", (d_ff,)),
        (f"{prefix}.w_2", (d_ff, d)),
        (f"{prefix}.b_2", (d,)),
    ]


def _block_shapes(prefix: str, d: int, ratio: int, cross: bool = False, rev: bool = False) -> List[Tuple[str, Shape]]:
    shapes = _norm_shapes(f"{prefix}.norm1", d)
    if cross:
        shapes += _norm_shapes(f"{prefix}.norm_y", d)
    shapes += _attention_shapes(f"{prefix}.attn", d)
    if rev:
        shapes += _attention_shapes(f"{prefix}.attn_rev", d)
    shapes += _norm_shapes(f"{prefix}.norm2", d)
    shapes += _mlp_shapes(f"{prefix}.mlp", d, ratio)
    return shapes


def param_shapes(config: ModelConfig) -> "OrderedDict[str, Shape]":
    """Name -> shape table for every parameter of the configured variant."""
    d, dd, ratio = config.d, config.d_dec, config.mlp_ratio
    shapes: List[Tuple[str, Shape]] = []

    if config.variant == "early_concat":
        shapes += [("patch_embed.w", (config.patch_dim(0), d)), ("patch_embed.b", (d,))]
    else:
        for i in (1, 2):
            shapes += [(f"patch_embed_{i}.w", (config.patch_dim(i), d)), (f"patch_embed_{i}.b", (d,))]

    plain_encoder_blocks = config.N
    if config.variant == "xaed":
        shapes += _block_shapes("encoder.xattn", d, ratio, cross=True, rev=not config.xattn_shared_weights)
        plain_encoder_blocks = config.N - 1
    for b in range(plain_encoder_blocks):
        shapes += _block_shapes(f"encoder.blocks.{b}", d, ratio)

    shapes.append(("cls_token", (d,)))
    if config.variant != "early_concat":
        shapes += [("missing_1", (d,)), ("missing_2", (d,))]

    for i in (1, 2):
        prefix = f"decoder_{i}"
        shapes += [(f"{prefix}.embed.w", (d, dd)), (f"{prefix}.embed.b", (dd,)), (f"{prefix}.mask_token", (dd,))]
        plain_decoder_blocks = config.N_dec
        if config.variant != "early_concat":
            shapes += _block_shapes(f"{prefix}.xattn", dd, ratio, cross=True)
            plain_decoder_blocks = config.N_dec - 1
        for b in range(plain_decoder_blocks):
            shapes += _block_shapes(f"{prefix}.blocks.{b}", dd, ratio)
        shapes += _norm_shapes(f"{prefix}.norm", dd)
        shapes += [(f"{prefix}.head.w", (dd, config.patch_dim(i))), (f"{prefix}.head.b", (config.patch_dim(i),))]

    return OrderedDict(shapes)


def _initial_value(name: str, shape: Shape, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape)
    if leaf in ("bias", "b", "b_1", "b_2"):
        return np.zeros(shape)
    if len(shape) == 1:
        return rng.normal(0.0, TOKEN_STD, size=shape)
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Ordered name -> Tensor table with typed views for the blocks."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    # --- mapping protocol ---
    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def dtype(self) -> str:
        return next(iter(self.tensors.values())).dtype

    @property
    def num_scalars(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def add(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(np.asarray(value, dtype=resolve_dtype(self.dtype)), requires_grad=True, name=name)
        self.tensors[name] = tensor
        return tensor

    def to_dtype(self, dtype: str) -> "ModelParams":
        target = resolve_dtype(dtype)
        tensors = OrderedDict(
            (name, Tensor(t.data.astype(target, copy=True), requires_grad=True, name=name))
            for name, t in self.tensors.items()
        )
        return ModelParams(self.config, tensors)

    def copy(self) -> "ModelParams":
        return self.to_dtype(self.dtype)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def freeze(self, names: Optional[List[str]] = None) -> None:
        for name in names if names is not None else self.tensors:
            self.tensors[name].requires_grad = False

    # --- typed views ---
    def norm(self, prefix: str) -> NormParams:
        return NormParams(self[f"{prefix}.gain"], self[f"{prefix}.bias"])

    def attention(self, prefix: str, heads: int) -> AttentionParams:
        return AttentionParams(
            self[f"{prefix}.w_q"], self[f"{prefix}.w_k"], self[f"{prefix}.w_v"], self[f"{prefix}.w_o"], heads
        )

    def mlp(self, prefix: str) -> MlpParams:
        return MlpParams(self[f"{prefix}.w_1"], self[f"{prefix}.b_1"], self[f"{prefix}.w_2"], self[f"{prefix}.b_2"])

    def block(self, prefix: str, heads: int) -> BlockParams:
        return BlockParams(
            attention=self.attention(f"{prefix}.attn", heads),
            mlp=self.mlp(f"{prefix}.mlp"),
            norm1=self.norm(f"{prefix}.norm1"),
            norm2=self.norm(f"{prefix}.norm2"),
            norm_y=self.norm(f"{prefix}.norm_y") if f"{prefix}.norm_y.gain" in self else None,
            attention_rev=self.attention(f"{prefix}.attn_rev", heads) if f"{prefix}.attn_rev.w_q" in self else None,
            eps=self.config.ln_eps,
        )

    def encoder_blocks(self) -> List[BlockParams]:
        count = self.config.N - 1 if self.config.variant == "xaed" else self.config.N
        return [self.block(f"encoder.blocks.{b}", self.config.h) for b in range(count)]

    def decoder_blocks(self, modality: int) -> List[BlockParams]:
        count = self.config.N_dec if self.config.variant == "early_concat" else self.config.N_dec - 1
        return [self.block(f"decoder_{modality}.blocks.{b}", self.config.h_dec) for b in range(count)]

    def with_zeroed(self, substrings: List[str]) -> "ModelParams":
        """Copy with every parameter whose name contains one of `substrings` set to zero."""
        clone = self.copy()
        for name, tensor in clone.items():
            if any(s in name for s in substrings):
                tensor.data[...] = 0.0
        return clone


def init_params(config: ModelConfig, rng: np.random.Generator, dtype: str = "f32") -> ModelParams:
    """Xavier-uniform weights, zero biases, unit norm gains, N(0, 0.02) tokens."""
    target = resolve_dtype(dtype)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in param_shapes(config).items():
        value = _initial_value(name, shape, rng).astype(target)
        tensors[name] = Tensor(value, requires_grad=True, name=name)
    params = ModelParams(config, tensors)
    logger.info(f"Initialized {config.variant} model: {len(params)} tensors, {params.num_scalars} scalars")
    return params


def params_from_arrays(config: ModelConfig, arrays: Dict[str, np.ndarray]) -> ModelParams:
    tensors = OrderedDict(
        (name, Tensor(np.array(arrays[name], copy=True), requires_grad=True, name=name))
        for name in param_shapes(config)
    )
    return ModelParams(config, tensors)
