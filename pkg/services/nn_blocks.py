"""
Transformer building blocks: multi-head attention (self and cross), the
token-wise MLP, the pre-norm encoder block and the two cross-attention
fusion blocks used for early fusion (encoder side) and feature-level fusion
(decoder side).

All blocks are pure functions of (inputs, params).
"""
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

import functional as F
from errors import ShapeError
from tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    h: int

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_q(self) -> int:
        return self.d // self.h


@dataclass
class MlpParams:
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class BlockParams:
    """
    Parameters of one block. `norm_y` normalizes the key/value source of the
    cross-attended blocks; `attention_rev` is set only when the two
    directions of the encoder fusion block have separate projections.
    """
    attention: AttentionParams
    mlp: MlpParams
    norm1: NormParams
    norm2: NormParams
    norm_y: Optional[NormParams] = None
    attention_rev: Optional[AttentionParams] = None
    eps: float = 1e-6


# --- Attention-weight side channel (diagnostics only) ---

_capture = threading.local()


@contextmanager
def capture_attention() -> Iterator[List[Tuple[str, np.ndarray]]]:
    """Collect (tag, weights[h, T_q, T_kv]) for every tagged attention call."""
    records: List[Tuple[str, np.ndarray]] = []
    previous = getattr(_capture, "records", None)
    _capture.records = records
    try:
        yield records
    finally:
        _capture.records = previous


def _record_attention(tag: Optional[str], weights: Tensor) -> None:
    records = getattr(_capture, "records", None)
    if records is not None and tag is not None:
        records.append((tag, weights.data.copy()))


def _norm(x: Tensor, p: NormParams, eps: float) -> Tensor:
    return F.layer_norm(x, p.gain, p.bias, eps)


def multi_head_attention(q_src: Tensor, kv_src: Tensor, p: AttentionParams, tag: Optional[str] = None) -> Tensor:
    """Softmax(Q_x K_y^T / sqrt(d_q)) V_y per head, heads concatenated, then W_o."""
    if q_src.ndim != 2 or kv_src.ndim != 2:
        raise ShapeError(f"attention expects [T, d] inputs, got {q_src.shape} and {kv_src.shape}")
    d = p.d
    if q_src.shape[1] != d or kv_src.shape[1] != d:
        raise ShapeError(f"attention width {d} does not match inputs {q_src.shape} / {kv_src.shape}")
    if d % p.h:
        raise ShapeError(f"width {d} is not divisible by {p.h} heads")

    t_q, t_kv, d_q = q_src.shape[0], kv_src.shape[0], p.d_q
    q = F.permute(F.reshape(F.matmul(q_src, p.w_q), (t_q, p.h, d_q)), (1, 0, 2))
    k = F.permute(F.reshape(F.matmul(kv_src, p.w_k), (t_kv, p.h, d_q)), (1, 0, 2))
    v = F.permute(F.reshape(F.matmul(kv_src, p.w_v), (t_kv, p.h, d_q)), (1, 0, 2))

    scores = F.scale(F.matmul(q, F.transpose(k)), 1.0 / math.sqrt(d_q))
    weights = F.softmax(scores, axis=-1)
    _record_attention(tag, weights)

    heads = F.matmul(weights, v)
    merged = F.reshape(F.permute(heads, (1, 0, 2)), (t_q, d))
    return F.matmul(merged, p.w_o)


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    """W_2 gelu(W_1 x + b_1) + b_2, token-wise."""
    return F.linear(F.gelu(F.linear(x, p.w_1, p.b_1)), p.w_2, p.b_2)


def transformer_block(x: Tensor, p: BlockParams, tag: Optional[str] = None) -> Tensor:
    normed = _norm(x, p.norm1, p.eps)
    x = F.add(x, multi_head_attention(normed, normed, p.attention, tag=tag))
    return F.add(x, mlp_forward(_norm(x, p.norm2, p.eps), p.mlp))


def xattn_encoder_block(x: Tensor, y: Tensor, p: BlockParams, tag: Optional[str] = None) -> Tensor:
    """
    fus(x, y) = (x ⊕ y) + (CA(x, y) ⊕ CA(y, x)); output fus + MLP(fus).

    `norm1` normalizes x tokens and `norm_y` normalizes y tokens wherever they
    enter an attention call.
    """
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"fusion block expects [T, d] inputs, got {x.shape} and {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"modality widths differ: {x.shape[1]} vs {y.shape[1]}")
    if p.norm_y is None:
        raise ShapeError("fusion block parameters have no norm_y")

    x_n = _norm(x, p.norm1, p.eps)
    y_n = _norm(y, p.norm_y, p.eps)
    reverse = p.attention_rev if p.attention_rev is not None else p.attention
    ca_xy = multi_head_attention(x_n, y_n, p.attention, tag=f"{tag}.ca_xy" if tag else None)
    ca_yx = multi_head_attention(y_n, x_n, reverse, tag=f"{tag}.ca_yx" if tag else None)

    fus = F.add(F.concat([x, y], axis=0), F.concat([ca_xy, ca_yx], axis=0))
    return F.add(fus, mlp_forward(_norm(fus, p.norm2, p.eps), p.mlp))


def xattn_decoder_block(z_i: Tensor, z_j: Tensor, p: BlockParams, tag: Optional[str] = None) -> Tensor:
    """z× = z_i + CA(z_i, z_j); output z× + MLP(z×). Only modality i's tokens come out."""
    if z_i.ndim != 2 or z_j.ndim != 2 or z_i.shape[1] != z_j.shape[1]:
        raise ShapeError(f"decoder fusion widths differ: {z_i.shape} vs {z_j.shape}")
    if p.norm_y is None:
        raise ShapeError("decoder fusion block parameters have no norm_y")

    ca = multi_head_attention(_norm(z_i, p.norm1, p.eps), _norm(z_j, p.norm_y, p.eps), p.attention, tag=tag)
    z_x = F.add(z_i, ca)
    return F.add(z_x, mlp_forward(_norm(z_x, p.norm2, p.eps), p.mlp))


def within_modality_mass(weights: np.ndarray, n_first: int, n_second: int) -> np.ndarray:
    """
    Per-head mean fraction of attention mass that stays inside the query's
    own modality. Queries and keys are laid out [first | second | extra...];
    queries outside the two modality ranges (e.g. a global token) are ignored.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 2:
        weights = weights[None]
    first = slice(0, n_first)
    second = slice(n_first, n_first + n_second)
    own_first = weights[:, first, first].sum(axis=-1)
    own_second = weights[:, second, second].sum(axis=-1)
    return np.concatenate([own_first, own_second], axis=1).mean(axis=1)
