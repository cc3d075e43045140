"""
Finite-difference gradient checks and attention inspection.

The gradient suite runs three tiers on a minimal configuration: every
differentiable primitive, every transformer block and the end-to-end
pretraining / feature objectives of all three variants. Analytic gradients
are taken in the requested dtype; the finite-difference reference is always
evaluated on f64 copies.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

import functional as F
from models import ModelParams, init_params, param_shapes
from schemas import MaskPlan, ModelConfig
from services.fusmae_model import encode, encode_cls, forward_pretrain, sample_mask
from services.nn_blocks import (
    AttentionParams,
    BlockParams,
    MlpParams,
    NormParams,
    capture_attention,
    mlp_forward,
    multi_head_attention,
    transformer_block,
    within_modality_mass,
    xattn_decoder_block,
    xattn_encoder_block,
)
from services.synth_data import SamplePair
from tensor import Tape, Tensor, backward, finite_diff_grad, relative_error

logger = logging.getLogger(__name__)

Builder = Callable[[Dict[str, Tensor]], Tensor]

# Relative floor on gradient norms, as a fraction of the largest norm in a check group
GRAD_FLOOR_F64 = 1e-8
GRAD_FLOOR_F32 = 1e-5


def minimal_config(variant: str = "xaed", strategy: str = "independent") -> ModelConfig:
    return ModelConfig(H=8, W=8, C_1=2, C_2=3, P=4, N=2, d=8, d_dec=8, N_dec=2, h=2, h_dec=2,
                       mlp_ratio=2, variant=variant, strategy=strategy)


@dataclass
class GradCheckResult:
    suite: str
    group: str
    target: str
    rel_error: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error)) and self.rel_error < self.tol


@dataclass
class GradCheckReport:
    dtype: str
    tol: float
    results: List[GradCheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[GradCheckResult]:
        return [r for r in self.results if not r.passed]

    def max_by_group(self) -> Dict[Tuple[str, str], float]:
        out: Dict[Tuple[str, str], float] = {}
        for r in self.results:
            key = (r.suite, r.group)
            out[key] = max(out.get(key, 0.0), r.rel_error)
        return out

    def to_text(self) -> str:
        lines = [f"dtype={self.dtype} tol={self.tol:g} checks={len(self.results)} "
                 f"status={'PASS' if self.passed else 'FAIL'}"]
        for (suite, group), err in self.max_by_group().items():
            flag = "ok" if err < self.tol else "FAIL"
            lines.append(f"{suite:<6} {group:<34} max_rel_err={err:.3e} {flag}")
        for r in self.failures():
            lines.append(f"FAILED {r.suite}/{r.group}: {r.target} rel_err={r.rel_error:.3e}")
        return "\n".join(lines) + "\n"


def _pick_coords(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(size, size=min(size, count), replace=False))


def check_gradients(
    suite: str,
    group: str,
    build: Builder,
    inputs: Dict[str, np.ndarray],
    dtype: str,
    tol: float,
    rng: np.random.Generator,
    eps: float = 1e-6,
    coords_per_input: Optional[int] = None,
) -> List[GradCheckResult]:
    """
    Compare backward() against central differences for every named input.

    `build` maps a dict of named tensors to a scalar loss; it is called once
    on `dtype` copies under a tape and repeatedly on f64 copies for the
    reference.
    """
    analytic_inputs = {k: Tensor(np.array(v), dtype=dtype, requires_grad=True, name=k) for k, v in inputs.items()}
    with Tape():
        loss = build(analytic_inputs)
        grads = backward(loss)

    reference_inputs = {k: Tensor(np.array(v), dtype="f64", requires_grad=True, name=k) for k, v in inputs.items()}
    pairs = []
    for name, tensor in reference_inputs.items():
        size = tensor.data.size
        coords = None if coords_per_input is None or coords_per_input >= size else _pick_coords(size, coords_per_input, rng)
        numeric = finite_diff_grad(lambda _: build(reference_inputs), tensor, eps=eps, coords=coords)
        grad = grads.get(name)
        analytic = grad.data if grad is not None else np.zeros(tensor.shape)
        index = np.arange(size) if coords is None else coords
        pairs.append((name, analytic.reshape(-1)[index], numeric.data.reshape(-1)[index]))

    # Entries far below the group's gradient scale are compared against that scale
    scale = max([1.0] + [float(np.linalg.norm(b)) for _, _, b in pairs])
    floor = (GRAD_FLOOR_F64 if dtype == "f64" else GRAD_FLOOR_F32) * scale
    results = []
    for name, a, b in pairs:
        err = relative_error(a, b)
        denom = np.linalg.norm(a) + np.linalg.norm(b)
        if 0.0 < denom < floor:
            err = float(np.linalg.norm(a - b) / floor)
        results.append(GradCheckResult(suite=suite, group=group, target=name, rel_error=err,
                                       n_coords=int(a.size), tol=tol))
    return results


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return F.sum(F.mul(out, Tensor(weights.astype(out.data.dtype))))


# --- primitive tier ---

def op_suite(dtype: str, tol: float, rng: np.random.Generator) -> List[GradCheckResult]:
    def n(*shape):
        return rng.normal(size=shape)

    r23, r2x3x4 = n(2, 3), n(2, 3, 4)
    r4x2x3, r3x8, r3x3, r5x3, r2x4, r1x3, r3x4 = n(4, 2, 3), n(3, 8), n(3, 3), n(5, 3), n(2, 4), n(1, 3), n(3, 4)
    cases: List[Tuple[str, Builder, Dict[str, np.ndarray]]] = [
        ("add", lambda t: _weighted_sum(F.add(t["a"], t["b"]), r23), {"a": n(2, 3), "b": n(3)}),
        ("sub", lambda t: _weighted_sum(F.sub(t["a"], t["b"]), r23), {"a": n(2, 3), "b": n(2, 3)}),
        ("mul", lambda t: _weighted_sum(F.mul(t["a"], t["b"]), r23), {"a": n(2, 3), "b": n(3)}),
        ("scale", lambda t: _weighted_sum(F.scale(t["a"], -1.7), r23), {"a": n(2, 3)}),
        ("matmul", lambda t: _weighted_sum(F.matmul(t["a"], t["b"]), r2x3x4), {"a": n(2, 3, 5), "b": n(5, 4)}),
        ("permute", lambda t: _weighted_sum(F.permute(t["a"], (2, 0, 1)), r4x2x3), {"a": n(2, 3, 4)}),
        ("reshape", lambda t: _weighted_sum(F.reshape(t["a"], (3, 8)), r3x8), {"a": n(2, 3, 4)}),
        ("gather", lambda t: _weighted_sum(F.gather(t["a"], [2, 0, 2]), r3x3), {"a": n(4, 3)}),
        ("concat", lambda t: _weighted_sum(F.concat([t["a"], t["b"]], axis=0), r5x3), {"a": n(2, 3), "b": n(3, 3)}),
        ("sum", lambda t: _weighted_sum(F.sum(t["a"], axis=1), r2x4), {"a": n(2, 3, 4)}),
        ("mean", lambda t: _weighted_sum(F.mean(t["a"], axis=0, keepdims=True), r1x3), {"a": n(4, 3)}),
        ("softmax", lambda t: _weighted_sum(F.softmax(t["a"], axis=-1), r2x3x4), {"a": n(2, 3, 4)}),
        ("layer_norm", lambda t: _weighted_sum(F.layer_norm(t["x"], t["gain"], t["bias"]), r3x4),
         {"x": n(3, 4), "gain": 1.0 + 0.1 * n(4), "bias": n(4)}),
        ("gelu", lambda t: _weighted_sum(F.gelu(t["a"]), r23), {"a": n(2, 3)}),
    ]
    bce_targets = (rng.random((3, 4)) < 0.5).astype(np.float64)
    ce_targets = np.array([0, 2, 1])
    cases += [
        ("sigmoid_bce", lambda t: F.sigmoid_bce(t["logits"], bce_targets), {"logits": n(3, 4)}),
        ("smoothed_cross_entropy",
         lambda t: F.label_smoothed_cross_entropy(t["logits"], ce_targets, smoothing=0.1), {"logits": n(3, 4)}),
    ]
    results = []
    for op, build, inputs in cases:
        results += check_gradients("op", op, build, inputs, dtype, tol, rng)
    return results


# --- block tier ---

def _attention_inputs(prefix: str, d: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    scale = 1.0 / np.sqrt(d)
    return {f"{prefix}.{w}": rng.normal(scale=scale, size=(d, d)) for w in ("w_q", "w_k", "w_v", "w_o")}


def _attention(t: Dict[str, Tensor], prefix: str, h: int) -> AttentionParams:
    return AttentionParams(t[f"{prefix}.w_q"], t[f"{prefix}.w_k"], t[f"{prefix}.w_v"], t[f"{prefix}.w_o"], h)


def _block_inputs(d: int, rng: np.random.Generator, cross: bool = False, rev: bool = False) -> Dict[str, np.ndarray]:
    inputs = _attention_inputs("attn", d, rng)
    if rev:
        inputs.update(_attention_inputs("attn_rev", d, rng))
    norms = ("norm1", "norm2", "norm_y") if cross else ("norm1", "norm2")
    for norm in norms:
        inputs[f"{norm}.gain"] = 1.0 + 0.1 * rng.normal(size=d)
        inputs[f"{norm}.bias"] = 0.1 * rng.normal(size=d)
    inputs.update({
        "mlp.w_1": rng.normal(scale=1 / np.sqrt(d), size=(d, 2 * d)),
        "mlp.b_1": 0.1 * rng.normal(size=2 * d),
        "mlp.w_2": rng.normal(scale=1 / np.sqrt(2 * d), size=(2 * d, d)),
        "mlp.b_2": 0.1 * rng.normal(size=d),
    })
    return inputs


def _block(t: Dict[str, Tensor], h: int) -> BlockParams:
    return BlockParams(
        attention=_attention(t, "attn", h),
        mlp=MlpParams(t["mlp.w_1"], t["mlp.b_1"], t["mlp.w_2"], t["mlp.b_2"]),
        norm1=NormParams(t["norm1.gain"], t["norm1.bias"]),
        norm2=NormParams(t["norm2.gain"], t["norm2.bias"]),
        norm_y=NormParams(t["norm_y.gain"], t["norm_y.bias"]) if "norm_y.gain" in t else None,
        attention_rev=_attention(t, "attn_rev", h) if "attn_rev.w_q" in t else None,
    )


def block_suite(dtype: str, tol: float, rng: np.random.Generator) -> List[GradCheckResult]:
    d, h, tx, ty = 8, 2, 3, 4
    results = []

    inputs = {"x": rng.normal(size=(tx, d)), "y": rng.normal(size=(ty, d)), **_attention_inputs("attn", d, rng)}
    w = rng.normal(size=(tx, d))
    results += check_gradients("block", "cross_attention", lambda t: _weighted_sum(
        multi_head_attention(t["x"], t["y"], _attention(t, "attn", h)), w), inputs, dtype, tol, rng)

    mlp_inputs = {k: v for k, v in _block_inputs(d, rng).items() if k.startswith("mlp.")}
    mlp_inputs["x"] = rng.normal(size=(tx, d))
    results += check_gradients("block", "mlp", lambda t: _weighted_sum(
        mlp_forward(t["x"], MlpParams(t["mlp.w_1"], t["mlp.b_1"], t["mlp.w_2"], t["mlp.b_2"])), w), mlp_inputs,
        dtype, tol, rng)

    inputs = {"x": rng.normal(size=(tx, d)), **_block_inputs(d, rng)}
    results += check_gradients("block", "transformer_block", lambda t: _weighted_sum(
        transformer_block(t["x"], _block(t, h)), w), inputs, dtype, tol, rng)

    w_fused = rng.normal(size=(tx + ty, d))
    for rev, group in ((False, "xattn_encoder[shared]"), (True, "xattn_encoder[separate]")):
        inputs = {"x": rng.normal(size=(tx, d)), "y": rng.normal(size=(ty, d)), **_block_inputs(d, rng, cross=True, rev=rev)}
        results += check_gradients("block", group, lambda t: _weighted_sum(
            xattn_encoder_block(t["x"], t["y"], _block(t, h)), w_fused), inputs, dtype, tol, rng)

    inputs = {"z_i": rng.normal(size=(tx, d)), "z_j": rng.normal(size=(ty, d)), **_block_inputs(d, rng, cross=True)}
    results += check_gradients("block", "xattn_decoder", lambda t: _weighted_sum(
        xattn_decoder_block(t["z_i"], t["z_j"], _block(t, h)), w), inputs, dtype, tol, rng)
    return results


# --- end-to-end tier ---

def random_pair(config: ModelConfig, rng: np.random.Generator, K: int = 3) -> SamplePair:
    multilabel = np.zeros(K, dtype=np.uint8)
    multilabel[0] = 1
    return SamplePair(
        image_1=rng.normal(size=(config.H, config.W, config.C_1)).astype(np.float32),
        image_2=rng.normal(size=(config.H, config.W, config.C_2)).astype(np.float32),
        multilabel=multilabel,
        single_label=0,
    )


def _params_from(t: Dict[str, Tensor], config: ModelConfig) -> ModelParams:
    return ModelParams(config, OrderedDict((name, t[name]) for name in param_shapes(config)))


def model_suite(dtype: str, tol: float, rng: np.random.Generator, max_coords: int = 128,
                variants: Tuple[str, ...] = ("xaed", "xad", "early_concat")) -> List[GradCheckResult]:
    results = []
    for variant in variants:
        config = minimal_config(variant)
        params = init_params(config, rng, dtype="f64")
        # Perturb tokens and norms away from their init values
        inputs = {name: t.data + 0.05 * rng.normal(size=t.shape) for name, t in params.items()}
        pair = random_pair(config, rng)
        strategy = "consistent" if variant == "early_concat" else "independent"
        plan = sample_mask(config.num_patches, config.r, strategy, rng)
        per_input = max(1, max_coords // len(inputs))

        results += check_gradients(
            "model", f"{variant}.pretrain_loss",
            lambda t, c=config, p=pair, m=plan: forward_pretrain(p, _params_from(t, c), plan=m).loss,
            inputs, dtype, tol, rng, coords_per_input=per_input,
        )

        w = rng.normal(size=config.d)
        condition = "s1s2" if variant == "early_concat" else "s2"
        results += check_gradients(
            "model", f"{variant}.features[{condition}]",
            lambda t, c=config, p=pair, cond=condition: _weighted_sum(encode_cls(p, _params_from(t, c), cond), w),
            inputs, dtype, tol, rng, coords_per_input=per_input,
        )
    return results


def run_grad_check(dtype: str = "f64", tol: Optional[float] = None, seed: int = 0,
                   suites: Tuple[str, ...] = ("op", "block", "model")) -> GradCheckReport:
    tol = tol if tol is not None else (1e-4 if dtype == "f64" else 1e-3)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(dtype=dtype, tol=tol)
    if "op" in suites:
        report.results += op_suite(dtype, tol, rng)
    if "block" in suites:
        report.results += block_suite(dtype, tol, rng)
    if "model" in suites:
        report.results += model_suite(dtype, tol, rng)
    for failure in report.failures():
        logger.error(f"Gradient check failed: {failure.suite}/{failure.group} {failure.target} "
                     f"rel_err={failure.rel_error:.3e} (tol {tol:g})")
    logger.info(f"Gradient check {'passed' if report.passed else 'FAILED'}: {len(report.results)} checks at {dtype}")
    return report


# --- attention inspection ---

@dataclass
class AttentionMap:
    tag: str
    weights: np.ndarray  # [h, T_q, T_kv]


@dataclass
class AttentionInspection:
    maps: List[AttentionMap]
    self_attention_tag: str
    within_modality_mass: Optional[np.ndarray]  # per head
    uniform_baseline: Optional[float]
    n_first: int
    n_second: int


SELF_ATTENTION_TAG = "encoder.blocks.0"
CROSS_ATTENTION_TAGS = ("encoder.xattn.ca_xy", "encoder.xattn.ca_yx")


def inspect_attention(pair: SamplePair, params: ModelParams) -> AttentionInspection:
    """
    One unmasked forward; keep the fusion block's cross-attention maps (if
    any) and the first self-attention block, and measure how much attention
    mass stays inside each query's own modality.
    """
    config = params.config
    T = config.num_patches
    wanted = {SELF_ATTENTION_TAG, *CROSS_ATTENTION_TAGS}
    with capture_attention() as records:
        encode(pair, MaskPlan.unmasked(T), params)
    maps = [AttentionMap(tag, weights) for tag, weights in records if tag in wanted]

    self_tag = SELF_ATTENTION_TAG
    self_maps = [m.weights for m in maps if m.tag == self_tag]
    mass, baseline = None, None
    if config.variant != "early_concat" and self_maps:
        weights = self_maps[0]
        mass = within_modality_mass(weights, T, T)
        baseline = T / weights.shape[-1]
    elif config.variant == "early_concat":
        logger.info("early_concat has one token per patch position; within-modality mass is not defined")
    return AttentionInspection(maps=maps, self_attention_tag=self_tag, within_modality_mass=mass,
                               uniform_baseline=baseline, n_first=T, n_second=T)
