"""
Unit tests for the gradient checker and attention inspection.
"""
import numpy as np
import pytest

import functional as F
from models import init_params
from services.diagnostics_service import (CROSS_ATTENTION_TAGS, SELF_ATTENTION_TAG, GradCheckResult,
                                          check_gradients, inspect_attention, model_suite, run_grad_check)
from tests.utils.test_helpers import tiny_model


class TestGradCheck:
    """Test the finite-difference suites."""

    def test_op_suite_f64(self):
        """Test that every primitive passes in double precision."""
        report = run_grad_check("f64", suites=("op",))
        assert report.passed, report.to_text()
        assert {r.group for r in report.results} >= {"matmul", "softmax", "layer_norm", "gelu", "sigmoid_bce"}

    def test_block_suite_f64(self):
        """Test that every block passes in double precision."""
        report = run_grad_check("f64", suites=("block",))
        assert report.passed, report.to_text()
        assert "xattn_decoder" in {r.group for r in report.results}

    def test_op_suite_f32(self):
        """Test single-precision gradients against the f64 reference."""
        report = run_grad_check("f32", suites=("op",))
        assert report.tol == 1e-3
        assert report.passed, report.to_text()

    def test_model_suite_single_variant_fast(self):
        """Test the xaed end-to-end objectives on a handful of coordinates per tensor."""
        results = model_suite("f64", 1e-4, np.random.default_rng(0), max_coords=16, variants=("xaed",))
        failures = [r for r in results if not r.passed]
        assert not failures, failures
        assert {r.group for r in results} == {"xaed.pretrain_loss", "xaed.features[s2]"}
        assert {r.target for r in results} >= {"patch_embed_1.w", "encoder.xattn.attn.w_q", "decoder_2.head.w"}

    @pytest.mark.slow
    def test_model_suite_f64(self):
        """Test the end-to-end objectives of every variant."""
        report = run_grad_check("f64", suites=("model",))
        assert report.passed, report.to_text()
        groups = {r.group for r in report.results}
        assert "early_concat.pretrain_loss" in groups and "xad.features[s2]" in groups

    def test_wrong_backward_detected(self, mocker):
        """Test that a sign-flipped GELU gradient fails and is named."""
        original = F.Gelu.backward
        mocker.patch.object(F.Gelu, "backward", lambda self, grad: tuple(-g for g in original(self, grad)))
        report = run_grad_check("f64", suites=("op",))
        assert not report.passed
        assert [r.group for r in report.failures()] == ["gelu"]
        assert "FAILED op/gelu" in report.to_text()

    def test_unused_input_has_zero_gradient(self, rng):
        """Test that an input outside the graph checks against a zero reference."""
        results = check_gradients("op", "unused", lambda t: F.sum(t["a"]),
                                  {"a": rng.normal(size=3), "b": rng.normal(size=2)}, "f64", 1e-4, rng)
        assert all(r.passed for r in results)

    def test_non_finite_error_fails(self):
        """Test that a NaN relative error never passes."""
        assert not GradCheckResult("op", "x", "a", float("nan"), 1, 1e-4).passed


class TestInspectAttention:
    """Test attention capture and the within-modality mass."""

    @pytest.mark.parametrize("variant", ["xad", "xaed"])
    def test_rows_are_distributions(self, pair, variant):
        """Test that every captured map row sums to one."""
        config = tiny_model(variant)
        inspection = inspect_attention(pair, init_params(config, np.random.default_rng([0, 0])))
        tags = {m.tag for m in inspection.maps}
        assert SELF_ATTENTION_TAG in tags
        assert (set(CROSS_ATTENTION_TAGS) <= tags) == (variant == "xaed")
        for m in inspection.maps:
            assert m.weights.shape[0] == config.h
            np.testing.assert_allclose(m.weights.sum(axis=-1), 1.0, rtol=1e-5)

    def test_uniform_attention_matches_baseline(self, pair):
        """Test that zero query / key weights give exactly the baseline mass."""
        config = tiny_model("xaed")
        params = init_params(config, np.random.default_rng([0, 0])).with_zeroed(["w_q", "w_k"])
        inspection = inspect_attention(pair, params)
        T = config.num_patches
        assert inspection.uniform_baseline == pytest.approx(T / (2 * T + 1))
        np.testing.assert_allclose(inspection.within_modality_mass, inspection.uniform_baseline, rtol=1e-5)

    def test_early_concat_has_no_mass(self, pair):
        """Test that the fused-token variant reports no modality split."""
        inspection = inspect_attention(pair, init_params(tiny_model("early_concat"), np.random.default_rng([0, 0])))
        assert inspection.within_modality_mass is None
        assert inspection.uniform_baseline is None
        assert not any(m.tag in CROSS_ATTENTION_TAGS for m in inspection.maps)
