"""Cell update semantics: branch selection, masking, gradients, LSTM-like limit."""

import numpy as np
import numpy.testing as npt
import pytest

from hman import autodiff as ad
from hman import cell as hc
from hman.autodiff import ContractError, DimensionError, Tensor
from hman.gradcheck import check_gradients

HIDDEN = 4
BELOW = 3


def make_params(rng, above=True):
    return hc.init_layer_params(HIDDEN, below_dim=BELOW,
                                above_dim=HIDDEN if above else None, rng=rng)


def make_inputs(rng):
    prev = hc.LayerState(
        c=Tensor(rng.normal(size=(1, HIDDEN))),
        h=Tensor(rng.normal(size=(1, HIDDEN))),
        z=Tensor([[0.0]]),
    )
    below_h = Tensor(rng.normal(size=(1, BELOW)))
    above_h = Tensor(rng.normal(size=(1, HIDDEN)))
    return prev, below_h, above_h


def manual_gates(params, prev_h, prev_z, below_h, below_z, above_h):
    """Independent recomputation of the stacked pre-activation and gates."""
    s = prev_h @ params.u_rec.data + (below_z * below_h) @ params.w_bot.data + params.bias.data
    if params.u_top is not None:
        s = s + (prev_z * above_h) @ params.u_top.data

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    i = sig(s[:, :HIDDEN])
    f = sig(s[:, HIDDEN:2 * HIDDEN])
    o = sig(s[:, 2 * HIDDEN:3 * HIDDEN])
    g = np.tanh(s[:, 3 * HIDDEN:4 * HIDDEN])
    z_pre = s[:, 4 * HIDDEN:]
    return i, f, o, g, z_pre


def run_step(prev, below_h, below_z, above_h, params, **kw):
    kw.setdefault("noise", hc.BoundaryNoise.sample((1, 1), np.random.default_rng(0)))
    return hc.step(prev, below_h, Tensor([[below_z]]), above_h, params, **kw)


class TestBranchSemantics:
    """Exhaustive over (z_prev, z_below): exactly one update rule fires."""

    def test_copy_is_bitwise_carry_over(self):
        rng = np.random.default_rng(1)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        prev.z = Tensor([[0.0]])
        state = run_step(prev, below_h, 0.0, above_h, params)
        assert np.array_equal(state.c.data, prev.c.data)
        assert np.array_equal(state.h.data, prev.h.data)

    def test_update_matches_gate_formula(self):
        rng = np.random.default_rng(2)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        state = run_step(prev, below_h, 1.0, above_h, params)
        i, f, o, g, _ = manual_gates(params, prev.h.data, 0.0, below_h.data, 1.0, above_h.data)
        expected_c = f * prev.c.data + i * g
        npt.assert_allclose(state.c.data, expected_c, atol=1e-12)
        npt.assert_allclose(state.h.data, o * np.tanh(expected_c), atol=1e-12)

    @pytest.mark.parametrize("below_z", [0.0, 1.0])
    def test_flush_rebuilds_memory(self, below_z):
        rng = np.random.default_rng(3)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        prev.z = Tensor([[1.0]])
        state = run_step(prev, below_h, below_z, above_h, params)
        i, _, o, g, _ = manual_gates(params, prev.h.data, 1.0, below_h.data, below_z, above_h.data)
        npt.assert_allclose(state.c.data, i * g, atol=1e-12)
        npt.assert_allclose(state.h.data, o * np.tanh(i * g), atol=1e-12)

    def test_flush_is_independent_of_previous_memory(self):
        rng = np.random.default_rng(4)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        prev.z = Tensor([[1.0]])
        first = run_step(prev, below_h, 1.0, above_h, params)
        prev.c = Tensor(rng.normal(scale=100.0, size=(1, HIDDEN)))
        second = run_step(prev, below_h, 1.0, above_h, params)
        assert np.array_equal(first.c.data, second.c.data)
        assert np.array_equal(first.h.data, second.h.data)

    def test_literal_hidden_rule_drops_tanh(self):
        rng = np.random.default_rng(5)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        state = run_step(prev, below_h, 1.0, above_h, params, hidden_tanh=False)
        i, f, o, g, _ = manual_gates(params, prev.h.data, 0.0, below_h.data, 1.0, above_h.data)
        expected_c = f * prev.c.data + i * g
        npt.assert_allclose(state.h.data, o * expected_c, atol=1e-12)


class TestForcedGates:
    def _forced_params(self, rng, i_bias, f_bias):
        params = make_params(rng)
        params.bias.data[0, :HIDDEN] = i_bias
        params.bias.data[0, HIDDEN:2 * HIDDEN] = f_bias
        # kill every weight into the i and f slices so the bias decides alone
        for m in (params.u_rec, params.u_top, params.w_bot):
            m.data[:, :2 * HIDDEN] = 0.0
        return params

    def test_flush_with_closed_input_gate_zeroes_memory(self):
        rng = np.random.default_rng(6)
        params = self._forced_params(rng, i_bias=-50.0, f_bias=0.0)
        prev, below_h, above_h = make_inputs(rng)
        prev.c = Tensor(rng.normal(scale=10.0, size=(1, HIDDEN)))
        prev.z = Tensor([[1.0]])
        state = run_step(prev, below_h, 1.0, above_h, params)
        npt.assert_allclose(state.c.data, 0.0, atol=1e-12)

    def test_update_with_open_forget_closed_input_keeps_memory(self):
        rng = np.random.default_rng(7)
        params = self._forced_params(rng, i_bias=-50.0, f_bias=50.0)
        prev, below_h, above_h = make_inputs(rng)
        state = run_step(prev, below_h, 1.0, above_h, params)
        npt.assert_allclose(state.c.data, prev.c.data, atol=1e-12)


class TestGradientFlow:
    def test_copy_contributes_zero_parameter_gradient(self):
        rng = np.random.default_rng(8)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        state = run_step(prev, below_h, 0.0, above_h, params)
        ad.backward(ad.sum_(state.c * state.c) + ad.sum_(state.h))
        for p in params.tensors():
            assert p.grad is None or not np.any(p.grad)

    def test_update_and_flush_do_reach_parameters(self):
        rng = np.random.default_rng(9)
        for z_prev, below_z in ((0.0, 1.0), (1.0, 0.0)):
            params = make_params(rng)
            prev, below_h, above_h = make_inputs(rng)
            prev.z = Tensor([[z_prev]])
            state = run_step(prev, below_h, below_z, above_h, params)
            ad.backward(ad.sum_(state.c * state.c) + ad.sum_(state.h))
            assert np.any(params.u_rec.grad)

    def test_bottom_up_contribution_masked_when_lower_boundary_off(self):
        rng = np.random.default_rng(10)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        prev.z = Tensor([[1.0]])  # FLUSH: state recomputes, bottom-up masked
        noise = hc.BoundaryNoise.sample((1, 1), np.random.default_rng(0))
        first = run_step(prev, below_h, 0.0, above_h, params, noise=noise)
        other = Tensor(rng.normal(scale=50.0, size=(1, BELOW)))
        second = run_step(prev, other, 0.0, above_h, params, noise=noise)
        assert np.array_equal(first.c.data, second.c.data)
        assert np.array_equal(first.h.data, second.h.data)
        assert np.array_equal(first.z.data, second.z.data)

    def test_chained_steps_match_finite_differences(self):
        rng = np.random.default_rng(11)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        prev.h.requires_grad = True
        n1 = hc.BoundaryNoise.sample((1, 1), rng)
        n2 = hc.BoundaryNoise.sample((1, 1), rng)

        def build():
            s1 = hc.step(prev, below_h, Tensor([[1.0]]), above_h, params,
                         noise=n1, soft_boundaries=True)
            s2 = hc.step(s1, below_h, Tensor([[1.0]]), above_h, params,
                         noise=n2, soft_boundaries=True)
            return ad.sum_(s2.h * s2.h) + ad.sum_(s2.c)

        worst = check_gradients(build, params.tensors() + [prev.h])
        assert worst < 1e-4


class TestLstmLikeLimit:
    def test_all_boundaries_forced_on_single_layer(self):
        # hand-rolled oracle: with every z at 1 the cell flushes each step,
        # so c = i*g and h = o*tanh(c) from the recurrent+input pre-activation
        rng = np.random.default_rng(12)
        params = make_params(rng, above=False)
        state = hc.initial_state(HIDDEN, batch=1)
        state.z = Tensor([[1.0]])
        inputs = [Tensor(rng.normal(size=(1, BELOW))) for _ in range(4)]

        oracle_h = np.zeros((1, HIDDEN))
        for x in inputs:
            state = hc.step(state, x, Tensor([[1.0]]), None, params, force_z=1.0)
            i, _, o, g, _ = manual_gates(params, oracle_h, 1.0, x.data, 1.0, None)
            oracle_c = i * g
            oracle_h = o * np.tanh(oracle_c)
            npt.assert_allclose(state.c.data, oracle_c, atol=1e-12)
            npt.assert_allclose(state.h.data, oracle_h, atol=1e-12)
            assert state.z.data[0, 0] == 1.0


class TestContracts:
    def test_non_binary_boundary_rejected(self):
        rng = np.random.default_rng(13)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        prev.z = Tensor([[0.5]])
        with pytest.raises(ContractError, match="0/1"):
            run_step(prev, below_h, 1.0, above_h, params)
        prev.z = Tensor([[0.0]])
        with pytest.raises(ContractError, match="0/1"):
            run_step(prev, below_h, 0.3, above_h, params)

    def test_shape_mismatch_is_dimension_error(self):
        rng = np.random.default_rng(14)
        params = make_params(rng)
        prev, _, above_h = make_inputs(rng)
        with pytest.raises(DimensionError):
            run_step(prev, Tensor(rng.normal(size=(1, BELOW + 2))), 1.0, above_h, params)

    def test_missing_noise_and_rng_rejected(self):
        rng = np.random.default_rng(15)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        with pytest.raises(ContractError, match="rng"):
            hc.step(prev, below_h, Tensor([[1.0]]), above_h, params)

    def test_deterministic_mode_is_reproducible_and_noise_free(self):
        rng = np.random.default_rng(16)
        params = make_params(rng)
        prev, below_h, above_h = make_inputs(rng)
        a = hc.step(prev, below_h, Tensor([[1.0]]), above_h, params, deterministic=True)
        b = hc.step(prev, below_h, Tensor([[1.0]]), above_h, params, deterministic=True)
        assert np.array_equal(a.c.data, b.c.data)
        assert np.array_equal(a.z.data, b.z.data)
        _, _, _, _, z_pre = manual_gates(params, prev.h.data, 0.0, below_h.data, 1.0, above_h.data)
        expected_z = 1.0 if 1.0 / (1.0 + np.exp(-z_pre[0, 0])) >= 0.5 else 0.0
        assert a.z.data[0, 0] == expected_z
