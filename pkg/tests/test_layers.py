import math

import numpy as np
import pytest

from mamba_va import tensor as tc
from mamba_va.errors import ConfigError, ShapeError
from mamba_va.gradcheck import check_mamba_block, check_model
from mamba_va.layers import (
    MambaConfig,
    MambaVA,
    TcnConfig,
    head_forward,
    init_params,
    mamba_block_forward,
    tcn_forward,
)
from mamba_va.tensor import Tensor

from conftest import tiny_configs


def _expected_count(tcn: TcnConfig, mamba: MambaConfig) -> int:
    h, k, d, e, n, w = tcn.hidden_dim, tcn.kernel_size, mamba.d_model, mamba.d_inner, mamba.state_dim, mamba.conv_width
    total = tcn.in_dim * h * k + h  # first conv
    total += (tcn.layers - 1) * (h * h * k + h)
    total += tcn.in_dim * h + h  # residual 1x1
    per_block = 2 * d + d * 2 * e + e * w + e + e * e + e + 2 * e * n + e * n + e + e * d
    total += mamba.n_layers * per_block
    total += 2 * d + d * 2 + 2  # final norm and head
    return total


class TestConfigs:
    def test_receptive_field(self):
        assert TcnConfig().receptive_field == 211

    def test_layer_dilation_mismatch(self):
        with pytest.raises(ConfigError):
            TcnConfig(layers=3)

    def test_width_mismatch(self, rng):
        with pytest.raises(ConfigError):
            init_params(TcnConfig(hidden_dim=16, in_dim=4), MambaConfig(d_model=8), rng)

    @pytest.mark.parametrize("tcn,mamba", [
        (TcnConfig(), MambaConfig()),
        (TcnConfig(in_dim=32, hidden_dim=64), MambaConfig(d_model=64)),
        tiny_configs(),
        (TcnConfig(in_dim=5, hidden_dim=6, layers=1, kernel_size=3, dilations=(1,)), MambaConfig(6, 1, 3, 2, 2)),
    ])
    def test_parameter_count(self, tcn, mamba):
        model = MambaVA.create(tcn, mamba, np.random.default_rng(0))
        assert model.num_parameters() == _expected_count(tcn, mamba)


class TestInit:
    def test_a_log_and_delta_ranges(self, rng):
        params = init_params(TcnConfig(in_dim=4, hidden_dim=16), MambaConfig(d_model=16), rng)
        a = -np.exp(params["mamba.0.A_log"].data)
        assert (a < 0).all()
        np.testing.assert_allclose(a[0], -np.arange(1, 9), rtol=1e-6)
        assert a.shape[1] == 8
        delta = tc.softplus(params["mamba.0.dt.bias"].data.astype(np.float64))
        assert (delta > 0).all()
        assert delta.min() >= 1e-3 * (1 - 1e-5) and delta.max() <= 1e-1 * (1 + 1e-5)

    def test_same_seed_same_params(self):
        tcn, mamba = tiny_configs()
        a = MambaVA.create(tcn, mamba, np.random.default_rng(3))
        b = MambaVA.create(tcn, mamba, np.random.default_rng(3))
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_mismatched_tensor_is_named(self, tiny_model):
        params = {k: v.copy() for k, v in tiny_model.params.items()}
        params["mamba.1.in_proj"] = Tensor(np.zeros((3, 3), np.float32))
        with pytest.raises(ShapeError, match="mamba.1.in_proj"):
            MambaVA(tiny_model.tcn, tiny_model.mamba, params)


class TestTcn:
    def test_default_output_shape(self, rng):
        tcn = TcnConfig()
        params = init_params(tcn, MambaConfig(), rng)
        for w in (1, 7):
            g, _ = tcn_forward(rng.standard_normal((1, w, 1024)).astype(np.float32), params, tcn)
            assert g.shape == (1, w, 256)

    def test_zero_in_zero_out(self, rng):
        tcn, mamba = tiny_configs()
        params = init_params(tcn, mamba, rng)
        g, _ = tcn_forward(np.zeros((2, 9, tcn.in_dim), np.float32), params, tcn)
        np.testing.assert_array_equal(g, 0.0)

    def test_measured_receptive_field(self):
        tcn = TcnConfig(in_dim=2, hidden_dim=4, dropout=0.0)
        params = init_params(tcn, MambaConfig(d_model=4), np.random.default_rng(0))
        for t in params.values():
            t.data[...] = np.abs(t.data) + 0.01  # keep ReLUs open so influence is visible
        t_len, at = 400, 50
        f = np.zeros((1, t_len, 2), np.float64)
        base, _ = tcn_forward(f, {k: Tensor(v.data.astype(np.float64)) for k, v in params.items()}, tcn)
        f[0, at] = 1.0
        bumped, _ = tcn_forward(f, {k: Tensor(v.data.astype(np.float64)) for k, v in params.items()}, tcn)
        changed = np.flatnonzero(np.abs(bumped - base)[0].max(axis=1) > 0)
        assert changed.min() == at
        assert changed.max() - at + 1 == 211


class TestMambaBlock:
    def test_zero_out_proj_is_identity(self, rng):
        tcn, mamba = tiny_configs()
        params = init_params(tcn, mamba, rng)
        x = rng.standard_normal((2, 6, mamba.d_model)).astype(np.float32)
        out, _ = mamba_block_forward(x, params, "mamba.0.", mamba)
        assert out.shape == x.shape
        np.testing.assert_array_equal(out, x)

    def test_single_step_formula(self, rng):
        mamba = MambaConfig(d_model=3, n_layers=1, state_dim=2, conv_width=4)
        params = init_params(TcnConfig(in_dim=2, hidden_dim=3, layers=1, kernel_size=3, dilations=(1,)), mamba, rng, np.float64)
        for k, t in params.items():
            if k.startswith("mamba.0."):
                t.data[...] = rng.standard_normal(t.shape) * 0.5
        p = {k[len("mamba.0."):]: v.data for k, v in params.items() if k.startswith("mamba.0.")}
        x = rng.standard_normal((1, 1, 3))

        u = x[0, 0] - x[0, 0].mean()
        u = u / math.sqrt(u @ u / 3 + 1e-5) * p["norm.weight"] + p["norm.bias"]
        xz = u @ p["in_proj"]
        xs, z = xz[:3], xz[3:]
        xa = tc.silu(p["conv.weight"][:, -1] * xs + p["conv.bias"])
        delta = np.log1p(np.exp(xa @ p["dt.weight"] + p["dt.bias"]))
        bvec, cvec = xa @ p["B.weight"], xa @ p["C.weight"]
        a = -np.exp(p["A_log"])
        h = np.expm1(delta[:, None] * a) / a * bvec[None, :] * xa[:, None]
        y = h @ cvec + p["D"] * xa
        expected = x[0, 0] + (y * tc.silu(z)) @ p["out_proj"]

        out, _ = mamba_block_forward(x, params, "mamba.0.", mamba)
        np.testing.assert_allclose(out[0, 0], expected, atol=1e-12)

    def test_gradcheck(self):
        assert check_mamba_block(np.random.default_rng(0)) < 1e-4


class TestHead:
    def _params(self, w, b):
        return {"head.weight": Tensor(np.asarray(w, np.float64)), "head.bias": Tensor(np.asarray(b, np.float64))}

    def test_zero_weights_zero_output(self, rng):
        out, _ = head_forward(rng.standard_normal((5, 4)), self._params(np.zeros((4, 2)), np.zeros(2)))
        np.testing.assert_array_equal(out, 0.0)

    def test_bounded(self, rng):
        out, _ = head_forward(rng.standard_normal((50, 4)) * 100, self._params(rng.standard_normal((4, 2)), np.zeros(2)))
        assert (np.abs(out) <= 1).all()

    def test_atanh_bias(self, rng):
        out, _ = head_forward(rng.standard_normal((5, 4)), self._params(np.zeros((4, 2)), [np.arctanh(0.5), np.arctanh(-0.5)]))
        np.testing.assert_allclose(out, np.tile([0.5, -0.5], (5, 1)), atol=1e-15)


class TestModel:
    def test_shapes(self, tiny_model, rng):
        assert tiny_model.predict(rng.standard_normal((11, 4))).shape == (11, 2)
        assert tiny_model.predict(rng.standard_normal((3, 11, 4))).shape == (3, 11, 2)

    def test_default_width_shape(self, rng):
        model = MambaVA.create(TcnConfig(hidden_dim=16), MambaConfig(d_model=16, n_layers=1), rng)
        assert model.predict(rng.standard_normal((6, 1024))).shape == (6, 2)

    def test_eval_mode_deterministic(self, tiny_model, rng):
        f = rng.standard_normal((2, 9, 4)).astype(np.float32)
        assert tiny_model.predict(f).tobytes() == tiny_model.predict(f).tobytes()

    def test_outputs_finite_and_bounded(self, tiny_model, rng):
        out = tiny_model.predict(rng.standard_normal((2, 40, 4)) * 50)
        assert np.isfinite(out).all() and (np.abs(out) <= 1).all()

    def test_end_to_end_causality(self, rng):
        tcn, mamba = tiny_configs()
        model = MambaVA.create(tcn, mamba, rng)
        for name, t in model.params.items():
            if name.endswith("out_proj"):
                t.data[...] = rng.standard_normal(t.shape) * 0.3
        f = rng.standard_normal((1, 30, 4)).astype(np.float32)
        base = model.predict(f)
        for t0 in (0, 13, 29):
            g = f.copy()
            g[0, t0 + 1 :] = rng.standard_normal(g[0, t0 + 1 :].shape) * 10
            assert np.array_equal(model.predict(g)[0, : t0 + 1], base[0, : t0 + 1])

    def test_dropout_only_in_training(self, rng):
        tcn, mamba = tiny_configs(dropout=0.5)
        model = MambaVA.create(tcn, mamba, rng)
        f = rng.standard_normal((1, 12, 4)).astype(np.float32)
        a = model.forward(f, training=True, rng=np.random.default_rng(1))[0]
        b = model.forward(f, training=True, rng=np.random.default_rng(2))[0]
        assert not np.array_equal(a, b)
        assert np.array_equal(model.predict(f), model.predict(f))

    def test_full_model_gradcheck(self):
        assert check_model(np.random.default_rng(0)) < 1e-3

    def test_config_items_round_trip(self, tiny_model):
        from mamba_va.layers import configs_from_items

        assert configs_from_items(tiny_model.config_items()) == (tiny_model.tcn, tiny_model.mamba)
