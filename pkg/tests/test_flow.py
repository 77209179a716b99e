import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivnac import autodiff as ad
from ivnac.autodiff import Tape, Tensor
from ivnac.checks import gradient_check, invertibility_trials
from ivnac.errors import ContractError, DimensionError, InversionError
from ivnac.flow import (
    ActNorm,
    AffineCoupling,
    FlowConfig,
    FlowModel,
    InvConv1x1,
    actnorm_apply,
    actnorm_init,
    augment,
    coupling_forward,
    coupling_inverse,
    extract_ct,
    invconv_apply,
    model_forward,
    model_inverse,
    random_model,
)


def small_config(**kw):
    base = dict(n_blocks=2, channels=2, hidden=4)
    base.update(kw)
    return FlowConfig(**base)


class TestAugment:
    def test_replicates(self, rng):
        x = rng.standard_normal((2, 1, 5, 5))
        a = augment(Tensor(x), 4)
        assert a.shape == (2, 4, 5, 5)
        for c in range(4):
            np.testing.assert_array_equal(a.data[:, c], x[:, 0].astype(np.float32))

    @pytest.mark.parametrize("c", [0, 1, 3])
    def test_bad_width(self, c):
        with pytest.raises(ContractError):
            augment(Tensor(np.zeros((1, 1, 2, 2))), c)

    def test_extract_ct(self, rng):
        y = Tensor(rng.standard_normal((1, 4, 3, 3)))
        out = extract_ct(y)
        np.testing.assert_array_equal(out.ct.data, y.data[:, :1])
        np.testing.assert_array_equal(out.z.data, y.data[:, 1:])
        np.testing.assert_array_equal(out.joined().data, y.data)


class TestCoupling:
    def test_matches_formula(self, rng, f64):
        layer = AffineCoupling(2, 4, rng, scale_clamp=2.0)
        for _, net in layer.subnets():
            net.weights[-1][...] = rng.standard_normal(net.weights[-1].shape) * 0.5
        x1 = Tensor(rng.standard_normal((1, 1, 6, 6)))
        x2 = Tensor(rng.standard_normal((1, 1, 6, 6)))
        y1, y2 = coupling_forward(x1, x2, layer)

        def clamp(s):
            return 2.0 * np.tanh(s / 2.0)

        e1 = x1.data * np.exp(clamp(layer.s1(x2).data)) + layer.t1(x2).data
        e2 = x2.data * np.exp(clamp(layer.s2(Tensor(e1)).data)) + layer.t2(Tensor(e1)).data
        np.testing.assert_allclose(y1.data, e1, atol=1e-12)
        np.testing.assert_allclose(y2.data, e2, atol=1e-12)
        r1, r2 = coupling_inverse(y1, y2, layer)
        np.testing.assert_allclose(r1.data, x1.data, atol=1e-12)
        np.testing.assert_allclose(r2.data, x2.data, atol=1e-12)

    def test_log_scale_clamped(self, rng):
        layer = AffineCoupling(2, 4, rng, scale_clamp=1.5)
        s = layer.log_scale(Tensor(np.linspace(-100, 100, 16).reshape(1, 1, 4, 4)))
        assert np.abs(s.data).max() <= 1.5

    def test_fresh_coupling_is_identity(self, rng):
        layer = AffineCoupling(2, 4, rng)
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        np.testing.assert_array_equal(layer.forward(x).data, x.data)

    def test_odd_channels_rejected(self, rng):
        with pytest.raises(DimensionError):
            AffineCoupling(3, 4, rng)


class TestActNorm:
    def test_data_init_standardizes(self, rng):
        layer = ActNorm(2)
        x = Tensor(rng.normal(3.0, 2.0, (4, 2, 8, 8)))
        actnorm_init(layer, x)
        y = actnorm_apply(x, layer).data.astype(np.float64)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.std(axis=(0, 2, 3)), 1.0, atol=1e-4)
        back = actnorm_apply(Tensor(y), layer, "inverse").data
        np.testing.assert_allclose(back, x.data, rtol=1e-5, atol=1e-5)

    def test_constant_channel(self):
        layer = ActNorm(2)
        x = np.ones((1, 2, 3, 3))
        layer.initialize(x)
        assert np.isfinite(layer.scale).all()
        np.testing.assert_allclose(actnorm_apply(Tensor(x), layer).data, 0.0, atol=1e-6)

    def test_training_requires_init(self):
        with pytest.raises(ContractError):
            ActNorm(2).forward(Tensor(np.ones((1, 2, 2, 2))), Tape())

    def test_zero_scale_rejected(self):
        layer = ActNorm(2)
        layer.initialized = True
        layer.scale[0, 1] = 0
        with pytest.raises(ContractError):
            layer.forward(Tensor(np.ones((1, 2, 2, 2))))

    def test_bad_direction(self):
        with pytest.raises(ContractError):
            actnorm_apply(Tensor(np.ones((1, 2, 2, 2))), ActNorm(2), "sideways")


class TestInvConv:
    def test_initial_matrix_orthogonal(self, rng):
        w = InvConv1x1(4, rng).matrix.astype(np.float64)
        np.testing.assert_allclose(w @ w.T, np.eye(4), atol=1e-6)

    def test_roundtrip(self, rng):
        layer = InvConv1x1(2, rng)
        x = Tensor(rng.standard_normal((2, 2, 4, 4)))
        y = invconv_apply(x, layer)
        np.testing.assert_allclose(invconv_apply(y, layer, "inverse").data, x.data, atol=1e-6)
        expect = np.einsum("oc,nchw->nohw", layer.matrix, x.data)
        np.testing.assert_allclose(y.data, expect, atol=1e-6)

    def test_singular_matrix_names_block(self, rng):
        model = FlowModel(small_config(), seed=0)
        model.blocks[1].invconv.weight[...] = np.array([[1.0, 2.0], [2.0, 4.0]]).reshape(2, 2, 1, 1)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        with pytest.raises(InversionError) as info:
            model.inverse(x)
        assert info.value.block == 1
        assert "block 1" in str(info.value)

    def test_cache_tracks_updates(self, rng):
        layer = InvConv1x1(2, rng)
        first = layer.inverse_matrix().copy()
        layer.weight *= 2.0
        np.testing.assert_allclose(layer.inverse_matrix(), first / 2.0, rtol=1e-6)


class TestModel:
    def test_identity_init_is_identity(self, rng):
        model = FlowModel(FlowConfig(), init="identity")
        x = Tensor(rng.standard_normal((1, 2, 16, 16)))
        np.testing.assert_array_equal(model_forward(x, model).data, x.data)
        np.testing.assert_array_equal(model_inverse(x, model).data, x.data)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), blocks=st.integers(1, 4), half=st.integers(1, 2), size=st.integers(3, 12))
    def test_bijective_random_models(self, seed, blocks, half, size):
        model = random_model(FlowConfig(n_blocks=blocks, channels=2 * half, hidden=4), seed=seed)
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 2 * half, size, size)))
        np.testing.assert_allclose(model.inverse(model.forward(x)).data, x.data, atol=1e-4)
        np.testing.assert_allclose(model.forward(model.inverse(x)).data, x.data, atol=1e-4)

    def test_shape_preserving(self, rng):
        model = random_model(small_config(channels=4), seed=3)
        x = Tensor(rng.standard_normal((3, 4, 7, 9)))
        assert model.forward(x).shape == x.shape

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            FlowModel(small_config()).forward(Tensor(np.zeros((1, 4, 4, 4))))

    def test_seeded_init_deterministic(self):
        a, b = FlowModel(small_config(), seed=5), FlowModel(small_config(), seed=5)
        for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa, pb)

    def test_parameter_order(self):
        names = [n for n, _ in FlowModel(small_config()).parameters()]
        block0 = [n for n in names if n.startswith("block0.")]
        assert block0[:3] == ["block0.actnorm.scale", "block0.actnorm.bias", "block0.invconv.weight"]
        subnet_order = [n.split(".")[2] for n in block0[3:]]
        assert subnet_order == sorted(subnet_order, key=["s1", "t1", "s2", "t2"].index)
        assert block0[3:5] == ["block0.coupling.s1.conv0.weight", "block0.coupling.s1.conv0.bias"]
        assert names.index("block1.actnorm.scale") == len(block0)

    def test_dense_channel_plan(self):
        net = FlowModel(FlowConfig(hidden=8)).blocks[0].coupling.s1
        shapes = [w.shape[:2] for w in net.weights]
        assert shapes == [(8, 1), (8, 9), (8, 17), (8, 25), (1, 33)]

    def test_chain_channel_plan(self):
        net = FlowModel(FlowConfig(hidden=8, dense=False)).blocks[0].coupling.s1
        shapes = [w.shape[:2] for w in net.weights]
        assert shapes == [(8, 1), (8, 8), (8, 8), (8, 8), (1, 8)]

    def test_dense_block_sees_input(self, rng):
        """Only the last layer is nonzero, so the output is a conv of the raw input alone."""
        net = FlowModel(FlowConfig(hidden=4), init="identity").blocks[0].coupling.s1
        net.weights[-1][0, 0] = rng.standard_normal((3, 3))
        x = Tensor(rng.standard_normal((1, 1, 6, 6)))
        expect = ad.conv2d(x, Tensor(net.weights[-1][:, :1]), padding=1).data
        np.testing.assert_allclose(net(x).data, expect, atol=1e-6)

    def test_data_init_marks_initialized(self, rng):
        model = FlowModel(small_config(), seed=0)
        assert not model.initialized
        model.data_init(augment(Tensor(rng.uniform(0, 1, (2, 1, 6, 6))), 2))
        assert model.initialized

    def test_astype(self):
        m = random_model(small_config(), seed=1).astype(np.float64)
        assert all(p.dtype == np.float64 for _, p in m.parameters())


class TestSuites:
    def test_invertibility_trials_small(self):
        res = invertibility_trials(5, size=16, seed=2)
        assert res.max_error < 1e-4

    def test_gradient_check_toy(self):
        errors = gradient_check(n_blocks=2, size=8, seed=0)
        assert len(errors) == len(FlowModel(small_config()).parameters())
        assert max(errors.values()) < 1e-4

    def test_gradient_through_inverse_branch(self, rng, f64):
        """Gradient of a loss on the inverse pass alone, against central differences."""
        from conftest import numerical_grad, rel_err

        model = random_model(small_config(n_blocks=1), seed=9)
        y = rng.standard_normal((1, 2, 5, 5))
        w = model.blocks[0].invconv.weight
        s = model.blocks[0].actnorm.scale

        def f():
            return float(np.sum(model.inverse(Tensor(y)).data ** 2))

        tape = Tape()
        out = model.inverse(Tensor(y), tape)
        g = ad.backward(ad.sum(ad.mul(out, out)))
        got = [g[tape.leaf(w)], g[tape.leaf(s)]]
        for a, b in zip(got, numerical_grad(f, [w, s])):
            assert rel_err(a, b) < 1e-6
