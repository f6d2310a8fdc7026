import math

import numpy as np
import pytest

from conftest import central_difference, perturb, rel_error, tiny_config
from seflow import tensor as T
from seflow.audio import AudioBuffer
from seflow.errors import ConfigError, ModelDegeneracyError, ShapeError
from seflow.flow import AffineCoupling, FlowConfig, FlowModel, InvConv1x1, LatentSample, enhance, nll_loss
from seflow.metrics import segmental_snr
from seflow.tensor import Tensor


def numerical_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of a flat map f: R^n -> R^n."""
    x = x.astype(np.float64).copy()
    n = x.size
    jac = np.empty((n, n))
    flat = x.reshape(-1)
    for i in range(n):
        old = flat[i]
        flat[i] = old + h
        fp = f(x).reshape(-1)
        flat[i] = old - h
        fm = f(x).reshape(-1)
        flat[i] = old
        jac[:, i] = (fp - fm) / (2 * h)
    return jac


class TestFlowConfig:
    def test_full_scale_schedule(self):
        cfg = FlowConfig.full()
        assert (cfg.n_blocks, cfg.group_size, cfg.wn_layers) == (16, 12, 8)
        assert (cfg.residual_channels, cfg.skip_channels) == (512, 256)
        assert (cfg.sigma_train, cfg.sigma_infer) == (1.0, 0.9)
        assert cfg.block_channels() == [12] * 4 + [10] * 4 + [8] * 4 + [6] * 4

    def test_desk_scale(self):
        assert FlowConfig.desk().block_channels() == [8] * 4 + [6] * 4

    def test_odd_channels_rejected(self):
        with pytest.raises(ConfigError):
            FlowConfig(group_size=8, early_channels=1)
        with pytest.raises(ConfigError):
            FlowConfig(group_size=4, n_blocks=12, early_every=4, early_channels=2)


class TestInvConv:
    def test_identity(self, rng):
        conv = InvConv1x1(4, rng, identity=True)
        x = Tensor(rng.standard_normal((2, 4, 10)))
        y, ld = conv.forward(x)
        np.testing.assert_array_equal(y.data, x.data)
        assert ld.item() == 0.0

    def test_scaled_identity_logdet(self, rng):
        conv = InvConv1x1(4, rng, identity=True)
        conv.weight.data = 2.0 * np.eye(4)
        _, ld = conv.forward(Tensor(rng.standard_normal((1, 4, 10))))
        assert ld.item() == pytest.approx(10 * 4 * math.log(2.0), rel=1e-14)

    def test_orthogonal_isometry(self, rng):
        conv = InvConv1x1(6, rng)
        x = Tensor(rng.standard_normal((1, 6, 10)))
        y, ld = conv.forward(x)
        assert abs(ld.item()) < 1e-12
        np.testing.assert_allclose(np.linalg.norm(y.data, axis=1), np.linalg.norm(x.data, axis=1), rtol=1e-12)

    @pytest.mark.parametrize("kind", ["identity", "double", "orthogonal"])
    def test_round_trip(self, rng, kind):
        conv = InvConv1x1(4, rng, identity=kind != "orthogonal")
        if kind == "double":
            conv.weight.data = 2.0 * np.eye(4)
        x = rng.standard_normal((2, 4, 10))
        y, _ = conv.forward(Tensor(x))
        assert np.max(np.abs(conv.inverse(y.data) - x)) < 1e-10

    def test_singular_flagged(self, rng):
        conv = InvConv1x1(3, rng)
        conv.weight.data = np.ones((3, 3))
        with pytest.raises(ModelDegeneracyError):
            conv.forward(Tensor(np.zeros((1, 3, 4))))
        with pytest.raises(ModelDegeneracyError):
            conv.inverse(np.zeros((1, 3, 4)))


class TestCoupling:
    def test_identity_at_init(self, rng):
        cpl = AffineCoupling(4, tiny_config(), rng)
        x = Tensor(rng.standard_normal((1, 4, 8)))
        y, ld = cpl.forward(x, Tensor(rng.standard_normal((1, 4, 8))))
        np.testing.assert_array_equal(y.data, x.data)
        assert ld.item() == 0.0

    def test_constant_log_scale(self, rng):
        cpl = AffineCoupling(4, tiny_config(), rng)
        cpl.wn.end.bias.data[:2] = math.log(2.0)
        x = np.concatenate([rng.standard_normal((1, 2, 8)), np.ones((1, 2, 8))], axis=1)
        y, ld = cpl.forward(Tensor(x), Tensor(rng.standard_normal((1, 4, 8))))
        np.testing.assert_allclose(y.data[:, 2:], 2.0, rtol=1e-15)
        assert ld.item() == pytest.approx(16 * math.log(2.0), rel=1e-14)

    def test_logdet_matches_numerical_jacobian(self, rng):
        cpl = AffineCoupling(4, tiny_config(), rng)
        for _, p in cpl.named_parameters():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        cond = Tensor(rng.standard_normal((1, 4, 6)))
        x = rng.standard_normal((1, 4, 6))
        with T.no_grad():
            _, ld = cpl.forward(Tensor(x), cond)
            jac = numerical_jacobian(lambda v: cpl.forward(Tensor(v), cond)[0].data, x)
        _, expected = np.linalg.slogdet(jac)
        assert rel_error(ld.item(), expected) < 1e-6

    def test_round_trip(self, rng):
        cpl = AffineCoupling(4, tiny_config(), rng)
        for _, p in cpl.named_parameters():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        x = rng.standard_normal((2, 4, 9))
        cond = rng.standard_normal((2, 4, 9))
        y, _ = cpl.forward(Tensor(x), Tensor(cond))
        assert np.max(np.abs(cpl.inverse(y.data, cond) - x)) < 1e-10

    def test_odd_channels_rejected(self, rng):
        with pytest.raises(ConfigError):
            AffineCoupling(3, tiny_config(), rng)


class TestFlow:
    def test_identity_model(self, rng):
        model = FlowModel(FlowConfig(), rng, identity=True)
        x = rng.standard_normal((1, 8, 20))
        z, ld = model.forward(Tensor(x), Tensor(rng.standard_normal((1, 8, 20))))
        np.testing.assert_array_equal(z.data, x)
        assert ld.item() == 0.0
        np.testing.assert_array_equal(model.inverse(z.data, np.zeros((1, 8, 20))), x)

    @pytest.mark.parametrize(
        "cfg",
        [FlowConfig(), tiny_config(), FlowConfig(n_blocks=6, group_size=6, early_every=2, early_channels=2, wn_layers=1)],
    )
    def test_element_count_conserved(self, rng, cfg):
        model = FlowModel(cfg, rng)
        x = rng.standard_normal((2, cfg.group_size, 7))
        z, _ = model.forward(Tensor(x), Tensor(x))
        assert z.size == x.size and z.shape == x.shape

    def test_jacobian_oracle_tiny(self, rng, tiny_model):
        cond = Tensor(rng.standard_normal((1, 4, 8)))
        x = rng.standard_normal((1, 4, 8))
        with T.no_grad():
            _, ld = tiny_model.forward(Tensor(x), cond)
            jac = numerical_jacobian(lambda v: tiny_model.forward(Tensor(v), cond)[0].data, x)
        _, expected = np.linalg.slogdet(jac)
        assert rel_error(ld.item(), expected) < 1e-3

    def test_jacobian_oracle_with_early_outputs(self, rng):
        cfg = FlowConfig(n_blocks=4, group_size=6, early_every=2, early_channels=2, wn_layers=2, residual_channels=6, skip_channels=4)
        model = perturb(FlowModel(cfg, rng, mu=None), rng)
        cond = Tensor(rng.standard_normal((1, 6, 5)))
        x = rng.standard_normal((1, 6, 5))
        with T.no_grad():
            _, ld = model.forward(Tensor(x), cond)
            jac = numerical_jacobian(lambda v: model.forward(Tensor(v), cond)[0].data, x)
        _, expected = np.linalg.slogdet(jac)
        assert rel_error(ld.item(), expected) < 1e-3

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-4)])
    def test_bijectivity(self, rng, dtype, tol):
        model = perturb(FlowModel(FlowConfig(), rng, dtype=dtype), rng, scale=0.05)
        x = (0.5 * rng.standard_normal((2, 8, 50))).astype(dtype)
        cond = (0.5 * rng.standard_normal((2, 8, 50))).astype(dtype)
        with T.no_grad():
            z, _ = model.forward(Tensor(x), Tensor(cond))
        assert np.max(np.abs(model.inverse(z.data, cond) - x)) < tol

    def test_conditioning_inert_at_zero_init(self, rng):
        model = FlowModel(FlowConfig(), rng)
        x = Tensor(rng.standard_normal((1, 8, 16)))
        z1, _ = model.forward(x, Tensor(rng.standard_normal((1, 8, 16))))
        z2, _ = model.forward(x, Tensor(rng.standard_normal((1, 8, 16))))
        np.testing.assert_array_equal(z1.data, z2.data)

    def test_shape_checks(self, rng):
        model = FlowModel(tiny_config(), rng)
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((1, 3, 8))))
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros((1, 4, 8))), Tensor(np.zeros((1, 4, 7))))

    def test_nll_gradient_end_to_end(self, rng, tiny_model):
        x = Tensor(rng.standard_normal((2, 4, 8)))
        cond = Tensor(rng.standard_normal((2, 4, 8)))

        def loss():
            z, ld = tiny_model.forward(x, cond)
            return nll_loss(z, ld, 1.0)

        tiny_model.zero_grad()
        loss().backward()
        worst = 0.0
        for name, p in tiny_model.named_parameters():
            for i in rng.choice(p.size, size=min(3, p.size), replace=False):
                idx = np.unravel_index(i, p.shape)
                num = central_difference(lambda: loss().item(), p.data, idx)
                worst = max(worst, rel_error(p.grad[idx], num))
        assert worst < 1e-4


class TestNll:
    def test_origin(self):
        assert nll_loss(np.zeros(10), 0.0, 1.0) == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-15)
        assert nll_loss(np.zeros(10), 0.0, 1.0) == pytest.approx(0.918939, abs=1e-6)

    def test_per_element_normalization(self):
        assert nll_loss(np.zeros(20), 0.0, 1.0) == nll_loss(np.zeros(10), 0.0, 1.0)

    def test_unit_norm(self, rng):
        z = rng.standard_normal(50)
        z *= math.sqrt(50) / np.linalg.norm(z)
        assert nll_loss(z, 0.0, 1.0) == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5, rel=1e-12)

    def test_tensor_matches_float(self, rng):
        z = rng.standard_normal((1, 4, 6))
        a = nll_loss(Tensor(z), Tensor(np.asarray(1.3)), 0.8).item()
        assert a == pytest.approx(nll_loss(z, 1.3, 0.8), rel=1e-14)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            nll_loss(np.zeros(3), 0.0, 0.0)


class TestEnhance:
    @pytest.fixture
    def model(self, rng):
        return perturb(FlowModel(FlowConfig(), rng, mu=255.0, dtype=np.float32), rng, scale=0.02)

    def test_length_preserved(self, model, rng):
        y = AudioBuffer(rng.uniform(-0.5, 0.5, 1003))
        assert len(enhance(y, model, 0.9, rng=1)) == 1003

    def test_sigma_zero_deterministic(self, model, rng):
        y = AudioBuffer(rng.uniform(-0.5, 0.5, 800))
        a = enhance(y, model, 0.0, rng=1).samples
        b = enhance(y, model, 0.0, rng=2).samples
        assert a.tobytes() == b.tobytes()

    def test_fixed_seed_bit_identical(self, model, rng):
        y = AudioBuffer(rng.uniform(-0.5, 0.5, 800))
        a = enhance(y, model, 0.9, rng=7).samples
        b = enhance(y, model, 0.9, rng=7).samples
        c = enhance(y, model, 0.9, rng=8).samples
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    def test_identity_model_reproduces_latent(self, rng):
        model = FlowModel(FlowConfig(), rng, mu=None, identity=True)
        y = AudioBuffer(rng.uniform(-0.5, 0.5, 64))
        out = enhance(y, model, 0.1, rng=3)
        z = LatentSample.draw((1, 8, 8), 0.1, np.random.default_rng(3)).z
        np.testing.assert_allclose(out.samples, np.clip(z[0].T.reshape(-1), -1, 1))

    def test_companded_input_rejected(self, model):
        with pytest.raises(ShapeError):
            enhance(AudioBuffer(np.zeros(64), companded=True), model)

    def test_segsnr_runs(self, model, rng):
        clean = AudioBuffer(rng.uniform(-0.5, 0.5, 4000))
        out = enhance(clean, model, 0.0, rng=0)
        assert math.isfinite(segmental_snr(clean, out))
