import numpy as np
import pytest

from ivnac import autodiff as ad
from ivnac.autodiff import Tape, Tensor
from ivnac.checkpoint import Checkpoint, from_bytes, to_bytes
from ivnac.data import Normalizer
from ivnac.errors import ContractError, DimensionError, NumericalError
from ivnac.flow import FlowConfig, FlowModel, augment, model_forward, model_inverse, random_model
from ivnac.training import (AdamState, TrainConfig, adam_step, infer, loss_terms, loss_total, lr_at,
                            parameter_gradients, train)

SMALL = FlowConfig(n_blocks=2, hidden=4)


def _pair(rng, n=2, size=8):
    return (rng.uniform(0, 1, (n, 1, size, size)).astype(np.float32),
            rng.uniform(0, 1, (n, 1, size, size)).astype(np.float32))


# --------------------------------------------------------------------------- schedule


@pytest.mark.parametrize("epoch,expected", [(0, 1e-4), (5, 1e-4), (9, 1e-4), (10, 5e-5), (15, 5e-5),
                                            (25, 2.5e-5), (29, 2.5e-5)])
def test_lr_schedule_halves_every_ten(epoch, expected):
    assert lr_at(epoch, TrainConfig(epochs=30)) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("epoch", [-1, 30])
def test_lr_out_of_range(epoch):
    with pytest.raises(ContractError):
        lr_at(epoch, TrainConfig(epochs=30))


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(base_lr=0.0), dict(lam=-1.0), dict(batch_size=0),
                                dict(halve_every=0), dict(grad_clip=0.0)])
def test_config_contract(kw):
    with pytest.raises(ContractError):
        TrainConfig(**kw)


# --------------------------------------------------------------------------- loss


def _mse_loop(a, b):
    total = 0.0
    for v, w in zip(np.ravel(a), np.ravel(b)):
        total += (float(v) - float(w)) ** 2
    return total / np.size(a)


def test_loss_terms_match_scalar_oracle(rng):
    model = random_model(SMALL, seed=3)
    x, y = _pair(rng)
    fwd, inv = loss_terms(model, x, y)
    ct = model_forward(augment(Tensor(x), 2), model).data[:, :1]
    pet = model_inverse(augment(Tensor(y), 2), model).data[:, :1]
    assert fwd.item() == pytest.approx(_mse_loop(ct, y), rel=1e-5)
    assert inv.item() == pytest.approx(_mse_loop(pet, x), rel=1e-5)


def test_loss_affine_in_lambda(rng, f64):
    model = random_model(SMALL, seed=4)
    x, y = _pair(rng)
    vals = [loss_total(model, x, y, lam).item() for lam in (0.0, 1.0, 2.0)]
    assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-6)
    fwd, inv = loss_terms(model, x, y)
    assert vals[0] == pytest.approx(inv.item(), abs=1e-12)
    assert vals[1] == pytest.approx(fwd.item() + inv.item(), abs=1e-12)


def test_identity_model_identical_pair_zero_loss(rng):
    model = FlowModel(SMALL, init="identity")
    x, _ = _pair(rng)
    assert loss_total(model, x, x).item() == 0.0


def test_loss_rejects_mismatched_shapes(rng):
    model = FlowModel(SMALL, init="identity")
    x, y = _pair(rng)
    with pytest.raises(DimensionError):
        loss_total(model, x, y[:1])
    with pytest.raises(ContractError):
        loss_total(model, x, y, lam=-0.5)


def test_parameter_gradients_cover_every_parameter(rng):
    model = random_model(SMALL, seed=5)
    x, y = _pair(rng)
    tape = Tape()
    loss = loss_total(model, x, y, 1.0, tape)
    grads = parameter_gradients(model, tape, ad.backward(loss))
    names = [n for n, _ in model.parameters()]
    assert list(grads) == names
    for name, p in model.parameters():
        assert grads[name].shape == p.shape
        assert np.isfinite(grads[name]).all()


# --------------------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_noop():
    p = np.array([1.0, -2.0], dtype=np.float32)
    state = adam_step([("p", p)], {"p": np.zeros(2, np.float32)}, AdamState(), 1e-3)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_closed_form():
    # bias-corrected first step: m_hat = g, v_hat = g^2  =>  update = lr * g / (|g| + eps)
    g = np.array([0.5, -3.0, 1e-3])
    p = np.zeros(3)
    adam_step([("p", p)], {"p": g}, AdamState(), 0.1)
    np.testing.assert_allclose(p, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_second_step_closed_form():
    g1, g2 = np.array([1.0]), np.array([-2.0])
    p = np.zeros(1)
    st = AdamState()
    adam_step([("p", p)], {"p": g1}, st, 0.01)
    after_first = p.copy()
    adam_step([("p", p)], {"p": g2}, st, 0.01)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    step = 0.01 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(p, after_first - step, rtol=1e-12)


def test_adam_names_non_finite_parameter():
    p = np.zeros(2)
    with pytest.raises(NumericalError, match="block3.weight"):
        adam_step([("block3.weight", p)], {"block3.weight": np.array([1.0, np.nan])}, AdamState(), 1e-3)
    np.testing.assert_array_equal(p, 0.0)


# --------------------------------------------------------------------------- loop


def _tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=2, seed=7, flow=SMALL)
    base.update(kw)
    return TrainConfig(**base)


def test_trivial_pair_stays_at_zero_loss(rng):
    x, _ = _pair(rng, n=1)
    res = train((x, x), None, _tiny_cfg(epochs=1, init="identity"))
    assert res.history[0].train_loss == 0.0
    assert loss_total(res.final.model, x, x).item() == 0.0


def test_training_reduces_loss(rng):
    x, y = _pair(rng, n=4)
    y = 0.5 * x + 0.1
    res = train((x, y), None, _tiny_cfg(epochs=15, base_lr=3e-3, halve_every=100))
    assert res.history[-1].train_loss < 0.5 * res.history[0].train_loss


def test_training_deterministic(rng, tmp_path):
    x, y = _pair(rng, n=4)
    val = _pair(rng, n=2)
    a = train((x, y), val, _tiny_cfg(), log_path=tmp_path / "a.log")
    b = train((x, y), val, _tiny_cfg(), log_path=tmp_path / "b.log")
    assert to_bytes(a.final) == to_bytes(b.final)
    assert to_bytes(a.best) == to_bytes(b.best)
    assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()


def test_log_format(rng, tmp_path):
    x, y = _pair(rng, n=4)
    res = train((x, y), _pair(rng, n=2), _tiny_cfg(), log_path=tmp_path / "t.log")
    lines = (tmp_path / "t.log").read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines):
        fields = line.split("\t")
        assert len(fields) == 4
        assert int(fields[0]) == i + 1
        assert float(fields[1]) == lr_at(i, _tiny_cfg())
        assert float(fields[2]) == pytest.approx(res.history[i].train_loss, rel=1e-9)
    assert res.log_text() == (tmp_path / "t.log").read_text()


def test_best_checkpoint_has_best_val_psnr(rng):
    x, y = _pair(rng, n=4)
    res = train((x, y), _pair(rng, n=2), _tiny_cfg(epochs=3))
    best = max(r.val_psnr for r in res.history)
    assert res.best.metadata["best_val_psnr"] == best
    assert res.history[res.best.metadata["epoch"] - 1].val_psnr == best


def test_empty_training_set():
    with pytest.raises(ContractError):
        train((np.zeros((0, 1, 8, 8)), np.zeros((0, 1, 8, 8))), None, _tiny_cfg())


def test_non_finite_loss_names_epoch_and_batch(rng):
    x, y = _pair(rng, n=4)
    y[3, 0, 0, 0] = np.inf
    with pytest.raises(NumericalError, match="epoch 1 batch"):
        train((x, y), None, _tiny_cfg(init="identity"))


# --------------------------------------------------------------------------- inference


def test_identity_checkpoint_infer_is_input(rng):
    x, _ = _pair(rng, n=3)
    ck = Checkpoint(FlowModel(SMALL, init="identity"), (8, 8), Normalizer.identity(), {})
    np.testing.assert_array_equal(infer(ck, x), x.astype(np.float64))


def test_infer_batch_matches_singles(rng):
    x, _ = _pair(rng, n=3)
    ck = Checkpoint(random_model(SMALL, seed=8), (8, 8), Normalizer(pet_scale=2.0), {})
    batch = infer(ck, x)
    singles = np.concatenate([infer(ck, x[i : i + 1]) for i in range(3)])
    np.testing.assert_array_equal(batch, singles)


def test_infer_checkpoint_round_trip_bitwise(rng):
    x, _ = _pair(rng, n=2)
    ck = Checkpoint(random_model(SMALL, seed=9), (8, 8), Normalizer(pet_scale=3.0), {"epoch": 1})
    np.testing.assert_array_equal(infer(from_bytes(to_bytes(ck)), x), infer(ck, x))


def test_infer_unnormalized_input_applies_pet_scale(rng):
    x, _ = _pair(rng, n=1)
    ck = Checkpoint(random_model(SMALL, seed=10), (8, 8), Normalizer(pet_scale=4.0), {})
    np.testing.assert_array_equal(infer(ck, 4.0 * x, normalized=False), infer(ck, x))


def test_infer_outputs_hu():
    x = np.full((1, 1, 8, 8), 0.25, np.float32)
    ck = Checkpoint(FlowModel(SMALL, init="identity"), (8, 8), Normalizer(), {})
    np.testing.assert_allclose(infer(ck, x), -1024 + 0.25 * 4024, rtol=1e-6)


def test_infer_size_mismatch(rng):
    ck = Checkpoint(FlowModel(SMALL, init="identity"), (8, 8), Normalizer.identity(), {})
    with pytest.raises(ContractError):
        infer(ck, np.zeros((1, 1, 16, 16)))
