import numpy as np
import pytest

from cdmseg import tensor as T
from cdmseg.data_io import ShapesSpec, gen_gaussian_blocks, gen_shapes, make_rng
from cdmseg.denoiser import AnalyticGaussianDenoiser, ConditionEmbedding, TinyCondUNet
from cdmseg.training import AdamState, AdamW, TrainConfig, adamw_step, diffusion_loss, train_diffusion
from cdmseg.tensor import Tensor


class NoiseOracle:
    """Predicts the true noise by inverting q_sample with the known clean image."""

    def __init__(self, x0, sched):
        self.x0, self.sched = x0, sched
        self.embedding = ConditionEmbedding.one_hot()

    def predict(self, x_t, t, e):
        ab = self.sched.alpha_bars[np.asarray(t)].reshape(-1, 1, 1, 1)
        return ((x_t - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)).astype(np.float32)


class Zero:
    embedding = ConditionEmbedding.one_hot()

    def predict(self, x_t, t, e):
        return np.zeros_like(x_t)


def test_loss_of_perfect_and_zero_predictors(desk_schedule):
    rng = make_rng(0)
    x0 = rng.standard_normal((4, 1, 16, 16)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    t = np.array([1, 10, 50, 99])
    assert diffusion_loss(NoiseOracle(x0, desk_schedule), x0, 1, t, eps, desk_schedule) < 1e-8
    big = rng.standard_normal((64, 1, 32, 32)).astype(np.float32)
    z = diffusion_loss(Zero(), big, 0, 5, rng.standard_normal(big.shape), desk_schedule)
    assert z == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ValueError):
        diffusion_loss(Zero(), x0, 0, 5, eps[:, :, :8], desk_schedule)


def test_analytic_denoiser_beats_constant_predictors(block_spec, desk_schedule):
    mu0, mu1 = block_spec.means()
    model = AnalyticGaussianDenoiser(mu0, mu1, 0.1, 0.1, desk_schedule)
    n = 10_000
    x0 = np.stack([s.image for s in gen_gaussian_blocks(block_spec, n, 0, labels=[1] * n)])
    rng = make_rng(1)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    t = rng.integers(1, desk_schedule.T + 1, size=n)
    optimal = diffusion_loss(model, x0, 1, t, eps, desk_schedule)

    class Constant:
        embedding = model.embedding

        def __init__(self, c):
            self.c = c

        def predict(self, x_t, t, e):
            return np.full_like(x_t, self.c)

    for c in (-0.1, 0.0, 0.1):
        assert optimal < diffusion_loss(Constant(c), x0, 1, t, eps, desk_schedule)


def test_adamw_fixed_points():
    p = [np.array([1.5, -2.0], np.float32)]
    out = adamw_step(p, [np.zeros(2, np.float32)], AdamState(), lr=0.1, weight_decay=0.0)
    assert np.array_equal(out[0], p[0])
    out = adamw_step(p, [np.zeros(2, np.float32)], AdamState(), lr=0.1, weight_decay=0.1)
    np.testing.assert_allclose(out[0], p[0] * (1 - 0.1 * 0.1), rtol=1e-6)


def test_adamw_constant_gradient_step_size():
    state = AdamState()
    p = [np.array([0.0])]
    lr = 1e-3
    for _ in range(1000):
        new = adamw_step(p, [np.array([2.5])], state, lr=lr)
        step = p[0][0] - new[0][0]
        p = new
    assert step == pytest.approx(lr, rel=1e-4)


def test_adamw_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        adamw_step([np.zeros(1)], [np.array([np.nan])], AdamState(), lr=0.1)


def test_adamw_minimises_quadratic():
    w = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = AdamW([w], lr=0.1)
    for _ in range(300):
        T.backward(T.tsum(w * w))
        opt.step()
    assert np.abs(w.data).max() < 0.05


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


def _tiny_data():
    samples = gen_shapes(ShapesSpec(size=16, axis_range=(2.0, 4.0)), 40, 0)
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples])


def test_training_is_seed_deterministic(desk_schedule, tmp_path):
    x, y = _tiny_data()
    cfg = TrainConfig(lr=1e-3, batch=4, iters=6, seed=3, log_interval=2, checkpoint_interval=3)
    a, curve_a = train_diffusion(TinyCondUNet(channels=8, emb_dim=16, seed=1), x, y, desk_schedule, cfg, tmp_path)
    b, curve_b = train_diffusion(TinyCondUNet(channels=8, emb_dim=16, seed=1), x, y, desk_schedule, cfg)
    assert curve_a == curve_b
    sa, sb = a.state_dict(), b.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert all(np.isfinite(v) for _, v in curve_a)
    assert (tmp_path / "loss.csv").read_text().startswith("iteration,loss")
    assert (tmp_path / "ckpt_000003.ckpt").exists()


def test_short_training_reduces_loss(desk_schedule):
    x, y = _tiny_data()
    net = TinyCondUNet(channels=8, emb_dim=16, seed=0)
    rng = make_rng(5)
    t = rng.integers(1, desk_schedule.T + 1, size=len(x))
    eps = rng.standard_normal(x.shape).astype(np.float32)

    def held_out():
        with T.no_grad():
            return diffusion_loss(net, x, y, t, eps, desk_schedule).item()

    before = held_out()
    train_diffusion(net, x, y, desk_schedule, TrainConfig(lr=3e-3, batch=8, iters=150, seed=0))
    assert held_out() < 0.5 * before


def test_unet_gradients_match_finite_differences(desk_schedule, f64):
    from conftest import central_difference, promote, rel_err

    net = TinyCondUNet(channels=8, emb_dim=16, seed=2)
    promote(net)
    rng = make_rng(6)
    x0 = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    y, t = np.array([0, 1]), np.array([7, 30])
    loss = diffusion_loss(net, x0, y, t, eps, desk_schedule)
    T.backward(loss)
    params = net.named_parameters()
    names = sorted(params)

    def f():
        with T.no_grad():
            return diffusion_loss(net, x0, y, t, eps, desk_schedule).item()

    for k in range(8):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.integers(d)) for d in p.shape)
        fd = central_difference(f, p.data, idx, h=1e-5)
        assert rel_err(p.grad[idx], fd, 1e-9) < 1e-4, name
