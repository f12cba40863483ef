import numpy as np
import pytest

from cdmseg.classifier import AnalyticClassifier
from cdmseg.data_io import make_rng
from cdmseg.denoiser import AnalyticGaussianDenoiser
from cdmseg.sampler import GuidanceConfig, ddim_step, ddpm_ancestral_step, guided_epsilon
from cdmseg.schedule import NoiseSchedule, q_sample

from conftest import central_difference

# sqrt(0.8) (1 - sqrt(0.5) 0.2) / sqrt(0.5) + sqrt(0.2) 0.2, evaluated with mpmath
DDIM_SCALAR = 1.17546834496736


def two_step_schedule(ab_prev: float, ab_t: float) -> NoiseSchedule:
    """Schedule whose alpha_bar at t=2 and t=1 take the given values."""
    ab = np.array([1.0, ab_prev, ab_t])
    alphas = np.concatenate([[1.0], ab[1:] / ab[:-1]])
    return NoiseSchedule(T=2, betas=1 - alphas, alphas=alphas, alpha_bars=ab)


def test_ddim_scalar_example():
    s = two_step_schedule(0.8, 0.5)
    out = ddim_step(np.array([1.0]), 2, np.array([0.2]), s)
    assert out[0] == pytest.approx(DDIM_SCALAR, abs=1e-4)


def test_ddim_zero_eps(desk_schedule):
    x = make_rng(0).standard_normal((1, 1, 4, 4)).astype(np.float32)
    for t in (1, 30):
        ratio = np.sqrt(desk_schedule.alpha_bars[t - 1] / desk_schedule.alpha_bars[t])
        np.testing.assert_allclose(ddim_step(x, t, np.zeros_like(x), desk_schedule), ratio * x, rtol=1e-6)


def test_ddim_errors(desk_schedule):
    x = np.zeros((1, 1, 2, 2), np.float32)
    with pytest.raises(ValueError):
        ddim_step(x, 0, x, desk_schedule)
    with pytest.raises(ValueError):
        ddim_step(x, 3, np.zeros((1, 1, 2, 3)), desk_schedule)


def test_ddim_preserves_noise_free_trajectory(block_spec, desk_schedule):
    mu0, mu1 = block_spec.means()
    eps = make_rng(1).standard_normal((2,) + mu1.shape)
    x0 = np.broadcast_to(mu1, eps.shape)
    for t in (2, 25, 40):
        got = ddim_step(q_sample(x0, t, eps, desk_schedule), t, eps, desk_schedule)
        np.testing.assert_allclose(got, q_sample(x0, t - 1, eps, desk_schedule), atol=1e-5)


def test_ddim_determinism(desk_schedule):
    x = make_rng(2).standard_normal((1, 1, 4, 4))
    e = make_rng(3).standard_normal((1, 1, 4, 4))
    assert ddim_step(x, 9, e, desk_schedule).tobytes() == ddim_step(x, 9, e, desk_schedule).tobytes()


@pytest.mark.parametrize("y", [0, 1])
def test_full_ddim_chain_recovers_class_mean(block_spec, desk_schedule, y):
    mu0, mu1 = block_spec.means()
    model = AnalyticGaussianDenoiser(mu0, mu1, 0.0, 0.0, desk_schedule)
    mu = (mu0, mu1)[y]
    Q = 40
    x = q_sample(np.broadcast_to(mu, (3,) + mu.shape), Q, make_rng(4).standard_normal((3,) + mu.shape), desk_schedule)
    for t in range(Q, 0, -1):
        x = ddim_step(x, t, model.predict(x, t, model.embedding.embed(y)), desk_schedule)
    assert np.abs(x - mu).max() < 1e-3


def test_ancestral_terminal_and_zero_eps(desk_schedule):
    x = make_rng(5).standard_normal((1, 1, 4, 4))
    rng = make_rng(6)
    eps = make_rng(7).standard_normal(x.shape)
    a = ddpm_ancestral_step(x, 1, eps, rng, desk_schedule)
    b = ddpm_ancestral_step(x, 1, eps, None, desk_schedule)
    assert np.array_equal(a, b)
    out = ddpm_ancestral_step(x, 12, np.zeros_like(x), None, desk_schedule)
    np.testing.assert_allclose(out, x / np.sqrt(desk_schedule.alphas[12]), rtol=1e-6)


def test_ancestral_variance_monte_carlo(desk_schedule):
    t = 30
    x = np.full((200_000,), 0.3)
    out = ddpm_ancestral_step(x, t, np.full_like(x, 0.1), make_rng(8), desk_schedule).astype(np.float64)
    assert out.var() == pytest.approx(desk_schedule.betas[t], rel=0.015)


@pytest.fixture
def analytic_pair(block_spec, desk_schedule):
    mu0, mu1 = block_spec.means()
    return (
        AnalyticGaussianDenoiser(mu0, mu1, 0.1, 0.1, desk_schedule),
        AnalyticClassifier(mu0, mu1, 0.1, 0.1, desk_schedule),
    )


def test_guidance_off_is_bit_exact(analytic_pair):
    model, clf = analytic_pair
    x = make_rng(9).standard_normal((2, 1, 16, 16)).astype(np.float32)
    e = model.embedding.embed(1)
    raw = model.predict(x, 20, e)
    for g in (None, GuidanceConfig(0.0, clf, 1), GuidanceConfig(5.0, None, 1)):
        assert guided_epsilon(model, x, 20, e, g).tobytes() == raw.tobytes()
    with pytest.raises(ValueError):
        GuidanceConfig(-1.0, clf, 1)


def test_guidance_linear_in_scale(analytic_pair):
    model, clf = analytic_pair
    x = make_rng(10).standard_normal((2, 1, 16, 16)).astype(np.float32)
    e = model.embedding.embed(1)
    raw = model.predict(x, 20, e).astype(np.float64)
    d = {s: guided_epsilon(model, x, 20, e, GuidanceConfig(s, clf, 1)) - raw for s in (1.5, 3.0, 4.5)}
    np.testing.assert_allclose(d[3.0], 2 * d[1.5], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(d[4.5], d[1.5] + d[3.0], rtol=1e-5, atol=1e-6)


def test_guidance_term_at_equidistant_point(analytic_pair, block_spec, desk_schedule):
    model, clf = analytic_pair
    mu0, mu1 = block_spec.means()
    t, s = 20, 3.0
    ab = desk_schedule.alpha_bars[t]
    v = ab * 0.01 + 1 - ab
    x = (np.sqrt(ab) * (mu0 + mu1) / 2)[None].astype(np.float32)
    e = model.embedding.embed(1)
    term = model.predict(x, t, e).astype(np.float64) - guided_epsilon(model, x, t, e, GuidanceConfig(s, clf, 1))
    expected_grad = np.sqrt(ab) / v * (mu1 - mu0) / 2
    np.testing.assert_allclose(term, s * np.sqrt(1 - ab) * expected_grad[None], atol=1e-5)
    # and the gradient itself against finite differences of log p
    xd = x.astype(np.float64).copy()
    grad = clf.input_gradient(x, t, 1)
    for idx in [(0, 0, 7, 7), (0, 0, 0, 0), (0, 0, 9, 6)]:
        fd = central_difference(lambda: float(clf.log_prob(xd, t, 1)[0]), xd, idx)
        assert abs(grad[idx] - fd) < 1e-4


def test_guidance_shape_mismatch(analytic_pair):
    model, _ = analytic_pair

    class Bad:
        sched = model.sched

        def input_gradient(self, x, t, y):
            return np.zeros((1, 1, 2, 2))

    x = np.zeros((1, 1, 16, 16), np.float32)
    with pytest.raises(ValueError):
        guided_epsilon(model, x, 5, model.embedding.embed(1), GuidanceConfig(1.0, Bad(), 1))
