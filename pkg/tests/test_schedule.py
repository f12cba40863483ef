import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdmseg.data_io import make_rng
from cdmseg.schedule import linear_schedule, q_sample, q_sample_iterative

# Product of (1 - beta) over the default 1000-step schedule, evaluated with
# mpmath at 40 significant digits.
ALPHA_BAR_1000 = 4.03582976537568e-5


def test_single_step_schedule():
    s = linear_schedule(1, 0.1, 0.1)
    assert s.betas[1:] == pytest.approx([0.1])
    assert s.alpha_bars[1:] == pytest.approx([0.9])


def test_two_step_schedule():
    s = linear_schedule(2, 0.1, 0.3)
    assert s.alpha_bars[1:] == pytest.approx([0.9, 0.63])


def test_default_schedule_terminal_alpha_bar():
    s = linear_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bars[1000] == pytest.approx(ALPHA_BAR_1000, rel=1e-9)


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_bounds(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 500),
    st.floats(1e-5, 0.05),
    st.floats(0.0, 0.5),
)
def test_schedule_invariants(T, start, extra):
    s = linear_schedule(T, start, min(start + extra, 0.9))
    b = s.betas[1:]
    assert np.all(np.diff(b) >= 0) and b[0] > 0 and b[-1] < 1
    assert np.all(np.diff(s.alpha_bars) < 0)
    np.testing.assert_allclose(s.alpha_bars[1:], np.cumprod(1 - b), rtol=1e-6)
    np.testing.assert_allclose(s.alphas, 1 - s.betas)


def test_q_sample_degenerate_cases(desk_schedule):
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    ab = desk_schedule.alpha_bars[7]
    np.testing.assert_array_equal(q_sample(x0, 7, np.zeros_like(x0), desk_schedule), (np.sqrt(ab) * x0.astype(np.float64)).astype(np.float32))
    np.testing.assert_array_equal(q_sample(np.zeros_like(x0), 7, eps, desk_schedule), (np.sqrt(1 - ab) * eps.astype(np.float64)).astype(np.float32))
    np.testing.assert_array_equal(q_sample(x0, 7, eps, desk_schedule), q_sample(x0, 7, eps, desk_schedule))


def test_q_sample_errors(desk_schedule):
    x0 = np.zeros((1, 1, 2, 2), np.float32)
    with pytest.raises(ValueError):
        q_sample(x0, 0, x0, desk_schedule)
    with pytest.raises(ValueError):
        q_sample(x0, 101, x0, desk_schedule)
    with pytest.raises(ValueError):
        q_sample(x0, 3, np.zeros((1, 1, 2, 3)), desk_schedule)


def test_q_sample_monte_carlo_variance(desk_schedule):
    t = 40
    eps = make_rng(11).standard_normal(100_000)
    x = q_sample(np.full(100_000, 0.7), t, eps, desk_schedule).astype(np.float64)
    assert x.var() == pytest.approx(1 - desk_schedule.alpha_bars[t], rel=0.02)


def test_iterative_single_step_equivalence(desk_schedule):
    x0 = np.linspace(-1, 1, 16).reshape(1, 1, 4, 4)
    z = make_rng(3).standard_normal(x0.shape)
    it = q_sample_iterative(x0, 1, make_rng(3), desk_schedule)
    np.testing.assert_allclose(it, q_sample(x0, 1, z, desk_schedule), atol=1e-6)


def test_iterative_marginal_matches_closed_form(desk_schedule):
    x0 = np.full(100_000, 0.8)
    x = q_sample_iterative(x0, 3, make_rng(5), desk_schedule).astype(np.float64)
    ab = desk_schedule.alpha_bars[3]
    assert x.mean() == pytest.approx(np.sqrt(ab) * 0.8, rel=0.02)
    assert x.var() == pytest.approx(1 - ab, rel=0.02)
    x40 = q_sample_iterative(x0, 40, make_rng(6), desk_schedule).astype(np.float64)
    ab40 = desk_schedule.alpha_bars[40]
    assert x40.mean() == pytest.approx(np.sqrt(ab40) * 0.8, rel=0.02)
    assert x40.var() == pytest.approx(1 - ab40, rel=0.02)
