import numpy as np
import pytest

from memsim.device import DeviceModel, level_to_conductance, lognormal_params, sample_programmed
from memsim.numerics import stream

TABLE = DeviceModel()


def test_defaults_match_reference_table():
    assert (TABLE.hgs, TABLE.lgs, TABLE.g_levels, TABLE.cv) == (1e-5, 1e-7, 16, 0.05)


@pytest.mark.parametrize("kw", [dict(hgs=1e-7, lgs=1e-5), dict(lgs=0), dict(g_levels=1), dict(cv=-0.1)])
def test_model_validation(kw):
    with pytest.raises(ValueError):
        DeviceModel(**kw)


def test_lognormal_closed_form():
    p = lognormal_params(1e-5, 0.05)
    sigma = np.sqrt(np.log(1.0025))
    assert p.sigma == pytest.approx(sigma, rel=1e-15)
    assert p.mu == pytest.approx(np.log(1e-5) - sigma ** 2 / 2, rel=1e-15)
    assert abs(np.exp(p.mu + p.sigma ** 2 / 2) / 1e-5 - 1) <= 1e-12


def test_lognormal_zero_cv():
    p = lognormal_params(3e-6, 0.0)
    assert p.sigma == 0 and p.mu == pytest.approx(np.log(3e-6))


def test_lognormal_rejects_nonpositive_mean():
    with pytest.raises(ValueError):
        lognormal_params(0.0, 0.1)


def test_level_endpoints_and_midpoint():
    assert level_to_conductance(0, TABLE) == pytest.approx(1e-7, rel=1e-15)
    assert level_to_conductance(15, TABLE) == pytest.approx(1e-5, rel=1e-15)
    assert level_to_conductance(7, TABLE) == pytest.approx(1e-7 + 7 * 9.9e-6 / 15, rel=1e-15)
    g = level_to_conductance(np.arange(16), TABLE)
    assert np.all(np.diff(g) > 0)


@pytest.mark.parametrize("level", [-1, 16])
def test_level_out_of_range(level):
    with pytest.raises(ValueError):
        level_to_conductance(level, TABLE)


def test_cv_zero_is_identity():
    ideal = level_to_conductance(np.arange(16).reshape(4, 4), TABLE)
    out = sample_programmed(ideal, TABLE.replace(cv=0.0), stream(0, "program", 0))
    assert np.array_equal(out, ideal)


def test_sampling_statistics_high_cv():
    dev = TABLE.replace(cv=0.3)
    g = sample_programmed(np.full(10 ** 6, 1e-5), dev, stream(1, "program", 0))
    # clipping at 10*hgs is far in the tail for cv 0.3
    assert abs(g.mean() / 1e-5 - 1) < 0.005
    assert abs(g.std() / g.mean() / 0.3 - 1) < 0.02


def test_pooled_cv_over_cycles():
    ideal = np.full((64, 64), 1e-5)
    draws = np.stack([sample_programmed(ideal, TABLE, stream(2, "program", 0, 0, 0, c)) for c in range(100)])
    assert abs(draws.std() / draws.mean() / 0.05 - 1) < 0.05


def test_mean_error_shrinks_like_root_n():
    for n in (10 ** 4, 10 ** 6):
        g = sample_programmed(np.full(n, 1e-5), TABLE, stream(3, "program", n))
        assert abs(g.mean() / 1e-5 - 1) < 5 * 0.05 / np.sqrt(n)


def test_log_histogram_unimodal_per_state():
    for level in (0, 15):
        g = sample_programmed(np.full(20000, level_to_conductance(level, TABLE)), TABLE,
                              stream(4, "program", level))
        hist, _ = np.histogram(np.log(g), bins=30)
        peak = int(np.argmax(hist))
        assert np.all(np.diff(hist[:peak + 1]) >= -40)
        assert np.all(np.diff(hist[peak:]) <= 40)


def test_sampling_bounds_shape_and_determinism():
    ideal = level_to_conductance(np.tile(np.arange(16), (8, 1)), TABLE)
    dev = TABLE.replace(cv=2.0)
    a = sample_programmed(ideal, dev, stream(5, "program", 1))
    b = sample_programmed(ideal, dev, stream(5, "program", 1))
    assert a.shape == ideal.shape and np.array_equal(a, b)
    assert a.min() >= TABLE.lgs / 10 and a.max() <= 10 * TABLE.hgs


def test_sampling_rejects_out_of_range():
    with pytest.raises(ValueError):
        sample_programmed(np.array([2e-5]), TABLE, stream(0, "program"))
