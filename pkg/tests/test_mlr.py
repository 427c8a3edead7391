import numpy as np
import pytest

from hyperyield.mapgen import predict_map
from hyperyield.mlr import (
    MlrModel,
    center_cells,
    fit_mlr,
    predict_mlr,
    read_coefficients,
    window_predictor,
    write_coefficients,
)
from hyperyield.sampling import assemble_years
from hyperyield.synth import LINEAR_COEFFICIENTS, LINEAR_INTERCEPT, SynthSpec, generate

from conftest import make_raster


def training_mse(model, X, y):
    return float(np.mean((model.linear(X) - y) ** 2))


def test_exact_line(rng):
    X = rng.normal(size=(30, 3))
    m = fit_mlr(X, 2 * X[:, 0] + 3)
    np.testing.assert_allclose(m.coefficients, [2, 0, 0], atol=1e-10)
    assert abs(m.intercept - 3) < 1e-10


def test_constant_target(rng):
    X = rng.normal(size=(20, 4))
    m = fit_mlr(X, np.full(20, 7.0))
    np.testing.assert_allclose(m.coefficients, 0, atol=1e-12)
    assert abs(m.intercept - 7.0) < 1e-12


def test_pinv_oracle(rng):
    X = rng.normal(size=(200, 8)) * rng.uniform(0.1, 50, size=8) + rng.uniform(-100, 100, size=8)
    y = rng.normal(size=200) * 10 + X @ rng.normal(size=8)
    m = fit_mlr(X, y)
    A = np.hstack([X, np.ones((200, 1))])
    beta = np.linalg.pinv(A) @ y
    np.testing.assert_allclose(m.coefficients, beta[:8], rtol=0, atol=1e-8)
    assert abs(m.intercept - beta[8]) < 1e-8


def test_residuals_orthogonal(rng):
    X = rng.normal(size=(100, 5))
    y = rng.normal(size=100)
    m = fit_mlr(X, y)
    r = y - m.linear(X)
    A = np.hstack([X, np.ones((100, 1))])
    assert np.max(np.abs(A.T @ r)) < 1e-8


def test_perturbation_does_not_improve(rng):
    X = rng.normal(size=(80, 4))
    y = X @ [1, -2, 0.5, 3] + rng.normal(size=80)
    m = fit_mlr(X, y)
    base = training_mse(m, X, y)
    for i in range(4):
        for d in (-1e-3, 1e-3):
            coef = m.coefficients.copy()
            coef[i] += d
            assert training_mse(MlrModel(coef, m.intercept), X, y) >= base
    for d in (-1e-3, 1e-3):
        assert training_mse(MlrModel(m.coefficients, m.intercept + d), X, y) >= base


def test_rank_deficient_warns(rng):
    x = rng.normal(size=(30, 1))
    X = np.hstack([x, 2 * x])
    with pytest.warns(UserWarning, match="rank"):
        m = fit_mlr(X, 3 * x[:, 0])
    assert np.isfinite(m.coefficients).all()
    np.testing.assert_allclose(m.linear(X), 3 * x[:, 0], atol=1e-6)


def test_too_few_samples():
    with pytest.raises(ValueError, match="at least"):
        fit_mlr(np.zeros((3, 3)), np.zeros(3))


class TestPredict:
    def test_zero_features_clamped(self):
        assert predict_mlr(MlrModel([1.0, 2.0], 5.0), np.zeros(2)) == 5.0
        assert predict_mlr(MlrModel([1.0, 2.0], -5.0), np.zeros(2)) == 0.0

    def test_training_point(self, rng):
        X = rng.normal(size=(10, 2))
        y = X @ [3.0, 1.0] + 50
        m = fit_mlr(X, y)
        np.testing.assert_allclose(predict_mlr(m, X[4]), y[4], rtol=1e-12)

    def test_affine(self, rng):
        m = MlrModel(rng.normal(size=8), -3.0)
        u, v = rng.normal(size=(2, 8))
        for a in (0.0, 0.3, 1.7):
            lhs = m.linear(a * u + (1 - a) * v)
            assert abs(lhs - (a * m.linear(u) + (1 - a) * m.linear(v))) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="features"):
            MlrModel([1.0, 2.0], 0.0).linear(np.zeros(3))

    def test_window_predictor_through_mapgen(self, rng):
        m = MlrModel(rng.normal(size=3), 1.0)
        mask = rng.random((8, 9)) > 0.2
        feats = make_raster(rng.normal(size=(8, 9, 3)), mask)
        out = predict_map(window_predictor(m), feats, out_size=1)
        for i in range(8):
            for j in range(9):
                if mask[i, j]:
                    expected = max(float(feats.data[i, j] @ m.coefficients + 1.0), 0.0)
                    assert abs(out.yield_map.data[i, j, 0] - expected) < 1e-12
        assert (out.counts[mask] == 1).all()


def test_noiseless_linear_field_recovered():
    years = generate(SynthSpec(height=24, width=24, years=3, seed=2, noise=0.0, response="linear"))
    samples = assemble_years([(y.year, y.features, y.yield_map) for y in years])
    X, y = center_cells(samples)
    m = fit_mlr(X, y)
    assert np.max(np.abs(m.coefficients - LINEAR_COEFFICIENTS)) < 1e-6
    assert abs(m.intercept - LINEAR_INTERCEPT) < 1e-4


def test_center_cells_normalized(rng):
    years = generate(SynthSpec(height=12, width=12, years=1, seed=0))
    samples = assemble_years([(y.year, y.features, y.yield_map) for y in years])
    X, y = center_cells(samples)
    s = samples[0]
    np.testing.assert_array_equal(X[0], s.x_patch[2, 2])
    assert y[0] == s.y_patch[2, 2]
    from hyperyield.raster import Normalizer

    norm = Normalizer(X.min(axis=0), X.max(axis=0))
    Xn, _ = center_cells(samples, norm)
    assert Xn.min() >= 0 and Xn.max() <= 1


def test_coefficient_csv(tmp_path, rng):
    m = MlrModel(rng.normal(size=8), 12.25)
    write_coefficients(m, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "channel,value" and lines[3].startswith("nitrogen,")
    assert lines[-1].startswith("intercept,")
    back = read_coefficients(tmp_path / "c.csv")
    assert back.coefficients.tobytes() == m.coefficients.tobytes() and back.intercept == 12.25
