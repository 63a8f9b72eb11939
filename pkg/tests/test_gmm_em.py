import numpy as np
import pytest

from gmmchan.errors import DegenerateDataError, FormatError, NumericalError, ParameterError, ShapeError
from gmmchan.gmm_em import (
    CONSTRAINTS,
    EmConfig,
    GmmModel,
    fit,
    fit_time_and_freq,
    load_model,
    log_density,
    model_from_bytes,
    model_to_bytes,
    responsibilities,
    save_model,
)
from gmmchan.structured_cov import (
    BlockCirculant,
    BlockToeplitz,
    Circulant1D,
    Diagonal,
    Full,
    Kronecker,
    Toeplitz1D,
)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def dense_log_normal(x, mean, cov):
    d = x - mean
    _, logdet = np.linalg.slogdet(cov)
    quad = np.real(d.conj() @ np.linalg.solve(cov, d))
    return -len(x) * np.log(np.pi) - logdet - quad


def test_log_density_standard_normal_at_zero():
    model = GmmModel([1.0], np.zeros((1, 3)), [Full(np.eye(3))], (3,))
    assert log_density(model, np.zeros(3)) == pytest.approx(-3 * np.log(np.pi), abs=1e-12)


def test_log_density_two_separated_components():
    mu = np.array([[0, 0], [50, 50]], dtype=complex)
    model = GmmModel([0.5, 0.5], mu, [Full(np.eye(2))] * 2, (2,))
    single = dense_log_normal(mu[0], mu[0], np.eye(2))
    assert log_density(model, mu[0]) == pytest.approx(np.log(0.5) + single, abs=1e-9)


def test_log_density_matches_dense_for_spectral_models():
    rng = np.random.default_rng(0)
    covs = [BlockToeplitz(rng.uniform(0.1, 1, 24), (3, 2)), BlockCirculant(rng.uniform(0.1, 1, 6), (3, 2))]
    for cov in covs:
        model = GmmModel([0.3, 0.7], crandn(rng, 2, 6), [cov, cov.shifted(0.2)], (3, 2))
        x = crandn(rng, 5, 6)
        dense = [np.logaddexp(np.log(0.3) + dense_log_normal(v, model.means[0], cov.dense()),
                              np.log(0.7) + dense_log_normal(v, model.means[1], cov.dense() + 0.2 * np.eye(6)))
                 for v in x]
        assert np.allclose(log_density(model, x), dense, atol=1e-9)


def test_singular_component_is_numerical_error():
    model = GmmModel([1.0], np.zeros((1, 2)), [Full(np.zeros((2, 2)))], (2,))
    with pytest.raises(NumericalError):
        log_density(model, np.zeros(2))


def test_responsibilities_trivial_cases():
    one = GmmModel([1.0], np.zeros((1, 2)), [Full(np.eye(2))], (2,))
    assert np.allclose(responsibilities(one, np.ones(2)), [1.0])
    same = GmmModel(np.full(4, 0.25), np.zeros((4, 2)), [Full(np.eye(2))] * 4, (2,))
    assert np.allclose(responsibilities(same, np.ones(2)), 0.25, atol=1e-15)


def test_responsibilities_scalar_bayes_ratio():
    weights = np.array([0.2, 0.5, 0.3])
    means = np.array([[0.0], [1 + 1j], [-2.0]])
    var = np.array([1.0, 0.5, 2.0])
    model = GmmModel(weights, means, [Full([[v]]) for v in var], (1,))
    x = 0.4 - 0.3j
    joint = weights * np.exp(-np.abs(x - means[:, 0]) ** 2 / var) / (np.pi * var)
    r = responsibilities(model, np.array([x]))
    assert np.allclose(r, joint / joint.sum(), atol=1e-12)
    batch = responsibilities(model, crandn(np.random.default_rng(1), 50, 1))
    assert np.allclose(batch.sum(axis=1), 1.0, atol=1e-12)


def test_model_validation():
    with pytest.raises(ParameterError):
        GmmModel([0.6, 0.6], np.zeros((2, 2)), [Full(np.eye(2))] * 2, (2,))
    with pytest.raises(ShapeError):
        GmmModel([1.0], np.zeros((1, 3)), [Full(np.eye(2))], (3,))
    with pytest.raises(ParameterError):
        GmmModel([0.5, 0.5], np.zeros((2, 2)), [Full(np.eye(2)), Diagonal(np.ones(2))], (2,))
    with pytest.raises(ShapeError):
        log_density(GmmModel([1.0], np.zeros((1, 2)), [Full(np.eye(2))], (2,)), np.zeros((4, 3)))


def test_config_validation():
    for bad in (dict(n_components=0), dict(n_components=1, max_iters=0),
                dict(n_components=1, rel_tol=0.0), dict(n_components=1, init="spectral")):
        with pytest.raises(ParameterError):
            EmConfig(**bad)


def test_fit_rejects_bad_input():
    x = crandn(np.random.default_rng(0), 3, 4)
    with pytest.raises(DegenerateDataError):
        fit(x, EmConfig(4), "full")
    with pytest.raises(ParameterError):
        fit(x, EmConfig(1), "banded")
    with pytest.raises(ShapeError):
        fit(x, EmConfig(1), "toeplitz", dims=(3, 2))
    with pytest.raises(DegenerateDataError):
        fit(np.zeros((5, 2)), EmConfig(1), "full")


def test_single_full_component_is_sample_moments():
    rng = np.random.default_rng(2)
    x = crandn(rng, 200, 3) @ np.array([[1, 0.5, 0], [0, 1, 0.2], [0, 0, 0.3]]) + 1.0
    cfg = EmConfig(1, loading=1e-3)
    res = fit(x, cfg, "full")
    mean = x.mean(axis=0)
    d = x - mean
    sample_cov = d.T @ d.conj() / len(x)
    loading = 1e-3 * np.real(np.trace(sample_cov)) / 3
    assert np.allclose(res.model.means[0], mean, atol=1e-12)
    assert np.allclose(res.model.covariances[0].dense(), sample_cov + loading * np.eye(3), atol=1e-12)
    assert res.model.weights[0] == 1.0


def test_two_component_recovery():
    rng = np.random.default_rng(3)
    labels = rng.random(10_000) < 0.5
    x = (np.where(labels, 3.0, -3.0) + crandn(rng, 10_000))[:, None]
    model = fit(x, EmConfig(2), "full").model
    means = np.sort(model.means[:, 0].real)
    assert np.allclose(means, [-3, 3], atol=0.1)
    assert np.all(np.abs(model.means[:, 0].imag) < 0.1)


def test_circulant_fit_recovers_true_covariance():
    rng = np.random.default_rng(4)
    truth = Circulant1D(rng.uniform(0.2, 2.0, 8))
    root = np.linalg.cholesky(truth.dense())
    x = crandn(rng, 10_000, 8) @ root.T
    model = fit(x, EmConfig(1), "circulant").model
    cov = model.covariances[0]
    assert isinstance(cov, Circulant1D)
    err = np.linalg.norm(cov.dense() - truth.dense()) / np.linalg.norm(truth.dense())
    assert err < 0.05


@pytest.mark.parametrize("constraint", CONSTRAINTS)
@pytest.mark.parametrize("dims", [(6,), (3, 2)])
def test_trace_is_monotone_and_structure_kept(constraint, dims):
    rng = np.random.default_rng(5)
    n = int(np.prod(dims))
    centers = 3 * crandn(rng, 3, n)
    x = centers[rng.integers(3, size=600)] + crandn(rng, 600, n) @ np.diag(rng.uniform(0.3, 1, n))
    res = fit(x, EmConfig(3, max_iters=40, rel_tol=1e-12), constraint, dims)
    trace = res.log_likelihood
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))
    expected = {"full": Full, "diagonal": Diagonal,
                "toeplitz": Toeplitz1D if len(dims) == 1 else BlockToeplitz,
                "circulant": Circulant1D if len(dims) == 1 else BlockCirculant}[constraint]
    assert all(type(c) is expected for c in res.model.covariances)
    assert res.model.dims == dims
    assert np.allclose(res.responsibilities, responsibilities(res.model, x), atol=1e-10)


def test_unit_dimension_constraints_coincide():
    rng = np.random.default_rng(6)
    x = np.concatenate([crandn(rng, 300, 1) + 2, 0.5 * crandn(rng, 300, 1) - 2])
    seeds = np.array([[1.0], [-1.0]])
    # the Toeplitz M-step is a single fixed-point step, so compare converged fits
    cfg = EmConfig(2, max_iters=2000, rel_tol=1e-300)
    models = [fit(x, cfg, c, init_means=seeds).model for c in CONSTRAINTS]
    for other in models[1:]:
        assert np.allclose(other.weights, models[0].weights, atol=1e-9)
        assert np.allclose(other.means, models[0].means, atol=1e-9)
        for a, b in zip(other.covariances, models[0].covariances):
            assert np.allclose(a.dense(), b.dense(), atol=1e-9)


def test_permutation_invariance_with_fixed_centers():
    rng = np.random.default_rng(7)
    x = np.concatenate([crandn(rng, 200, 2) + 2, crandn(rng, 200, 2) - 2j])
    seeds = np.array([[2, 2], [-2j, -2j]])
    cfg = EmConfig(2, max_iters=30)
    a = fit(x, cfg, "full", init_means=seeds).model
    b = fit(x[rng.permutation(len(x))], cfg, "full", init_means=seeds[::-1]).model
    assert np.allclose(a.weights, b.weights[::-1], atol=1e-9)
    assert np.allclose(a.means, b.means[::-1], atol=1e-9)
    for ca, cb in zip(a.covariances, b.covariances[::-1]):
        assert np.allclose(ca.dense(), cb.dense(), atol=1e-9)


def test_fit_is_deterministic():
    x = crandn(np.random.default_rng(8), 300, 4)
    a = fit(x, EmConfig(3, rng_seed=5), "toeplitz").model
    b = fit(x, EmConfig(3, rng_seed=5), "toeplitz").model
    assert model_to_bytes(a) == model_to_bytes(b)


def test_time_and_freq_training_sets():
    grid = crandn(np.random.default_rng(9), 1, 5, 3)
    gmm_t, gmm_c = fit_time_and_freq(grid, EmConfig(1), EmConfig(1), "full")
    assert gmm_t.dim == 3 and gmm_c.dim == 5
    # one grid gives N_c rows for time and N_t columns for frequency
    assert np.allclose(gmm_t.means[0], grid[0].mean(axis=0))
    assert np.allclose(gmm_c.means[0], grid[0].mean(axis=1))
    with pytest.raises(DegenerateDataError):
        fit_time_and_freq(np.zeros((0, 2, 2)), EmConfig(1), EmConfig(1), "full")


def _all_models(rng):
    def mix(covs, dims):
        k = len(covs)
        return GmmModel(np.full(k, 1 / k), crandn(rng, k, covs[0].dim), covs, dims)

    a = crandn(rng, 4, 4)
    return [
        mix([Full(a @ a.conj().T + np.eye(4)), Full(np.eye(4))], (4,)),
        mix([Diagonal(rng.uniform(0.1, 1, 4))], (4,)),
        mix([BlockToeplitz(rng.uniform(0, 1, 24), (3, 2))] * 2, (3, 2)),
        mix([BlockCirculant(rng.uniform(0, 1, 6), (3, 2))], (3, 2)),
        mix([Toeplitz1D(rng.uniform(0, 1, 8))], (4,)),
        mix([Circulant1D(rng.uniform(0, 1, 4))], (4,)),
        mix([Kronecker(Full(np.eye(2)), Toeplitz1D(rng.uniform(0, 1, 6)))] * 3, (3, 2)),
    ]


def test_model_file_round_trip(tmp_path):
    for i, model in enumerate(_all_models(np.random.default_rng(10))):
        path = tmp_path / f"m{i}.gmcm"
        save_model(path, model)
        back = load_model(path)
        assert back.dims == model.dims and back.tag == model.tag
        assert np.array_equal(back.weights, model.weights)
        assert np.array_equal(back.means, model.means)
        for a, b in zip(back.covariances, model.covariances):
            assert type(a) is type(b)
            assert np.array_equal(a.dense(), b.dense())
        assert model_to_bytes(back) == model_to_bytes(model)


def test_model_file_errors():
    raw = model_to_bytes(_all_models(np.random.default_rng(11))[0])
    assert raw[:4] == b"GMCM"
    for bad in (b"NOPE" + raw[4:], raw[:-16], raw + b"\0" * 8, raw[:10],
                raw[:4] + (7).to_bytes(4, "little") + raw[8:],
                raw[:8] + (99).to_bytes(4, "little") + raw[12:]):
        with pytest.raises(FormatError):
            model_from_bytes(bad)
