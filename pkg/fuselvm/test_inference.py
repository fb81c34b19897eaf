import numpy
import pytest
from scipy import special

from .bound import HessianBound, bound_coefficients
from .dataset import CountDataset
from .inference import (
    ConditionParams,
    ConditionPosterior,
    FitOptions,
    ModelParams,
    PosteriorEntry,
    PosteriorState,
    e_step,
    e_step_sample,
    elbo,
    elbo_by_condition,
    fit,
    get_embeddings,
    infer_posteriors,
    load_model,
    m_step,
    save_model,
)
from .simulate import load_preset, simulate_community

_converged = FitOptions(inner_tol=1e-12, max_inner_iters=500)


def _random_spd(rng, d):
    G = rng.normal(size=(d, d))
    return G @ G.T / d + 0.5 * numpy.eye(d)


def _random_params(rng, d_z, dims):
    Theta = [rng.normal(0, 0.3, size=(d, d_z)) for d in dims]
    return ModelParams([ConditionParams(rng.normal(size=d_z), _random_spd(rng, d_z), Theta)])


def _random_counts(rng, n, dims, high=6):
    return [rng.integers(0, high, size=(n, d)) for d in dims]


def _dataset(counts):
    species = [f"s{l}" for l in range(len(counts))]
    return CountDataset([counts], ["k"], species, [[f"f{j}" for j in range(c.shape[1])] for c in counts])


def _posterior_at(params, counts, Phi_scale, rng):
    n = counts[0].shape[0]
    post = ConditionPosterior.from_prior(params.conditions[0], n)
    post.Phi = [rng.normal(0, Phi_scale, size=p.shape) for p in post.Phi]
    return post


def test_fit_options_validation():
    with pytest.raises(ValueError):
        FitOptions(rel_tol=0)
    with pytest.raises(ValueError):
        FitOptions(max_outer_iters=0)
    with pytest.raises(ValueError):
        FitOptions(unknown=1)


def test_e_step_empty_observation_recovers_prior():
    rng = numpy.random.default_rng(0)
    params = _random_params(rng, 3, [4, 2])
    counts = [numpy.zeros((5, 4)), numpy.zeros((5, 2))]
    post = e_step(params, 0, counts, ConditionPosterior.from_prior(params.conditions[0], 5), FitOptions())
    cp = params.conditions[0]
    numpy.testing.assert_allclose(post.m, numpy.tile(cp.mu, (5, 1)), atol=1e-10)
    numpy.testing.assert_allclose(post.S, numpy.tile(cp.Sigma, (5, 1, 1)), atol=1e-10)


def test_e_step_shrinks_posterior_below_prior():
    rng = numpy.random.default_rng(1)
    for _ in range(10):
        params = _random_params(rng, 3, [5, 3])
        counts = _random_counts(rng, 4, [5, 3], high=30)
        post = e_step(params, 0, counts, ConditionPosterior.from_prior(params.conditions[0], 4), FitOptions())
        for S in post.S:
            assert numpy.linalg.eigvalsh(S)[0] > 0
            assert numpy.linalg.eigvalsh(params.conditions[0].Sigma - S)[0] >= -1e-10


def test_e_step_shape_mismatch():
    rng = numpy.random.default_rng(2)
    params = _random_params(rng, 2, [4])
    state = ConditionPosterior.from_prior(params.conditions[0], 3)
    with pytest.raises(ValueError):
        e_step(params, 0, [numpy.zeros((3, 5))], state, FitOptions())
    with pytest.raises(ValueError):
        e_step(params, 1, [numpy.zeros((3, 4))], state, FitOptions())


def _quadrature_posterior(mu, var, theta, x):
    sd = numpy.sqrt(var)
    z = numpy.linspace(mu - 8 * sd, mu + 8 * sd, 8001)
    eta = numpy.outer(z, theta)
    log_post = -0.5 * (z - mu) ** 2 / var + eta @ x - x.sum() * special.logsumexp(eta, axis=1)
    log_evidence_terms = log_post - 0.5 * numpy.log(2 * numpy.pi * var)
    w = numpy.exp(log_post - log_post.max())
    w /= w.sum()
    mean = w @ z
    dz = z[1] - z[0]
    log_evidence = special.logsumexp(log_evidence_terms) + numpy.log(dz)
    return mean, w @ (z - mean) ** 2, log_evidence


def test_e_step_matches_quadrature_posterior():
    rng = numpy.random.default_rng(3)
    for _ in range(50):
        t = rng.uniform(0.1, 0.3)
        theta = numpy.array([t, -t])
        mu, var = rng.uniform(-0.5, 0.5), rng.uniform(0.5, 1.5)
        N = rng.integers(0, 4)
        x = rng.multinomial(N, [0.5, 0.5]).astype(float)
        params = ModelParams([ConditionParams([mu], [[var]], [theta[:, None]])])
        entry = PosteriorEntry([mu], [[var]], [theta * mu])
        post = e_step_sample(params, 0, [x], entry, _converged)
        m_true, var_true, _ = _quadrature_posterior(mu, var, theta, x)
        assert abs(post.m[0] - m_true) <= 0.1 * max(abs(m_true), numpy.sqrt(var_true))
        assert abs(post.S[0, 0] - var_true) <= 0.1 * var_true


def test_elbo_bounds_quadrature_evidence():
    rng = numpy.random.default_rng(4)
    for _ in range(10):
        theta = rng.normal(0, 0.5, size=3)
        mu, var = rng.normal(), rng.uniform(0.3, 2.0)
        x = rng.integers(0, 5, size=3)
        params = ModelParams([ConditionParams([mu], [[var]], [theta[:, None]])])
        post = e_step(params, 0, [x[None, :]], ConditionPosterior.from_prior(params.conditions[0], 1), _converged)
        value = elbo(params, PosteriorState([post]), _dataset([x[None, :]]))
        _, _, log_evidence = _quadrature_posterior(mu, var, theta, x.astype(float))
        assert value <= log_evidence + 1e-8


def test_e_step_completes_the_square():
    """One update equals the Gaussian posterior of pseudo-observations y_l ~ N(Θ_l z, (N_l A_l)⁻¹)."""
    rng = numpy.random.default_rng(5)
    for _ in range(10):
        dims = [4, 3]
        params = _random_params(rng, 3, dims)
        cp = params.conditions[0]
        counts = [rng.integers(1, 8, size=(1, d)) for d in dims]
        state = _posterior_at(params, counts, 0.5, rng)
        post = e_step(params, 0, counts, state, FitOptions(max_inner_iters=1))

        L_prior = numpy.linalg.cholesky(numpy.linalg.inv(cp.Sigma))
        rows, rhs = [L_prior.T], [L_prior.T @ cp.mu]
        precision = numpy.linalg.inv(cp.Sigma)
        for x, Theta, Phi in zip(counts, cp.Theta, state.Phi):
            x, N = x[0].astype(float), float(x.sum())
            A = HessianBound(len(x)).dense()
            y = numpy.linalg.solve(N * A, x + N * bound_coefficients(Phi[0]).b)
            W = numpy.linalg.cholesky(N * A)
            rows.append(W.T @ Theta)
            rhs.append(W.T @ y)
            precision = precision + N * Theta.T @ A @ Theta
        mean = numpy.linalg.lstsq(numpy.vstack(rows), numpy.concatenate(rhs), rcond=None)[0]
        numpy.testing.assert_allclose(post.m[0], mean, rtol=1e-8, atol=1e-10)
        numpy.testing.assert_allclose(post.S[0], numpy.linalg.inv(precision), rtol=1e-8, atol=1e-10)


def test_e_step_sample_matches_batch():
    rng = numpy.random.default_rng(6)
    params = _random_params(rng, 2, [5, 3])
    counts = _random_counts(rng, 4, [5, 3])
    state = ConditionPosterior.from_prior(params.conditions[0], 4)
    batch = e_step(params, 0, counts, state, _converged)
    single = e_step_sample(params, 0, [c[2] for c in counts], state.entry(2), _converged)
    numpy.testing.assert_allclose(single.m, batch.m[2], atol=1e-9)
    numpy.testing.assert_allclose(single.S, batch.S[2], atol=1e-9)


def test_m_step_equal_posteriors():
    m_star = numpy.array([0.3, -1.2])
    S_star = numpy.array([[0.5, 0.1], [0.1, 0.4]])
    post = ConditionPosterior(numpy.tile(m_star, (6, 1)), numpy.tile(S_star, (6, 1, 1)), [numpy.zeros((6, 3))])
    counts = [numpy.ones((6, 3))]
    new = m_step(post, counts, FitOptions())
    numpy.testing.assert_allclose(new.mu, m_star, atol=1e-12)
    numpy.testing.assert_allclose(new.Sigma, S_star, atol=1e-12)

    single = ConditionPosterior(numpy.array([[2.0, 1.0]]), S_star[None], [numpy.zeros((1, 3))])
    numpy.testing.assert_allclose(m_step(single, [numpy.ones((1, 3))], FitOptions()).Sigma, S_star, atol=1e-12)


def test_m_step_keeps_loadings_of_empty_species():
    rng = numpy.random.default_rng(7)
    params = _random_params(rng, 2, [3, 2])
    counts = [rng.integers(1, 5, size=(4, 3)), numpy.zeros((4, 2))]
    post = e_step(params, 0, counts, ConditionPosterior.from_prior(params.conditions[0], 4), FitOptions())
    new = m_step(post, counts, FitOptions(), previous=params.conditions[0])
    numpy.testing.assert_array_equal(new.Theta[1], params.conditions[0].Theta[1])


def test_m_step_is_stationary_in_loadings():
    rng = numpy.random.default_rng(8)
    for _ in range(10):
        dims = [4, 3]
        params = _random_params(rng, 2, dims)
        counts = _random_counts(rng, 5, dims)
        data = _dataset(counts)
        post = e_step(params, 0, counts, ConditionPosterior.from_prior(params.conditions[0], 5), FitOptions())
        new = m_step(post, counts, FitOptions())
        state = PosteriorState([post])
        h = 1e-5
        for l, Theta in enumerate(new.Theta):
            for idx in numpy.ndindex(*Theta.shape):
                values = []
                for sign in (1, -1):
                    shifted = [t.copy() for t in new.Theta]
                    shifted[l][idx] += sign * h
                    values.append(elbo(ModelParams([ConditionParams(new.mu, new.Sigma, shifted)]), state, data))
                assert abs(values[0] - values[1]) / (2 * h) <= 1e-4


def test_elbo_is_zero_at_prior_without_data():
    rng = numpy.random.default_rng(9)
    params = _random_params(rng, 3, [4, 2])
    counts = [numpy.zeros((3, 4), dtype=int), numpy.zeros((3, 2), dtype=int)]
    state = PosteriorState([ConditionPosterior.from_prior(params.conditions[0], 3)])
    numpy.testing.assert_allclose(elbo_by_condition(params, state, _dataset(counts)), [0.0], atol=1e-10)


def test_elbo_rotation_invariance():
    rng = numpy.random.default_rng(10)
    for _ in range(20):
        dims = [5, 3]
        params = _random_params(rng, 3, dims)
        counts = _random_counts(rng, 4, dims)
        data = _dataset(counts)
        post = e_step(params, 0, counts, ConditionPosterior.from_prior(params.conditions[0], 4), FitOptions())
        R = numpy.linalg.qr(rng.normal(size=(3, 3)))[0]
        cp = params.conditions[0]
        rotated = ModelParams([ConditionParams(R.T @ cp.mu, R.T @ cp.Sigma @ R, [t @ R for t in cp.Theta])])
        rotated_post = ConditionPosterior(post.m @ R, numpy.einsum("ba,ibc,cd->iad", R, post.S, R), post.Phi)
        before = elbo(params, PosteriorState([post]), data)
        after = elbo(rotated, PosteriorState([rotated_post]), data)
        assert abs(after - before) <= 1e-8 * abs(before)


def _small_community(seed=0):
    cfg = load_preset("community", dict(d_z=2, dims=[8, 5], replicates=40, rate=200, seed=seed))
    return simulate_community(cfg)


def test_fit_elbo_is_monotone():
    ds, _ = _small_community()
    model = fit(ds, 2, FitOptions(max_outer_iters=100, seed=3))
    trace = numpy.array(model.report.elbo_trace)
    assert numpy.all(numpy.diff(trace) >= -1e-8 * numpy.abs(trace[:-1]))
    assert model.report.iterations == len(trace)
    for S in model.posteriors.conditions[0].S:
        assert numpy.linalg.eigvalsh(S)[0] > 0
    assert numpy.linalg.eigvalsh(model.params.conditions[0].Sigma)[0] > 0


def test_fit_is_deterministic():
    ds, _ = _small_community(1)
    opts = FitOptions(max_outer_iters=20, seed=11)
    assert fit(ds, 2, opts).report.elbo_trace == fit(ds, 2, opts).report.elbo_trace


def test_fit_rejects_zero_rank():
    ds, _ = _small_community()
    with pytest.raises(ValueError):
        fit(ds, 0)


@pytest.mark.slow
def test_fit_converges_on_community_preset():
    ds, _ = simulate_community(load_preset("community", dict(seed=7)))
    model = fit(ds, 5, FitOptions(seed=7))
    trace = numpy.array(model.report.elbo_trace)
    assert model.report.converged
    assert model.report.iterations <= 500
    assert numpy.all(numpy.diff(trace) >= -1e-8 * numpy.abs(trace[:-1]))


def test_embeddings_and_inference_on_empty_samples():
    ds, _ = _small_community(2)
    model = fit(ds, 2, FitOptions(max_outer_iters=10))
    emb = get_embeddings(model, 0)
    assert emb.shape == (40, 2)
    assert numpy.array_equal(get_embeddings(model, "community"), emb)
    with pytest.raises(ValueError):
        get_embeddings(model, 3)

    empty = _dataset([numpy.zeros((6, 8), dtype=int), numpy.zeros((6, 5), dtype=int)])
    state = infer_posteriors(model, empty)
    numpy.testing.assert_allclose(state.conditions[0].m, numpy.tile(model.params.conditions[0].mu, (6, 1)), atol=1e-10)
    with pytest.raises(ValueError):
        infer_posteriors(model, _dataset([numpy.zeros((2, 8), dtype=int)]))


def test_save_and_load_model(tmp_path):
    ds, _ = _small_community(3)
    model = fit(ds, 2, FitOptions(max_outer_iters=5))
    path = str(tmp_path / "model.json")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.d_z == 2
    assert loaded.species_labels == ds.species_labels
    assert loaded.feature_labels == ds.feature_labels
    assert loaded.report.elbo_trace == model.report.elbo_trace
    assert loaded.options == model.options
    for a, b in zip(loaded.params.conditions[0].Theta, model.params.conditions[0].Theta):
        numpy.testing.assert_array_equal(a, b)
    numpy.testing.assert_array_equal(loaded.params.conditions[0].Sigma, model.params.conditions[0].Sigma)
    with pytest.raises(ValueError):
        get_embeddings(loaded, 0)
