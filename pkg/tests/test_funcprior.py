import numpy as np
import pytest
from scipy import stats

from fibo.config import CorpusQuotaError, DomainError, NonFiniteError
from fibo.funcprior import (
    PriorHyperparams,
    eval_function,
    find_optimum,
    generate_corpus,
    optimum_bin,
    rbf_kernel,
    sample_dataset,
    sample_feature_map,
    sample_function,
)


def _unit_prior(num_features: int, dim: int = 2) -> PriorHyperparams:
    return PriorHyperparams(dim=dim, num_features=num_features)


def _kernel_error(num_features: int, trials: int, seed: int) -> float:
    """Mean |phi(x).phi(x') - k(x, x')| over random pairs, l = 1, gamma^2 = 1."""
    rng = np.random.default_rng(seed)
    hp = _unit_prior(num_features)
    errors = []
    for _ in range(trials):
        fm = sample_feature_map(hp, rng, lengthscales=np.ones(2), signal_variance=1.0)
        X = rng.uniform(size=(20, 2))
        Xp = rng.uniform(size=(20, 2))
        approx = np.sum(fm.features(X) * fm.features(Xp), axis=1)
        exact = np.array([rbf_kernel(a, b, np.ones(2), 1.0) for a, b in zip(X, Xp)])
        errors.append(np.abs(approx - exact))
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------

def test_hyperparams_validation():
    with pytest.raises(ValueError):
        PriorHyperparams(dim=1, lengthscale_range=(0.5, 0.1))
    with pytest.raises(ValueError):
        PriorHyperparams(dim=1, signal_variance_range=(0.0, 1.0))
    hp = PriorHyperparams(dim=3)
    assert PriorHyperparams.from_dict(hp.to_dict()) == hp


def test_equal_range_bounds_fix_the_draw(rng):
    hp = PriorHyperparams(dim=2, lengthscale_range=(0.2, 0.2), signal_variance_range=(1.5, 1.5))
    fm = sample_function(hp, rng).feature_map
    np.testing.assert_array_equal(fm.lengthscales, [0.2, 0.2])
    assert fm.signal_variance == 1.5


def test_kernel_diagonal(rng):
    fm = sample_feature_map(_unit_prior(2048), rng, lengthscales=np.ones(2), signal_variance=1.0)
    X = rng.uniform(size=(100, 2))
    diag = np.sum(fm.features(X) ** 2, axis=1)
    assert abs(diag.mean() - 1.0) < 0.05


def test_kernel_at_unit_distance(rng):
    hp = _unit_prior(2048)
    x = np.array([0.2, 0.3])
    xp = x + np.array([0.6, 0.8])      # |x - x'| = 1
    values = []
    for _ in range(50):
        fm = sample_feature_map(hp, rng, lengthscales=np.ones(2), signal_variance=1.0)
        values.append((fm.features(x) @ fm.features(xp).T).item())
    assert np.mean(values) == pytest.approx(np.exp(-0.5), abs=0.05)


def test_kernel_error_shrinks_with_features():
    coarse = _kernel_error(512, trials=50, seed=0)
    fine = _kernel_error(2048, trials=50, seed=1)
    assert 1.5 <= coarse / fine <= 2.5


def test_rff_kernel_fidelity_at_2048_features():
    assert _kernel_error(2048, trials=5, seed=2) < 0.05


def test_weight_distributions(rng):
    hp = PriorHyperparams(dim=1, num_features=20000)
    fm = sample_feature_map(hp, rng, lengthscales=np.array([0.5]), signal_variance=1.0)
    assert np.std(fm.W) == pytest.approx(2.0, rel=0.03)
    assert fm.b.min() >= 0.0 and fm.b.max() < 2.0 * np.pi
    fs = sample_function(hp, rng)
    assert hp.lengthscale_range[0] <= fs.lengthscales[0] <= hp.lengthscale_range[1]
    assert hp.signal_variance_range[0] <= fs.signal_variance <= hp.signal_variance_range[1]


def test_degenerate_cosine_sample(cosine_sample):
    value, gradient = eval_function(cosine_sample, np.array([0.5]))
    assert value == pytest.approx(1.0, abs=1e-15)
    assert gradient[0] == pytest.approx(0.0, abs=1e-12)
    x = np.linspace(0, 1, 11)[:, None]
    np.testing.assert_allclose(cosine_sample.evaluate(x), np.cos(2 * np.pi * x[:, 0] + np.pi), atol=1e-14)


def test_gradient_matches_finite_differences(rng):
    fs = sample_function(PriorHyperparams(dim=3, lengthscale_range=(0.2, 1.0)), rng)
    h = 1e-6
    for x in rng.uniform(0.1, 0.9, size=(20, 3)):
        _, analytic = eval_function(fs, x)
        numeric = np.array([
            (fs.evaluate(x + h * e)[0] - fs.evaluate(x - h * e)[0]) / (2 * h) for e in np.eye(3)
        ])
        scale = np.maximum(np.abs(numeric), 1.0)
        assert np.all(np.abs(analytic - numeric) / scale < 1e-6)


def test_evaluation_is_deterministic(rng):
    fs = sample_function(PriorHyperparams(dim=2), rng)
    x = rng.uniform(size=2)
    assert eval_function(fs, x)[0] == eval_function(fs, x)[0]


def test_dimension_mismatch(cosine_sample):
    with pytest.raises(DomainError):
        eval_function(cosine_sample, np.array([0.1, 0.2]))


def test_function_sample_serialization(rng):
    fs = sample_function(PriorHyperparams(dim=2, num_features=16), rng)
    again = type(fs).from_dict(fs.to_dict())
    X = rng.uniform(size=(5, 2))
    np.testing.assert_array_equal(again.evaluate(X), fs.evaluate(X))


# ---------------------------------------------------------------------------
# Ascent
# ---------------------------------------------------------------------------

class _Paraboloid:
    """-|x - 0.3|^2 in d dimensions."""

    def __init__(self, dim):
        self.dim = dim

    def evaluate(self, X):
        return -np.sum((np.atleast_2d(X) - 0.3) ** 2, axis=1)

    def value_and_gradient(self, x):
        return float(-np.sum((x - 0.3) ** 2)), -2.0 * (x - 0.3)


class _Exploding(_Paraboloid):
    def value_and_gradient(self, x):
        return float("nan"), np.zeros(self.dim)


def test_find_optimum_cosine(cosine_sample, rng):
    x_star, y_star = find_optimum(cosine_sample, restarts=4, rng=rng)
    assert x_star[0] == pytest.approx(0.5, abs=1e-6)
    assert y_star == pytest.approx(1.0, abs=1e-6)


def test_find_optimum_paraboloid(rng):
    x_star, y_star = find_optimum(_Paraboloid(3), restarts=2, rng=rng)
    np.testing.assert_allclose(x_star, 0.3, atol=1e-6)
    assert y_star == pytest.approx(0.0, abs=1e-10)


def test_find_optimum_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        find_optimum(_Paraboloid(1), restarts=0, rng=rng)
    with pytest.raises(NonFiniteError):
        find_optimum(_Exploding(1), restarts=1, rng=rng)


def test_optimum_inside_box_and_consistent(rng):
    fs = sample_function(PriorHyperparams(dim=2), rng)
    x_star, y_star = find_optimum(fs, restarts=8, rng=rng)
    assert np.all((x_star >= 0.0) & (x_star <= 1.0))
    assert y_star == pytest.approx(eval_function(fs, x_star)[0], rel=1e-12, abs=1e-12)


@pytest.mark.slow
def test_ascent_beats_dense_uniform_sampling():
    rng = np.random.default_rng(99)
    hp = PriorHyperparams(dim=2)
    beaten = 0
    for _ in range(100):
        fs = sample_function(hp, rng)
        _, y_star = find_optimum(fs, restarts=32, rng=rng)
        values = fs.evaluate(rng.uniform(size=(10_000, 2)))
        beaten += int(values.max() > y_star)
    assert beaten <= 1


# ---------------------------------------------------------------------------
# Datasets and corpus
# ---------------------------------------------------------------------------

def test_sample_dataset(cosine_sample, rng):
    single = sample_dataset(cosine_sample, 1, rng)
    assert len(single) == 1
    assert single.y[0] == pytest.approx(eval_function(cosine_sample, single.X[0])[0], abs=1e-14)

    big = sample_dataset(sample_function(PriorHyperparams(dim=2, num_features=8), rng), 100_000, rng)
    assert np.all((big.X >= 0.0) & (big.X <= 1.0))
    np.testing.assert_allclose(big.X.mean(axis=0), 0.5, atol=0.01)
    with pytest.raises(ValueError):
        sample_dataset(cosine_sample, 0, rng)


def test_optimum_independent_of_dataset_draws():
    fs = sample_function(PriorHyperparams(dim=2), np.random.default_rng(3))
    x_a, _ = find_optimum(fs, 8, np.random.default_rng(10))
    sample_dataset(fs, 50, np.random.default_rng(11))
    x_b, _ = find_optimum(fs, 8, np.random.default_rng(10))
    np.testing.assert_array_equal(x_a, x_b)


def test_optimum_bin():
    assert optimum_bin(np.array([0.49]), 2) == 0
    assert optimum_bin(np.array([0.5]), 2) == 1
    assert optimum_bin(np.array([1.0]), 2) == 1
    assert optimum_bin(np.array([0.0, 1.0]), 4) == 3
    assert optimum_bin(np.array([1.0, 0.0]), 4) == 12


def test_quota_arithmetic(small_prior):
    corpus = generate_corpus(small_prior, count=4, n_min=2, n_max=5, restarts=4, bins_per_dim=2, seed=0)
    x = np.array([p.x_star[0] for p in corpus.pairs])
    assert len(corpus) == 4
    assert np.sum(x < 0.5) == 2 and np.sum(x >= 0.5) == 2
    assert corpus.report.bin_counts == [2, 2]


def test_corpus_pairs_respect_invariants(small_prior):
    corpus = generate_corpus(small_prior, count=20, n_min=3, n_max=6, restarts=4, bins_per_dim=2, seed=1)
    for pair in corpus.pairs:
        assert 3 <= len(pair.dataset) <= 6
        assert pair.y_star >= pair.dataset.y.max()
        assert np.all((pair.dataset.X >= 0) & (pair.dataset.X <= 1))


def test_corpus_is_reproducible(small_prior):
    a = generate_corpus(small_prior, count=8, n_min=2, n_max=4, restarts=2, bins_per_dim=2, seed=5)
    b = generate_corpus(small_prior, count=8, n_min=2, n_max=4, restarts=2, bins_per_dim=2, seed=5)
    for pa, pb in zip(a.pairs, b.pairs):
        np.testing.assert_array_equal(pa.x_star, pb.x_star)
        np.testing.assert_array_equal(pa.dataset.X, pb.dataset.X)
        np.testing.assert_array_equal(pa.dataset.y, pb.dataset.y)


def test_corpus_argument_checks(small_prior):
    with pytest.raises(ValueError):
        generate_corpus(small_prior, count=0, n_min=1, n_max=2, restarts=1, bins_per_dim=2, seed=0)
    with pytest.raises(ValueError):
        generate_corpus(small_prior, count=2, n_min=3, n_max=2, restarts=1, bins_per_dim=2, seed=0)


def test_quota_failure_reports_bins(small_prior):
    with pytest.raises(CorpusQuotaError) as excinfo:
        generate_corpus(small_prior, count=16, n_min=1, n_max=2, restarts=1, bins_per_dim=4, seed=0, max_draws=3)
    err = excinfo.value
    assert len(err.bin_counts) == 4
    assert err.draws == 3
    assert sum(err.bin_counts) <= 3


@pytest.mark.slow
def test_worker_count_does_not_change_corpus(small_prior):
    a = generate_corpus(small_prior, count=40, n_min=2, n_max=4, restarts=2, bins_per_dim=2, seed=8, workers=1)
    b = generate_corpus(small_prior, count=40, n_min=2, n_max=4, restarts=2, bins_per_dim=2, seed=8, workers=2)
    assert [p.x_star.tolist() for p in a.pairs] == [p.x_star.tolist() for p in b.pairs]


@pytest.mark.slow
def test_optima_uniformity_d2():
    hp = PriorHyperparams(dim=2)
    corpus = generate_corpus(hp, count=2000, n_min=8, n_max=100, restarts=32, bins_per_dim=4, seed=7, workers=4)
    counts = np.bincount([optimum_bin(p.x_star, 4) for p in corpus.pairs], minlength=16)
    assert stats.chisquare(counts).pvalue > 0.01
