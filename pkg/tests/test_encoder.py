import numpy as np
import pytest

from fibo import diffcore as dc
from fibo.config import DomainError, ShapeError
from fibo.encoder import EncoderConfig, EncoderParams, encode, encode_batch, init_encoder, point_features
from fibo.funcprior import Dataset

from conftest import random_dataset


@pytest.fixture(params=[False, True], ids=["mean-pool", "attention"])
def params(request):
    config = EncoderConfig.for_dimension(2, attention=request.param)
    return EncoderParams(config, init_encoder(config, np.random.default_rng(0)))


def test_context_dimension_by_problem_size():
    assert EncoderConfig.for_dimension(2).context_dim == 64
    assert EncoderConfig.for_dimension(3).context_dim == 128


def test_output_shape(params, rng):
    c = encode(params, random_dataset(rng, 7, 2))
    assert c.shape == (params.config.context_dim,)
    assert np.all(np.isfinite(c))


def test_permutation_invariance(params, rng):
    D = random_dataset(rng, 9, 2)
    reference = encode(params, D)
    for _ in range(5):
        shuffled = D.subset(rng.permutation(len(D)))
        np.testing.assert_array_equal(encode(params, shuffled), reference)


def test_single_point_dataset(params):
    c = encode(params, Dataset(np.array([[0.2, 0.7]]), np.array([3.0])))
    assert np.all(np.isfinite(c))


def test_constant_values_do_not_blow_up(params):
    D = Dataset(np.random.default_rng(2).uniform(size=(6, 2)), np.full(6, 4.0))
    assert np.all(np.isfinite(encode(params, D)))


def test_duplicating_every_point_keeps_the_context(rng):
    config = EncoderConfig.for_dimension(2)
    params = EncoderParams(config, init_encoder(config, rng))
    D = random_dataset(rng, 5, 2)
    doubled = Dataset(np.vstack([D.X, D.X]), np.concatenate([D.y, D.y]))
    np.testing.assert_allclose(encode(params, doubled), encode(params, D), rtol=1e-12, atol=1e-12)


def test_batch_rows_match_single_encodings(params, rng):
    datasets = [random_dataset(rng, n, 2) for n in (1, 4, 9)]
    batch = encode_batch(params.config, params.weights, datasets).numpy()
    for row, D in zip(batch, datasets):
        np.testing.assert_allclose(row, encode(params, D), rtol=1e-12, atol=1e-12)


def test_attention_scores_stay_within_each_dataset(rng, monkeypatch):
    config = EncoderConfig.for_dimension(2, attention=True)
    weights = init_encoder(config, rng)
    score_shapes = []
    softmax = dc.softmax

    def recording_softmax(x, axis=-1):
        score_shapes.append(x.shape)
        return softmax(x, axis=axis)

    monkeypatch.setattr(dc, "softmax", recording_softmax)
    sizes = [3, 100, 100, 7]
    encode_batch(config, weights, [random_dataset(rng, n, 2) for n in sizes])
    assert score_shapes == [(n, n) for n in sizes]


def test_point_features_layout():
    D = Dataset(np.array([[0.5], [0.1]]), np.array([1.0, 3.0]))
    rows = point_features(D)
    np.testing.assert_array_equal(rows[:, 0], [0.1, 0.5])
    np.testing.assert_allclose(rows[:, 1], [1.0, -1.0])
    np.testing.assert_allclose(rows[:, 2], np.arcsinh(2.0))
    np.testing.assert_allclose(rows[:, 3], 0.0, atol=1e-15)


def test_rejects_empty_and_out_of_cube(params):
    with pytest.raises(DomainError):
        encode(params, Dataset.empty(2))
    with pytest.raises(DomainError):
        encode(params, Dataset(np.array([[0.5, 1.2]]), np.array([0.0])))
    with pytest.raises(ShapeError):
        encode(params, Dataset(np.array([[0.5]]), np.array([0.0])))


def test_gradients_through_encoder(params, rng):
    datasets = [random_dataset(rng, 4, 2), random_dataset(rng, 6, 2)]
    names = sorted(params.weights)
    projection = np.random.default_rng(3).standard_normal((params.config.context_dim, 1))

    def objective(*tensors):
        weights = dict(zip(names, tensors))
        return dc.tanh(encode_batch(params.config, weights, datasets) @ projection).sum()

    assert dc.check_gradients(objective, [params.weights[n] for n in names], samples=10) < 1e-4
