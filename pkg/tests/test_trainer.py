import math

import numpy as np
import pytest

from fibo.config import NonFiniteLossError, TrainingDivergedError
from fibo.funcprior import Corpus, Dataset, PriorHyperparams, TrainingPair
from fibo.model import FiboModel, ModelConfig, load_checkpoint
from fibo.posterior_oracle import ToyPrior
from fibo.trainer import (
    AdamOptimizer,
    TrainConfig,
    augment,
    clip_global_norm,
    cosine_rate,
    evaluate_nll,
    loss_and_gradients,
    nll_loss,
    split_corpus,
    train,
)

from conftest import perturbed_model, random_dataset, toy_pairs


def _toy_corpus(rng, count=12, dim=1) -> Corpus:
    return Corpus(hp=PriorHyperparams(dim=dim), pairs=toy_pairs(rng, count, dim))


def _bad_pair() -> TrainingPair:
    D = Dataset(np.array([[0.1], [0.4], [0.8]]), np.full(3, np.nan))
    return TrainingPair(x_star=np.array([0.5]), dataset=D, y_star=0.0)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def test_identity_model_nll(rng):
    model = FiboModel.initialize(ModelConfig.for_dimension(1), seed=0)
    pair = TrainingPair(x_star=np.array([0.5]), dataset=random_dataset(rng, 4, 1), y_star=0.0)
    assert nll_loss(model, [pair]) == pytest.approx(-0.4674, abs=1e-4)


def test_batch_loss_is_mean_of_pair_losses(rng):
    model = perturbed_model(2)
    pairs = toy_pairs(rng, 5, 2)
    singles = [nll_loss(model, [p]) for p in pairs]
    assert nll_loss(model, pairs) == pytest.approx(np.mean(singles), rel=1e-12)


def test_loss_ignores_dataset_order(rng):
    model = perturbed_model(2, seed=4, attention=True)
    pair = toy_pairs(rng, 1, 2, n_lo=6, n_hi=9)[0]
    reference = nll_loss(model, [pair])
    for _ in range(3):
        shuffled = pair.dataset.subset(rng.permutation(len(pair.dataset)))
        assert nll_loss(model, [TrainingPair(pair.x_star, shuffled, pair.y_star)]) == reference


def test_gradient_matches_directional_difference(rng):
    model = perturbed_model(1, seed=2)
    batch = toy_pairs(rng, 3, 1)
    _, grads = loss_and_gradients(model, batch)
    direction = {k: np.random.default_rng(9).standard_normal(v.shape) for k, v in model.weights.items()}
    h = 1e-6

    def shifted(sign):
        twin = model.copy()
        for k in twin.weights:
            twin.weights[k] = twin.weights[k] + sign * h * direction[k]
        return nll_loss(twin, batch)

    numeric = (shifted(1.0) - shifted(-1.0)) / (2 * h)
    analytic = sum(float(np.sum(grads[k] * direction[k])) for k in grads)
    assert analytic == pytest.approx(numeric, rel=1e-5)


def test_small_step_against_gradient_lowers_loss(rng):
    model = perturbed_model(2, seed=5)
    batch = toy_pairs(rng, 4, 2)
    loss, grads = loss_and_gradients(model, batch)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    stepped = model.copy()
    for k, g in grads.items():
        stepped.weights[k] = stepped.weights[k] - 1e-4 * g / norm
    assert nll_loss(stepped, batch) < loss


def test_non_finite_loss_names_the_pair(rng):
    model = perturbed_model(1)
    batch = toy_pairs(rng, 2, 1) + [_bad_pair()]
    with pytest.raises(NonFiniteLossError) as excinfo:
        nll_loss(model, batch)
    assert excinfo.value.pair_index == 2


def test_empty_batch(rng):
    with pytest.raises(ValueError):
        nll_loss(perturbed_model(1), [])


# ---------------------------------------------------------------------------
# Augmentation, schedule and optimizer
# ---------------------------------------------------------------------------

def test_augment_full_size_is_identity(rng):
    pair = toy_pairs(rng, 1, 2, n_lo=6, n_hi=6)[0]
    same = augment(pair, rng, 6, 6)
    np.testing.assert_array_equal(same.dataset.X, pair.dataset.X)
    np.testing.assert_array_equal(same.x_star, pair.x_star)


def test_augment_subset_sizes(rng):
    pair = toy_pairs(rng, 1, 2, n_lo=8, n_hi=8)[0]
    sizes = {len(augment(pair, rng, 2, 5).dataset) for _ in range(200)}
    assert sizes == {2, 3, 4, 5}
    sub = augment(pair, rng, 3, 3)
    rows = {tuple(r) for r in pair.dataset.X}
    assert all(tuple(r) in rows for r in sub.dataset.X)
    with pytest.raises(ValueError):
        augment(pair, rng, 1, 9)
    with pytest.raises(ValueError):
        augment(pair, rng, 0, 2)


def test_cosine_schedule_endpoints():
    assert cosine_rate(0, 10, 1e-3) == pytest.approx(1e-3)
    assert cosine_rate(9, 10, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert cosine_rate(0, 1, 1e-3) == 1e-3
    rates = [cosine_rate(s, 20, 1.0) for s in range(20)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    untouched, _ = clip_global_norm(grads, 10.0)
    assert untouched is grads


def test_adam_first_step_moves_by_the_rate():
    weights = {"w": np.array([1.0, -2.0])}
    optimizer = AdamOptimizer(weights)
    optimizer.step(weights, {"w": np.array([0.5, -3.0])}, rate=0.1)
    np.testing.assert_allclose(weights["w"], [0.9, -1.9], atol=1e-6)


def test_split_corpus_sizes(rng):
    pairs = toy_pairs(rng, 10, 1)
    training, validation = split_corpus(pairs, 0.2, rng)
    assert len(training) == 8 and len(validation) == 2
    training, validation = split_corpus(pairs[:2], 0.1, rng)
    assert len(training) == 1 and len(validation) == 1
    training, validation = split_corpus(pairs, 0.0, rng)
    assert len(training) == 10 and not validation


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def test_train_is_reproducible(rng):
    corpus = _toy_corpus(rng)
    config = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=3, augment_min=2, augment_max=3)
    a = train(corpus, config)
    b = train(corpus, config)
    assert all(np.array_equal(a.model.weights[k], b.model.weights[k]) for k in a.model.weights)
    assert a.metadata["epochs_completed"] == 2
    assert a.metadata["train_nll"] == b.metadata["train_nll"]


def test_zero_epochs_returns_the_initial_model(rng):
    corpus = _toy_corpus(rng)
    checkpoint = train(corpus, TrainConfig(epochs=0, seed=1), corpus_sha256="abc")
    initial = FiboModel.initialize(ModelConfig.for_dimension(1), seed=1)
    assert all(np.array_equal(checkpoint.model.weights[k], initial.weights[k]) for k in initial.weights)
    assert checkpoint.metadata["epochs_completed"] == 0
    assert checkpoint.metadata["corpus_sha256"] == "abc"
    assert checkpoint.metadata["val_nll"] == pytest.approx(checkpoint.metadata["initial_val_nll"])
    assert checkpoint.prior == corpus.hp


def test_callback_sees_every_epoch(rng, tmp_path):
    seen = []
    path = tmp_path / "m.fibm"
    config = TrainConfig(epochs=2, batch_size=6, seed=0, augment_min=2, augment_max=3, checkpoint_path=str(path))
    train(_toy_corpus(rng), config, callback=lambda epoch, ckpt: seen.append((epoch, ckpt.metadata["epochs_completed"])))
    assert seen == [(1, 1), (2, 2)]
    assert load_checkpoint(path).metadata["epochs_completed"] == 2


def test_divergence_keeps_last_good_checkpoint(rng, tmp_path):
    corpus = _toy_corpus(rng, count=3)
    corpus.pairs.append(_bad_pair())
    path = tmp_path / "m.fibm"
    config = TrainConfig(epochs=1, batch_size=8, seed=0, validation_fraction=0.0, augment_min=1, augment_max=3,
                         checkpoint_path=str(path))
    with pytest.raises(TrainingDivergedError) as excinfo:
        train(corpus, config)
    assert excinfo.value.checkpoint.metadata["epochs_completed"] == 0
    assert path.exists()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(augment_min=5, augment_max=2)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)


@pytest.mark.slow
def test_trained_model_uses_the_context():
    toy = ToyPrior.build(seed=0)
    config = TrainConfig(epochs=10, batch_size=64, learning_rate=3e-3, seed=0, augment_min=1, augment_max=4)
    model = train(toy.generate_corpus(2000, seed=1), config).model
    held_out = toy.generate_corpus(400, seed=2).pairs
    assert evaluate_nll(model, held_out, 64) < evaluate_nll(model, held_out, 64, blind_context=True)
