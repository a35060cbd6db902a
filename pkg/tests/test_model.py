import numpy as np
import pytest

from fibo.config import FormatError, ShapeError
from fibo.funcprior import PriorHyperparams
from fibo.model import (
    Checkpoint,
    FiboModel,
    ModelConfig,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    peek_dimension,
    save_checkpoint,
)

from conftest import perturbed_model, random_dataset


def test_initial_flow_is_identity(rng):
    model = FiboModel.initialize(ModelConfig.for_dimension(2), seed=0)
    D = random_dataset(rng, 5, 2)
    logp = model.log_prob_batch([D], np.array([[0.5, 0.5]]))
    assert logp[0] == pytest.approx(2 * 0.4673558, abs=1e-6)


def test_same_seed_same_weights():
    a = FiboModel.initialize(ModelConfig.for_dimension(3), seed=4)
    b = FiboModel.initialize(ModelConfig.for_dimension(3), seed=4)
    assert a.weights.keys() == b.weights.keys()
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_targets_on_the_boundary_are_clamped(rng):
    model = perturbed_model(2)
    D = random_dataset(rng, 4, 2)
    logp = model.log_prob_batch([D, D], np.array([[0.0, 1.0], [1.0, 0.3]]))
    assert np.all(np.isfinite(logp))


def test_blind_context_ignores_the_dataset(rng):
    model = perturbed_model(2)
    x = np.array([[0.3, 0.6], [0.3, 0.6]])
    blind = model.log_prob_batch([random_dataset(rng, 3, 2), random_dataset(rng, 9, 2)], x, blind_context=True)
    assert blind[0] == blind[1]
    seeing = model.log_prob_batch([random_dataset(rng, 3, 2), random_dataset(rng, 9, 2)], x)
    assert seeing[0] != seeing[1]


def test_target_shape_mismatch(rng):
    model = perturbed_model(2)
    with pytest.raises(ShapeError):
        model.log_prob_batch([random_dataset(rng, 3, 2)], np.array([[0.3, 0.6, 0.1]]))


def test_samples_are_in_the_cube(rng):
    draws = perturbed_model(3).sample(random_dataset(rng, 6, 3), 32, rng)
    assert draws.shape == (32, 3)
    assert np.all((draws > 0.0) & (draws < 1.0))


def test_copy_is_independent():
    model = perturbed_model(1)
    twin = model.copy()
    twin.weights["encoder/W1"][0, 0] += 1.0
    assert model.weights["encoder/W1"][0, 0] != twin.weights["encoder/W1"][0, 0]


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

@pytest.fixture
def checkpoint():
    return Checkpoint(
        model=perturbed_model(2, attention=True),
        prior=PriorHyperparams(dim=2),
        metadata={"seed": 3, "train_nll": -0.25, "epochs_completed": 2, "note": "kept"},
    )


def test_checkpoint_round_trip(checkpoint, tmp_path, rng):
    path = tmp_path / "model.fibm"
    save_checkpoint(checkpoint, path)
    loaded = load_checkpoint(path)
    assert loaded.metadata == checkpoint.metadata
    assert loaded.prior == checkpoint.prior
    assert loaded.model.config == checkpoint.model.config
    D = random_dataset(rng, 5, 2)
    x = np.array([[0.2, 0.8]])
    np.testing.assert_array_equal(loaded.model.log_prob_batch([D], x), checkpoint.model.log_prob_batch([D], x))
    assert peek_dimension(path) == 2


def test_checkpoint_bytes_are_deterministic(checkpoint):
    assert encode_checkpoint(checkpoint) == encode_checkpoint(checkpoint)


def test_checkpoint_rejects_bad_magic(checkpoint):
    payload = b"NOPE" + encode_checkpoint(checkpoint)[4:]
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(payload)


def test_checkpoint_rejects_truncation_and_trailing_bytes(checkpoint):
    payload = encode_checkpoint(checkpoint)
    with pytest.raises(FormatError, match="truncated"):
        decode_checkpoint(payload[:-8])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(payload + b"\x00\x00")


def test_checkpoint_rejects_version(checkpoint):
    payload = bytearray(encode_checkpoint(checkpoint))
    payload[4:8] = (7).to_bytes(4, "little")
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(bytes(payload))
