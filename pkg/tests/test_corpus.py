import numpy as np
import pytest

from fibo.config import FormatError
from fibo.corpus import (
    corpus_digest,
    decode_corpus,
    encode_corpus,
    export_jsonl,
    import_jsonl,
    load_corpus,
    save_corpus,
)
from fibo.funcprior import Corpus, PriorHyperparams, generate_corpus

from conftest import toy_pairs


@pytest.fixture
def corpus(rng):
    return Corpus(hp=PriorHyperparams(dim=2), pairs=toy_pairs(rng, 5, 2))


def _assert_same(a: Corpus, b: Corpus):
    assert len(a) == len(b)
    for pa, pb in zip(a.pairs, b.pairs):
        np.testing.assert_array_equal(pa.x_star, pb.x_star)
        np.testing.assert_array_equal(pa.dataset.X, pb.dataset.X)
        np.testing.assert_array_equal(pa.dataset.y, pb.dataset.y)
        assert pa.y_star == pb.y_star


def test_binary_layout_header(corpus):
    payload = encode_corpus(corpus)
    assert payload[:4] == b"FIBC"
    assert int.from_bytes(payload[4:8], "little") == 1
    assert int.from_bytes(payload[8:12], "little") == 2
    assert int.from_bytes(payload[12:20], "little") == 5


def test_save_and_load(corpus, tmp_path):
    path = tmp_path / "c.fibc"
    digest = save_corpus(corpus, path)
    assert digest == corpus_digest(path)
    _assert_same(corpus, load_corpus(path))


def test_rejects_bad_magic(corpus):
    payload = bytearray(encode_corpus(corpus))
    payload[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        decode_corpus(bytes(payload))


def test_rejects_unknown_version(corpus):
    payload = bytearray(encode_corpus(corpus))
    payload[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(FormatError, match="version"):
        decode_corpus(bytes(payload))


def test_rejects_truncation(corpus):
    payload = encode_corpus(corpus)
    with pytest.raises(FormatError, match="truncated"):
        decode_corpus(payload[:-3])
    with pytest.raises(FormatError, match="truncated"):
        decode_corpus(payload[:10])


def test_rejects_trailing_bytes(corpus):
    with pytest.raises(FormatError, match="trailing"):
        decode_corpus(encode_corpus(corpus) + b"\x00")


def test_jsonl_mirror(corpus, tmp_path):
    path = tmp_path / "c.jsonl"
    export_jsonl(corpus, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + len(corpus)
    _assert_same(corpus, import_jsonl(path))


def test_same_seed_gives_identical_file(tmp_path):
    hp = PriorHyperparams(dim=1, num_features=32)
    digests = []
    for name in ("a.fibc", "b.fibc"):
        generated = generate_corpus(hp, count=6, n_min=2, n_max=4, restarts=2, bins_per_dim=2, seed=7)
        digests.append(save_corpus(generated, tmp_path / name))
    assert digests[0] == digests[1]
    assert (tmp_path / "a.fibc").read_bytes() == (tmp_path / "b.fibc").read_bytes()


def test_prior_is_stored_with_the_pairs(rng, tmp_path):
    hp = PriorHyperparams(dim=2, num_features=32, lengthscale_range=(0.2, 0.4), signal_variance_range=(1.5, 1.5))
    corpus = Corpus(hp=hp, pairs=toy_pairs(rng, 3, 2))
    assert decode_corpus(encode_corpus(corpus)).hp == hp
    save_corpus(corpus, tmp_path / "c.fibc")
    assert load_corpus(tmp_path / "c.fibc").hp == hp
    export_jsonl(corpus, tmp_path / "c.jsonl")
    assert import_jsonl(tmp_path / "c.jsonl").hp == hp


def test_rejects_prior_dimension_mismatch(rng):
    pairs = toy_pairs(rng, 2, 2)
    payload = encode_corpus(Corpus(hp=PriorHyperparams(dim=2), pairs=pairs))
    other = encode_corpus(Corpus(hp=PriorHyperparams(dim=3), pairs=[]))
    prior_block = other[20:]
    body = payload[:len(payload) - len(prior_block)]
    with pytest.raises(FormatError, match="dimension"):
        decode_corpus(body + prior_block)


def test_rejects_unreadable_prior(corpus):
    payload = bytearray(encode_corpus(corpus))
    payload[-1:] = b"#"
    with pytest.raises(FormatError, match="prior"):
        decode_corpus(bytes(payload))


def test_jsonl_count_mismatch(corpus, tmp_path):
    path = tmp_path / "c.jsonl"
    export_jsonl(corpus, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError, match="announces"):
        import_jsonl(path)
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(FormatError):
        import_jsonl(tmp_path / "empty.jsonl")
