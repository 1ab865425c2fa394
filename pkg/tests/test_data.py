import numpy as np
import pytest

from lmsfd.data import (
    EOS,
    PAD,
    UNK,
    CipherTask,
    DataError,
    Example,
    ParseError,
    Vocab,
    default_task,
    eval_batches,
    gen_cipher_corpus,
    load_tsv,
    make_batch,
    make_batches,
    temperature_sample,
    write_tsv,
)


def words(tokens):
    return np.array([int(t[1:]) for t in tokens])


def test_identity_permutations_copy_source():
    task = CipherTask([np.arange(10), np.arange(10)], pairs=[(0, 1)], pair_sizes=20, valid_per_pair=0)
    train, _ = gen_cipher_corpus(task, seed=1)
    for ex in train:
        assert ex.src[0] == "<l0>"
        assert ex.src[1:] == ex.tgt


def test_same_permutation_is_copy_task():
    p = np.random.default_rng(0).permutation(12)
    task = CipherTask([p, p[::-1].copy()], pairs=[(0, 0)], pair_sizes=10, valid_per_pair=0)
    for ex in gen_cipher_corpus(task, 3)[0]:
        assert ex.src[1:] == ex.tgt


def test_round_trip_with_inverse_permutation():
    task = CipherTask.random(4, 20, seed=5, pair_sizes=30, valid_per_pair=5)
    train, valid = gen_cipher_corpus(task, seed=2)
    for ex in train + valid:
        i, j = int(ex.src_lang[1:]), int(ex.tgt_lang[1:])
        z = np.argsort(task.permutations[i])[words(ex.src[1:])]
        assert np.array_equal(task.permutations[j][z], words(ex.tgt))
        # the lookup oracle solves every example
        assert np.array_equal(task.translate(words(ex.src[1:]), i, j), words(ex.tgt))


def test_task_validation_and_distinct_permutations():
    with pytest.raises(ValueError):
        CipherTask.random(2, 1)
    task = CipherTask.random(5, 3, seed=0)
    perms = {tuple(p) for p in task.permutations}
    assert len(perms) == 5
    assert task.pairs == [(0, 1), (1, 0), (0, 2), (2, 0), (0, 3), (3, 0), (0, 4), (4, 0)]


def test_generation_is_deterministic():
    task = default_task(0)
    assert gen_cipher_corpus(task, 4) == gen_cipher_corpus(task, 4)
    assert gen_cipher_corpus(task, 4) != gen_cipher_corpus(task, 5)


def test_tsv_empty_and_single_row(tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("", encoding="utf-8")
    assert load_tsv(empty) == []
    one = tmp_path / "one.tsv"
    one.write_text("en\tde\thello  world\thallo welt\n", encoding="utf-8")
    assert load_tsv(one) == [Example("en", "de", ("hello", "world"), ("hallo", "welt"))]


def test_tsv_malformed_row_names_line(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("en\tde\ta\tb\nen\tde\tonly three\n", encoding="utf-8")
    with pytest.raises(ParseError, match=":2:") as info:
        load_tsv(bad)
    assert info.value.line == 2


def test_tsv_export_round_trip(tmp_path):
    train, _ = gen_cipher_corpus(default_task(1), 0)
    path = tmp_path / "c.tsv"
    write_tsv(train[:50], path)
    assert load_tsv(path) == train[:50]


def test_temperature_sample():
    assert np.allclose(temperature_sample([3, 1], 1), [0.75, 0.25], atol=1e-15)
    assert np.allclose(temperature_sample([1000, 1, 7], 1e9), 1 / 3, atol=1e-6)
    p = temperature_sample([100, 1], 5)
    assert p[0] / p[1] == pytest.approx(100**0.2, rel=1e-12)
    assert np.allclose(p, [0.7153, 0.2847], atol=1e-4)
    with pytest.raises(ValueError):
        temperature_sample([1, 2], 0.5)


def test_vocab_layout_and_unk():
    train, _ = gen_cipher_corpus(default_task(0), 0)
    vocab = Vocab.build(train, ["l0", "l1", "l2", "l3"])
    assert vocab.tokens[:8] == ["<pad>", "<bos>", "<eos>", "<unk>", "<2l0>", "<2l1>", "<2l2>", "<2l3>"]
    assert vocab.encode(["never-seen"]) == [UNK]
    assert vocab.decode(vocab.encode(["w3", "<l2>"])) == ["w3", "<l2>"]


def test_make_batch_pads_and_rejects_mixed():
    ex = [Example("a", "b", ("x", "y"), ("z",)), Example("a", "b", ("x",), ("z", "z"))]
    vocab = Vocab.build(ex)
    b = make_batch(ex, vocab)
    assert b.pair == (0, 1)
    assert b.src[1, 1] == PAD
    assert list(b.tgt[0]) == vocab.encode(["z"]) + [EOS, PAD]
    with pytest.raises(DataError):
        make_batch(ex + [Example("b", "a", ("z",), ("x",))], vocab)


def test_single_pair_corpus_yields_that_pair():
    task = CipherTask.random(2, 8, pairs=[(1, 0)], pair_sizes=5, valid_per_pair=0)
    train, _ = gen_cipher_corpus(task, 0)
    stream = make_batches(train, Vocab.build(train, task.languages), 3, 5.0, 0)
    assert all(next(stream).pair == (1, 0) for _ in range(20))


def test_stream_frequencies_match_temperature():
    train, _ = gen_cipher_corpus(default_task(0), 0)
    vocab = Vocab.build(train, default_task(0).languages)
    stream = make_batches(train, vocab, 4, 5.0, seed=3)
    counts = {}
    for _ in range(10_000):
        b = next(stream)
        assert (b.src_lang, b.tgt_lang) == b.pair
        counts[b.pair] = counts.get(b.pair, 0) + 1
    expected = temperature_sample([2000, 2000, 600, 600, 150, 150], 5.0)
    pairs = [(0, 1), (1, 0), (0, 2), (2, 0), (0, 3), (3, 0)]
    for p, e in zip(pairs, expected):
        assert abs(counts[p] / 10_000 - e) < 0.02


def test_stream_determinism_and_coverage():
    train, _ = gen_cipher_corpus(default_task(2), 0)
    vocab = Vocab.build(train, default_task(2).languages)
    a = make_batches(train, vocab, 8, 2.0, seed=9)
    b = make_batches(train, vocab, 8, 2.0, seed=9)
    for _ in range(30):
        x, y = next(a), next(b)
        assert np.array_equal(x.src, y.src) and x.pair == y.pair
    batches = eval_batches(train, vocab, 64)
    assert sum(bt.size for bt in batches) == len(train)
