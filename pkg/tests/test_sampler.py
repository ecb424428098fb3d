from fractions import Fraction

import numpy as np
import pytest

from tabtree.sampler import (GenerationConfig, constrained_sample_token, decode_sequences, empirical_distribution,
                             mixture_check, sample_rows, sample_sequences, sequence_violations, total_variation)


def test_constrained_token_stays_in_set():
    rng = np.random.default_rng(0)
    logits = np.zeros(20)
    logits[0] = 50.0  # huge but invalid
    draws = {constrained_sample_token(logits, {3, 7, 11}, 1.0, rng) for _ in range(300)}
    assert draws == {3, 7, 11}
    assert constrained_sample_token(logits, (5, 6), 1.0, rng) == 5


def test_temperature_sharpens():
    rng = np.random.default_rng(1)
    logits = np.array([0.0, 1.0, 0.0, 0.0])
    cold = [constrained_sample_token(logits, (0, 4), 0.05, rng) for _ in range(200)]
    assert all(c == 1 for c in cold)
    hot = [constrained_sample_token(logits, (0, 4), 100.0, rng) for _ in range(2000)]
    assert np.bincount(hot, minlength=4).min() > 400


def test_constrained_token_frequencies():
    rng = np.random.default_rng(2)
    logits = np.log(np.array([0.1, 0.2, 0.3, 0.4, 5.0]))
    draws = np.array([constrained_sample_token(logits, (0, 4), 1.0, rng) for _ in range(20_000)])
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert np.allclose(freq, [0.1, 0.2, 0.3, 0.4], atol=0.015)


def test_empty_valid_set():
    with pytest.raises(ValueError):
        constrained_sample_token(np.zeros(3), set(), 1.0, np.random.default_rng(0))


def test_generation_config_validation():
    with pytest.raises(ValueError):
        GenerationConfig(temperature_numeric=0)
    with pytest.raises(ValueError):
        GenerationConfig(tree_mask=(0.9, 0.1))


def test_generated_sequences_valid(toy_generator):
    table, gen, _ = toy_generator
    seqs, which = sample_sequences(gen, 201, GenerationConfig(seed=5))
    assert seqs.shape == (201, gen.layout.seq_len)
    assert (which == 0).sum() == 100 and (which == 1).sum() == 101
    assert sequence_violations(gen.layout, seqs) == 0
    out = decode_sequences(gen, seqs)
    assert out.n_rows == 201 and out.schema == table.schema
    assert not out.missing_mask().any()


def test_generation_seeded(toy_generator):
    _, gen, _ = toy_generator
    a = sample_rows(gen, 30, GenerationConfig(seed=9))
    b = sample_rows(gen, 30, GenerationConfig(seed=9))
    c = sample_rows(gen, 30, GenerationConfig(seed=10))
    assert a.rows() == b.rows()
    assert a.rows() != c.rows()


def test_generation_independent_of_batch_size(toy_generator):
    _, gen, _ = toy_generator
    a, _ = sample_sequences(gen, 40, GenerationConfig(seed=2, batch_size=7))
    b, _ = sample_sequences(gen, 40, GenerationConfig(seed=2, batch_size=1024))
    assert np.array_equal(a, b)


def test_violation_counter():
    from tabtree.quantizer import CAT, VocabLayout
    lay = VocabLayout((2,), ((0, CAT, 2),), n_c=2, n_b=0, n_q=0)
    good = np.array([[lay.bos, 1, 2, lay.eos], [lay.bos, lay.mask, 3, lay.eos]])
    assert sequence_violations(lay, good) == 0
    assert sequence_violations(lay, np.array([[lay.bos, 2, 0, lay.mask]])) == 3


def test_mixture_equals_empirical():
    rows = [("a", 1), ("b", 2), ("a", 1), ("c", 3), ("b", 2), ("d", 4)]
    p1, p2 = rows[:2], rows[2:]
    mix = mixture_check([p1, p2], [Fraction(2, 6), Fraction(4, 6)])
    assert total_variation(mix, empirical_distribution(rows)) == 0


def test_mixture_unequal_weights_differs():
    rows = [1, 1, 2, 3]
    mix = mixture_check([rows[:1], rows[1:]], [Fraction(1, 2), Fraction(1, 2)])
    assert total_variation(mix, empirical_distribution(rows)) > 0
    with pytest.raises(ValueError):
        mixture_check([rows], [Fraction(1, 2)])
