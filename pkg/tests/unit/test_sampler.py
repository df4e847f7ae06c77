"""
Unit tests for inverted-index pair sampling and negative sampling.
Distribution checks use chi-square goodness of fit at alpha = 0.001.
"""

from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import make_sample
from src.config import SamplerConfig
from src.errors import EmptyIndex, IndexOutOfRange, NotEnoughCandidates
from src.sampler import build_inverted_index, make_rng, sample_negatives, sample_pair

ALPHA = 0.001


@pytest.fixture
def skewed_samples():
    """50 words; word w is attached to w+1 samples, so image counts are very unbalanced."""
    samples = []
    for word in range(50):
        for copy in range(word + 1):
            samples.append(make_sample(f"w{word}-{copy}", [word]))
    # one sample carrying several words
    samples.append(make_sample("multi", [0, 10, 49]))
    return samples


def test_inverted_index_postings(skewed_samples):
    index = build_inverted_index(skewed_samples, 52)
    assert index.vocabulary_size == 52
    multi = len(skewed_samples) - 1
    assert list(index.postings[0]) == [0, multi]
    assert len(index.postings[49]) == 51
    assert all(np.all(np.diff(p) > 0) for p in index.postings)
    # words 50 and 51 never occur
    assert list(index.active_words) == list(range(50))


def test_inverted_index_rejects_out_of_range_label():
    with pytest.raises(IndexOutOfRange):
        build_inverted_index([make_sample("a", [3])], 3)


def test_empty_index():
    index = build_inverted_index([], 4)
    with pytest.raises(EmptyIndex):
        sample_pair(index, make_rng(0))


def test_word_marginal_is_uniform(skewed_samples):
    """Words are drawn uniformly although word 49 has 51x more images than word 0."""
    index = build_inverted_index(skewed_samples, 50)
    rng = make_rng(0)
    counts = Counter(sample_pair(index, rng)[0] for _ in range(100_000))
    observed = [counts[w] for w in range(50)]
    assert chisquare(observed).pvalue > ALPHA


def test_image_given_word_is_uniform(skewed_samples):
    index = build_inverted_index(skewed_samples, 50)
    rng = make_rng(1)
    by_word = {10: Counter(), 49: Counter()}
    for _ in range(100_000):
        word, position = sample_pair(index, rng)
        if word in by_word:
            by_word[word][position] += 1
    for word, counts in by_word.items():
        posting = index.postings[word]
        assert set(counts) <= set(int(p) for p in posting)
        observed = [counts[int(p)] for p in posting]
        assert chisquare(observed).pvalue > ALPHA


def test_pair_sampling_is_seeded(skewed_samples):
    index = build_inverted_index(skewed_samples, 50)
    rng_a, rng_b = make_rng(7), make_rng(7)
    assert [sample_pair(index, rng_a) for _ in range(100)] == [sample_pair(index, rng_b) for _ in range(100)]


class TestNegatives:
    def test_distinct_and_positive_excluded(self):
        rng = make_rng(3)
        config = SamplerConfig(n_negatives=10)
        for _ in range(200):
            negatives = sample_negatives(4, (1, 4, 7), config, 12, rng)
            assert len(negatives) == 10
            assert len(set(negatives.tolist())) == 10
            assert 4 not in negatives
            assert negatives.min() >= 0 and negatives.max() < 12

    def test_bag_words_excluded_when_configured(self):
        rng = make_rng(3)
        config = SamplerConfig(n_negatives=8, exclude_bag_words_from_negatives=True)
        negatives = sample_negatives(4, (1, 4, 7), config, 11, rng)
        assert sorted(negatives.tolist()) == [0, 2, 3, 5, 6, 8, 9, 10]

    def test_bag_words_allowed_by_default(self):
        rng = make_rng(5)
        config = SamplerConfig(n_negatives=2)
        seen = set()
        for _ in range(500):
            seen.update(sample_negatives(0, (0, 1, 2), config, 4, rng).tolist())
        assert seen == {1, 2, 3}

    def test_uniform_over_eligible_words(self):
        rng = make_rng(11)
        config = SamplerConfig(n_negatives=5, exclude_bag_words_from_negatives=True)
        counts = Counter()
        for _ in range(20_000):
            counts.update(sample_negatives(3, (3, 17), config, 30, rng).tolist())
        eligible = [w for w in range(30) if w not in (3, 17)]
        assert set(counts) == set(eligible)
        assert chisquare([counts[w] for w in eligible]).pvalue > ALPHA

    def test_not_enough_candidates(self):
        with pytest.raises(NotEnoughCandidates):
            sample_negatives(0, (0,), SamplerConfig(n_negatives=5), 5, make_rng(0))
        with pytest.raises(NotEnoughCandidates):
            sample_negatives(0, (0, 1, 2), SamplerConfig(n_negatives=3, exclude_bag_words_from_negatives=True), 5, make_rng(0))

    def test_config_check_against_vocabulary(self):
        SamplerConfig(n_negatives=4).check(5)
        with pytest.raises(ValueError):
            SamplerConfig(n_negatives=5).check(5)
