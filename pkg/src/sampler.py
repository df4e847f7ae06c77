"""
Uniform word-then-image pair sampling and uniform negative-word sampling.

All draws go through numpy's PCG64 generator (`np.random.default_rng(seed)`),
so sequences are reproducible across platforms for a given seed.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from src.config import SamplerConfig
from src.corpus import TrainingSample
from src.errors import EmptyIndex, IndexOutOfRange, NotEnoughCandidates

logger = logging.getLogger(__name__)


def make_rng(seed: Union[int, Sequence[int]]) -> np.random.Generator:
    """PCG64 generator; a sequence such as (seed, epoch) derives an independent stream."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class InvertedIndex:
    """Vocabulary index -> sorted positions of the samples whose bag contains it."""

    postings: Tuple[np.ndarray, ...]
    active_words: np.ndarray

    @property
    def vocabulary_size(self) -> int:
        return len(self.postings)


def build_inverted_index(samples: Sequence[TrainingSample], vocabulary_size: int) -> InvertedIndex:
    """Index every sample position under each of its labels."""
    buckets: List[List[int]] = [[] for _ in range(vocabulary_size)]
    for position, sample in enumerate(samples):
        for label in sample.labels:
            if label >= vocabulary_size:
                raise IndexOutOfRange(
                    f"sample {sample.record_id} has label {label}, vocabulary size is {vocabulary_size}"
                )
            buckets[label].append(position)

    # positions are appended in increasing order and bags are sets, so lists are sorted and unique
    postings = tuple(np.asarray(bucket, dtype=np.int64) for bucket in buckets)
    for array in postings:
        array.setflags(write=False)
    active = np.asarray([w for w, bucket in enumerate(buckets) if bucket], dtype=np.int64)
    active.setflags(write=False)
    logger.info(f"Inverted index: {len(active)} active words over {len(samples)} samples")
    return InvertedIndex(postings=postings, active_words=active)


def sample_pair(index: InvertedIndex, rng: np.random.Generator) -> Tuple[int, int]:
    """Draw a word uniformly among active words, then one of its images uniformly."""
    if len(index.active_words) == 0:
        raise EmptyIndex("inverted index has no active words")
    word = int(index.active_words[rng.integers(len(index.active_words))])
    posting = index.postings[word]
    position = int(posting[rng.integers(len(posting))])
    return word, position


def sample_negatives(
    positive: int,
    bag: Sequence[int],
    config: SamplerConfig,
    vocabulary_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw `n_negatives` distinct words uniformly, without replacement,
    from the vocabulary minus the positive (and minus the bag if configured)."""
    excluded = {positive}
    if config.exclude_bag_words_from_negatives:
        excluded.update(bag)
    excluded_sorted = np.asarray(sorted(w for w in excluded if 0 <= w < vocabulary_size), dtype=np.int64)
    eligible = vocabulary_size - len(excluded_sorted)
    if eligible < config.n_negatives:
        raise NotEnoughCandidates(
            f"{eligible} eligible negative words, {config.n_negatives} requested"
        )

    draws = rng.choice(eligible, size=config.n_negatives, replace=False)
    # map the d-th eligible slot onto the vocabulary by skipping excluded indices
    shifted = excluded_sorted - np.arange(len(excluded_sorted))
    return draws + np.searchsorted(shifted, draws, side="right")
