"""
Synthetic weakly-annotated catalog generator for desk-scale experiments.

Each cluster owns a Gaussian feature center and a set of visual words that
describe it; every record also picks up uniformly sprinkled noise words that
carry no visual signal, plus a stopword and blacklisted boilerplate.
"""

import json
import logging
import math
import string
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

logger = logging.getLogger(__name__)


def letter_code(n: int, width: int) -> str:
    """Base-26 lowercase code of fixed width (tokens must be purely alphabetic)."""
    letters = []
    for _ in range(width):
        n, digit = divmod(n, 26)
        letters.append(string.ascii_lowercase[digit])
    if n:
        raise ValueError(f"code does not fit in {width} letters")
    return "".join(reversed(letters))


def visual_word(cluster: int, position: int) -> str:
    return f"vis{letter_code(cluster, 2)}{letter_code(position, 2)}"


def noise_word(position: int) -> str:
    return f"noise{letter_code(position, 2)}"


class SyntheticCatalogConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    clusters: int = Field(default=8, ge=1, le=676)
    words_per_cluster: int = Field(default=5, ge=1, le=676)
    noise_words: int = Field(default=60, ge=0, le=676)
    samples_per_cluster: int = Field(default=500, ge=1)
    images_per_item: int = Field(default=2, ge=1)
    feature_dim: int = Field(default=16, ge=1)
    visual_rate: float = Field(default=0.8, ge=0.0, le=1.0)
    noise_rate: float = Field(default=0.05, ge=0.0, le=1.0)
    center_scale: float = Field(default=3.0, gt=0.0)
    item_scale: float = Field(default=0.5, ge=0.0)
    image_noise: float = Field(default=0.2, ge=0.0)
    image_shape: Optional[Tuple[int, int, int]] = None
    seed: int = 0


def generate_records(config: SyntheticCatalogConfig) -> Iterator[Dict[str, Any]]:
    """Yield catalog records (as JSON-ready dicts) in a seed-determined order."""
    rng = np.random.default_rng(config.seed)
    centers = rng.normal(0.0, config.center_scale, size=(config.clusters, config.feature_dim))
    projection = None
    if config.image_shape is not None:
        pixels = int(np.prod(config.image_shape))
        projection = rng.normal(0.0, 1.0 / math.sqrt(config.feature_dim), size=(pixels, config.feature_dim))
    noise_vocabulary = [noise_word(n) for n in range(config.noise_words)]

    for cluster in range(config.clusters):
        cluster_words = [visual_word(cluster, j) for j in range(config.words_per_cluster)]
        offset = np.zeros(config.feature_dim)
        for n in range(config.samples_per_cluster):
            item = n // config.images_per_item
            if n % config.images_per_item == 0:
                offset = rng.normal(0.0, config.item_scale, size=config.feature_dim)
            features = centers[cluster] + offset + rng.normal(0.0, config.image_noise, size=config.feature_dim)

            present = np.flatnonzero(rng.random(config.words_per_cluster) < config.visual_rate)
            if present.size == 0:
                present = np.asarray([rng.integers(config.words_per_cluster)])
            noisy = np.flatnonzero(rng.random(config.noise_words) < config.noise_rate)

            record: Dict[str, Any] = {
                "record_id": f"syn-{cluster:03d}-{n:05d}",
                "item_id": f"item-{cluster:03d}-{item:05d}",
                "source_id": f"shop-{cluster % 3}",
                "text_fields": [
                    "the " + " ".join(cluster_words[j] for j in present),
                    " ".join(["shop", "online"] + [noise_vocabulary[j] for j in noisy]),
                ],
                "category": cluster,
                "attributes": [int(cluster * config.words_per_cluster + j) for j in present],
            }
            if projection is None:
                record["features"] = [round(float(v), 6) for v in features]
            else:
                pixels = expit(projection @ features).reshape(config.image_shape)
                record["image"] = np.round(pixels, 6).tolist()
            yield record


def write_catalog(path: Union[str, Path], config: SyntheticCatalogConfig) -> int:
    """Write the synthetic catalog as line-delimited JSON; returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in generate_records(config):
            f.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    logger.info(
        f"✅ Wrote {count} synthetic records to {path} ({config.clusters} clusters, "
        f"{config.clusters * config.words_per_cluster} visual words, {config.noise_words} noise words)"
    )
    return count


def attribute_groups(config: SyntheticCatalogConfig) -> Dict[int, str]:
    """Attribute index -> group name (one group per cluster)."""
    return {
        cluster * config.words_per_cluster + j: f"cluster-{cluster}"
        for cluster in range(config.clusters)
        for j in range(config.words_per_cluster)
    }


def cluster_words(config: SyntheticCatalogConfig) -> List[List[str]]:
    return [[visual_word(c, j) for j in range(config.words_per_cluster)] for c in range(config.clusters)]
