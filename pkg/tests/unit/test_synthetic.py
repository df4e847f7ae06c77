"""
Unit tests for the synthetic catalog generator.
"""

import numpy as np
import pytest

from src.corpus import preprocess_text, read_catalog
from src.synthetic import (
    SyntheticCatalogConfig,
    attribute_groups,
    cluster_words,
    generate_records,
    letter_code,
    noise_word,
    visual_word,
    write_catalog,
)


def test_word_codes_are_alphabetic_and_distinct():
    assert letter_code(0, 2) == "aa"
    assert letter_code(27, 2) == "bb"
    assert visual_word(1, 2) == "visabac"
    assert noise_word(25) == "noiseaz"
    words = {visual_word(c, j) for c in range(30) for j in range(30)} | {noise_word(n) for n in range(100)}
    assert len(words) == 1000
    assert all(w.isalpha() for w in words)
    with pytest.raises(ValueError):
        letter_code(676, 2)


def test_same_seed_same_bytes(tmp_path):
    config = SyntheticCatalogConfig(samples_per_cluster=20, seed=3)
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert write_catalog(first, config) == 160
    write_catalog(second, config)
    assert first.read_bytes() == second.read_bytes()
    write_catalog(second, SyntheticCatalogConfig(samples_per_cluster=20, seed=4))
    assert first.read_bytes() != second.read_bytes()


def test_records_parse_as_catalog(tmp_path, preprocess_config):
    config = SyntheticCatalogConfig(clusters=3, samples_per_cluster=10, images_per_item=5)
    path = tmp_path / "catalog.jsonl"
    write_catalog(path, config)
    records = list(read_catalog(path))
    assert len(records) == 30
    assert len({r.item_id for r in records}) == 6
    assert records[0].annotations["category"] == 0
    assert records[0].image_input.shape == (16,)
    # boilerplate and stopwords disappear, visual words survive
    tokens = preprocess_text(records[0].text_fields, preprocess_config)
    assert "the" not in tokens and "shop" not in tokens
    assert set(tokens) & set(cluster_words(config)[0])


def test_visual_words_stay_in_their_cluster():
    config = SyntheticCatalogConfig(clusters=4, samples_per_cluster=50, noise_words=0)
    owners = {w: c for c, words in enumerate(cluster_words(config)) for w in words}
    for record in generate_records(config):
        words = record["text_fields"][0].split()[1:]
        assert words
        assert {owners[w] for w in words} == {record["category"]}
        assert record["text_fields"][1] == "shop online"


def test_noise_rate_is_respected():
    config = SyntheticCatalogConfig(clusters=2, samples_per_cluster=500, noise_words=40, noise_rate=0.1)
    counts = [len(r["text_fields"][1].split()) - 2 for r in generate_records(config)]
    # 1000 records x 40 words at rate 0.1: mean 4, std of the mean about 0.06
    assert np.mean(counts) == pytest.approx(4.0, abs=0.3)


def test_visual_rate_and_attributes():
    config = SyntheticCatalogConfig(clusters=2, words_per_cluster=4, samples_per_cluster=200, visual_rate=0.0)
    for record in generate_records(config):
        # at least one visual word per record even at rate zero
        assert len(record["attributes"]) == 1
        cluster = record["category"]
        assert cluster * 4 <= record["attributes"][0] < (cluster + 1) * 4


def test_images_are_bounded_tensors():
    config = SyntheticCatalogConfig(clusters=2, samples_per_cluster=3, image_shape=(2, 3, 4))
    for record in generate_records(config):
        image = np.asarray(record["image"])
        assert "features" not in record
        assert image.shape == (2, 3, 4)
        assert image.min() >= 0.0 and image.max() <= 1.0


def test_attribute_groups():
    groups = attribute_groups(SyntheticCatalogConfig(clusters=2, words_per_cluster=3))
    assert groups == {0: "cluster-0", 1: "cluster-0", 2: "cluster-0", 3: "cluster-1", 4: "cluster-1", 5: "cluster-1"}
