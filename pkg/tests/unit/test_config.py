"""
Unit tests for configuration loading and the environment thread cap.
"""

import json
import logging
from pathlib import Path

import pytest
from pydantic import ValidationError

from src.config import (
    PreprocessConfig,
    RetrievalConfig,
    SamplerConfig,
    TrainConfig,
    WeakcatSettings,
    setup_logging,
    worker_count,
)

REPO_CONFIG = Path(__file__).resolve().parents[2] / "config" / "weakcat_config.json"


def test_defaults_follow_training_protocol():
    train = TrainConfig()
    assert train.batch_size == 20
    assert train.initial_lr == 0.1
    assert train.lr_divisor == 10.0
    assert train.lr_patience_epochs == 10
    assert train.stop_patience_epochs == 20
    assert train.head_only_epochs == 20
    assert train.epoch_fraction == 0.1
    assert PreprocessConfig().vocabulary_max_size == 30000
    assert PreprocessConfig().validation_fraction == 0.005
    assert SamplerConfig().n_negatives == 20


def test_shipped_config_matches_defaults():
    settings = WeakcatSettings.load(str(REPO_CONFIG))
    defaults = WeakcatSettings()
    assert settings.train == defaults.train
    assert settings.sampler == defaults.sampler
    assert settings.extractor == defaults.extractor
    assert settings.preprocess.fingerprint() == defaults.preprocess.fingerprint()
    assert settings.retrieval.ks == [1, 5, 10, 20, 30, 40, 50]


def test_partial_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"train": {"batch_size": 5}, "preprocess": {"blacklist_extra": ["Promo"]}}))
    settings = WeakcatSettings.load(str(path))
    assert settings.train.batch_size == 5
    assert settings.train.initial_lr == 0.1
    assert "promo" in settings.preprocess.blacklist
    assert settings.preprocess.blacklist > PreprocessConfig().blacklist


def test_custom_stopword_file(tmp_path):
    words = tmp_path / "de.txt"
    words.write_text("# German\nund\nDer\n")
    config = PreprocessConfig.model_validate({"stopword_languages": ["en"], "stopword_files": {"de": str(words)}})
    assert set(config.stopword_sets) == {"en", "de"}
    assert {"und", "der"} <= config.stopwords
    assert "le" not in config.stopwords


def test_unknown_bundled_language():
    with pytest.raises(ValidationError):
        PreprocessConfig.model_validate({"stopword_languages": ["xx"]})


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        PreprocessConfig(validation_fraction=1.0)
    with pytest.raises(ValidationError):
        RetrievalConfig(ks=[0, 5])
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(Exception):
        WeakcatSettings.load(str(path))


def test_retrieval_ks_sorted_and_unique():
    assert RetrievalConfig(ks=[10, 1, 10, 5]).ks == [1, 5, 10]


def test_fingerprint_tracks_vocabulary_settings():
    base = PreprocessConfig()
    assert base.fingerprint() == PreprocessConfig().fingerprint()
    assert base.fingerprint() != PreprocessConfig(vocabulary_max_size=100).fingerprint()
    assert base.fingerprint() != PreprocessConfig(blacklist=base.blacklist | {"extra"}).fingerprint()
    # the split does not shape the vocabulary
    assert base.fingerprint() == PreprocessConfig(validation_fraction=0.2).fingerprint()


@pytest.mark.parametrize("raw,expected", [(None, 1), ("", 1), ("4", 4), ("0", 1), ("-2", 1), ("many", 1)])
def test_worker_count(monkeypatch, raw, expected):
    if raw is None:
        monkeypatch.delenv("WEAKCAT_THREADS", raising=False)
    else:
        monkeypatch.setenv("WEAKCAT_THREADS", raw)
    assert worker_count() == expected


def test_setup_logging_writes_file(tmp_path):
    from src.config import LoggingConfig

    log_file = tmp_path / "logs" / "weakcat.log"
    setup_logging(LoggingConfig(file=str(log_file)), level_override="debug")
    logging.getLogger("weakcat.test").debug("hello from the test")
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert "hello from the test" in log_file.read_text()
    setup_logging(LoggingConfig())
