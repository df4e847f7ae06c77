"""
Configuration models for weakcat.
Defaults give the full training protocol; values can be overridden by
config/weakcat_config.json and then by command-line flags.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
BUNDLED_LANGUAGES = ("en", "fr")
THREADS_ENV = "WEAKCAT_THREADS"


def read_word_list(path: Path) -> FrozenSet[str]:
    """Read one lowercase word per line; '#' starts a comment."""
    words = set()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            word = line.split("#", 1)[0].strip().lower()
            if word:
                words.add(word)
    return frozenset(words)


def load_bundled_stopwords(languages: Tuple[str, ...] = BUNDLED_LANGUAGES) -> Dict[str, FrozenSet[str]]:
    """Load the stopword lists shipped in src/data."""
    sets = {}
    for language in languages:
        path = DATA_DIR / f"stopwords_{language}.txt"
        if not path.exists():
            raise ValueError(f"No bundled stopword list for language '{language}'")
        sets[language] = read_word_list(path)
    return sets


def load_bundled_blacklist() -> FrozenSet[str]:
    return read_word_list(DATA_DIR / "blacklist.txt")


class PreprocessConfig(BaseModel):
    """Text normalization, vocabulary and validation-split settings."""

    model_config = ConfigDict(frozen=True)

    stopword_sets: Dict[str, FrozenSet[str]] = Field(default_factory=load_bundled_stopwords)
    blacklist: FrozenSet[str] = Field(default_factory=load_bundled_blacklist)
    min_token_length: int = Field(default=1, ge=1)
    vocabulary_max_size: int = Field(default=30000, ge=1)
    validation_fraction: float = Field(default=0.005, gt=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _expand_file_references(cls, data: Any) -> Any:
        """Accept `stopword_languages`, `stopword_files`, `blacklist_file` and
        `blacklist_extra` keys as used in the JSON config file."""
        if not isinstance(data, dict):
            return data
        data = dict(data)
        languages = data.pop("stopword_languages", None)
        files = data.pop("stopword_files", None)
        if languages is not None or files is not None:
            sets = dict(load_bundled_stopwords(tuple(languages or ())))
            for language, path in (files or {}).items():
                sets[language] = read_word_list(Path(path))
            data.setdefault("stopword_sets", sets)
        blacklist_file = data.pop("blacklist_file", None)
        extra = data.pop("blacklist_extra", None)
        if blacklist_file is not None or extra is not None:
            base = read_word_list(Path(blacklist_file)) if blacklist_file else load_bundled_blacklist()
            data.setdefault("blacklist", base | frozenset(w.lower() for w in (extra or ())))
        return data

    @property
    def stopwords(self) -> FrozenSet[str]:
        merged: FrozenSet[str] = frozenset()
        for words in self.stopword_sets.values():
            merged = merged | words
        return merged

    def fingerprint(self) -> str:
        """Hex SHA-256 of the canonical settings that shape the vocabulary."""
        canonical = {
            "stopword_sets": {lang: sorted(words) for lang, words in sorted(self.stopword_sets.items())},
            "blacklist": sorted(self.blacklist),
            "min_token_length": self.min_token_length,
            "vocabulary_max_size": self.vocabulary_max_size,
        }
        payload = json.dumps(canonical, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class SamplerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_negatives: int = Field(default=20, ge=1)
    seed: int = 0
    exclude_bag_words_from_negatives: bool = False

    def check(self, vocabulary_size: int) -> None:
        """Validate against the vocabulary size K (needs 1 <= N_neg <= K-1)."""
        if self.n_negatives > vocabulary_size - 1:
            raise ValueError(
                f"n_negatives={self.n_negatives} needs a vocabulary of at least "
                f"{self.n_negatives + 1} words (got {vocabulary_size})"
            )


class ExtractorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["precomputed", "linear", "mlp"] = "mlp"
    embedding_dim: int = Field(default=64, ge=1)
    hidden_widths: Tuple[int, ...] = (128, 128)
    seed: int = 0

    @field_validator("hidden_widths")
    @classmethod
    def _positive_widths(cls, widths: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(w < 1 for w in widths):
            raise ValueError("hidden widths must be positive")
        return widths


class TrainConfig(BaseModel):
    """SGD protocol: batch 20, lr 0.1 divided by 10 after 10 flat epochs,
    stop after 20, head-only for the first 20 epochs, epoch = 1/10 dataset."""

    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(default=20, ge=1)
    initial_lr: float = Field(default=0.1, ge=0.0)
    lr_divisor: float = Field(default=10.0, gt=0.0)
    lr_patience_epochs: int = Field(default=10, ge=1)
    stop_patience_epochs: int = Field(default=20, ge=1)
    head_only_epochs: int = Field(default=20, ge=0)
    epoch_fraction: float = Field(default=0.1, gt=0.0, le=1.0)
    improvement_epsilon: float = Field(default=1e-5, ge=0.0)
    seed: int = 0
    max_epochs: Optional[int] = Field(default=None, ge=1)
    full_softmax: bool = False
    full_softmax_max_k: int = Field(default=512, ge=1)
    reset_lr_on_fine_tune: bool = False
    validation_seed: int = 1234


class ProbeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=0.01, ge=0.0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=200, ge=1)
    seed: int = 0


class RetrievalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    ks: List[int] = Field(default_factory=lambda: [1, 5, 10, 20, 30, 40, 50])
    exclude_self: bool = True

    @field_validator("ks")
    @classmethod
    def _positive_ks(cls, ks: List[int]) -> List[int]:
        if not ks or any(k < 1 for k in ks):
            raise ValueError("ks must be a non-empty list of positive integers")
        return sorted(set(ks))


class LoggingConfig(BaseModel):
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: Optional[str] = None


class StorageConfig(BaseModel):
    registry_path: str = "weakcat_artifacts.db"


class WeakcatSettings(BaseModel):
    """All configuration sections; mirrors config/weakcat_config.json."""

    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    extractor: ExtractorConfig = Field(default_factory=ExtractorConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    storage: StorageConfig = Field(default_factory=StorageConfig)

    @classmethod
    def load(cls, config_path: Optional[str] = None) -> "WeakcatSettings":
        """Load configuration from a JSON file (defaults when no path given)."""
        if config_path is None:
            return cls()
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                raw = json.load(f)
            settings = cls.model_validate(raw)
            logger.info(f"Configuration loaded from {config_path}")
            return settings
        except Exception as e:
            logger.error(f"Failed to load config from {config_path}: {e}")
            raise


def setup_logging(log_config: LoggingConfig, level_override: Optional[str] = None) -> None:
    """Configure root logging from the `logging` config section."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_config.file:
        Path(log_config.file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_config.file))

    logging.basicConfig(
        level=getattr(logging, (level_override or log_config.level).upper(), logging.INFO),
        format=log_config.format,
        handlers=handlers,
        force=True,
    )


def worker_count() -> int:
    """Worker-thread cap from WEAKCAT_THREADS (defaults to 1)."""
    raw = os.getenv(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"Ignoring {THREADS_ENV}={raw!r}: not an integer")
        return 1
    if value < 1:
        logger.warning(f"Ignoring {THREADS_ENV}={raw!r}: must be positive")
        return 1
    return value
