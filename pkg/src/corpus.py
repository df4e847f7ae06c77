"""
Catalog ingestion and text preprocessing for weakcat.
Turns raw product records into bag-of-words training samples over a
frequency-truncated vocabulary, and handles the vocabulary/dataset files.
"""

import hashlib
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, Iterator, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import regex

from src.config import PreprocessConfig
from src.errors import CatalogFormatError, CorruptDataFile, DegenerateSplit, EmptyCorpus

logger = logging.getLogger(__name__)

# Maximal runs of Unicode letters; everything else separates tokens.
TOKEN_PATTERN = regex.compile(r"\p{L}+")

VOCAB_FORMAT = "weakcat-vocabulary"
VOCAB_VERSION = 1
DATASET_MAGIC = b"WCAT"
DATASET_VERSION = 1


def validate_image_input(image_input: np.ndarray) -> None:
    """Raise ValueError unless the array is a usable feature vector or image tensor."""
    if image_input.size == 0:
        raise ValueError("image input is empty")
    if not np.all(np.isfinite(image_input)):
        raise ValueError("image input contains non-finite values")
    if image_input.ndim == 3:
        if image_input.min() < 0.0 or image_input.max() > 1.0:
            raise ValueError("image tensor values must lie in [0, 1]")
    elif image_input.ndim != 1:
        raise ValueError(f"image input must be a vector or an HxWxC tensor, got {image_input.ndim} dims")


@dataclass(frozen=True, eq=False)
class CatalogRecord:
    """One product image with its raw text fields."""

    record_id: str
    item_id: str
    source_id: str
    text_fields: Tuple[str, ...]
    image_input: np.ndarray
    annotations: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text_fields:
            raise ValueError("at least one text field is required")
        validate_image_input(self.image_input)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """Image input plus its bag of vocabulary indices (sorted, unique)."""

    record_id: str
    item_id: str
    image_input: np.ndarray
    labels: Tuple[int, ...]

    def __post_init__(self):
        if not self.labels:
            raise ValueError(f"sample {self.record_id} has an empty label set")
        if any(b <= a for a, b in zip(self.labels, self.labels[1:])) or self.labels[0] < 0:
            raise ValueError(f"sample {self.record_id} labels must be sorted, unique and non-negative")


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> index map ranked by (document frequency desc, token asc)."""

    tokens: Tuple[str, ...]
    frequency: Dict[str, int]
    max_size: int
    config_fingerprint: str = ""
    index_of: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.tokens) > self.max_size:
            raise ValueError(f"vocabulary has {len(self.tokens)} tokens, max_size is {self.max_size}")
        index_of = {token: i for i, token in enumerate(self.tokens)}
        if len(index_of) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        ranks = [(-self.frequency[t], t) for t in self.tokens]
        if ranks != sorted(ranks):
            raise ValueError("vocabulary tokens are not in (frequency desc, token asc) order")
        object.__setattr__(self, "index_of", index_of)

    def __len__(self) -> int:
        return len(self.tokens)

    def fingerprint(self) -> bytes:
        """32-byte SHA-256 over the ordered token list."""
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).digest()

    def save(self, path: Union[str, Path]) -> None:
        payload = {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "max_size": self.max_size,
            "config_fingerprint": self.config_fingerprint,
            "size": len(self.tokens),
            "tokens": [[token, self.frequency[token]] for token in self.tokens],
        }
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2)
            f.write("\n")
        logger.info(f"Saved vocabulary of {len(self.tokens)} tokens to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
            if payload.get("format") != VOCAB_FORMAT or payload.get("version") != VOCAB_VERSION:
                raise CorruptDataFile(f"{path}: not a version {VOCAB_VERSION} vocabulary file")
            pairs = payload["tokens"]
            vocab = cls(
                tokens=tuple(token for token, _ in pairs),
                frequency={token: int(freq) for token, freq in pairs},
                max_size=int(payload["max_size"]),
                config_fingerprint=payload.get("config_fingerprint", ""),
            )
        except CorruptDataFile:
            raise
        except (OSError, ValueError, KeyError, TypeError) as e:
            logger.error(f"Error loading vocabulary from {path}: {e}")
            raise CorruptDataFile(f"{path}: {e}") from e
        return vocab


class DatasetBuild(NamedTuple):
    samples: List[TrainingSample]
    dropped: int


class TextPreprocessor:
    """Lowercase, tokenize on letter runs, drop stopwords/blacklist/short tokens."""

    def __init__(self, config: PreprocessConfig):
        self.config = config
        self.excluded: FrozenSet[str] = config.stopwords | config.blacklist
        self.min_token_length = config.min_token_length

    def keeps(self, token: str) -> bool:
        return (
            len(token) >= self.min_token_length
            and token not in self.excluded
            and token.isalpha()
            and token == token.lower()
        )

    def __call__(self, text_fields: Sequence[str]) -> List[str]:
        text = " ".join(text_fields).lower()
        return [
            token for token in TOKEN_PATTERN.findall(text)
            if len(token) >= self.min_token_length and token not in self.excluded
        ]


def preprocess_text(text_fields: Sequence[str], config: PreprocessConfig) -> List[str]:
    """Tokenize concatenated text fields; order kept, duplicates kept."""
    return TextPreprocessor(config)(text_fields)


def count_document_frequencies(token_bags: Iterable[Sequence[str]]) -> Counter:
    """Number of bags containing each token (one count per bag)."""
    counts: Counter = Counter()
    for bag in token_bags:
        counts.update(set(bag))
    return counts


def merge_frequencies(shards: Iterable[Counter]) -> Counter:
    """Sum per-shard document frequencies (order independent)."""
    total: Counter = Counter()
    for shard in shards:
        total.update(shard)
    return total


def build_vocabulary(
    token_bags: Union[Iterable[Sequence[str]], Counter],
    config: PreprocessConfig,
) -> Vocabulary:
    """Keep the `vocabulary_max_size` most frequent tokens.

    Accepts either token bags or already merged document frequencies.
    """
    counts = token_bags if isinstance(token_bags, Counter) else count_document_frequencies(token_bags)
    preprocessor = TextPreprocessor(config)
    eligible = [(token, freq) for token, freq in counts.items() if freq > 0 and preprocessor.keeps(token)]
    if not eligible:
        raise EmptyCorpus("no token survived preprocessing")

    eligible.sort(key=lambda pair: (-pair[1], pair[0]))
    kept = eligible[: config.vocabulary_max_size]
    logger.info(
        f"Vocabulary: kept {len(kept)} of {len(eligible)} distinct tokens "
        f"(max_size={config.vocabulary_max_size})"
    )
    return Vocabulary(
        tokens=tuple(token for token, _ in kept),
        frequency={token: freq for token, freq in kept},
        max_size=config.vocabulary_max_size,
        config_fingerprint=config.fingerprint(),
    )


def build_dataset(
    records: Iterable[CatalogRecord],
    vocab: Vocabulary,
    config: PreprocessConfig,
) -> DatasetBuild:
    """Map each record's tokens through the vocabulary into a label set.

    Out-of-vocabulary tokens are dropped; records left with no label are
    dropped and counted. Records sharing an item_id stay separate samples.
    """
    preprocessor = TextPreprocessor(config)
    samples: List[TrainingSample] = []
    dropped = 0
    for record in records:
        labels = sorted({vocab.index_of[t] for t in preprocessor(record.text_fields) if t in vocab.index_of})
        if not labels:
            dropped += 1
            logger.debug(f"Dropping record {record.record_id}: empty bag after filtering")
            continue
        samples.append(TrainingSample(
            record_id=record.record_id,
            item_id=record.item_id,
            image_input=record.image_input,
            labels=tuple(labels),
        ))
    if dropped:
        logger.warning(f"Dropped {dropped} records with empty bags")
    logger.info(f"Built {len(samples)} training samples")
    return DatasetBuild(samples=samples, dropped=dropped)


def validation_size(n_samples: int, fraction: float) -> int:
    """max(1, round-half-up(fraction * N))."""
    return max(1, int(math.floor(fraction * n_samples + 0.5)))


def split_validation(
    samples: Sequence[TrainingSample],
    config: PreprocessConfig,
) -> Tuple[List[TrainingSample], List[TrainingSample]]:
    """Seeded record-level split whose validation labels all occur in train.

    Validation samples carrying labels unseen in train are swapped with train
    samples whose labels stay covered; the repair is bounded by 4*K swap
    attempts and whatever remains uncovered is logged.
    """
    n = len(samples)
    n_valid = validation_size(n, config.validation_fraction)
    if n < 2 or n_valid >= n:
        raise DegenerateSplit(f"cannot split {n} samples into {n_valid} validation and a non-empty train set")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    valid_pos = [int(p) for p in order[:n_valid]]
    train_pos = [int(p) for p in order[n_valid:]]

    train_counts: Counter = Counter()
    for p in train_pos:
        train_counts.update(samples[p].labels)

    def uncovered(position: int) -> bool:
        return any(train_counts[label] == 0 for label in samples[position].labels)

    n_labels = len({label for s in samples for label in s.labels})
    attempts_left = 4 * n_labels
    candidate_cursor = 0
    slot = 0
    while slot < len(valid_pos) and attempts_left > 0:
        if not uncovered(valid_pos[slot]):
            slot += 1
            continue
        swapped = False
        moving_in = valid_pos[slot]
        train_counts.update(samples[moving_in].labels)
        while candidate_cursor < len(train_pos) and attempts_left > 0:
            attempts_left -= 1
            candidate = train_pos[candidate_cursor]
            candidate_cursor += 1
            if all(train_counts[label] >= 2 for label in samples[candidate].labels):
                train_counts.subtract(samples[candidate].labels)
                train_pos[candidate_cursor - 1] = moving_in
                valid_pos[slot] = candidate
                swapped = True
                break
        if not swapped:
            train_counts.subtract(samples[moving_in].labels)
            break

    leftover = [p for p in valid_pos if uncovered(p)]
    if leftover:
        logger.warning(f"{len(leftover)} validation samples still carry labels absent from train")

    valid = [samples[p] for p in sorted(valid_pos)]
    train = [samples[p] for p in sorted(train_pos)]
    logger.info(f"Split {n} samples into {len(train)} train / {len(valid)} validation")
    return train, valid


def dataset_stats(samples: Sequence[TrainingSample], vocab: Vocabulary, top_n: int = 50) -> Dict[str, Any]:
    """Summary statistics plus the most frequent labels of a dataset."""
    label_counts: Counter = Counter()
    for sample in samples:
        label_counts.update(sample.labels)
    top = sorted(label_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    total_labels = sum(len(s.labels) for s in samples)
    return {
        "samples": len(samples),
        "vocabulary_size": len(vocab),
        "mean_labels_per_sample": total_labels / len(samples) if samples else 0.0,
        "top_labels": [{"token": vocab.tokens[idx], "count": count} for idx, count in top],
    }


def _parse_record(obj: Any, seen_ids: set) -> CatalogRecord:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    obj = dict(obj)
    ids = {}
    for key in ("record_id", "item_id", "source_id"):
        value = obj.pop(key, None)
        if not isinstance(value, str):
            raise ValueError(f"'{key}' must be a string")
        ids[key] = value
    if not ids["record_id"]:
        raise ValueError("'record_id' must be non-empty")
    if ids["record_id"] in seen_ids:
        raise ValueError(f"duplicate record_id '{ids['record_id']}'")

    text_fields = obj.pop("text_fields", None)
    if not isinstance(text_fields, list) or not text_fields or not all(isinstance(t, str) for t in text_fields):
        raise ValueError("'text_fields' must be a non-empty list of strings")

    features = obj.pop("features", None)
    image = obj.pop("image", None)
    if (features is None) == (image is None):
        raise ValueError("exactly one of 'features' or 'image' is required")
    raw = features if features is not None else image
    try:
        image_input = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ValueError(f"image input is not numeric: {e}") from e
    if features is not None and image_input.ndim != 1:
        raise ValueError("'features' must be a flat array")
    if image is not None and image_input.ndim != 3:
        raise ValueError("'image' must be a height x width x channels array")

    return CatalogRecord(
        record_id=ids["record_id"],
        item_id=ids["item_id"],
        source_id=ids["source_id"],
        text_fields=tuple(text_fields),
        image_input=image_input,
        annotations=obj,
    )


def read_catalog(path: Union[str, Path]) -> Iterator[CatalogRecord]:
    """Stream records from a line-delimited JSON catalog file."""
    seen_ids: set = set()
    with open(path, "rb") as f:
        for line_number, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
                if not line.strip():
                    continue
                record = _parse_record(json.loads(line), seen_ids)
            except ValueError as e:  # UnicodeDecodeError and json.JSONDecodeError are ValueErrors
                logger.error(f"Malformed catalog record at {path}:{line_number}: {e}")
                raise CatalogFormatError(str(path), line_number, str(e)) from e
            seen_ids.add(record.record_id)
            yield record


def _pack_id(value: str) -> bytes:
    encoded = value.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise ValueError(f"identifier too long: {value[:40]}...")
    return struct.pack("<H", len(encoded)) + encoded


def write_dataset(path: Union[str, Path], samples: Sequence[TrainingSample], vocabulary_size: int) -> None:
    """Write samples in the WCAT binary format (features as little-endian f32)."""
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<HIQ", DATASET_VERSION, vocabulary_size, len(samples)))
        for sample in samples:
            if len(sample.labels) > 0xFFFF:
                raise ValueError(f"sample {sample.record_id} has too many labels")
            features = np.ascontiguousarray(sample.image_input, dtype="<f4").ravel()
            f.write(_pack_id(sample.record_id))
            f.write(_pack_id(sample.item_id))
            f.write(struct.pack("<H", len(sample.labels)))
            f.write(np.asarray(sample.labels, dtype="<u4").tobytes())
            f.write(struct.pack("<I", features.size))
            f.write(features.tobytes())
    logger.info(f"Wrote {len(samples)} samples to {path}")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CorruptDataFile(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_id(self) -> str:
        (length,) = self.unpack("<H")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptDataFile(f"{self.path}: invalid UTF-8 identifier") from e


def read_dataset(path: Union[str, Path]) -> Tuple[List[TrainingSample], int]:
    """Read a WCAT file; returns (samples, vocabulary size K)."""
    with open(path, "rb") as f:
        reader = _Reader(f.read(), str(path))
    if reader.take(4) != DATASET_MAGIC:
        raise CorruptDataFile(f"{path}: bad magic, not a WCAT dataset")
    version, vocabulary_size, count = reader.unpack("<HIQ")
    if version != DATASET_VERSION:
        raise CorruptDataFile(f"{path}: unsupported dataset version {version}")

    samples = []
    for _ in range(count):
        record_id = reader.read_id()
        item_id = reader.read_id()
        (n_labels,) = reader.unpack("<H")
        labels = np.frombuffer(reader.take(4 * n_labels), dtype="<u4")
        (n_features,) = reader.unpack("<I")
        features = np.frombuffer(reader.take(4 * n_features), dtype="<f4").astype(np.float64)
        if labels.size and int(labels.max()) >= vocabulary_size:
            raise CorruptDataFile(f"{path}: sample {record_id} has a label outside 0..{vocabulary_size - 1}")
        try:
            samples.append(TrainingSample(record_id, item_id, features, tuple(int(x) for x in labels)))
        except ValueError as e:
            raise CorruptDataFile(f"{path}: {e}") from e
    if reader.offset != len(reader.data):
        raise CorruptDataFile(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return samples, vocabulary_size


def load_samples(path: Union[str, Path]) -> list:
    """Load evaluation inputs: a .wcat dataset or a .jsonl catalog."""
    path = Path(path)
    if path.suffix == ".wcat":
        samples, _ = read_dataset(path)
        return samples
    return list(read_catalog(path))
