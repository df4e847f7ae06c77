"""
Gallery index over L2-normalized visual features and top-k retrieval accuracy.
Search is exact brute force; ties go to the earlier gallery row.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import worker_count
from src.errors import CorruptDataFile, DimensionMismatch, EmptyIndex, EmptyQuerySet, ZeroEmbedding
from src.model import EmbeddingModel, extract

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"WIDX"
INDEX_VERSION = 1


@dataclass
class RetrievalIndex:
    """Gallery rows: item ids, record ids and a matrix of unit-norm embeddings."""

    dim: int
    item_ids: List[str] = field(default_factory=list)
    record_ids: List[str] = field(default_factory=list)
    embeddings: Optional[np.ndarray] = None
    rejected: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.embeddings is None:
            self.embeddings = np.zeros((0, self.dim), dtype=np.float64)
        if self.embeddings.shape != (len(self.record_ids), self.dim):
            raise DimensionMismatch(f"embedding matrix {self.embeddings.shape} does not match {len(self.record_ids)} rows")

    def __len__(self) -> int:
        return len(self.record_ids)

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            f.write(struct.pack("<HIQ", INDEX_VERSION, self.dim, len(self)))
            for item_id, record_id, row in zip(self.item_ids, self.record_ids, self.embeddings):
                for value in (item_id, record_id):
                    encoded = value.encode("utf-8")
                    f.write(struct.pack("<I", len(encoded)))
                    f.write(encoded)
                f.write(np.ascontiguousarray(row, dtype="<f8").tobytes())
        logger.info(f"Saved retrieval index ({len(self)} rows) to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RetrievalIndex":
        with open(path, "rb") as f:
            data = f.read()
        view = memoryview(data)
        offset = 0

        def take(n: int) -> memoryview:
            nonlocal offset
            if offset + n > len(data):
                raise CorruptDataFile(f"{path}: truncated index at byte {offset}")
            chunk = view[offset:offset + n]
            offset += n
            return chunk

        if bytes(take(4)) != INDEX_MAGIC:
            raise CorruptDataFile(f"{path}: bad magic, not a WIDX index")
        version, dim, rows = struct.unpack("<HIQ", take(14))
        if version != INDEX_VERSION:
            raise CorruptDataFile(f"{path}: unsupported index version {version}")
        item_ids, record_ids = [], []
        embeddings = np.empty((rows, dim), dtype=np.float64)
        try:
            for r in range(rows):
                for target in (item_ids, record_ids):
                    (length,) = struct.unpack("<I", take(4))
                    target.append(bytes(take(length)).decode("utf-8"))
                embeddings[r] = np.frombuffer(take(8 * dim), dtype="<f8")
        except UnicodeDecodeError as e:
            raise CorruptDataFile(f"{path}: invalid id encoding") from e
        if offset != len(data):
            raise CorruptDataFile(f"{path}: {len(data) - offset} trailing bytes")
        return cls(dim=dim, item_ids=item_ids, record_ids=record_ids, embeddings=embeddings)


@dataclass
class QueryOutcome:
    record_id: str
    item_id: str
    ranking: List[Tuple[str, str, float]]  # (record_id, item_id, similarity)
    first_hit_rank: Optional[int]  # 1-based rank of the first same-item row


@dataclass
class RetrievalResult:
    metrics: Dict[int, float]
    per_query: List[QueryOutcome]


def _embed(model: EmbeddingModel, inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Extract features for many inputs; threads are capped by WEAKCAT_THREADS, order is kept."""
    workers = worker_count()
    if workers > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(lambda x: extract(model, x), inputs))
    return [extract(model, x) for x in inputs]


def normalize(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    if norm == 0.0 or not np.isfinite(norm):
        raise ZeroEmbedding("cannot normalize a zero (or non-finite) embedding")
    return vector / norm


def build_index(model: EmbeddingModel, gallery_samples: Sequence, strict: bool = False) -> RetrievalIndex:
    """Embed each gallery sample, L2-normalize it and store it with its ids.

    Rows whose embedding is zero are skipped and listed in `rejected`
    (or raise ZeroEmbedding when strict).
    """
    if not gallery_samples:
        raise EmptyIndex("gallery is empty")
    features = _embed(model, [s.image_input for s in gallery_samples])
    item_ids, record_ids, rows, rejected = [], [], [], []
    for sample, z in zip(gallery_samples, features):
        try:
            rows.append(normalize(z))
        except ZeroEmbedding:
            if strict:
                raise ZeroEmbedding(f"gallery record {sample.record_id} has a zero embedding")
            logger.warning(f"Rejected gallery record {sample.record_id}: zero embedding")
            rejected.append(sample.record_id)
            continue
        item_ids.append(sample.item_id)
        record_ids.append(sample.record_id)

    embeddings = np.vstack(rows) if rows else np.zeros((0, model.embedding_dim))
    logger.info(f"Built retrieval index: {len(rows)} rows, {len(rejected)} rejected")
    return RetrievalIndex(model.embedding_dim, item_ids, record_ids, embeddings, rejected)


def embed_queries(model: EmbeddingModel, samples: Sequence) -> List[Tuple[object, np.ndarray]]:
    """Pair each sample with its unit-norm embedding, skipping zero embeddings."""
    pairs = []
    for sample, z in zip(samples, _embed(model, [s.image_input for s in samples])):
        try:
            pairs.append((sample, normalize(z)))
        except ZeroEmbedding:
            logger.warning(f"Skipping query {sample.record_id}: zero embedding")
    return pairs


def _rank(index: RetrievalIndex, query_embedding: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    query_embedding = np.asarray(query_embedding, dtype=np.float64)
    if query_embedding.shape != (index.dim,):
        raise DimensionMismatch(f"query has shape {query_embedding.shape}, index dim is {index.dim}")
    similarities = index.embeddings @ query_embedding
    positions = np.arange(len(index))
    if mask is not None:
        similarities, positions = similarities[mask], positions[mask]
    order = np.lexsort((positions, -similarities))
    return positions[order], similarities[order]


def query(index: RetrievalIndex, query_embedding: np.ndarray, k: int) -> List[Tuple[str, str, float]]:
    """Top-k gallery rows by cosine similarity as (record_id, item_id, similarity)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    positions, similarities = _rank(index, query_embedding)
    return [
        (index.record_ids[p], index.item_ids[p], float(s))
        for p, s in zip(positions[:k], similarities[:k])
    ]


def topk_accuracy(
    index: RetrievalIndex,
    queries: Sequence[Tuple[object, str]],
    ks: Sequence[int],
    exclude_self: bool = True,
    model: Optional[EmbeddingModel] = None,
    keep_rankings: int = 0,
) -> RetrievalResult:
    """Fraction of queries with a same-item gallery row among the k most similar.

    Args:
        queries: (query, item_id) pairs; a query is a unit-norm embedding,
            a (record_id, embedding) pair or a sample (then `model` embeds it)
        exclude_self: drop gallery rows sharing the query's record_id
        keep_rankings: how many ranked rows to keep per query in the result

    Returns:
        RetrievalResult with metrics {k: accuracy} and per-query first-hit ranks
    """
    if not queries:
        raise EmptyQuerySet("query set is empty")
    ks = sorted(set(ks))
    record_ids = np.asarray(index.record_ids, dtype=object)
    item_ids = np.asarray(index.item_ids, dtype=object)
    hits = {k: 0 for k in ks}
    per_query = []

    for query_input, item_id in queries:
        if isinstance(query_input, np.ndarray):
            embedding, record_id = query_input, ""
        elif isinstance(query_input, tuple):
            record_id, embedding = query_input
        else:
            if model is None:
                raise ValueError("a model is needed to embed sample queries")
            embedding, record_id = normalize(extract(model, query_input.image_input)), query_input.record_id
        mask = record_ids != record_id if exclude_self and record_id else None
        positions, similarities = _rank(index, embedding, mask)
        matches = np.flatnonzero(item_ids[positions] == item_id)
        first_hit = int(matches[0]) + 1 if matches.size else None
        for k in ks:
            if first_hit is not None and first_hit <= k:
                hits[k] += 1
        ranking = [
            (index.record_ids[p], index.item_ids[p], float(s))
            for p, s in zip(positions[:keep_rankings], similarities[:keep_rankings])
        ]
        per_query.append(QueryOutcome(record_id, item_id, ranking, first_hit))

    metrics = {k: hits[k] / len(queries) for k in ks}
    logger.info("📊 Retrieval accuracy: " + ", ".join(f"top-{k}={v:.4f}" for k, v in metrics.items()))
    return RetrievalResult(metrics=metrics, per_query=per_query)
