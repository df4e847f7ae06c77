"""
Joint image/word embedding model.

An image feature extractor f(x, theta) produces z in R^I; word k is column
W[:, k] of the I x K word matrix, and word probabilities are softmax(W^T z),
evaluated either over all K words or over a sampled candidate subset.
Gradients are derived analytically (no autodiff framework).
"""

import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from src.config import ExtractorConfig
from src.errors import CorruptCheckpoint, DimensionMismatch, IndexOutOfRange, VocabMismatch

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"WMDL"
CHECKPOINT_VERSION = 1
FINGERPRINT_BYTES = 32
KIND_CODES = {"precomputed": 0, "linear": 1, "mlp": 2}


def as_input_vector(image_input: np.ndarray, input_dim: int) -> np.ndarray:
    """Flatten a feature vector or HxWxC tensor and check its size."""
    x = np.asarray(image_input, dtype=np.float64).ravel()
    if x.size != input_dim:
        raise DimensionMismatch(f"extractor expects {input_dim} input values, got {x.size}")
    return x


class FeatureExtractor(ABC):
    """Image feature extractor contract: input_dim values in, I = output_dim out.

    Parameters live in one flat float64 vector `params` so optimizers and
    checkpoints can treat every extractor alike.
    """

    kind: str = ""

    def __init__(self, input_dim: int, output_dim: int, params: np.ndarray):
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.params = params

    @property
    def hidden_widths(self) -> Tuple[int, ...]:
        return ()

    def forward(self, image_input: np.ndarray) -> np.ndarray:
        z, _ = self.forward_cached(image_input)
        return z

    @abstractmethod
    def forward_cached(self, image_input: np.ndarray) -> Tuple[np.ndarray, Any]:
        """Return z and whatever backward() needs."""

    @abstractmethod
    def backward(self, cache: Any, d_z: np.ndarray) -> np.ndarray:
        """Gradient of the loss w.r.t. `params`, given dL/dz."""


class PrecomputedExtractor(FeatureExtractor):
    """Identity on stored feature vectors; no trainable parameters."""

    kind = "precomputed"

    def __init__(self, dim: int):
        super().__init__(dim, dim, np.zeros(0, dtype=np.float64))

    def forward_cached(self, image_input: np.ndarray) -> Tuple[np.ndarray, Any]:
        return as_input_vector(image_input, self.input_dim).copy(), None

    def backward(self, cache: Any, d_z: np.ndarray) -> np.ndarray:
        return np.zeros(0, dtype=np.float64)


class DenseExtractor(FeatureExtractor):
    """Stack of affine layers with ReLU between them (none after the last).

    theta layout per layer: weight matrix (out x in, row-major) then bias.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_widths: Sequence[int],
        output_dim: int,
        params: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        widths = [input_dim, *hidden_widths, output_dim]
        self._shapes = list(zip(widths[1:], widths[:-1]))
        size = sum(o * i + o for o, i in self._shapes)
        if params is None:
            params = self._initial_params(rng or np.random.default_rng(0))
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise DimensionMismatch(f"{type(self).__name__} needs {size} parameters, got {params.size}")
        super().__init__(input_dim, output_dim, params)
        self._hidden = tuple(hidden_widths)

    @staticmethod
    def parameter_count(input_dim: int, hidden_widths: Sequence[int], output_dim: int) -> int:
        widths = [input_dim, *hidden_widths, output_dim]
        return sum(o * i + o for o, i in zip(widths[1:], widths[:-1]))

    @property
    def hidden_widths(self) -> Tuple[int, ...]:
        return self._hidden

    def _initial_params(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        for out_dim, in_dim in self._shapes:
            bound = 1.0 / np.sqrt(in_dim)
            chunks.append(rng.uniform(-bound, bound, size=out_dim * in_dim))
            chunks.append(np.zeros(out_dim))
        return np.concatenate(chunks)

    def layers(self, params: Optional[np.ndarray] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views into the flat parameter vector."""
        flat = self.params if params is None else params
        views, offset = [], 0
        for out_dim, in_dim in self._shapes:
            weight = flat[offset:offset + out_dim * in_dim].reshape(out_dim, in_dim)
            offset += out_dim * in_dim
            bias = flat[offset:offset + out_dim]
            offset += out_dim
            views.append((weight, bias))
        return views

    def forward_cached(self, image_input: np.ndarray) -> Tuple[np.ndarray, Any]:
        a = as_input_vector(image_input, self.input_dim)
        inputs, pre_activations = [], []
        layers = self.layers()
        for depth, (weight, bias) in enumerate(layers):
            inputs.append(a)
            h = weight @ a + bias
            pre_activations.append(h)
            a = h if depth == len(layers) - 1 else np.maximum(h, 0.0)
        return a, (inputs, pre_activations)

    def backward(self, cache: Any, d_z: np.ndarray) -> np.ndarray:
        inputs, pre_activations = cache
        grad = np.zeros_like(self.params)
        grad_layers = self.layers(grad)
        layers = self.layers()
        g = d_z
        for depth in range(len(layers) - 1, -1, -1):
            d_weight, d_bias = grad_layers[depth]
            d_weight[...] = np.outer(g, inputs[depth])
            d_bias[...] = g
            if depth > 0:
                g = (layers[depth][0].T @ g) * (pre_activations[depth - 1] > 0.0)
        return grad


class LinearExtractor(DenseExtractor):
    kind = "linear"

    def __init__(self, input_dim: int, output_dim: int, params: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(input_dim, (), output_dim, params=params, rng=rng)


class MlpExtractor(DenseExtractor):
    kind = "mlp"


def make_extractor(
    kind: str,
    input_dim: int,
    output_dim: int,
    hidden_widths: Sequence[int] = (),
    params: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> FeatureExtractor:
    if kind == "precomputed":
        if input_dim != output_dim:
            raise DimensionMismatch(f"precomputed features have {input_dim} dims, embedding needs {output_dim}")
        return PrecomputedExtractor(input_dim)
    if kind == "linear":
        return LinearExtractor(input_dim, output_dim, params=params, rng=rng)
    if kind == "mlp":
        return MlpExtractor(input_dim, hidden_widths, output_dim, params=params, rng=rng)
    raise ValueError(f"Unknown extractor kind: {kind}")


@dataclass
class EmbeddingModel:
    """Extractor parameters theta plus the I x K word-embedding matrix W."""

    extractor: FeatureExtractor
    word_matrix: np.ndarray
    vocab_fingerprint: bytes

    def __post_init__(self):
        if self.word_matrix.ndim != 2 or self.word_matrix.shape[0] != self.extractor.output_dim:
            raise DimensionMismatch(
                f"word matrix shape {self.word_matrix.shape} does not match embedding dim {self.extractor.output_dim}"
            )
        if len(self.vocab_fingerprint) != FINGERPRINT_BYTES:
            raise ValueError("vocab fingerprint must be 32 bytes")

    @property
    def embedding_dim(self) -> int:
        return self.word_matrix.shape[0]

    @property
    def vocabulary_size(self) -> int:
        return self.word_matrix.shape[1]

    def snapshot(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.extractor.params.copy(), self.word_matrix.copy()

    def restore(self, snapshot: Tuple[np.ndarray, np.ndarray]) -> None:
        params, word_matrix = snapshot
        self.extractor.params[...] = params
        self.word_matrix[...] = word_matrix


def init_model(config: ExtractorConfig, input_dim: int, vocabulary_size: int, vocab_fingerprint: bytes) -> EmbeddingModel:
    """Seeded model: extractor per config, W uniform on [-1/sqrt(I), 1/sqrt(I)]."""
    rng = np.random.default_rng(config.seed)
    embedding_dim = config.embedding_dim
    if config.kind == "precomputed" and embedding_dim != input_dim:
        logger.info(f"Precomputed features fix the embedding dim to {input_dim} (config asked {embedding_dim})")
        embedding_dim = input_dim
    extractor = make_extractor(config.kind, input_dim, embedding_dim, config.hidden_widths, rng=rng)
    bound = 1.0 / np.sqrt(embedding_dim)
    word_matrix = rng.uniform(-bound, bound, size=(embedding_dim, vocabulary_size))
    logger.info(
        f"Initialized {config.kind} model: input {input_dim}, I={embedding_dim}, K={vocabulary_size}, "
        f"{extractor.params.size} extractor parameters"
    )
    return EmbeddingModel(extractor, word_matrix, vocab_fingerprint)


def extract(model: EmbeddingModel, image_input: np.ndarray) -> np.ndarray:
    """Visual feature z = f(x, theta)."""
    return model.extractor.forward(image_input)


def _check_candidates(candidates: np.ndarray, vocabulary_size: int) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size and (candidates.min() < 0 or candidates.max() >= vocabulary_size):
        raise IndexOutOfRange(f"candidate words must lie in 0..{vocabulary_size - 1}")
    return candidates


def scores(z: np.ndarray, candidates: np.ndarray, word_matrix: np.ndarray) -> np.ndarray:
    """Logits w_c . z for each candidate word c."""
    candidates = _check_candidates(candidates, word_matrix.shape[1])
    return word_matrix[:, candidates].T @ z


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - np.max(logits))
    return shifted / shifted.sum()


def loss(z: np.ndarray, positive_slot: int, candidates: np.ndarray, word_matrix: np.ndarray) -> float:
    """-log softmax(scores)[positive_slot] for one (image, word) pair."""
    logits = scores(z, candidates, word_matrix)
    return float(logsumexp(logits) - logits[positive_slot])


@dataclass
class Gradients:
    """Sparse gradient of one sampled-softmax term."""

    candidates: np.ndarray
    d_columns: np.ndarray  # I x len(candidates), aligned with candidates
    d_z: np.ndarray
    d_theta: np.ndarray
    loss: float


def gradients(
    z: np.ndarray,
    positive_slot: int,
    candidates: np.ndarray,
    word_matrix: np.ndarray,
    extractor: Optional[FeatureExtractor] = None,
    image_input: Optional[np.ndarray] = None,
    cache: Any = None,
) -> Gradients:
    """Analytic gradients of the sampled cross-entropy.

    dL/dw_j = (p_j - 1[j = positive]) z,  dL/dz = sum_j (p_j - 1[j = positive]) w_j,
    and dL/dtheta by backpropagating dL/dz through the extractor. When `cache`
    is not given it is rebuilt from `image_input`.
    """
    candidates = _check_candidates(candidates, word_matrix.shape[1])
    columns = word_matrix[:, candidates]
    logits = columns.T @ z
    log_norm = logsumexp(logits)
    delta = np.exp(logits - log_norm)
    delta[positive_slot] -= 1.0
    d_z = columns @ delta

    d_theta = np.zeros(0, dtype=np.float64)
    if extractor is not None:
        if cache is None and image_input is not None:
            _, cache = extractor.forward_cached(image_input)
        d_theta = extractor.backward(cache, d_z)

    return Gradients(
        candidates=candidates,
        d_columns=np.outer(z, delta),
        d_z=d_z,
        d_theta=d_theta,
        loss=float(log_norm - logits[positive_slot]),
    )


def predict_words(model: EmbeddingModel, image_input: np.ndarray, k: int) -> List[Tuple[int, float]]:
    """Top-k words under the full softmax over the vocabulary."""
    z = extract(model, image_input)
    probabilities = softmax(model.word_matrix.T @ z)
    order = np.argsort(-probabilities, kind="stable")[:k]
    return [(int(i), float(probabilities[i])) for i in order]


def similar_words(model: EmbeddingModel, word_index: int, k: int) -> List[Tuple[int, float]]:
    """Nearest word columns of W by cosine similarity, query word excluded."""
    if not 0 <= word_index < model.vocabulary_size:
        raise IndexOutOfRange(f"word index {word_index} outside 0..{model.vocabulary_size - 1}")
    norms = np.linalg.norm(model.word_matrix, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    unit = model.word_matrix / safe
    unit[:, norms == 0] = 0.0
    similarity = unit.T @ unit[:, word_index]
    similarity[word_index] = -np.inf
    order = np.argsort(-similarity, kind="stable")[: min(k, model.vocabulary_size - 1)]
    return [(int(i), float(similarity[i])) for i in order]


def save_checkpoint(model: EmbeddingModel, path: Union[str, Path]) -> None:
    """Write the WMDL checkpoint (parameters as little-endian float64)."""
    extractor = model.extractor
    hidden = extractor.hidden_widths
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<HII", CHECKPOINT_VERSION, model.embedding_dim, model.vocabulary_size)
    header += struct.pack("<BIH", KIND_CODES[extractor.kind], extractor.input_dim, len(hidden))
    header += struct.pack(f"<{len(hidden)}I", *hidden)
    header += model.vocab_fingerprint
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(np.ascontiguousarray(extractor.params, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(model.word_matrix, dtype="<f8").tobytes())
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: Union[str, Path], expected_fingerprint: Optional[bytes] = None) -> EmbeddingModel:
    """Read a WMDL checkpoint; optionally check it was trained on a given vocabulary."""
    with open(path, "rb") as f:
        data = f.read()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CorruptCheckpoint(f"{path}: truncated at byte {offset}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic, not a WMDL checkpoint")
    version, embedding_dim, vocabulary_size = struct.unpack("<HII", take(10))
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported checkpoint version {version}")
    kind_code, input_dim, n_hidden = struct.unpack("<BIH", take(7))
    kinds = {code: kind for kind, code in KIND_CODES.items()}
    if kind_code not in kinds:
        raise CorruptCheckpoint(f"{path}: unknown extractor kind code {kind_code}")
    kind = kinds[kind_code]
    hidden = struct.unpack(f"<{n_hidden}I", take(4 * n_hidden))
    fingerprint = take(FINGERPRINT_BYTES)

    n_params = 0 if kind == "precomputed" else DenseExtractor.parameter_count(input_dim, hidden, embedding_dim)
    params = np.frombuffer(take(8 * n_params), dtype="<f8").astype(np.float64)
    word_matrix = np.frombuffer(take(8 * embedding_dim * vocabulary_size), dtype="<f8")
    word_matrix = word_matrix.astype(np.float64).reshape(embedding_dim, vocabulary_size)
    if offset != len(data):
        raise CorruptCheckpoint(f"{path}: {len(data) - offset} trailing bytes")

    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise VocabMismatch(f"{path}: checkpoint was trained on a different vocabulary")

    try:
        extractor = make_extractor(kind, input_dim, embedding_dim, hidden, params=params)
    except DimensionMismatch as e:
        raise CorruptCheckpoint(f"{path}: {e}") from e
    logger.info(f"Loaded {kind} checkpoint from {path} (I={embedding_dim}, K={vocabulary_size})")
    return EmbeddingModel(extractor, word_matrix, fingerprint)
