"""
SGD training driver: epoch accounting, learning-rate schedule, early stopping
and the two-phase (head-only, then fine-tune) protocol.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from src.config import SamplerConfig, TrainConfig, worker_count
from src.corpus import TrainingSample
from src.errors import CorruptDataFile, EmptyCorpus, NonFiniteLoss
from src.model import EmbeddingModel, Gradients, extract, gradients, scores
from src.sampler import InvertedIndex, build_inverted_index, make_rng, sample_negatives, sample_pair

logger = logging.getLogger(__name__)

HEAD_ONLY = "head_only"
FINE_TUNE = "fine_tune"
INITIAL = "initial"


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: Optional[float]
    validation_loss: float
    wall_time: float
    lr_after: float
    improved: bool

    def to_line(self) -> Dict[str, Any]:
        # wall time lives in the log header so epoch lines stay reproducible
        line = asdict(self)
        line.pop("wall_time")
        return line


@dataclass
class ResumeState:
    epoch: int
    lr: float
    best_validation: float
    best_epoch: int
    lr_wait: int
    stop_wait: int


@dataclass
class TrainLog:
    """Per-epoch training history. Epoch 0 holds the initial validation loss."""

    records: List[EpochRecord] = field(default_factory=list)
    settings: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())

    @property
    def best_validation(self) -> float:
        return min(r.validation_loss for r in self.records)

    @property
    def best_epoch(self) -> int:
        best = self.best_validation
        return next(r.epoch for r in self.records if r.validation_loss == best)

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else -1

    def write(self, path: Union[str, Path]) -> None:
        header = {
            "type": "header",
            "created_at": self.created_at,
            "settings": self.settings,
            "wall_times": [r.wall_time for r in self.records],
        }
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for record in self.records:
                f.write(json.dumps({"type": "epoch", **record.to_line()}, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: Union[str, Path]) -> "TrainLog":
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = [json.loads(line) for line in f if line.strip()]
            header, epochs = lines[0], lines[1:]
            if header.get("type") != "header":
                raise ValueError("first line is not a log header")
            wall_times = header.get("wall_times", [])
            records = []
            for i, line in enumerate(epochs):
                line = dict(line)
                line.pop("type", None)
                records.append(EpochRecord(wall_time=wall_times[i] if i < len(wall_times) else 0.0, **line))
        except (OSError, ValueError, TypeError, KeyError, IndexError) as e:
            raise CorruptDataFile(f"{path}: unreadable train log ({e})") from e
        return cls(records=records, settings=header.get("settings", {}), created_at=header.get("created_at", ""))

    def resume_state(self, config: TrainConfig) -> ResumeState:
        """Replay the improvement logic over the logged epochs."""
        if not self.records:
            raise CorruptDataFile("train log has no epochs to resume from")
        best = self.records[0].validation_loss
        best_epoch = self.records[0].epoch
        lr_wait = stop_wait = 0
        for record in self.records[1:]:
            improved = record.validation_loss < best - config.improvement_epsilon
            if record.validation_loss < best:
                best, best_epoch = record.validation_loss, record.epoch
            if improved:
                lr_wait = stop_wait = 0
            else:
                lr_wait += 1
                stop_wait += 1
                if lr_wait >= config.lr_patience_epochs:
                    lr_wait = 0
        return ResumeState(
            epoch=self.last_epoch,
            lr=self.records[-1].lr_after,
            best_validation=best,
            best_epoch=best_epoch,
            lr_wait=lr_wait,
            stop_wait=stop_wait,
        )


def steps_per_epoch(n_samples: int, config: TrainConfig) -> int:
    """ceil(ceil(N * epoch_fraction) / batch_size) SGD steps."""
    return math.ceil(math.ceil(n_samples * config.epoch_fraction) / config.batch_size)


def _candidates(
    word: int,
    sample: TrainingSample,
    vocabulary_size: int,
    config: TrainConfig,
    sampler_config: SamplerConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Positive word in slot 0 followed by the negatives (or every other word)."""
    if config.full_softmax:
        others = np.delete(np.arange(vocabulary_size, dtype=np.int64), word)
    else:
        others = sample_negatives(word, sample.labels, sampler_config, vocabulary_size, rng)
    return np.concatenate(([word], others)).astype(np.int64)


def _diagnostics(model: EmbeddingModel, sample: TrainingSample, candidates: np.ndarray, **context) -> Dict[str, Any]:
    z = extract(model, sample.image_input)
    return {
        **context,
        "word": int(candidates[0]),
        "record_id": sample.record_id,
        "z_norm": float(np.linalg.norm(z)),
        "logits": scores(z, candidates, model.word_matrix).tolist(),
    }


def run_epoch(
    model: EmbeddingModel,
    index: InvertedIndex,
    samples: Sequence[TrainingSample],
    config: TrainConfig,
    phase: str,
    rng: np.random.Generator,
    sampler_config: Optional[SamplerConfig] = None,
    lr: Optional[float] = None,
    epoch: int = 0,
    executor: Optional[ThreadPoolExecutor] = None,
) -> float:
    """Run one epoch of SGD and return the mean per-sample training loss.

    Args:
        phase: HEAD_ONLY updates W only; FINE_TUNE updates W and theta
        lr: step size for this epoch (defaults to config.initial_lr)
        executor: optional pool for per-sample gradients; reduction order is fixed

    Returns:
        Mean sampled-softmax loss over all pairs drawn this epoch
    """
    sampler_config = sampler_config or SamplerConfig()
    lr = config.initial_lr if lr is None else lr
    extractor = model.extractor
    train_theta = phase == FINE_TUNE and extractor.params.size > 0
    vocabulary_size = model.vocabulary_size
    n_steps = steps_per_epoch(len(samples), config)

    def contribution(draw: Tuple[int, np.ndarray]) -> Gradients:
        position, candidates = draw
        z, cache = extractor.forward_cached(samples[position].image_input)
        return gradients(
            z, 0, candidates, model.word_matrix,
            extractor=extractor if train_theta else None, cache=cache,
        )

    total_loss = 0.0
    for step in range(n_steps):
        draws = []
        for _ in range(config.batch_size):
            word, position = sample_pair(index, rng)
            draws.append((position, _candidates(word, samples[position], vocabulary_size, config, sampler_config, rng)))

        results = list(executor.map(contribution, draws)) if executor else [contribution(d) for d in draws]

        for (position, candidates), result in zip(draws, results):
            if not np.isfinite(result.loss):
                diagnostics = _diagnostics(model, samples[position], candidates, epoch=epoch, step=step, lr=lr)
                logger.error(f"Non-finite loss at epoch {epoch}, step {step}: {diagnostics}")
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {step}", diagnostics)
            total_loss += result.loss

        # sparse W update: sum per-word contributions in draw order
        words = np.concatenate([r.candidates for r in results])
        columns = np.concatenate([r.d_columns for r in results], axis=1)
        touched, inverse = np.unique(words, return_inverse=True)
        accumulated = np.zeros((len(touched), model.embedding_dim))
        np.add.at(accumulated, inverse, columns.T)
        scale = lr / config.batch_size
        model.word_matrix[:, touched] -= scale * accumulated.T

        if train_theta:
            d_theta = np.zeros_like(extractor.params)
            for result in results:
                d_theta += result.d_theta
            extractor.params -= scale * d_theta

    return total_loss / (n_steps * config.batch_size)


def validate(
    model: EmbeddingModel,
    valid_samples: Sequence[TrainingSample],
    config: TrainConfig,
    rng_seed: Optional[int] = None,
    sampler_config: Optional[SamplerConfig] = None,
) -> float:
    """Mean loss over every (validation sample, label) pair.

    Uses the full softmax when K <= config.full_softmax_max_k, otherwise a
    negative set drawn from a generator re-seeded on every call, so repeated
    calls on the same model agree exactly.
    """
    if not valid_samples:
        raise EmptyCorpus("validation set is empty")
    sampler_config = sampler_config or SamplerConfig()
    rng = make_rng(config.validation_seed if rng_seed is None else rng_seed)
    vocabulary_size = model.vocabulary_size
    full = vocabulary_size <= config.full_softmax_max_k

    total, terms = 0.0, 0
    for sample in valid_samples:
        z = extract(model, sample.image_input)
        if full:
            logits = model.word_matrix.T @ z
            log_norm = logsumexp(logits)
            for label in sample.labels:
                total += float(log_norm - logits[label])
                terms += 1
        else:
            for label in sample.labels:
                negatives = sample_negatives(label, sample.labels, sampler_config, vocabulary_size, rng)
                candidates = np.concatenate(([label], negatives))
                logits = scores(z, candidates, model.word_matrix)
                total += float(logsumexp(logits) - logits[0])
                terms += 1

    value = total / terms
    if not np.isfinite(value):
        raise NonFiniteLoss("non-finite validation loss", {"validation_samples": len(valid_samples)})
    return value


def fit(
    samples: Sequence[TrainingSample],
    valid: Sequence[TrainingSample],
    model: EmbeddingModel,
    config: TrainConfig,
    sampler_config: Optional[SamplerConfig] = None,
    resume_log: Optional[TrainLog] = None,
    log_path: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[EmbeddingModel, TrainLog]:
    """Train with the head-only / fine-tune protocol and return the best-validation weights.

    Improvement means validation < best - improvement_epsilon. The LR is divided
    after lr_patience_epochs without improvement; training stops after
    stop_patience_epochs without improvement (or at max_epochs).
    """
    sampler_config = sampler_config or SamplerConfig()
    vocabulary_size = model.vocabulary_size
    if not config.full_softmax:
        sampler_config.check(vocabulary_size)
    index = build_inverted_index(samples, vocabulary_size)

    settings = {"train": config.model_dump(), "sampler": sampler_config.model_dump()}
    if resume_log is not None:
        log = TrainLog(records=list(resume_log.records), settings=settings)
        state = resume_log.resume_state(config)
        logger.info(f"Resuming after epoch {state.epoch} (best {state.best_validation:.6f} at epoch {state.best_epoch})")
    else:
        log = TrainLog(settings=settings)
        start = time.perf_counter()
        initial = validate(model, valid, config, sampler_config=sampler_config)
        log.records.append(EpochRecord(0, INITIAL, config.initial_lr, None, initial,
                                       time.perf_counter() - start, config.initial_lr, False))
        state = ResumeState(0, config.initial_lr, initial, 0, 0, 0)
        logger.info(f"Initial validation loss {initial:.6f}")

    epoch, lr = state.epoch, state.lr
    best, lr_wait, stop_wait = state.best_validation, state.lr_wait, state.stop_wait
    snapshot = model.snapshot()
    workers = worker_count()
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    try:
        while stop_wait < config.stop_patience_epochs:
            if config.max_epochs is not None and epoch >= config.max_epochs:
                logger.info(f"Reached max_epochs={config.max_epochs}")
                break
            epoch += 1
            phase = HEAD_ONLY if epoch <= config.head_only_epochs else FINE_TUNE
            if phase == FINE_TUNE and epoch == config.head_only_epochs + 1 and config.reset_lr_on_fine_tune:
                lr = config.initial_lr
                logger.info(f"Fine-tuning phase: learning rate reset to {lr}")

            start = time.perf_counter()
            rng = make_rng([config.seed, epoch, sampler_config.seed])
            train_loss = run_epoch(model, index, samples, config, phase, rng,
                                   sampler_config=sampler_config, lr=lr, epoch=epoch, executor=executor)
            validation_loss = validate(model, valid, config, sampler_config=sampler_config)

            lr_used = lr
            improved = validation_loss < best - config.improvement_epsilon
            if validation_loss < best:
                best = validation_loss
                snapshot = model.snapshot()
            if improved:
                lr_wait = stop_wait = 0
            else:
                lr_wait += 1
                stop_wait += 1
                if lr_wait >= config.lr_patience_epochs:
                    lr = lr / config.lr_divisor
                    lr_wait = 0
                    logger.info(f"📉 No improvement for {config.lr_patience_epochs} epochs, lr -> {lr:g}")

            record = EpochRecord(epoch, phase, lr_used, train_loss, validation_loss,
                                 time.perf_counter() - start, lr, improved)
            log.records.append(record)
            logger.info(
                f"Epoch {epoch} [{phase}] lr={lr_used:g} train={train_loss:.6f} "
                f"valid={validation_loss:.6f}{' *' if improved else ''}"
            )
            if log_path is not None:
                log.write(log_path)
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if executor is not None:
            executor.shutdown()

    model.restore(snapshot)
    if log_path is not None:
        log.write(log_path)
    logger.info(f"✅ Training finished after epoch {epoch}; best validation {log.best_validation:.6f} "
                f"at epoch {log.best_epoch}")
    return model, log
