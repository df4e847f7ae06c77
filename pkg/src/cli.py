"""
Command-line interface for weakcat.

    python -m src.cli preprocess catalog.jsonl --out-dir runs/data
    python -m src.cli train --data-dir runs/data --out-dir runs/model
    python -m src.cli eval-retrieval --checkpoint runs/model/model.wmdl --queries q.jsonl --gallery g.jsonl

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import logging
import sys
from itertools import chain
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from src.config import (
    ExtractorConfig,
    PreprocessConfig,
    ProbeConfig,
    SamplerConfig,
    TrainConfig,
    WeakcatSettings,
    setup_logging,
)
from src.corpus import (
    Vocabulary,
    build_dataset,
    build_vocabulary,
    dataset_stats,
    load_samples,
    preprocess_text,
    read_catalog,
    read_dataset,
    split_validation,
    write_dataset,
)
from src.errors import VocabMismatch, WeakcatError
from src.metadata import ArtifactRegistry
from src.model import extract, init_model, load_checkpoint, predict_words, save_checkpoint, similar_words
from src.retrieval import build_index, embed_queries, topk_accuracy
from src.synthetic import SyntheticCatalogConfig, write_catalog
from src.trainer import TrainLog, fit
from src.transfer import ProbeDataset, evaluate_probe, train_probe, write_metrics_report

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path("config/weakcat_config.json")
VOCAB_FILE = "vocabulary.json"
TRAIN_FILE = "train.wcat"
VALID_FILE = "validation.wcat"
STATS_FILE = "stats.json"
CHECKPOINT_FILE = "model.wmdl"
LOG_FILE = "train_log.jsonl"


class UsageError(Exception):
    pass


class WeakcatArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; weakcat reserves 2 for data errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def _shape(value: str) -> List[int]:
    dims = _int_list(value)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError("image shape must be HEIGHT,WIDTH,CHANNELS")
    return dims


def _override(model, **updates):
    """Re-validate a config section with the flags the user actually passed."""
    values = model.model_dump()
    values.update({k: v for k, v in updates.items() if v is not None})
    return type(model).model_validate(values)


def _require(path: Optional[str], what: str) -> Path:
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


class Runner:
    """Holds settings and the artifact registry for one CLI invocation."""

    def __init__(self, args: argparse.Namespace, settings: WeakcatSettings):
        self.args = args
        self.settings = settings
        registry_path = args.registry if args.registry is not None else settings.storage.registry_path
        self.registry = ArtifactRegistry(registry_path) if registry_path else None

    def record(self, path: Path, kind: str, seed: Optional[int] = None) -> None:
        if self.registry is not None:
            self.registry.record(path, kind, self.args.command, seed)

    def load_vocabulary_for(self, checkpoint_fingerprint: bytes, vocab_path: Optional[str]) -> Optional[Vocabulary]:
        if vocab_path is None:
            return None
        vocab = Vocabulary.load(_require(vocab_path, "vocabulary"))
        if vocab.fingerprint() != checkpoint_fingerprint:
            raise VocabMismatch(f"{vocab_path} is not the vocabulary the checkpoint was trained on")
        return vocab

    # -- subcommands -------------------------------------------------------

    def preprocess(self) -> int:
        args = self.args
        config = _override(
            self.settings.preprocess,
            vocabulary_max_size=args.vocab_size,
            validation_fraction=args.validation_fraction,
            min_token_length=args.min_token_length,
            seed=args.seed,
        )
        paths = [_require(p, "catalog") for p in args.catalogs]
        records = list(chain.from_iterable(read_catalog(p) for p in paths))
        logger.info(f"Read {len(records)} records from {len(paths)} catalog file(s)")

        vocab = build_vocabulary((preprocess_text(r.text_fields, config) for r in records), config)
        build = build_dataset(records, vocab, config)
        train, valid = split_validation(build.samples, config)

        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        vocab.save(out_dir / VOCAB_FILE)
        write_dataset(out_dir / TRAIN_FILE, train, len(vocab))
        write_dataset(out_dir / VALID_FILE, valid, len(vocab))

        # document frequencies over every kept sample, independent of the split seed
        stats = dataset_stats(build.samples, vocab, top_n=args.top_n)
        stats.update({
            "records": len(records),
            "dropped_records": build.dropped,
            "train_samples": len(train),
            "validation_samples": len(valid),
        })
        with open(out_dir / STATS_FILE, "w", encoding="utf-8") as f:
            json.dump(stats, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")

        for name, kind in ((VOCAB_FILE, "vocabulary"), (TRAIN_FILE, "dataset"), (VALID_FILE, "dataset"), (STATS_FILE, "stats")):
            self.record(out_dir / name, kind, config.seed)

        print(f"Vocabulary size: {stats['vocabulary_size']}")
        print(f"Samples: {len(train)} train / {len(valid)} validation ({build.dropped} dropped)")
        print(f"Mean labels per sample: {stats['mean_labels_per_sample']:.3f}")
        print(f"\nMost frequent labels in training dataset (top {args.top_n}):")
        for rank, row in enumerate(stats["top_labels"], start=1):
            print(f"{rank:4d}  {row['token']:<24} {row['count']:>8d}")
        return 0

    def train(self) -> int:
        args = self.args
        data_dir = Path(args.data_dir) if args.data_dir else None
        train_path = _require(args.train or (data_dir and str(data_dir / TRAIN_FILE)), "training dataset")
        valid_path = _require(args.valid or (data_dir and str(data_dir / VALID_FILE)), "validation dataset")
        vocab_path = _require(args.vocab or (data_dir and str(data_dir / VOCAB_FILE)), "vocabulary")

        train_config = _override(
            self.settings.train,
            batch_size=args.batch_size,
            initial_lr=args.lr,
            epoch_fraction=args.epoch_fraction,
            head_only_epochs=args.head_only_epochs,
            lr_patience_epochs=args.lr_patience,
            stop_patience_epochs=args.stop_patience,
            seed=args.seed,
            max_epochs=args.max_epochs,
            full_softmax=True if args.full_softmax else None,
            reset_lr_on_fine_tune=True if args.reset_lr_on_fine_tune else None,
        )
        sampler_config = _override(
            self.settings.sampler,
            n_negatives=args.n_negatives,
            seed=args.seed,
            exclude_bag_words_from_negatives=True if args.exclude_bag_negatives else None,
        )
        extractor_config = _override(
            self.settings.extractor,
            kind=args.extractor,
            embedding_dim=args.embedding_dim,
            hidden_widths=tuple(args.hidden) if args.hidden is not None else None,
            seed=args.seed,
        )

        vocab = Vocabulary.load(vocab_path)
        train, vocabulary_size = read_dataset(train_path)
        valid, valid_vocabulary_size = read_dataset(valid_path)
        if vocabulary_size != len(vocab) or valid_vocabulary_size != len(vocab):
            raise VocabMismatch(f"datasets were built for K={vocabulary_size}/{valid_vocabulary_size}, vocabulary has {len(vocab)}")
        if not train_config.full_softmax:
            try:
                sampler_config.check(len(vocab))
            except ValueError as e:
                raise UsageError(str(e))

        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / LOG_FILE
        resume_log = None
        if args.resume:
            model = load_checkpoint(_require(args.resume, "checkpoint"), expected_fingerprint=vocab.fingerprint())
            resume_log = TrainLog.read(_require(args.resume_log or str(log_path), "train log"))
        else:
            input_dim = train[0].image_input.size
            model = init_model(extractor_config, input_dim, len(vocab), vocab.fingerprint())

        print(f"Training: batch {train_config.batch_size}, lr {train_config.initial_lr}, "
              f"patience {train_config.lr_patience_epochs}/{train_config.stop_patience_epochs}, "
              f"head-only {train_config.head_only_epochs} epochs, epoch fraction {train_config.epoch_fraction}, "
              f"{sampler_config.n_negatives} negatives")

        def report(record) -> None:
            print(f"epoch {record.epoch:4d}  {record.phase:<9}  lr {record.lr:<8g}  "
                  f"train {record.train_loss:.6f}  valid {record.validation_loss:.6f}{'  *' if record.improved else ''}")

        model, log = fit(train, valid, model, train_config, sampler_config=sampler_config,
                         resume_log=resume_log, log_path=log_path, on_epoch=report)
        checkpoint_path = out_dir / CHECKPOINT_FILE
        save_checkpoint(model, checkpoint_path)
        self.record(checkpoint_path, "checkpoint", train_config.seed)
        self.record(log_path, "train_log", train_config.seed)
        print(f"Best validation loss {log.best_validation:.6f} at epoch {log.best_epoch} "
              f"(initial {log.records[0].validation_loss:.6f})")
        return 0

    def eval_retrieval(self) -> int:
        args = self.args
        model = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        queries_path = _require(args.queries, "query file")
        gallery_path = _require(args.gallery, "gallery file")
        ks = args.topk or self.settings.retrieval.ks
        exclude_self = args.exclude_self
        if exclude_self is None:
            exclude_self = self.settings.retrieval.exclude_self and queries_path.resolve() == gallery_path.resolve()

        index = build_index(model, load_samples(gallery_path))
        queries = [((s.record_id, z), s.item_id) for s, z in embed_queries(model, load_samples(queries_path))]
        result = topk_accuracy(index, queries, ks, exclude_self=exclude_self)

        report = {
            "queries": len(queries),
            "gallery": len(index),
            "rejected": index.rejected,
            "exclude_self": exclude_self,
            "topk_accuracy": result.metrics,
        }
        if args.out:
            write_metrics_report(args.out, report)
            self.record(Path(args.out), "retrieval_report")
        if args.rank_dump:
            with open(args.rank_dump, "w", encoding="utf-8") as f:
                f.write("record_id\titem_id\tfirst_hit_rank\n")
                for outcome in result.per_query:
                    rank = "" if outcome.first_hit_rank is None else outcome.first_hit_rank
                    f.write(f"{outcome.record_id}\t{outcome.item_id}\t{rank}\n")
            self.record(Path(args.rank_dump), "rank_dump")
        if args.save_index:
            index.save(args.save_index)
            self.record(Path(args.save_index), "index")

        print(f"Queries: {len(queries)}  Gallery: {len(index)}  exclude_self={exclude_self}")
        for k, accuracy in result.metrics.items():
            print(f"top-{k:<3d} {accuracy:.4f}")
        return 0

    def probe(self) -> int:
        args = self.args
        model = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        probe_config = _override(self.settings.probe, lr=args.lr, batch_size=args.batch_size,
                                 epochs=args.epochs, seed=args.seed)
        target = "category" if args.head == "softmax" else "attributes"
        train_records = list(read_catalog(_require(args.train, "probe training catalog")))
        test_records = list(read_catalog(_require(args.test, "probe test catalog"))) if args.test else train_records

        n_outputs = args.n_outputs or _count_outputs(chain(train_records, test_records), target)
        train_data = ProbeDataset.from_records(model, train_records, target, n_outputs)
        test_data = train_data if test_records is train_records else ProbeDataset.from_records(model, test_records, target, n_outputs)

        groups = None
        if args.groups:
            with open(_require(args.groups, "attribute groups file"), "r", encoding="utf-8") as f:
                groups = {int(k): str(v) for k, v in json.load(f).items()}

        probe = train_probe(train_data, args.head, probe_config)
        report = evaluate_probe(probe, test_data, args.topk or [1, 3, 5], groups, args.count_empty_as_zero)
        if args.out:
            write_metrics_report(args.out, report)
            self.record(Path(args.out), "probe_report", probe_config.seed)

        print(f"Probe ({args.head}) on {len(test_data)} samples, {n_outputs} outputs")
        if "topk_accuracy" in report:
            for k, value in report["topk_accuracy"].items():
                print(f"top-{k:<3d} accuracy {value:.4f}")
        else:
            for group, values in report["topk_recall"].items():
                cells = "  ".join(f"top-{k} {'n/a' if v is None else f'{v:.4f}'}" for k, v in values.items())
                print(f"{group:<16} {cells}")
        if report["mean_auc"] is not None:
            print(f"mean AUC {report['mean_auc']:.4f}")
        return 0

    def export_features(self) -> int:
        args = self.args
        model = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        samples = load_samples(_require(args.input, "input file"))
        with open(args.out, "w", encoding="utf-8") as f:
            for sample in samples:
                z = extract(model, sample.image_input)
                f.write("\t".join([sample.record_id, sample.item_id] + [repr(float(v)) for v in z]) + "\n")
        self.record(Path(args.out), "features")
        print(f"Exported {len(samples)} feature rows (I={model.embedding_dim}) to {args.out}")
        return 0

    def gen_synthetic(self) -> int:
        args = self.args
        updates: Dict[str, Any] = {
            "clusters": args.clusters,
            "words_per_cluster": args.words_per_cluster,
            "noise_words": args.noise_words,
            "samples_per_cluster": args.samples_per_cluster,
            "images_per_item": args.images_per_item,
            "feature_dim": args.feature_dim,
            "visual_rate": args.visual_rate,
            "noise_rate": args.noise_rate,
            "image_shape": tuple(args.image_shape) if args.image_shape else None,
            "seed": args.seed,
        }
        config = SyntheticCatalogConfig.model_validate({k: v for k, v in updates.items() if v is not None})
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        count = write_catalog(out, config)
        self.record(out, "catalog", config.seed)
        print(f"Wrote {count} records to {out}")
        return 0

    def tag(self) -> int:
        args = self.args
        model = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        vocab = self.load_vocabulary_for(model.vocab_fingerprint, args.vocab)
        for sample in load_samples(_require(args.input, "input file")):
            words = predict_words(model, sample.image_input, args.topk)
            cells = " ".join(f"{vocab.tokens[i] if vocab else i}:{p:.4f}" for i, p in words)
            print(f"{sample.record_id}\t{cells}")
        return 0

    def neighbors(self) -> int:
        args = self.args
        model = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        vocab = self.load_vocabulary_for(model.vocab_fingerprint, args.vocab)
        for token in args.tokens:
            if token not in vocab.index_of:
                raise UsageError(f"'{token}' is not in the vocabulary")
            similar = similar_words(model, vocab.index_of[token], args.topk)
            print(f"{token}\t" + " ".join(f"{vocab.tokens[i]}:{s:.4f}" for i, s in similar))
        return 0


def _count_outputs(records, target: str) -> int:
    highest = -1
    for record in records:
        value = record.annotations.get(target)
        if target == "category" and value is not None:
            highest = max(highest, int(value))
        elif value:
            highest = max(highest, max(int(v) for v in value))
    return highest + 1


def build_parser() -> argparse.ArgumentParser:
    parser = WeakcatArgumentParser(description="weakcat: joint image/word embeddings from weakly annotated catalogs")
    parser.add_argument("--config", default=None, help=f"Path to configuration file (default {DEFAULT_CONFIG} if present)")
    parser.add_argument("--log-level", default=None, help="Override the configured log level")
    parser.add_argument("--registry", default=None, help="Artifact registry database ('' disables)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="Build vocabulary, train/validation datasets and stats")
    p.add_argument("catalogs", nargs="+", help="Line-delimited JSON catalog files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--vocab-size", type=int, help="Vocabulary size (default 30000)")
    p.add_argument("--validation-fraction", type=float, help="Validation share (default 0.005)")
    p.add_argument("--min-token-length", type=int)
    p.add_argument("--top-n", type=int, default=50, help="Rows in the label frequency table")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="Train the joint embedding model")
    p.add_argument("--data-dir", help="Directory written by preprocess")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--vocab")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--batch-size", type=int, help="SGD batch size (default 20)")
    p.add_argument("--lr", type=float, help="Initial learning rate (default 0.1)")
    p.add_argument("--n-negatives", type=int, help="Negative words per pair (default 20)")
    p.add_argument("--epoch-fraction", type=float, help="Share of the dataset seen per epoch (default 0.1)")
    p.add_argument("--head-only-epochs", type=int, help="Epochs training W only (default 20)")
    p.add_argument("--lr-patience", type=int, help="Flat epochs before dividing the LR by 10 (default 10)")
    p.add_argument("--stop-patience", type=int, help="Flat epochs before stopping (default 20)")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--extractor", choices=["precomputed", "linear", "mlp"])
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--hidden", type=_int_list, help="Comma-separated MLP hidden widths")
    p.add_argument("--full-softmax", action="store_true")
    p.add_argument("--exclude-bag-negatives", action="store_true")
    p.add_argument("--reset-lr-on-fine-tune", action="store_true")
    p.add_argument("--resume", help="Checkpoint to continue from")
    p.add_argument("--resume-log", help="Train log of the run being resumed (default OUT_DIR/train_log.jsonl)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval-retrieval", help="Top-k item retrieval accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--topk", type=_int_list, help="Comma-separated k values (default 1,5,10,20,30,40,50)")
    p.add_argument("--exclude-self", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", help="JSON metrics report")
    p.add_argument("--rank-dump", help="TSV with the first same-item rank of every query")
    p.add_argument("--save-index", help="Write the gallery index (WIDX)")

    p = sub.add_parser("probe", help="Linear probe on frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True, help="Catalog with category/attributes annotations")
    p.add_argument("--test")
    p.add_argument("--head", choices=["softmax", "sigmoid"], default="softmax")
    p.add_argument("--topk", type=_int_list)
    p.add_argument("--groups", help="JSON map attribute index -> group name")
    p.add_argument("--count-empty-as-zero", action="store_true")
    p.add_argument("--n-outputs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="JSON metrics report")

    p = sub.add_parser("export-features", help="Dump visual features as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-synthetic", help="Generate a synthetic catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int)
    p.add_argument("--words-per-cluster", type=int)
    p.add_argument("--noise-words", type=int)
    p.add_argument("--samples-per-cluster", type=int)
    p.add_argument("--images-per-item", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--visual-rate", type=float)
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--image-shape", type=_shape, help="HEIGHT,WIDTH,CHANNELS to emit image tensors")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("tag", help="Top-k vocabulary words for each image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--vocab")
    p.add_argument("--topk", type=int, default=5)

    p = sub.add_parser("neighbors", help="Nearest words in the embedding space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("tokens", nargs="+")
    return parser


COMMANDS = {
    "preprocess": Runner.preprocess,
    "train": Runner.train,
    "eval-retrieval": Runner.eval_retrieval,
    "probe": Runner.probe,
    "export-features": Runner.export_features,
    "gen-synthetic": Runner.gen_synthetic,
    "tag": Runner.tag,
    "neighbors": Runner.neighbors,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        config_path = args.config or (str(DEFAULT_CONFIG) if DEFAULT_CONFIG.exists() else None)
        settings = WeakcatSettings.load(config_path)
        setup_logging(settings.logging, args.log_level)
        return COMMANDS[args.command](Runner(args, settings))
    except KeyboardInterrupt:
        print("\nInterrupted by user")
        return 1
    except WeakcatError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except (UsageError, ValidationError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
