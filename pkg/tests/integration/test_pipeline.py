"""
End-to-end run on a generated catalog: gen-synthetic -> preprocess -> train
-> eval-retrieval / tag, with the default training protocol capped at 100 epochs.
"""

import json

from src.corpus import Vocabulary
from src.synthetic import SyntheticCatalogConfig, cluster_words, letter_code, noise_word
from src.trainer import TrainLog

# 8 clusters x 500 samples, 40 visual words and 60 noise words, each noise word
# attached to 1% of the records
NOISE_RATE = "0.01"


def test_synthetic_catalog_end_to_end(tmp_path, run_cli, capsys):
    catalog, data, model = tmp_path / "catalog.jsonl", tmp_path / "data", tmp_path / "model"
    # one item per cluster, so retrieval chance is 1/8
    assert run_cli("gen-synthetic", "--out", catalog, "--noise-rate", NOISE_RATE, "--images-per-item", "500") == 0
    assert run_cli("preprocess", catalog, "--out-dir", data) == 0

    config = SyntheticCatalogConfig()
    vocab = Vocabulary.load(data / "vocabulary.json")
    visual = {w for words in cluster_words(config) for w in words}
    noise = {noise_word(p) for p in range(config.noise_words)}
    assert len(vocab) == 100
    assert set(vocab.tokens) == visual | noise

    assert run_cli("train", "--data-dir", data, "--out-dir", model, "--extractor", "precomputed",
                   "--max-epochs", "100") == 0
    log = TrainLog.read(model / "train_log.jsonl")
    assert log.best_validation <= 0.5 * log.records[0].validation_loss

    report = tmp_path / "retrieval.json"
    assert run_cli("eval-retrieval", "--checkpoint", model / "model.wmdl", "--queries", data / "validation.wcat",
                   "--gallery", data / "train.wcat", "--topk", "1,5", "--out", report) == 0
    accuracy = json.loads(report.read_text())["topk_accuracy"]
    assert accuracy["1"] >= 5 * (1 / 8)

    capsys.readouterr()
    assert run_cli("tag", "--checkpoint", model / "model.wmdl", "--input", data / "validation.wcat",
                   "--vocab", data / "vocabulary.json", "--topk", str(len(vocab))) == 0
    lines = capsys.readouterr().out.splitlines()
    in_cluster = 0
    for line in lines:
        record_id, cells = line.split("\t")
        cluster = int(record_id.split("-")[1])
        best_visual = next(c for c in cells.split() if c.startswith("vis"))
        in_cluster += best_visual.startswith(f"vis{letter_code(cluster, 2)}")
    assert in_cluster >= 0.9 * len(lines)


def test_noise_words_kept_still_improves(tmp_path, run_cli):
    catalog, data, model = tmp_path / "catalog.jsonl", tmp_path / "data", tmp_path / "model"
    assert run_cli("gen-synthetic", "--out", catalog, "--samples-per-cluster", "200", "--seed", "1") == 0
    assert run_cli("preprocess", catalog, "--out-dir", data, "--validation-fraction", "0.05") == 0
    assert len(Vocabulary.load(data / "vocabulary.json")) == 100

    assert run_cli("train", "--data-dir", data, "--out-dir", model, "--extractor", "mlp", "--hidden", "32",
                   "--embedding-dim", "16", "--max-epochs", "30", "--head-only-epochs", "10") == 0
    log = TrainLog.read(model / "train_log.jsonl")
    assert log.best_validation < log.records[0].validation_loss
    assert any(r.phase == "fine_tune" for r in log.records)
