"""
Validation script for the full weakcat pipeline.
Runs every subcommand on the bundled demo catalog in a temporary directory
and reports which steps succeed.
"""

import json
import logging
import os
import sys
import tempfile
from pathlib import Path

# Add the repository root to path for `from src.<module> import ...`
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from src.cli import main  # noqa: E402

DEMO_CATALOG = Path(__file__).resolve().parents[2] / "src" / "data" / "demo_catalog.jsonl"


def run_step(name: str, argv) -> bool:
    code = main(["--log-level", "WARNING", "--registry", "", *map(str, argv)])
    if code == 0:
        print(f"✅ {name}")
        return True
    print(f"❌ {name} (exit code {code})")
    return False


def validate_pipeline() -> bool:
    print("🧪 Validating weakcat pipeline on the demo catalog...")
    logging.basicConfig(level=logging.WARNING)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data, model = tmp / "data", tmp / "model"
        checkpoint = model / "model.wmdl"
        steps = [
            ("preprocess", ["preprocess", DEMO_CATALOG, "--out-dir", data, "--validation-fraction", "0.1"]),
            ("train", ["train", "--data-dir", data, "--out-dir", model, "--extractor", "linear",
                       "--embedding-dim", "8", "--max-epochs", "5"]),
            ("eval-retrieval", ["eval-retrieval", "--checkpoint", checkpoint, "--queries", DEMO_CATALOG,
                                "--gallery", DEMO_CATALOG, "--topk", "1,5,10", "--out", tmp / "retrieval.json"]),
            ("probe", ["probe", "--checkpoint", checkpoint, "--train", DEMO_CATALOG, "--epochs", "50",
                       "--out", tmp / "probe.json"]),
            ("export-features", ["export-features", "--checkpoint", checkpoint, "--input", DEMO_CATALOG,
                                 "--out", tmp / "features.tsv"]),
            ("tag", ["tag", "--checkpoint", checkpoint, "--input", data / "validation.wcat",
                     "--vocab", data / "vocabulary.json", "--topk", "3"]),
            ("neighbors", ["neighbors", "--checkpoint", checkpoint, "--vocab", data / "vocabulary.json",
                           "--topk", "5", "dress", "shoes"]),
        ]
        for name, argv in steps:
            if not run_step(name, argv):
                return False

        retrieval = json.loads((tmp / "retrieval.json").read_text())
        probe = json.loads((tmp / "probe.json").read_text())
        print(f"📊 Retrieval top-1: {retrieval['topk_accuracy']['1']:.3f}")
        print(f"📊 Probe top-1 category accuracy: {probe['topk_accuracy']['1']:.3f}")

    print("🎉 All pipeline steps passed!")
    return True


if __name__ == "__main__":
    sys.exit(0 if validate_pipeline() else 1)
