import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK = ROOT / "configs" / "benchmark.json"

ACCEPTANCE_LINES: list[str] = []


def small_config_dict(**over):
    """A seconds-scale experiment: 8-16-16-3 supernet on a few hundred blobs."""
    d = {
        "proxy": {"kind": "synthetic-blobs", "n_samples": 300, "n_features": 8,
                  "n_classes": 3, "seed": 1},
        "target": {"kind": "synthetic-blobs", "n_samples": 600, "n_features": 8,
                   "n_classes": 3, "seed": 2,
                   "transform": {"rotation_deg": 10.0, "shift": 0.2, "label_noise": 0.02}},
        "model": [8, 16, 16, 3],
        "asga": {"lr": 0.05},
        "epochs_search": 2,
        "epochs_finetune": 2,
        "batch_size": 32,
        "power_iters": 3,
        "seeds": [0, 1],
    }
    d.update(over)
    return d


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_config_dict(output_dir=str(tmp_path / "runs"))))
    return path


@pytest.fixture
def benchmark_path():
    return BENCHMARK


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
