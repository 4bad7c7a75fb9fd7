import json

import numpy as np
import pandas as pd

from domain.entities import MetricsRecord, RunResult
from infrastructure.metrics_repository import MetricsRepository


def test_sink_appends_one_line_per_record(tmp_path):
    repo = MetricsRepository(tmp_path, "run")
    sink = repo.open_sink(3)
    sink(MetricsRecord(seed=3, step=10, epoch=1, split="val", accuracy=0.5))
    sink(MetricsRecord(seed=3, step=20, epoch=1, split="test", accuracy=0.25))
    frame = repo.load_metrics(3)
    assert frame["split"].tolist() == ["val", "test"]
    assert frame["step"].tolist() == [10, 20]
    assert (tmp_path / "run" / "seed3" / "metrics.jsonl").exists()


def test_summary_lists_seeds(tmp_path):
    repo = MetricsRepository(tmp_path, "run")
    results = [RunResult(seed=0, config={}), RunResult(seed=2, config={})]
    path = repo.save_summary({"mean": 0.5}, results)
    assert json.loads(path.read_text()) == {"mean": 0.5, "seeds": [0, 2]}


def test_search_table_and_selection(tmp_path):
    repo = MetricsRepository(tmp_path, "run_search")
    table = pd.DataFrame([
        {"lr_forward": 0.2, "clip_norm": 1.0, "val_accuracy": 0.8, "test_accuracy": 0.79,
         "test_std": 0.01, "failed_seeds": 0},
        {"lr_forward": 2.0, "clip_norm": 1.0, "val_accuracy": np.nan, "test_accuracy": np.nan,
         "test_std": np.nan, "failed_seeds": 1},
    ])
    csv_path, json_path = repo.save_search(table, {"lr_forward": 0.2, "clip_norm": 1.0}, {"mean": 0.79})
    assert len(pd.read_csv(csv_path)) == 2
    saved = json.loads(json_path.read_text())
    assert saved["best"] == {"lr_forward": 0.2, "clip_norm": 1.0}
    assert saved["best_summary"] == {"mean": 0.79}
    assert saved["rows"][0]["val_accuracy"] == 0.8
    assert saved["rows"][1]["val_accuracy"] is None
    assert saved["rows"][1]["failed_seeds"] == 1


def test_search_without_a_winner(tmp_path):
    repo = MetricsRepository(tmp_path, "run_search")
    table = pd.DataFrame([{"lr_forward": 0.2, "val_accuracy": np.nan, "failed_seeds": 1}])
    _, json_path = repo.save_search(table, None, None)
    saved = json.loads(json_path.read_text())
    assert saved["best"] is None and saved["best_summary"] is None
