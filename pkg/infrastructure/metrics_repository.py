"""Run directory store: per-seed metrics JSON-Lines, results, summaries and the ablation matrix"""

import json
import logging
import threading
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from domain.entities import MetricsRecord, RunResult

logger = logging.getLogger(__name__)


class MetricsRepository:
    """File store of one run: per-seed metrics JSONL, results, checkpoints and summaries.

    Layout: ``<out_dir>/<run_name>/seed<k>/{metrics.jsonl, result.json, *.ckpt}``
    plus ``summary.json`` (and the ablation matrix) at the run level.
    """

    def __init__(self, out_dir, run_name: str):
        self.run_dir = Path(out_dir) / run_name
        self._lock = threading.Lock()

    def seed_dir(self, seed: int) -> Path:
        path = self.run_dir / f"seed{seed}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def metrics_path(self, seed: int) -> Path:
        return self.seed_dir(seed) / "metrics.jsonl"

    def checkpoint_path(self, seed: int, tag: str) -> Path:
        name = "model.ckpt" if tag == "final" else f"model.{tag}.ckpt"
        return self.seed_dir(seed) / name

    def open_sink(self, seed: int):
        """Truncate the seed's metrics file and return a callable appending one record per line"""
        path = self.metrics_path(seed)
        path.write_text("")

        def sink(record: MetricsRecord) -> None:
            with path.open("a", encoding="utf-8") as f:
                f.write(record.model_dump_json() + "\n")

        return sink

    def load_metrics(self, seed: int) -> pd.DataFrame:
        """Metrics of one seed as a frame, one row per record"""
        path = self.metrics_path(seed)
        rows = [MetricsRecord.model_validate_json(line).model_dump()
                for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        return pd.DataFrame(rows)

    def save_run_result(self, result: RunResult) -> Path:
        """Save one seed's RunResult as JSON"""
        path = self.seed_dir(result.seed) / "result.json"
        path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
        return path

    def save_summary(self, summary: dict, results: Sequence[RunResult]) -> Path:
        payload = {**summary, "seeds": [r.seed for r in results]}
        with self._lock:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            path = self.run_dir / "summary.json"
            path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        logger.info(f"summary written to {path}")
        return path

    def save_ablation(self, matrix: pd.DataFrame) -> List[Path]:
        """Accuracy matrix as CSV (rows forward lr, columns feedback lr) and JSON"""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.run_dir / "ablation.csv"
        json_path = self.run_dir / "ablation.json"
        matrix.to_csv(csv_path)
        json_path.write_text(json.dumps({
            "lr_forward": [float(v) for v in matrix.index],
            "lr_feedback": [float(v) for v in matrix.columns],
            "accuracy": [[_finite_or_none(v) for v in row] for row in matrix.to_numpy().tolist()],
        }, indent=2))
        logger.info(f"ablation matrix written to {csv_path}")
        return [csv_path, json_path]

    def save_search(self, table: pd.DataFrame, best: Optional[dict], best_summary: Optional[dict]) -> List[Path]:
        """Every tried combination as CSV, plus the selected one and its test summary as JSON"""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.run_dir / "search.csv"
        json_path = self.run_dir / "search.json"
        table.to_csv(csv_path, index=False)
        rows = [{k: _finite_or_none(v) if isinstance(v, float) else v for k, v in row.items()}
                for row in table.to_dict(orient="records")]
        json_path.write_text(json.dumps({"best": best, "best_summary": best_summary, "rows": rows},
                                        indent=2, default=_finite_or_none))
        logger.info(f"search table written to {csv_path}")
        return [csv_path, json_path]


def _finite_or_none(value: float) -> Optional[float]:
    return None if pd.isna(value) else float(value)
