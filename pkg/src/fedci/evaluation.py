"""Forecast metrics in original units and their cross-client recombination."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Union

import numpy as np

from .data import WindowSet
from .model import ModelConfig, WindowBatch, hi_predict, predict

MAPE_FLOOR = 1e-3


def _pair(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction {pred.shape} vs target {true.shape}")
    return pred, true


def mae(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.abs(pred - true).mean())


def rmse(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.sqrt(((pred - true) ** 2).mean()))


def mape(pred, true, floor: float = MAPE_FLOOR) -> float:
    """Percent error over targets with ``|y| >= floor``."""
    if floor <= 0:
        raise ValueError("MAPE floor must be positive")
    pred, true = _pair(pred, true)
    mask = np.abs(true) >= floor
    if not mask.any():
        raise ValueError("MAPE undefined: every target is below the floor")
    return float(100.0 * (np.abs(pred - true)[mask] / np.abs(true[mask])).mean())


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape_percent: float
    count: int
    scope: Union[int, str] = "global"
    task: str = ""
    mape_count: int = -1  # elements that entered MAPE; -1 means all of them

    def __post_init__(self):
        if self.mape_count < 0:
            self.mape_count = self.count
        if self.count <= 0:
            raise ValueError("a report needs at least one element")

    def to_dict(self) -> dict:
        return asdict(self)


def report(pred, true, scope="global", task="", floor: float = MAPE_FLOOR) -> MetricReport:
    pred, true = _pair(pred, true)
    mask_count = int((np.abs(true) >= floor).sum())
    mp = mape(pred, true, floor) if mask_count else math.nan
    return MetricReport(mae(pred, true), rmse(pred, true), mp, int(pred.size), scope, task, mask_count)


def aggregate_reports(reports: Sequence[MetricReport], scope="global") -> MetricReport:
    """Element-count weighted recombination; equals metrics over the pooled elements."""
    if not reports:
        raise ValueError("no reports to aggregate")
    if len(reports) == 1:
        r = reports[0]
        return MetricReport(r.mae, r.rmse, r.mape_percent, r.count, scope, r.task, r.mape_count)
    n = sum(r.count for r in reports)
    m = sum(r.mape_count for r in reports)
    mae_ = sum(r.mae * r.count for r in reports) / n
    mse = sum(r.rmse ** 2 * r.count for r in reports) / n
    mape_ = sum(r.mape_percent * r.mape_count for r in reports if r.mape_count) / m if m else math.nan
    tasks = {r.task for r in reports}
    return MetricReport(mae_, math.sqrt(mse), mape_, n, scope, tasks.pop() if len(tasks) == 1 else "", m)


Predictor = Callable[[WindowBatch], np.ndarray]


def model_predictor(params: Dict[str, np.ndarray], cfg: ModelConfig) -> Predictor:
    return lambda batch: predict(params, batch, cfg)


def hi_predictor(t_out: int) -> Predictor:
    return lambda batch: hi_predict(batch.x, t_out)


def evaluate_client(predictor: Predictor, windows: WindowSet, scope="global", task="",
                    batch_size: int = 256, floor: float = MAPE_FLOOR) -> MetricReport:
    """Run ``predictor`` over all windows and score it in de-normalized units."""
    if len(windows) == 0:
        raise ValueError("empty test split")
    preds, trues = [], []
    for batch in windows.batches(batch_size):
        preds.append(np.asarray(predictor(batch), dtype=np.float64))
        trues.append(np.asarray(batch.y, dtype=np.float64))
    norm = windows.normalizer
    pred = norm.inverse(np.concatenate(preds))
    true = norm.inverse(np.concatenate(trues))
    return report(pred, true, scope, task, floor)


def save_reports(reports: Sequence[MetricReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    return path


def load_reports(path) -> List[MetricReport]:
    return [MetricReport(**d) for d in json.loads(Path(path).read_text())]
