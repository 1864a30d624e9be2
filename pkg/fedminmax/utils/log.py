"""Logging setup and report file writers.

Metric tables are written with a fixed column order and float format so
re-running the same config and seed reproduces them byte for byte.
"""

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from fedminmax.errors import ReportError

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
FLOAT_FORMAT = "%.10g"


def configure_logging(level: str | int = "INFO") -> None:
    """Install one stderr handler on the root logger."""
    if isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            raise ValueError(f"unknown log level {level!r}")
        level = resolved
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def metrics_frame(trace) -> pd.DataFrame:
    """One row per round: group risks, induced group weights, and summaries.

    Adversary columns are added when the adversary does not range over the
    groups themselves (AFL clients, LocalFedMinMax cells).
    """
    num_groups = trace.num_groups
    rounds = trace.rounds
    risks = np.array([r.group_risks for r in rounds]).reshape(len(rounds), num_groups)
    weights = np.array([r.group_weights for r in rounds]).reshape(len(rounds), num_groups)
    prior = trace.group_prior

    columns: dict[str, object] = {"round": [r.round for r in rounds]}
    for a in range(num_groups):
        columns[f"risk_{a}"] = risks[:, a]
    for a in range(num_groups):
        columns[f"weight_{a}"] = weights[:, a]
    if list(trace.adversary_labels) != [f"g{a}" for a in range(num_groups)]:
        adversary = np.array([r.adversary_weights for r in rounds]).reshape(
            len(rounds), len(trace.adversary_labels)
        )
        for j, label in enumerate(trace.adversary_labels):
            columns[f"adv_{label}"] = adversary[:, j]
    columns["worst_risk"] = risks.max(axis=1) if rounds else []
    columns["best_risk"] = risks.min(axis=1) if rounds else []
    columns["average_risk"] = risks @ prior if rounds else []
    return pd.DataFrame(columns)


def write_metrics(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as exc:
        raise ReportError(f"failed to write {path}: {exc}") from exc
    return path


def read_metrics(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as exc:
        raise ReportError(f"failed to read {path}: {exc}") from exc


def _finite_or_null(value):
    if isinstance(value, float):
        return value if np.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _finite_or_null(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_null(v) for v in value]
    return value


def write_summary(document: dict, path: str | Path) -> Path:
    """Write *document* as JSON; NaN and infinities become ``null``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(_finite_or_null(document), indent=2, allow_nan=False)
        path.write_text(text + "\n", encoding="utf-8")
    except (OSError, TypeError, ValueError) as exc:
        raise ReportError(f"failed to write {path}: {exc}") from exc
    return path
