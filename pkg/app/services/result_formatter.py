"""
Result formatting and provenance.

Tables are written as CSV (pandas) plus a float64 .npy matrix of their
numeric columns. Every output directory ends with the resolved config and a
manifest of sha256 hashes of its inputs and outputs.
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.logging_config import logger
from app.schemas.metrics import MetricsReport
from app.schemas.probe import FlowPrediction
from app.schemas.run_config import RunConfig

TABLE_COLUMNS = ("AJ", "AD", "<delta", "OA", "OF1")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_table(frame: pd.DataFrame, stem: Path) -> Tuple[Path, Path]:
    """Write `stem`.csv and `stem`.npy (numeric and boolean columns as float64)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    npy_path = stem.with_suffix(".npy")
    frame.to_csv(csv_path, index=False, float_format="%.6f")
    numeric = frame.select_dtypes(include=["number", "bool"]).astype(np.float64)
    np.save(npy_path, numeric.to_numpy())
    return csv_path, npy_path


def predictions_frame(predictions: Sequence[FlowPrediction]) -> pd.DataFrame:
    return pd.DataFrame([p.to_row() for p in predictions])


def write_metrics_json(report: MetricsReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def _cell(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def format_metrics_table(reports: Mapping[str, MetricsReport], label: str = "run") -> str:
    """
    Fixed-width table with one row per report.

    Example:
        run        AJ       AD       <delta   OA       OF1
        learned    0.5123   3.2100   0.6012   0.9100   0.7700
    """
    width = max([len(label)] + [len(name) for name in reports]) + 2
    lines = [label.ljust(width) + "".join(column.ljust(9) for column in TABLE_COLUMNS)]
    for name, report in reports.items():
        row = report.table_row()
        lines.append(name.ljust(width) + "".join(_cell(row[column]).ljust(9) for column in TABLE_COLUMNS))
    return "\n".join(line.rstrip() for line in lines)


def write_perturbation_map(perturbation_map, path: Path) -> Path:
    """[rows, cols, K, 6] array: amplitude (3), offset (2), sigma (1)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, perturbation_map.to_array())
    return path


class RunArtifacts:
    """
    Provenance for one command's output directory.

    `finalize` writes resolved_config.yaml and manifest.json; the manifest
    hashes every registered input and every file under the directory.
    """

    def __init__(self, directory: Path, config: RunConfig, command: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.command = command
        self.inputs: List[Path] = []

    def add_inputs(self, paths: Iterable[Optional[Path]]) -> None:
        for path in paths:
            if path is None:
                continue
            path = Path(path)
            if path.is_dir():
                self.inputs.extend(sorted(p for p in path.rglob("*") if p.is_file()))
            elif path.exists():
                self.inputs.append(path)

    def finalize(self) -> Path:
        config_path = self.directory / "resolved_config.yaml"
        config_path.write_text(self.config.to_yaml(), encoding="utf-8")
        manifest_path = self.directory / "manifest.json"
        outputs = sorted(
            p for p in self.directory.rglob("*")
            if p.is_file() and p != manifest_path and not p.name.endswith(".tmp")
        )
        manifest: Dict[str, object] = {
            "command": self.command,
            "inputs": {str(p): sha256_file(p) for p in self.inputs},
            "outputs": {str(p.relative_to(self.directory)): sha256_file(p) for p in outputs},
        }
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        logger.info(f"Wrote {len(outputs)} output hashes to {manifest_path}")
        return manifest_path
