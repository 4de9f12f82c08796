"""
Checkpoint storage.

One torch archive per checkpoint: config as JSON text, named parameter
tensors, optimizer and scheduler state, counters and the parameter hash.
`saved_at` is the only field that differs between identical runs.
"""

import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from app.core.exceptions import DataError
from app.core.logging_config import logger

REQUIRED_KEYS = ("kind", "config_json", "state_dict", "step", "param_hash")


class CheckpointStorage:
    """Writes checkpoints of one kind ("rgb" or "joint") into a directory."""

    def __init__(self, directory: Path, kind: str):
        self.directory = Path(directory)
        self.kind = kind
        self.directory.mkdir(parents=True, exist_ok=True)

    @property
    def last_path(self) -> Path:
        return self.directory / f"{self.kind}_last.pt"

    def save(
        self,
        config_json: str,
        state_dict: Dict[str, Any],
        param_hash: str,
        step: int,
        epoch: int = 0,
        optimizer: Optional[torch.optim.Optimizer] = None,
        scheduler: Optional[Any] = None,
        extra: Optional[Dict[str, Any]] = None,
    ) -> Path:
        """
        Save a checkpoint for `step` and refresh the `_last` copy.

        Files are written to a temporary name and renamed, so an interrupted
        run always leaves a readable last checkpoint.

        Returns:
            Path of the step checkpoint
        """
        payload = {
            "kind": self.kind,
            "config_json": config_json,
            "state_dict": state_dict,
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "scheduler": scheduler.state_dict() if scheduler is not None else None,
            "step": step,
            "epoch": epoch,
            "param_hash": param_hash,
            "rng_state": torch.get_rng_state(),
            "saved_at": datetime.now().isoformat(),
            **(extra or {}),
        }
        path = self.directory / f"{self.kind}_step{step:07d}.pt"
        for target in (path, self.last_path):
            tmp = target.with_suffix(".tmp")
            torch.save(payload, tmp)
            os.replace(tmp, target)
        logger.info(f"Saved {self.kind} checkpoint at step {step}: {path}")
        return path

    def latest(self) -> Optional[Path]:
        return self.last_path if self.last_path.exists() else None


def load_checkpoint(path: Path, kind: Optional[str] = None) -> Dict[str, Any]:
    """
    Read a checkpoint archive and check its layout.

    Raises:
        DataError: missing file, unreadable archive, missing keys or wrong kind
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise DataError(f"Could not read checkpoint {path}: {e}") from e
    missing = [key for key in REQUIRED_KEYS if key not in payload]
    if missing:
        raise DataError(f"Checkpoint {path} is missing {missing}")
    if kind is not None and payload["kind"] != kind:
        raise DataError(f"Checkpoint {path} holds a '{payload['kind']}' model, expected '{kind}'")
    return payload
