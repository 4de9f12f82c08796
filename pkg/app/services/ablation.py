"""
Probe ablation grid: perturbation source x multi-mask x multiscale x
resolution x test-time masking ratio, one evaluation per cell.
"""

import itertools
from typing import Dict, List, Optional

import pandas as pd

from app.core.exceptions import ConfigError
from app.core.logging_config import logger
from app.models.perturbation import PerturbationGenerator
from app.models.rgb_predictor import NextFramePredictor, RgbPredictor
from app.schemas.probe import ProbeConfig
from app.schemas.run_config import AblationSection, EvalSection
from app.services.evaluation import evaluate
from app.services.rgb_predictor import interpolate_positional_embeddings
from app.services.track_dataset import TrackDataset

ABLATION_COLUMNS = [
    "perturbation", "MM", "MS", "resolution", "masking_ratio", "AJ", "AD", "<delta", "OA", "OF1", "num_queries",
]


def ablation_grid(section: AblationSection) -> List[Dict]:
    """Cartesian product of the section's axes in a fixed order."""
    return [
        dict(perturbation=p, num_masks=mm, num_scales=ms, resolution=res, alpha_reveal=alpha)
        for p, mm, ms, res, alpha in itertools.product(
            section.perturbations, section.num_masks, section.num_scales, section.resolutions, section.alpha_reveals
        )
    ]


def run_ablation(
    model: NextFramePredictor,
    dataset: TrackDataset,
    section: AblationSection,
    eval_section: EvalSection,
    probe_config: ProbeConfig,
    generator: Optional[PerturbationGenerator] = None,
    seed: int = 0,
) -> pd.DataFrame:
    """
    Evaluate every grid cell and collect one table row per cell.

    Raises:
        ConfigError: a learned cell without a trained generator, or a
            resolution change on a predictor without positional tables
    """
    if "learned" in section.perturbations and generator is None:
        raise ConfigError("Ablating the learned perturbation needs a joint checkpoint")
    resized: Dict[Optional[int], NextFramePredictor] = {}
    rows = []
    for cell in ablation_grid(section):
        resolution = cell["resolution"]
        if resolution not in resized:
            resized[resolution] = _at_resolution(model, resolution)
        config = probe_config.model_copy(update={
            "perturbation": cell["perturbation"],
            "num_masks": cell["num_masks"],
            "num_scales": cell["num_scales"],
            "alpha_reveal": cell["alpha_reveal"],
        })
        result = evaluate(resized[resolution], dataset, eval_section, config, generator, seed)
        row = result.report.table_row()
        logger.info(
            f"ablation {cell['perturbation']} MM={cell['num_masks']} MS={cell['num_scales']} "
            f"res={resolution or 'native'} alpha={cell['alpha_reveal']}: AD {row['AD']}"
        )
        rows.append({
            "perturbation": cell["perturbation"],
            "MM": cell["num_masks"],
            "MS": cell["num_scales"],
            "resolution": resolution if resolution is not None else resized[resolution].grid.height,
            "masking_ratio": 1.0 - cell["alpha_reveal"],
            **row,
            "num_queries": result.report.num_queries,
        })
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


def _at_resolution(model: NextFramePredictor, resolution: Optional[int]) -> NextFramePredictor:
    if resolution is None or (resolution, resolution) == (model.grid.height, model.grid.width):
        return model
    if not isinstance(model, RgbPredictor):
        raise ConfigError(f"Cannot probe {type(model).__name__} at resolution {resolution}")
    try:
        return interpolate_positional_embeddings(model, (resolution, resolution))
    except ValueError as e:
        raise ConfigError(str(e)) from e
