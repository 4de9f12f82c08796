"""
Layered run configuration.

Resolution order, lowest to highest: field defaults, YAML files (deep-merged
in the order given), `--set dotted.key=value` overrides, dedicated CLI flags.
"""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError

from app.core.exceptions import ConfigError
from app.schemas.corpus import SpriteSceneConfig
from app.schemas.flow_predictor import FlowPredictorConfig
from app.schemas.metrics import DELTA_THRESHOLDS, EVAL_RESOLUTION
from app.schemas.patchwork import MaskPolicy
from app.schemas.predictor import PredictorConfig, TrainSchedule
from app.schemas.probe import PerturbationSource, ProbeConfig


class CorpusSection(BaseModel):
    scene: SpriteSceneConfig = Field(default_factory=SpriteSceneConfig, description="Sprite scene parameters")
    num_videos: int = Field(30, ge=1, description="Videos written by gen-data")
    num_frames: int = Field(8, ge=2, description="Frames per generated video")
    points_per_sprite: int = Field(4, ge=1, description="Annotated points per sprite")
    train_pairs: int = Field(20000, ge=1, description="Distinct training pairs per epoch cycle")
    static: bool = Field(False, description="Generate static scenes (second frame equals first)")
    random_resized_crop: bool = Field(False, description="Random resized crops on training pairs")
    dataset_path: Optional[Path] = Field(None, description="Annotated track dataset used instead of sprites")
    dataset_format: Literal["portable_json", "tapvid_pickle"] = Field(
        "portable_json", description="Layout of dataset_path"
    )


class RgbSection(BaseModel):
    model: PredictorConfig = Field(default_factory=PredictorConfig, description="Predictor architecture")
    schedule: TrainSchedule = Field(default_factory=TrainSchedule.desk, description="Optimizer and lr schedule")
    mask_policy: MaskPolicy = Field("asymmetric", description="Training-time masking policy")
    alpha_reveal: float = Field(0.1, gt=0, le=1, description="Visible fraction of frame-2 patches (asymmetric)")
    mask_fraction_f1: float = Field(0.75, ge=0, lt=1, description="Masked fraction of frame 1 (tube/random)")
    mask_fraction_f2: float = Field(0.75, ge=0, lt=1, description="Masked fraction of frame 2 (random)")
    val_batch: int = Field(16, ge=1, description="Size of the fixed validation batch")
    resume: Optional[Path] = Field(None, description="Checkpoint to resume from")


class JointSection(BaseModel):
    model: FlowPredictorConfig = Field(default_factory=FlowPredictorConfig, description="Flow predictor architecture")
    schedule: TrainSchedule = Field(default_factory=TrainSchedule.joint, description="Optimizer and lr schedule")
    rgb_checkpoint: Optional[Path] = Field(None, description="Frozen RGB predictor checkpoint")
    n_points: int = Field(8, ge=1, description="Probe points per training pair")
    tau: float = Field(0.05, gt=0, description="Softargmax temperature during joint training")
    flow_source: Literal["learned", "oracle"] = Field("learned", description="Where conditioning flows come from")
    train_generator: bool = Field(True, description="Update the perturbation generator")
    map_every: int = Field(0, ge=0, description="Steps between perturbation-map snapshots (0 disables)")
    val_pairs: int = Field(16, ge=1, description="Fixed validation pairs")
    resume: Optional[Path] = Field(None, description="Joint checkpoint to resume from")


class EvalSection(BaseModel):
    protocol: Literal["first", "cfg"] = Field("first", description="Query protocol")
    cfg_gap: int = Field(5, ge=1, description="Frame gap of the CFG protocol")
    eval_resolution: int = Field(EVAL_RESOLUTION, ge=1, description="Square resolution distances are measured at")
    thresholds: Tuple[int, ...] = Field(DELTA_THRESHOLDS, description="Pixel thresholds for delta and AJ")
    cycle_threshold: float = Field(6.0, gt=0, description="Forward-backward disagreement marking occlusion (px)")
    occlusion_source: Literal["probe", "cycle"] = Field("probe", description="How predicted occlusion is decided")
    video_ids: Optional[List[str]] = Field(None, description="Explicit evaluation subset; all videos when omitted")


class AblationSection(BaseModel):
    perturbations: List[PerturbationSource] = Field(
        default_factory=lambda: ["learned", "red_square", "green_square"], description="Perturbation sources"
    )
    num_masks: List[int] = Field(default_factory=lambda: [1, 3, 10], description="Multi-mask settings")
    num_scales: List[int] = Field(default_factory=lambda: [0, 2, 4], description="Multiscale settings")
    resolutions: List[Optional[int]] = Field(default_factory=lambda: [None], description="Probe resolutions (None = native)")
    alpha_reveals: List[float] = Field(default_factory=lambda: [0.1], description="Test-time visible fractions")


class PseudoLabelSection(BaseModel):
    pixel_fraction: float = Field(0.01, gt=0, le=1, description="Fraction of pixels labelled per pair")
    num_pairs: int = Field(100, ge=1, description="Pairs labelled from the corpus")


class RunConfig(BaseModel):
    """Fully resolved configuration of one command invocation."""

    seed: int = Field(0, description="Global seed every random draw derives from")
    jobs: int = Field(1, ge=1, description="Worker threads for data loading and probing")
    device: str = Field("cpu", description="torch device")
    output_dir: Path = Field(Path("runs/default"), description="Where artifacts are written")
    corpus: CorpusSection = Field(default_factory=CorpusSection)
    rgb: RgbSection = Field(default_factory=RgbSection)
    joint: JointSection = Field(default_factory=JointSection)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    eval: EvalSection = Field(default_factory=EvalSection)
    ablate: AblationSection = Field(default_factory=AblationSection)
    pseudolabels: PseudoLabelSection = Field(default_factory=PseudoLabelSection)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    @classmethod
    def resolve(
        cls,
        files: Sequence[Path] = (),
        overrides: Iterable[str] = (),
        flags: Optional[Dict[str, Any]] = None,
    ) -> "RunConfig":
        """
        Build a config from all layers.

        Args:
            files: YAML files, later files win
            overrides: "dotted.key=value" strings; values are parsed as YAML scalars
            flags: Top-level values from dedicated CLI flags (None entries are ignored)

        Returns:
            Validated RunConfig

        Raises:
            ConfigError: unreadable file, malformed override or failed validation
        """
        merged: Dict[str, Any] = {}
        for path in files:
            merged = deep_merge(merged, _read_yaml(Path(path)))
        for item in overrides:
            merged = deep_merge(merged, _parse_override(item))
        for key, value in (flags or {}).items():
            if value is not None:
                merged[key] = value
        try:
            return cls.model_validate(merged)
        except ValidationError as e:
            first = e.errors()[0]
            location = ".".join(str(part) for part in first["loc"]) or "<root>"
            raise ConfigError(f"Invalid configuration at '{location}': {first['msg']}") from e


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    result = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def _read_yaml(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Top level of {path} must be a mapping")
    return data


def _parse_override(item: str) -> Dict[str, Any]:
    if "=" not in item:
        raise ConfigError(f"Override '{item}' must look like dotted.key=value")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"Override '{item}' has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse value of override '{item}': {e}") from e
    tree: Dict[str, Any] = {parts[-1]: value}
    for part in reversed(parts[:-1]):
        tree = {part: tree}
    return tree
