from app.services.corpus import SpritePairDataset, generate_sprite_pair, generate_sprite_video, sample_query_pixels
from app.services.metrics import compute_metrics
from .probe import FlowProbe, flow_probe_multimask, flow_probe_multiscale, flow_probe_single

__all__ = [
    "SpritePairDataset",
    "generate_sprite_pair",
    "generate_sprite_video",
    "sample_query_pixels",
    "compute_metrics",
    "FlowProbe",
    "flow_probe_single",
    "flow_probe_multimask",
    "flow_probe_multiscale",
]
