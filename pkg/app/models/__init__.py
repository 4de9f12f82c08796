from .flow_predictor import FlowPredictor, build_flow_predictor
from .oracle import OracleWarpPredictor, translation_warp
from .perturbation import PerturbationGenerator
from .rgb_predictor import NextFramePredictor, RgbPredictor, build_rgb_predictor, parameter_hash
