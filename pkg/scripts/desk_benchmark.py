"""
python -m scripts.desk_benchmark [--config config/desk.yaml] [--rgb-steps N] [--joint-steps N]

End-to-end desk-scale checks on the sprite corpus:
  - learned perturbation beats the red square on AD at equal MM/MS
  - MM=10 beats MM=1 and MS=4 beats MS=0 on AD
  - joint training halves validation MSE and flow error
  - the flow predictor does worse when its conditioning flows are shuffled
  - asymmetric masking beats tube 75-75 on downstream probe AD
Directional comparisons report a paired bootstrap 95% CI over per-query distances.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

sys.path.insert(0, ".")

from dotenv import load_dotenv
load_dotenv()

import numpy as np

from app.commands.common import benchmark_dataset, training_dataset
from app.core.logging_config import logger
from app.core.seeding import derive_seed, seed_everything
from app.schemas.run_config import RunConfig
from app.services.evaluation import EvaluationResult, evaluate
from app.services.corpus import SpritePairDataset
from app.services.flow_predictor import joint_train, shuffled_flow_gap
from app.services.rgb_predictor import train_rgb


def paired_bootstrap(a: np.ndarray, b: np.ndarray, seed: int, samples: int = 2000) -> Dict[str, float]:
    """95% CI of mean(a - b) by resampling paired entries."""
    diff = np.asarray(a) - np.asarray(b)
    rng = np.random.default_rng(seed)
    means = diff[rng.integers(0, diff.size, size=(samples, diff.size))].mean(axis=1)
    low, high = np.percentile(means, [2.5, 97.5])
    return {"mean": float(diff.mean()), "low": float(low), "high": float(high)}


def _visible_errors(result: EvaluationResult) -> np.ndarray:
    errors = []
    for q, p in zip(result.queries, result.points):
        if q.gt_visible:
            errors.append(np.hypot(p.location.row - q.gt_location.row, p.location.col - q.gt_location.col))
    return np.array(errors)


def _compare(name: str, better: EvaluationResult, worse: EvaluationResult, seed: int) -> Dict:
    ci = paired_bootstrap(_visible_errors(better), _visible_errors(worse), seed)
    passed = ci["high"] < 0
    logger.info(
        f"{name}: AD {better.report.average_distance:.3f} vs {worse.report.average_distance:.3f}, "
        f"diff CI [{ci['low']:.3f}, {ci['high']:.3f}] -> {'PASS' if passed else 'FAIL'}"
    )
    return {"name": name, **ci, "passed": bool(passed)}


def run_benchmark(config: RunConfig, rgb_steps: Optional[int], joint_steps: Optional[int]) -> List[Dict]:
    seed_everything(config.seed)
    out = Path(config.output_dir)
    dataset = training_dataset(config)
    benchmark = benchmark_dataset(config.model_copy(update={"seed": derive_seed(config.seed, "held-out")}))

    rgb, rgb_result = train_rgb(config.rgb, dataset, out / "rgb", config.seed, config.jobs, config.device, max_steps=rgb_steps)
    rgb.freeze()
    state, joint_result = joint_train(
        rgb, config.joint, config.probe, training_dataset(config, "joint-train"), out / "joint",
        config.seed, config.jobs, config.device, max_steps=joint_steps,
    )
    generator = state.generator

    def run_eval(model, **probe_update) -> EvaluationResult:
        probe = config.probe.model_copy(update=probe_update)
        return evaluate(model, benchmark, config.eval, probe, generator if probe.is_learned else None, config.seed)

    checks = [
        _compare("learned_vs_red_square", run_eval(rgb, perturbation="learned"),
                 run_eval(rgb, perturbation="red_square"), config.seed),
        _compare("mm10_vs_mm1", run_eval(rgb, num_masks=10), run_eval(rgb, num_masks=1), config.seed),
        _compare("ms4_vs_ms0", run_eval(rgb, num_scales=4), run_eval(rgb, num_scales=0), config.seed),
    ]

    mse_drop = 1 - joint_result.final_val_loss / joint_result.initial_val_loss
    error_drop = None
    if joint_result.initial_flow_error and joint_result.final_flow_error is not None:
        error_drop = 1 - joint_result.final_flow_error / joint_result.initial_flow_error
    checks.append({
        "name": "joint_coupling",
        "val_mse_drop": mse_drop,
        "flow_error_drop": error_drop,
        "passed": bool(mse_drop >= 0.5 and error_drop is not None and error_drop >= 0.5),
    })

    usage_pairs = SpritePairDataset(config.corpus.scene, config.joint.val_pairs, derive_seed(config.seed, "flow-usage"))
    mse_true, mse_shuffled = shuffled_flow_gap(state.flow_model, usage_pairs, config.joint.n_points, config.seed)
    logger.info(f"Flow usage: MSE {mse_true:.5f} with true flows, {mse_shuffled:.5f} with shuffled flows")
    checks.append({
        "name": "flow_usage",
        "mse_true": mse_true,
        "mse_shuffled": mse_shuffled,
        "passed": bool(mse_shuffled > mse_true),
    })

    tube_section = config.rgb.model_copy(update={"mask_policy": "tube", "mask_fraction_f1": 0.75})
    tube, _ = train_rgb(tube_section, dataset, out / "rgb_tube", config.seed, config.jobs, config.device, max_steps=rgb_steps)
    tube.freeze()
    checks.append(_compare(
        "asymmetric_vs_tube",
        run_eval(rgb, perturbation="red_square"),
        run_eval(tube, perturbation="red_square"),
        config.seed,
    ))
    logger.info(f"RGB val MSE {rgb_result.initial_val_loss:.5f} -> {rgb_result.final_val_loss:.5f}")
    return checks


DEFAULT_CONFIG = Path("config/desk.yaml")


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Given --config files replace the desk config rather than layering on top of it."""
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", action="append", type=Path, default=None)
    parser.add_argument("--set", action="append", default=[])
    parser.add_argument("--rgb-steps", type=int, default=None)
    parser.add_argument("--joint-steps", type=int, default=None)
    args = parser.parse_args(argv)
    if not args.config:
        args.config = [DEFAULT_CONFIG]
    return args


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    config = RunConfig.resolve(args.config, args.set)
    checks = run_benchmark(config, args.rgb_steps, args.joint_steps)
    report = Path(config.output_dir) / "desk_benchmark.json"
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps(checks, indent=2) + "\n", encoding="utf-8")
    failed = [c["name"] for c in checks if not c["passed"]]
    print(f"\n{len(checks) - len(failed)}/{len(checks)} checks passed" + (f"; failed: {failed}" if failed else ""))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
