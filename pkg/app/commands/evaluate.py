"""eval: TAP-Vid style metrics on the benchmark."""

import argparse
from pathlib import Path

from app.commands.common import benchmark_dataset, model_flags, perturbation_override, probe_models
from app.core.logging_config import logger
from app.schemas.run_config import RunConfig
from app.services.evaluation import build_queries, evaluate, load_prediction_table, score
from app.services.plots import plot_ad_vs_frame_gap, plot_precision_vs_threshold
from app.services.result_formatter import (
    RunArtifacts,
    format_metrics_table,
    predictions_frame,
    write_metrics_json,
    write_table,
)


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("eval", parents=parents, help="Evaluate probe predictions")
    model_flags(parser)
    parser.add_argument("--predictions", type=Path, default=None, help="Score an existing prediction table instead of probing")
    parser.add_argument("--protocol", choices=["first", "cfg"], default=None, help="Query protocol (overrides eval.protocol)")
    parser.set_defaults(handler=run, overrides=_overrides)


def _overrides(args: argparse.Namespace):
    extra = [f"eval.protocol={args.protocol}"] if args.protocol else []
    return perturbation_override(args) + extra


def run(config: RunConfig, args: argparse.Namespace) -> int:
    artifacts = RunArtifacts(config.output_dir, config, "eval")
    dataset = benchmark_dataset(config)
    artifacts.add_inputs([config.corpus.dataset_path])
    if args.predictions is not None:
        artifacts.add_inputs([args.predictions])
        if config.eval.video_ids:
            dataset = dataset.select(config.eval.video_ids)
        queries = build_queries(dataset, config.eval)
        result = score(queries, load_prediction_table(args.predictions, queries), dataset, config.eval)
    else:
        artifacts.add_inputs([args.rgb_checkpoint or config.joint.rgb_checkpoint, args.joint_checkpoint])
        model, generator, probe = probe_models(config, args)
        result = evaluate(model, dataset, config.eval, probe, generator, config.seed)
        write_table(predictions_frame(result.predictions), config.output_dir / "predictions")

    out = config.output_dir
    write_metrics_json(result.report, out / "metrics.json")
    plot_precision_vs_threshold(result.precision, out / "precision_vs_threshold")
    plot_ad_vs_frame_gap(result.by_gap, out / "ad_vs_frame_gap")
    table = format_metrics_table({config.eval.protocol: result.report}, label="protocol")
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    logger.info("\n" + table)
    artifacts.finalize()
    return 0
