"""One module per CLI subcommand."""

from app.commands import (
    ablate,
    evaluate,
    export_perturbation_map,
    export_pseudolabels,
    gen_data,
    probe,
    train_joint,
    train_rgb,
)

COMMANDS = [gen_data, train_rgb, train_joint, probe, evaluate, ablate, export_pseudolabels, export_perturbation_map]
