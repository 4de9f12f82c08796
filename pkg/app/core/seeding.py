"""
Seed derivation and determinism switches.

All randomness in the toolkit flows from integer seeds derived here, so a
command re-run with the same global seed reproduces its outputs.
"""

import random
from typing import Union

import numpy as np
import torch

SeedPart = Union[int, str]


def derive_seed(*parts: SeedPart) -> int:
    """
    Derive a 32-bit seed from a sequence of integers and strings.

    Each part enters the entropy as (type tag, length, bytes), so distinct
    part sequences never share an entropy list: ("ab",) differs from (97, 98).

    Args:
        parts: Hierarchical seed components, e.g. (global_seed, "mask", step, index)

    Returns:
        Non-negative int usable by numpy and torch generators
    """
    entropy = []
    for part in parts:
        if isinstance(part, str):
            tag, data = 1, part.encode("utf-8")
        else:
            tag, data = 0, str(int(part)).encode("ascii")
        entropy.extend([tag, len(data), *data])
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def round_half_up(value: float) -> int:
    """Round to nearest integer with halves going up (not banker's rounding)."""
    return int(np.floor(value + 0.5))
