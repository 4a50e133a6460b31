"""Seed derivation shared by initialization, data ordering and planning."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch

__all__ = ["derive_seed", "torch_generator", "seed_everything"]


def derive_seed(seed: int, *labels) -> int:
    """
    Derive an independent 63-bit seed from a base seed and labels.

    The result depends only on its arguments, never on process state, so a
    domain's stream is the same whichever other domains are trained with it.

    Example
    -------
    ::

        >>> derive_seed(0, "head", "mnist") == derive_seed(0, "head", "mnist")
        True

    """
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def torch_generator(seed: int, *labels) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(derive_seed(seed, *labels))
    return generator


def seed_everything(seed: int) -> None:
    """Seed the global generators and request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False
    torch.use_deterministic_algorithms(True, warn_only=True)
