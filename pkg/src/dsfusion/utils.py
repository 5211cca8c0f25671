"""Small shared helpers."""

from __future__ import annotations

import random

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def train_val_split(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Seeded shuffle split; validation may be empty for tiny datasets."""
    order = rng.permutation(n).tolist()
    n_val = int(round(n * val_fraction))
    if n - n_val < 1:
        n_val = 0
    return order[n_val:], order[:n_val]


def batch_indices(order: list[int], batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]
