"""Loss kernels over caller-supplied probabilities and rewards."""

from __future__ import annotations

import math
from typing import Sequence


def xe_loss(probs: Sequence[float]) -> float:
    """Cross-entropy ``-sum(log p_t)`` of the ground-truth token probabilities."""
    total = 0.0
    for t, p in enumerate(probs):
        if not 0.0 < p <= 1.0:
            raise ValueError(f"step {t}: probability {p} outside (0, 1]")
        total -= math.log(p)
    return total


def rl_loss(log_probs: Sequence[float], rewards: Sequence[float]) -> float:
    """Policy-gradient loss with the mean reward of the batch as baseline.

    ``log_probs[i]`` is the sequence log-probability of sampled caption i.
    """
    n = len(rewards)
    if n == 0 or len(log_probs) != n:
        raise ValueError(f"need matching non-empty batches, got {len(log_probs)} log-probs and {n} rewards")
    # centre on the first reward so equal rewards give an exact baseline
    baseline = rewards[0] + math.fsum(r - rewards[0] for r in rewards) / n
    return -math.fsum((r - baseline) * lp for r, lp in zip(rewards, log_probs)) / n
