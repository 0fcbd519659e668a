"""Full-catalog ranking metrics (no candidate sampling)."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np
import torch


def target_ranks(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """1-based rank of each target among all columns of ``scores``.

    Higher score ranks first; equal scores rank by ascending id. Columns scored -inf
    (reserved ids) never outrank a finite target.
    """
    t = scores.gather(1, targets[:, None])
    ids = torch.arange(scores.shape[1], device=scores.device)[None]
    ahead = (scores > t) | ((scores == t) & (ids < targets[:, None]))
    return ahead.sum(1) + 1


# Means use math.fsum (exactly rounded), so results do not depend on summation order.

def hit_ratio(ranks: np.ndarray, k: int) -> float:
    ranks = np.asarray(ranks)
    return math.fsum(1.0 for r in ranks.tolist() if r <= k) / len(ranks)


def ndcg(ranks: np.ndarray, k: int) -> float:
    ranks = np.asarray(ranks)
    return math.fsum(1.0 / math.log2(r + 1) for r in ranks.tolist() if r <= k) / len(ranks)


def ranking_metrics(ranks: Iterable[int], ks: Iterable[int]) -> dict[str, float]:
    ranks = np.asarray(list(ranks))
    out = {}
    for k in ks:
        out[f"HR@{k}"] = hit_ratio(ranks, k)
        out[f"NDCG@{k}"] = ndcg(ranks, k)
    return out
