"""Random (crop/mask/reorder/retrieval) and explanation-guided augmentation operators.

Sequences are plain item-id lists; randomness comes from an explicit
``numpy.random.Generator`` so every operator is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import MASK

POSITIVE = "positive"
NEGATIVE = "negative"

RANDOM_OPS = ("crop", "mask", "rord")
GUIDED_POSITIVE_OPS = ("ecrop+", "emask+", "erord+")
GUIDED_NEGATIVE_OPS = ("ecrop-", "emask-")


@dataclass(frozen=True)
class AugmentedView:
    items: tuple[int, ...]
    polarity: str
    operator: str
    source_user: str | None = None


@dataclass
class AugmentParams:
    mu_c: float = 0.6
    mu_m: float = 0.3
    mu_r: float = 0.6
    mu_e: float = 0.5
    # operators removed for ablations, by family name: "crop", "mask", "rord"
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("mu_c", "mu_m", "mu_e"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if not 0 <= self.mu_r <= 1:
            raise ValueError(f"mu_r must be in [0, 1], got {self.mu_r}")
        self.exclude = tuple(self.exclude)
        unknown = set(self.exclude) - set(RANDOM_OPS)
        if unknown:
            raise ValueError(f"unknown operator families to exclude: {sorted(unknown)}")

    def positive_ops(self, guided: bool) -> tuple[str, ...]:
        ops = GUIDED_POSITIVE_OPS if guided else RANDOM_OPS
        return tuple(op for op in ops if _family(op) not in self.exclude)

    def negative_ops(self) -> tuple[str, ...]:
        return tuple(op for op in GUIDED_NEGATIVE_OPS if _family(op) not in self.exclude)


def _family(op: str) -> str:
    return op.lstrip("e").rstrip("+-")


def _view(items, op, user, polarity=POSITIVE) -> AugmentedView:
    return AugmentedView(tuple(int(i) for i in items), polarity, op, user)


def random_crop(s: Sequence[int], mu_c: float, rng: np.random.Generator, user=None) -> AugmentedView:
    """Keep a contiguous window of ``max(1, floor(mu_c * |s|))`` items."""
    n = len(s)
    if n < 2:
        return _view(s, "crop", user)
    length = max(1, math.floor(mu_c * n))
    start = int(rng.integers(0, n - length + 1))
    return _view(s[start: start + length], "crop", user)


def random_mask(s: Sequence[int], mu_m: float, rng: np.random.Generator, user=None) -> AugmentedView:
    n = len(s)
    k = math.floor(mu_m * n)
    out = list(s)
    if k > 0:
        for i in rng.choice(n, size=k, replace=False):
            out[i] = MASK
    return _view(out, "mask", user)


def random_reorder(s: Sequence[int], mu_r: float, rng: np.random.Generator, user=None) -> AugmentedView:
    n = len(s)
    length = math.floor(mu_r * n)
    out = list(s)
    if n >= 2 and length > 1:
        start = int(rng.integers(0, n - length + 1))
        window = out[start: start + length]
        out[start: start + length] = [window[i] for i in rng.permutation(length)]
    return _view(out, "rord", user)


def random_retrieval(s, candidates: Sequence[Sequence[int]], rng, mu_m: float, user=None) -> AugmentedView:
    """A uniformly drawn sequence sharing the target; falls back to random masking."""
    if not candidates:
        return _view(random_mask(s, mu_m, rng).items, "rtrl", user)
    return _view(candidates[int(rng.integers(len(candidates)))], "rtrl", user)


def guided_count(n: int, mu_e: float) -> int:
    return math.floor(mu_e * n)


def lowest_k(scores: Sequence[float], k: int) -> np.ndarray:
    """Positions of the k smallest scores; ties go to the earlier position."""
    return np.sort(np.argsort(np.asarray(scores), kind="stable")[:k])


def highest_k(scores: Sequence[float], k: int) -> np.ndarray:
    return np.sort(np.argsort(-np.asarray(scores), kind="stable")[:k])


def _check_aligned(s, scores):
    if len(s) != len(scores):
        raise ValueError(f"scores ({len(scores)}) not aligned to sequence ({len(s)})")


def ecrop(s, scores, mu_e: float, polarity: str = POSITIVE, user=None, k: int | None = None) -> AugmentedView:
    """Positive: drop the k least important items. Negative: keep only them."""
    _check_aligned(s, scores)
    k = guided_count(len(s), mu_e) if k is None else k
    low = set(lowest_k(scores, k).tolist())
    if polarity == POSITIVE:
        if k >= len(s):
            raise ValueError("mu_e too large: positive crop would be empty")
        return _view([it for i, it in enumerate(s) if i not in low], "ecrop+", user)
    if k < 1:
        raise ValueError("negative crop needs k >= 1")
    return _view([it for i, it in enumerate(s) if i in low], "ecrop-", user, NEGATIVE)


def emask(s, scores, mu_e: float, polarity: str = POSITIVE, user=None, k: int | None = None) -> AugmentedView:
    """Positive: mask the k least important items. Negative: mask the k most important."""
    _check_aligned(s, scores)
    k = guided_count(len(s), mu_e) if k is None else k
    picked = lowest_k(scores, k) if polarity == POSITIVE else highest_k(scores, k)
    out = list(s)
    for i in picked:
        out[i] = MASK
    op = "emask+" if polarity == POSITIVE else "emask-"
    return _view(out, op, user, POSITIVE if polarity == POSITIVE else NEGATIVE)


def erord(s, scores, mu_e: float, rng: np.random.Generator, user=None) -> AugmentedView:
    """Shuffle the k least important items among their own positions."""
    _check_aligned(s, scores)
    k = guided_count(len(s), mu_e)
    out = list(s)
    if k >= 2:
        idx = lowest_k(scores, k)
        vals = [out[i] for i in idx]
        for i, j in zip(idx, rng.permutation(k)):
            out[i] = vals[j]
    return _view(out, "erord+", user)


def retrieval_utility(s, scores, candidate) -> float:
    """Jaccard overlap of item sets times the summed importance of the shared items."""
    _check_aligned(s, scores)
    own, other = set(s), set(candidate)
    shared = own & other
    if not shared:
        return 0.0
    weight = sum(sc for it, sc in zip(s, scores) if it in shared)
    return len(shared) / len(own | other) * float(weight)


def retrieval_probabilities(s, scores, candidates) -> np.ndarray:
    utils = np.array([retrieval_utility(s, scores, c) for c in candidates], dtype=np.float64)
    total = utils.sum()
    if total <= 0:
        return np.full(len(candidates), 1.0 / len(candidates))
    return utils / total


def ertrl(s, scores, candidates, rng: np.random.Generator, mu_m: float = 0.3, user=None) -> AugmentedView:
    """Retrieve a same-target sequence with probability proportional to its utility."""
    if not candidates:
        return _view(random_mask(s, mu_m, rng).items, "ertrl+", user)
    p = retrieval_probabilities(s, scores, candidates)
    return _view(candidates[int(rng.choice(len(candidates), p=p))], "ertrl+", user)


def apply_positive(op: str, s, scores, params: AugmentParams, rng, user=None) -> AugmentedView:
    if op == "crop":
        return random_crop(s, params.mu_c, rng, user)
    if op == "mask":
        return random_mask(s, params.mu_m, rng, user)
    if op == "rord":
        return random_reorder(s, params.mu_r, rng, user)
    k = guided_count(len(s), params.mu_e)
    if op == "ecrop+":
        # never empty the view
        return ecrop(s, scores, params.mu_e, POSITIVE, user, k=min(k, len(s) - 1))
    if op == "emask+":
        return emask(s, scores, params.mu_e, POSITIVE, user)
    if op == "erord+":
        return erord(s, scores, params.mu_e, rng, user)
    raise ValueError(f"unknown positive operator {op!r}")


def apply_negative(op: str, s, scores, params: AugmentParams, user=None) -> AugmentedView:
    k = max(1, guided_count(len(s), params.mu_e))
    if op == "ecrop-":
        return ecrop(s, scores, params.mu_e, NEGATIVE, user, k=k)
    if op == "emask-":
        return emask(s, scores, params.mu_e, NEGATIVE, user, k=k)
    raise ValueError(f"unknown negative operator {op!r}")


def sample_view_pair(s, scores, params: AugmentParams, rng, user=None, ops=None) -> tuple[AugmentedView, AugmentedView]:
    """Two views from two different operators: guided ones when scores are given,
    otherwise crop/mask/reorder. With a single allowed operator both views use it."""
    ops = ops or params.positive_ops(guided=scores is not None)
    if len(ops) == 1:
        a = b = ops[0]
    else:
        a, b = rng.choice(len(ops), size=2, replace=False)
        a, b = ops[a], ops[b]
    return apply_positive(a, s, scores, params, rng, user), apply_positive(b, s, scores, params, rng, user)


def sample_negative_view(s, scores, params: AugmentParams, rng, user=None) -> AugmentedView:
    ops = params.negative_ops()
    if not ops:
        raise ValueError("no negative operators left after exclusions")
    return apply_negative(ops[int(rng.integers(len(ops)))], s, scores, params, user)
