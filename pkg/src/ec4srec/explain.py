"""Item importance scores from Occlusion, Saliency, Integrated Gradients and Attention,
plus the refresh schedule and the per-user score store."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import MASK, PAD, SplitDataset, pad_left

logger = logging.getLogger(__name__)

METHODS = ("occlusion", "saliency", "integrated_gradients", "attention")
ALIASES = {"ig": "integrated_gradients", "integrated-gradients": "integrated_gradients"}


@dataclass(frozen=True)
class UpdateSchedule:
    N: int
    p: int
    update_epochs: tuple[int, ...]

    @property
    def first(self) -> int | None:
        return self.update_epochs[0] if self.update_epochs else None


def schedule_updates(N: int, p: int) -> UpdateSchedule:
    """Refresh epochs ``l * floor(N / (p + 1))`` for ``l = 1..p``."""
    if N < 1 or p < 0:
        raise ValueError(f"need N >= 1 and p >= 0, got N={N}, p={p}")
    if p > N:
        raise ValueError(f"p={p} exceeds N={N}")
    step = N // (p + 1)
    if step == 0:
        raise ValueError(f"floor(N/(p+1)) is 0 for N={N}, p={p}")
    return UpdateSchedule(N, p, tuple(l * step for l in range(1, p + 1)))


def normalize_scores(raw: Sequence[float]) -> np.ndarray:
    """Divide by the total; an all-zero vector becomes uniform."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size == 0:
        raise ValueError("raw scores must be a non-empty 1-d vector")
    if np.any(raw < 0):
        raise ValueError("raw scores must be non-negative")
    total = raw.sum()
    if total <= 0 or not np.isfinite(total):
        return np.full(raw.size, 1.0 / raw.size)
    return raw / total


@contextlib.contextmanager
def evaluating(model):
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        yield model
    finally:
        if was_training:
            model.train()


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _expand(seq_len: int, window: np.ndarray) -> np.ndarray:
    """Place scores of the truncated window back at the tail of a full-length vector."""
    out = np.zeros(seq_len)
    out[seq_len - len(window):] = window
    return out


def occlusion_batch(model, seqs, targets, max_len=50, chunk=4096) -> list[np.ndarray]:
    """|f(seq) - f(seq with position i set to [m])| for every position of every sequence."""
    rows, owners = [], []
    for r, (seq, tgt) in enumerate(zip(seqs, targets)):
        if len(seq) == 0:
            raise ValueError("cannot explain an empty sequence")
        window = list(seq[-max_len:])
        rows.append(window)
        for i in range(len(window)):
            perturbed = list(window)
            perturbed[i] = MASK
            rows.append(perturbed)
        owners.extend([(r, tgt)] * (len(window) + 1))
    values = np.empty(len(rows))
    with evaluating(model), torch.no_grad():
        for sl in _chunks(len(rows), chunk):
            ids = pad_left(rows[sl], max_len)
            tg = torch.tensor([t for _, t in owners[sl]], dtype=torch.long)
            values[sl] = model.target_score(ids, tg).double().numpy()
    out, pos = [], 0
    for seq in seqs:
        n = min(len(seq), max_len)
        base = values[pos]
        out.append(_expand(len(seq), np.abs(base - values[pos + 1: pos + 1 + n])))
        pos += n + 1
    return out


def _embedded_rows(model, seqs, max_len):
    ids = pad_left([list(s[-max_len:]) for s in seqs], max_len)
    return ids, ids != PAD


def _input_gradient(model, emb, valid, targets) -> torch.Tensor:
    emb = emb.detach().requires_grad_(True)
    out = model.target_score_embedded(emb, valid, targets)
    if not out.requires_grad:
        raise RuntimeError("model output does not depend differentiably on the input embeddings")
    (grad,) = torch.autograd.grad(out.sum(), emb)
    return grad


def _window_scores(seqs, per_position: torch.Tensor, max_len) -> list[np.ndarray]:
    L = per_position.shape[1]
    out = []
    for r, seq in enumerate(seqs):
        n = min(len(seq), max_len)
        out.append(_expand(len(seq), per_position[r, L - n:].double().numpy()))
    return out


def saliency_batch(model, seqs, targets, max_len=50) -> list[np.ndarray]:
    """Sum over embedding dimensions of |df/de_ij|."""
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot explain an empty sequence")
    ids, valid = _embedded_rows(model, seqs, max_len)
    tg = torch.as_tensor(list(targets), dtype=torch.long)
    with evaluating(model):
        grad = _input_gradient(model, model.embed(ids), valid, tg)
    return _window_scores(seqs, grad.abs().sum(-1), max_len)


def integrated_gradients_attributions(model, ids, targets, steps=32) -> torch.Tensor:
    """Signed per-coordinate attributions (B, L, d) along the straight path from the
    all-[m] baseline (padding kept) to the actual embeddings, right Riemann sum."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    valid = ids != PAD
    with evaluating(model):
        emb = model.embed(ids).detach()
        base_ids = torch.where(valid, torch.full_like(ids, MASK), ids)
        base = model.embed(base_ids).detach()
        total = torch.zeros_like(emb)
        for t in range(1, steps + 1):
            point = base + (t / steps) * (emb - base)
            total += _input_gradient(model, point, valid, targets)
    return (emb - base) * total / steps


def integrated_gradient_batch(model, seqs, targets, max_len=50, steps=32) -> list[np.ndarray]:
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot explain an empty sequence")
    ids, _ = _embedded_rows(model, seqs, max_len)
    tg = torch.as_tensor(list(targets), dtype=torch.long)
    attr = integrated_gradients_attributions(model, ids, tg, steps)
    return _window_scores(seqs, attr.abs().sum(-1), max_len)


def attention_batch(model, seqs, targets=None, max_len=50) -> list[np.ndarray]:
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot explain an empty sequence")
    ids, _ = _embedded_rows(model, seqs, max_len)
    with evaluating(model), torch.no_grad():
        weights = model.attention_weights(ids)
    return _window_scores(seqs, weights, max_len)


def occlusion_scores(seq, model, target, max_len=50) -> np.ndarray:
    return occlusion_batch(model, [seq], [target], max_len)[0]


def saliency_scores(seq, model, target, max_len=50) -> np.ndarray:
    return saliency_batch(model, [seq], [target], max_len)[0]


def integrated_gradient_scores(seq, model, target, steps=32, max_len=50) -> np.ndarray:
    return integrated_gradient_batch(model, [seq], [target], max_len, steps)[0]


def attention_scores(seq, model, max_len=50) -> np.ndarray:
    return attention_batch(model, [seq], None, max_len)[0]


def resolve_method(method: str) -> str:
    method = ALIASES.get(method, method)
    if method not in METHODS:
        raise ValueError(f"unknown explanation method {method!r}; expected one of {METHODS}")
    return method


def explain_batch(method, model, seqs, targets, max_len=50, steps=32, batch_size=256) -> list[np.ndarray]:
    method = resolve_method(method)
    fn: Callable = {
        "occlusion": lambda s, t: occlusion_batch(model, s, t, max_len),
        "saliency": lambda s, t: saliency_batch(model, s, t, max_len),
        "integrated_gradients": lambda s, t: integrated_gradient_batch(model, s, t, max_len, steps),
        "attention": lambda s, t: attention_batch(model, s, t, max_len),
    }[method]
    out: list[np.ndarray] = []
    for sl in _chunks(len(seqs), batch_size):
        out.extend(fn(seqs[sl], targets[sl]))
    return out


@dataclass
class ScoreStore:
    """Normalized importance scores per user, aligned to the user's explained sequence."""

    scores: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int | None = None

    def __len__(self):
        return len(self.scores)

    def __contains__(self, user):
        return user in self.scores

    def get(self, user: str, length: int | None = None) -> np.ndarray | None:
        """Scores of the first ``length`` items (a training prefix), renormalized."""
        s = self.scores.get(user)
        if s is None:
            return None
        if length is None or length == len(s):
            return s
        if length > len(s):
            raise ValueError(f"prefix length {length} exceeds explained length {len(s)} for user {user}")
        return normalize_scores(s[:length])

    def save_text(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for user, s in self.scores.items():
                f.write(" ".join([user, *(repr(float(x)) for x in s)]) + "\n")

    @classmethod
    def load_text(cls, path: str | Path, epoch: int | None = None) -> "ScoreStore":
        scores = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                tok = line.split()
                if tok:
                    scores[tok[0]] = np.array([float(x) for x in tok[1:]])
        return cls(scores, epoch)


def refresh_store(store: ScoreStore | None, method: str, model, split: SplitDataset, epoch: int,
                  max_len: int = 50, steps: int = 32) -> ScoreStore:
    """Recompute every training user's scores against their own training target.

    Returns a new store; the old one is left untouched.
    """
    users = list(split.explain_inputs)
    samples = [split.explain_inputs[u] for u in users]
    raw = explain_batch(method, model, [s.inputs for s in samples], [s.target for s in samples], max_len, steps)
    fresh = {u: normalize_scores(r) for u, r in zip(users, raw)}
    logger.info("refreshed %d importance scores with %s at epoch %d", len(fresh), method, epoch)
    return ScoreStore(fresh, epoch)
