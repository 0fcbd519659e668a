"""Recommendation and contrastive objectives.

Similarity is the plain dot product. Every batch-level loss returns the mean over
users of the per-user loss (``reduction="none"`` gives the per-user vector).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import N_RESERVED


@dataclass
class LossConfig:
    lam: float = 0.1  # warmup / CL4SRec / DuoRec contrastive weight
    lam_cl_plus: float = 0.1
    lam_cl_minus: float = 0.1
    lam_sl_plus: float = 0.1
    tau: float = 1.0

    def __post_init__(self):
        for name in ("lam", "lam_cl_plus", "lam_cl_minus", "lam_sl_plus"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def sim(h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
    if h1.shape[-1] != h2.shape[-1]:
        raise ValueError("dimension mismatch")
    return (h1 * h2).sum(-1)


def _reduce(per_user: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_user.mean()
    if reduction == "sum":
        return per_user.sum()
    if reduction == "none":
        return per_user
    raise ValueError(f"unknown reduction {reduction!r}")


def nce_term(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """-log exp(a.p/tau) / (exp(a.p/tau) + sum_n exp(a.n/tau)) for a single anchor."""
    if negatives.shape[0] == 0:
        raise ValueError("contrastive loss needs at least one negative")
    logits = torch.cat([sim(anchor, positive)[None], negatives @ anchor]) / tau
    return torch.logsumexp(logits, 0) - logits[0]


def rec_loss(h: torch.Tensor, table: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of the target against every real item."""
    if bool((targets < N_RESERVED).any()):
        raise ValueError("targets must be real items, not reserved ids")
    logits = h @ table[N_RESERVED:].T
    return F.cross_entropy(logits, targets - N_RESERVED, reduction=reduction)


def _pair_nce_rows(z1: torch.Tensor, z2: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-row NCE over the 2B stacked views: row i's positive is its partner view,
    negatives are all other users' views. Returns (2B,) losses, rows of z1 first."""
    B = z1.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs at least 2 users in the batch")
    z = torch.cat([z1, z2], 0)
    logits = (z @ z.T) / tau
    eye = torch.eye(2 * B, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.cat([torch.arange(B, 2 * B), torch.arange(0, B)]).to(z.device)
    return torch.logsumexp(logits, 1) - logits[torch.arange(2 * B), partner]


def cl_loss(z1: torch.Tensor, z2: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Self-supervised contrastive loss between two views per user, both anchor
    orders averaged. Negatives: every view of the other users in the batch."""
    rows = _pair_nce_rows(z1, z2, 1.0)
    B = z1.shape[0]
    return _reduce((rows[:B] + rows[B:]) / 2, reduction)


def cl_plus_loss(p1: torch.Tensor, p2: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Positive-view loss: own two guided positive views attract, other users' positive views repel."""
    return cl_loss(p1, p2, reduction)


def cl_minus_loss(neg: torch.Tensor, p1: torch.Tensor, p2: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Each negative view is pulled toward the other users' negative views and away from
    all positive views; averaged over the |S-|-1 other negatives."""
    B = neg.shape[0]
    if B < 2:
        raise ValueError("negative-view loss needs at least 2 negative views")
    pos = torch.cat([p1, p2], 0)
    to_neg = neg @ neg.T  # (B, B)
    lse_pos = torch.logsumexp(neg @ pos.T, 1)  # (B,)
    terms = to_neg - torch.logaddexp(lse_pos[:, None], to_neg)
    off = ~torch.eye(B, dtype=torch.bool, device=neg.device)
    per_user = -(terms * off).sum(1) / (B - 1)
    return _reduce(per_user, reduction)


def sl_loss(h: torch.Tensor, h_pos: torch.Tensor, tau: float = 1.0, reduction: str = "mean") -> torch.Tensor:
    """Supervised contrastive loss between a sequence and its retrieved same-target
    sequence; the two anchor-order terms are summed."""
    rows = _pair_nce_rows(h, h_pos, tau)
    B = h.shape[0]
    return _reduce(rows[:B] + rows[B:], reduction)


def sl_plus_loss(h: torch.Tensor, h_ertrl: torch.Tensor, tau: float = 1.0, reduction: str = "mean") -> torch.Tensor:
    return sl_loss(h, h_ertrl, tau, reduction)


MODES = ("warmup", "cl4srec", "duorec", "ssl", "sl", "full")
GUIDED_MODES = ("ssl", "sl", "full")


def active_terms(mode: str, cfg: LossConfig, guided: bool, losses: tuple[str, ...] | None = None) -> dict[str, float]:
    """Contrastive terms and weights of a mode. ``guided`` selects the explanation-guided
    objective for ssl/sl/full; before the first score refresh they use the warmup objective.
    ``losses`` restricts the guided terms to a subset of {"cl+", "cl-", "sl+"}."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "cl4srec":
        terms = {"cl": cfg.lam}
    elif mode == "duorec":
        terms = {"sl": cfg.lam}
    elif mode == "warmup" or not guided:
        terms = {"cl": cfg.lam, "sl": cfg.lam}
    else:
        terms = {
            "ssl": {"cl+": cfg.lam_cl_plus, "cl-": cfg.lam_cl_minus},
            "sl": {"sl+": cfg.lam_sl_plus},
            "full": {"cl+": cfg.lam_cl_plus, "cl-": cfg.lam_cl_minus, "sl+": cfg.lam_sl_plus},
        }[mode]
        if losses is not None:
            terms = {k: v for k, v in terms.items() if k in losses}
    return {k: v for k, v in terms.items() if v > 0}


def composite(components: dict[str, torch.Tensor], weights: dict[str, float]) -> torch.Tensor:
    """rec + sum_k weight_k * component_k over the active terms."""
    total = components["rec"]
    for name, w in weights.items():
        total = total + w * components[name]
    return total
