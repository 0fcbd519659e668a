"""Interaction datasets: ingestion, k-core filtering, leave-one-out split,
synthetic generation with ground-truth important items, and batching."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

PAD = 0
MASK = 1
N_RESERVED = 2


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionDataset:
    """Users' time-ordered item sequences over contiguous internal item ids.

    Internal ids: 0 is padding, 1 is the mask token, real items start at 2.
    ``item_map`` maps original item ids to internal ids.
    """

    sequences: dict[str, tuple[int, ...]]
    item_map: dict[str, int]

    @property
    def users(self) -> list[str]:
        return list(self.sequences)

    @property
    def items(self) -> set[int]:
        return set(self.item_map.values())

    @property
    def n_items(self) -> int:
        return len(self.item_map)

    @property
    def vocab_size(self) -> int:
        return self.n_items + N_RESERVED

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences.values())

    def original_items(self, user: str) -> list[str]:
        inverse = {v: k for k, v in self.item_map.items()}
        return [inverse[i] for i in self.sequences[user]]

    def stats(self) -> dict[str, float]:
        n_users, n_items = len(self.sequences), self.n_items
        n = self.n_interactions
        return {
            "users": n_users,
            "items": n_items,
            "interactions": n,
            "avg_length": n / n_users,
            "sparsity": 1.0 - n / (n_users * n_items),
        }


def _reindex(raw: dict[str, list[str]]) -> InteractionDataset:
    item_map: dict[str, int] = {}
    sequences = {}
    for user, items in raw.items():
        for it in items:
            if it not in item_map:
                item_map[it] = len(item_map) + N_RESERVED
        sequences[user] = tuple(item_map[it] for it in items)
    return InteractionDataset(sequences=sequences, item_map=item_map)


def load_interactions(path: str | Path) -> InteractionDataset:
    """Read "user item_1 item_2 ..." lines. Items get internal ids in order of first appearance."""
    raw: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 2:
                raise DataError(f"line {lineno}: expected 'user item ...', got {line.strip()!r}")
            user, items = tokens[0], tokens[1:]
            if user in raw:
                raise DataError(f"line {lineno}: duplicate user {user!r}")
            raw[user] = items
    if not raw:
        raise DataError("no interactions")
    return _reindex(raw)


def save_interactions(ds: InteractionDataset, out_dir: str | Path) -> None:
    """Write dataset.txt (original ids, same format as the input) and id_map.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inverse = {v: k for k, v in ds.item_map.items()}
    with open(out_dir / "dataset.txt", "w", encoding="utf-8") as f:
        for user, seq in ds.sequences.items():
            f.write(" ".join([user, *(inverse[i] for i in seq)]) + "\n")
    with open(out_dir / "id_map.txt", "w", encoding="utf-8") as f:
        for orig, internal in ds.item_map.items():
            f.write(f"{orig} {internal}\n")


def subsample_users(ds: InteractionDataset, n_users: int, seed: int = 0) -> InteractionDataset:
    """A random subset of ``n_users`` users (file order kept), re-indexed densely."""
    users = ds.users
    if n_users >= len(users):
        return ds
    keep = set(np.random.default_rng(seed).choice(len(users), n_users, replace=False).tolist())
    inverse = {v: k for k, v in ds.item_map.items()}
    return _reindex({u: [inverse[i] for i in ds.sequences[u]] for j, u in enumerate(users) if j in keep})


def remove_consecutive_repeats(seq: Sequence[int]) -> list[int]:
    out: list[int] = []
    for it in seq:
        if not out or out[-1] != it:
            out.append(it)
    return out


def apply_k_core(ds: InteractionDataset, k: int, dedup: bool = True) -> InteractionDataset:
    """Drop users and items with fewer than ``k`` interactions until nothing changes.

    Consecutive repeats are collapsed before counting, and again after every removal
    round (dropping an item can make its neighbours adjacent), so the result is a
    fixpoint of this function.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    inverse = {v: key for key, v in ds.item_map.items()}
    clean = remove_consecutive_repeats if dedup else list
    seqs = {u: clean(s) for u, s in ds.sequences.items()}
    while True:
        item_counts = Counter(it for s in seqs.values() for it in s)
        filtered = {}
        for u, s in seqs.items():
            kept = clean([it for it in s if item_counts[it] >= k])
            if len(kept) >= k:
                filtered[u] = kept
        if filtered == seqs:
            break
        seqs = filtered
    if not seqs:
        raise DataError("k-core emptied dataset")
    return _reindex({u: [inverse[i] for i in s] for u, s in seqs.items()})


@dataclass(frozen=True)
class Sample:
    user: str
    inputs: tuple[int, ...]
    target: int


@dataclass(frozen=True)
class SplitDataset:
    train: list[Sample]
    valid: list[Sample]
    test: list[Sample]
    vocab_size: int
    # per user: the longest training input and its target (used for explanation)
    explain_inputs: dict[str, Sample] = field(default_factory=dict)

    def by_target(self) -> dict[int, list[int]]:
        """Map target item -> indices of training samples with that target."""
        index: dict[int, list[int]] = {}
        for i, s in enumerate(self.train):
            index.setdefault(s.target, []).append(i)
        return index


def split_leave_one_out(ds: InteractionDataset, train_samples: str = "all") -> SplitDataset:
    """Last item for test, second-last for validation, earlier items for training.

    ``train_samples="all"`` emits every prefix ``s[:t] -> s[t]`` with ``t <= n-3``;
    ``"last"`` keeps only the longest one per user.
    """
    if train_samples not in ("all", "last"):
        raise DataError(f"train_samples must be 'all' or 'last', got {train_samples!r}")
    train, valid, test, explain = [], [], [], {}
    for user, seq in ds.sequences.items():
        n = len(seq)
        if n < 3:
            logger.warning("user %s has %d interactions (<3); excluded from split", user, n)
            continue
        test.append(Sample(user, tuple(seq[: n - 1]), seq[n - 1]))
        valid.append(Sample(user, tuple(seq[: n - 2]), seq[n - 2]))
        ts = range(1, n - 2) if train_samples == "all" else range(max(1, n - 3), n - 2)
        for t in ts:
            train.append(Sample(user, tuple(seq[:t]), seq[t]))
        if n >= 4:
            explain[user] = Sample(user, tuple(seq[: n - 3]), seq[n - 3])
    return SplitDataset(train, valid, test, ds.vocab_size, explain)


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic construction.

    History items are split into ``n_topics`` topics. A user's three important
    items come from one topic; the other historical items are drawn from the
    remaining topics. The three next-items are label items of the important
    topic, picked by a hash of the sorted important triple.
    """

    n_users: int = 500
    n_hist: int = 10
    n_important: int = 3
    n_next: int = 3
    n_topics: int = 20
    items_per_topic: int = 10
    labels_per_topic: int = 3


@dataclass(frozen=True)
class SyntheticDataset:
    dataset: InteractionDataset
    important: dict[str, tuple[int, ...]]  # 0/1 mask over the historical positions
    config: SyntheticConfig


def next_item_offset(triple: Sequence[int], n_labels: int) -> int:
    key = ",".join(str(t) for t in sorted(triple)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little") % n_labels


def synthetic_next_items(triple: Sequence[int], cfg: SyntheticConfig) -> list[str]:
    """The next-items determined by an important triple of history item names ``h<idx>``."""
    idx = [int(t[1:]) for t in triple]
    topic = idx[0] // cfg.items_per_topic
    start = next_item_offset(idx, cfg.labels_per_topic)
    return [f"l{topic * cfg.labels_per_topic + (start + j) % cfg.labels_per_topic}" for j in range(cfg.n_next)]


def generate_synthetic(seed: int, config: SyntheticConfig | None = None) -> SyntheticDataset:
    cfg = config or SyntheticConfig()
    if cfg.n_next > cfg.labels_per_topic:
        raise DataError("labels_per_topic must be >= n_next")
    rng = np.random.default_rng(seed)
    n_catalog = cfg.n_topics * cfg.items_per_topic
    raw: dict[str, list[str]] = {}
    masks: dict[str, tuple[int, ...]] = {}
    for u in range(cfg.n_users):
        topic = int(rng.integers(cfg.n_topics))
        lo = topic * cfg.items_per_topic
        important = rng.choice(np.arange(lo, lo + cfg.items_per_topic), cfg.n_important, replace=False)
        others = np.setdiff1d(np.arange(n_catalog), np.arange(lo, lo + cfg.items_per_topic))
        filler = rng.choice(others, cfg.n_hist - cfg.n_important, replace=False)
        positions = np.sort(rng.choice(cfg.n_hist, cfg.n_important, replace=False))
        hist = np.empty(cfg.n_hist, dtype=np.int64)
        mask = np.zeros(cfg.n_hist, dtype=np.int64)
        mask[positions] = 1
        hist[positions] = important
        hist[mask == 0] = filler
        names = [f"h{i}" for i in hist]
        triple = [f"h{i}" for i in important]
        user = f"u{u}"
        raw[user] = names + synthetic_next_items(triple, cfg)
        masks[user] = tuple(int(m) for m in mask)
    return SyntheticDataset(_reindex(raw), masks, cfg)


@dataclass
class Batch:
    items: torch.Tensor  # (B, L) left-padded ids
    lengths: torch.Tensor  # (B,)
    targets: torch.Tensor  # (B,)
    index: np.ndarray  # sample indices into the source list


def pad_left(seqs: Sequence[Sequence[int]], max_len: int, width: int | None = None) -> torch.Tensor:
    """Left-pad with PAD, keeping the most recent ``max_len`` items of each sequence."""
    clipped = [list(s[-max_len:]) for s in seqs]
    width = width or max((len(s) for s in clipped), default=1)
    width = max(width, 1)
    out = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for r, s in enumerate(clipped):
        if s:
            out[r, width - len(s):] = torch.tensor(s, dtype=torch.long)
    return out


def make_batch(samples: Sequence[Sample], index: np.ndarray, max_len: int) -> Batch:
    chosen = [samples[i] for i in index]
    items = pad_left([s.inputs for s in chosen], max_len)
    lengths = torch.tensor([min(len(s.inputs), max_len) for s in chosen], dtype=torch.long)
    targets = torch.tensor([s.target for s in chosen], dtype=torch.long)
    return Batch(items, lengths, targets, np.asarray(index))


def batch_sequences(
    samples: Sequence[Sample],
    batch_size: int,
    max_len: int,
    shuffle_seed: int | None = None,
) -> Iterator[Batch]:
    """Yield batches; a final partial batch is kept only if it has at least 2 rows."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 for in-batch contrastive negatives")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start: start + batch_size]
        if len(idx) < 2:
            break
        yield make_batch(samples, idx, max_len)
