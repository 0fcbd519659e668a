"""Two-phase training (random-augmentation warmup, then explanation-guided contrastive
learning), evaluation, and checkpoint/restore."""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from safetensors.torch import load as load_safetensors
from safetensors.torch import save as save_safetensors

from . import augment as aug
from .config import ExperimentConfig, dump_config, from_flat, parse_config_text
from .data import PAD, Sample, SplitDataset, batch_sequences, pad_left
from .encoders import SequenceRecommender
from .explain import ScoreStore, normalize_scores, refresh_store, schedule_updates
from .losses import (
    GUIDED_MODES,
    active_terms,
    cl_loss,
    cl_minus_loss,
    cl_plus_loss,
    composite,
    rec_loss,
    sl_loss,
    sl_plus_loss,
)
from .metrics import ranking_metrics, target_ranks

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# (sample, truncated inputs, rng) -> two positive views; overrides random view sampling
ViewPairFn = Callable[[Sample, list, np.random.Generator], tuple]


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainState:
    epoch: int
    model: SequenceRecommender
    optimizer: torch.optim.Optimizer
    store: ScoreStore | None = None
    history: list[dict] = field(default_factory=list)
    refresh_log: list[int] = field(default_factory=list)
    step: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    best_params: dict | None = None


def evaluate(model, samples: Sequence[Sample], ks=(5, 10), max_len=50, batch_size=512) -> dict[str, float]:
    """HR@k / NDCG@k of each sample's target ranked against all real items."""
    ranks = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start: start + batch_size]
            ids = pad_left([s.inputs for s in chunk], max_len)
            targets = torch.tensor([s.target for s in chunk]) - 2
            ranks.append(target_ranks(model.logits(model.encode(ids)), targets))
    if was_training:
        model.train()
    return ranking_metrics(torch.cat(ranks).numpy(), ks)


def _epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch])


class Trainer:
    def __init__(self, config: ExperimentConfig, split: SplitDataset, view_pair_fn: ViewPairFn | None = None,
                 step_callback: Callable[[dict], None] | None = None):
        self.config = config
        self.split = split
        self.view_pair_fn = view_pair_fn
        self.step_callback = step_callback
        self.schedule = schedule_updates(config.epochs, config.p)
        self.by_target = split.by_target()
        self.view_log: Counter = Counter()  # (phase, operator) audit of sampled views
        torch.manual_seed(config.seed)
        model = SequenceRecommender(config.encoder, split.vocab_size)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.state = TrainState(0, model, opt)

    @property
    def model(self) -> SequenceRecommender:
        return self.state.model

    @property
    def guided_mode(self) -> bool:
        return self.config.mode in GUIDED_MODES

    # views -------------------------------------------------------------

    def _candidates(self, index: int, max_len: int) -> list[tuple[int, ...]]:
        s = self.split.train[index]
        return [self.split.train[j].inputs[-max_len:] for j in self.by_target[s.target]
                if self.split.train[j].user != s.user]

    def _scores_for(self, sample: Sample, window: Sequence[int]) -> np.ndarray:
        full = self.state.store.get(sample.user, len(sample.inputs))
        return normalize_scores(full[len(full) - len(window):])

    def build_views(self, index: np.ndarray, terms: dict, rng: np.random.Generator) -> dict[str, list]:
        cfg = self.config
        max_len = cfg.encoder.max_len
        params = cfg.augment
        views: dict[str, list] = {name: [] for name in ("v1", "v2", "neg", "rtrl")}
        for i in index:
            sample = self.split.train[i]
            s = list(sample.inputs[-max_len:])
            if "cl" in terms:
                if self.view_pair_fn is not None:
                    a, b = self.view_pair_fn(sample, s, rng)
                else:
                    a, b = aug.sample_view_pair(s, None, params, rng, sample.user)
                views["v1"].append(a)
                views["v2"].append(b)
            if "sl" in terms:
                views["rtrl"].append(aug.random_retrieval(s, self._candidates(i, max_len), rng, params.mu_m, sample.user))
            if {"cl+", "cl-", "sl+"} & set(terms):
                scores = self._scores_for(sample, s)
                if "cl+" in terms or "cl-" in terms:
                    a, b = aug.sample_view_pair(s, scores, params, rng, sample.user)
                    views["v1"].append(a)
                    views["v2"].append(b)
                if "cl-" in terms:
                    views["neg"].append(aug.sample_negative_view(s, scores, params, rng, sample.user))
                if "sl+" in terms:
                    views["rtrl"].append(aug.ertrl(s, scores, self._candidates(i, max_len), rng, params.mu_m, sample.user))
        return views

    # training ------------------------------------------------------------

    def _step(self, batch, terms: dict, rng: np.random.Generator, phase: str) -> dict[str, float]:
        cfg = self.config
        model = self.model
        max_len = cfg.encoder.max_len
        views = self.build_views(batch.index, terms, rng)
        groups = ["orig"] + [k for k in ("v1", "v2", "neg", "rtrl") if views[k]]
        rows = list(batch.items.tolist())
        rows = [[i for i in r if i != PAD] for r in rows]
        for name in groups[1:]:
            rows.extend(list(v.items) for v in views[name])
            self.view_log.update((phase, v.operator) for v in views[name])
        h_all = model.encode(pad_left(rows, max_len))
        B = len(batch.index)
        h = {name: h_all[j * B:(j + 1) * B] for j, name in enumerate(groups)}

        comp = {"rec": rec_loss(h["orig"], model.item_table, batch.targets)}
        if "cl" in terms:
            comp["cl"] = cl_loss(h["v1"], h["v2"])
        if "sl" in terms:
            comp["sl"] = sl_loss(h["orig"], h["rtrl"], cfg.loss.tau)
        if "cl+" in terms:
            comp["cl+"] = cl_plus_loss(h["v1"], h["v2"])
        if "cl-" in terms:
            comp["cl-"] = cl_minus_loss(h["neg"], h["v1"], h["v2"])
        if "sl+" in terms:
            comp["sl+"] = sl_plus_loss(h["orig"], h["rtrl"], cfg.loss.tau)
        total = composite(comp, terms)
        if not torch.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at epoch {self.state.epoch}, step {self.state.step}: "
                                   f"{ {k: float(v) for k, v in comp.items()} }")
        self.state.optimizer.zero_grad()
        total.backward()
        self.state.optimizer.step()
        self.state.step += 1
        record = {"step": self.state.step, "mode": cfg.mode, "phase": phase,
                  **{k: v.item() for k, v in comp.items()}, "total": total.item()}
        if self.step_callback is not None:
            self.step_callback(record)
        return record

    def run_epoch(self) -> dict:
        cfg = self.config
        state = self.state
        epoch = state.epoch + 1
        if self.guided_mode and epoch in self.schedule.update_epochs:
            state.store = refresh_store(state.store, cfg.explain.method, self.model, self.split, epoch,
                                        cfg.encoder.max_len, cfg.explain.steps)
            state.refresh_log.append(epoch)
        guided = self.guided_mode and state.store is not None
        phase = "guided" if guided else "warmup"
        terms = active_terms(cfg.mode, cfg.loss, guided, cfg.losses or None)

        seq = _epoch_seed(cfg.seed, epoch)
        shuffle_seed, aug_seed, torch_seed = seq.generate_state(3)
        rng = np.random.default_rng(int(aug_seed))
        torch.manual_seed(int(torch_seed))
        self.model.train()
        sums: dict[str, float] = {}
        n_steps = 0
        for batch in batch_sequences(self.split.train, cfg.batch_size, cfg.encoder.max_len, int(shuffle_seed)):
            rec = self._step(batch, terms, rng, phase)
            for k, v in rec.items():
                if k not in ("step", "mode", "phase"):
                    sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        state.epoch = epoch
        metrics = evaluate(self.model, self.split.valid, cfg.eval_ks, cfg.encoder.max_len)
        record = {"epoch": epoch, "phase": phase, **{f"loss_{k}": v / max(n_steps, 1) for k, v in sums.items()},
                  **{f"valid_{k}": v for k, v in metrics.items()}}
        state.history.append(record)
        score = metrics.get(cfg.select_metric, -math.inf)
        if score > state.best_metric:
            state.best_metric, state.best_epoch = score, epoch
            state.best_params = copy.deepcopy(self.model.state_dict())
        logger.info("epoch %d [%s] %s", epoch, phase, {k: round(v, 4) for k, v in record.items() if k != "phase" and isinstance(v, float)})
        return record

    def run(self, until: int | None = None) -> TrainState:
        until = self.config.epochs if until is None else min(until, self.config.epochs)
        while self.state.epoch < until:
            self.run_epoch()
            if self.config.patience and self.state.epoch - self.state.best_epoch >= self.config.patience:
                logger.info("early stop at epoch %d", self.state.epoch)
                break
        return self.state

    def best_model(self) -> SequenceRecommender:
        model = copy.deepcopy(self.model)
        if self.state.best_params is not None:
            model.load_state_dict(self.state.best_params)
        return model.eval()

    def test_metrics(self) -> dict[str, float]:
        return evaluate(self.best_model(), self.split.test, self.config.eval_ks, self.config.encoder.max_len)

    # checkpointing -------------------------------------------------------

    def checkpoint(self, path: str | Path) -> None:
        """Write a safetensors file: tensors in the body, everything else as JSON metadata.
        The encoding is canonical, so checkpoint -> restore -> checkpoint is byte-identical."""
        s = self.state
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        if s.best_params is not None:
            tensors.update({f"best.{k}": v for k, v in s.best_params.items()})
        opt = s.optimizer.state_dict()
        opt_meta = {}
        for pid, entry in opt["state"].items():
            opt_meta[str(pid)] = {}
            for name, value in entry.items():
                if torch.is_tensor(value):
                    tensors[f"optimizer.{pid}.{name}"] = value
                else:
                    opt_meta[str(pid)][name] = value
        users = []
        if s.store is not None:
            users = list(s.store.scores)
            for i, u in enumerate(users):
                tensors[f"store.{i}"] = torch.from_numpy(np.asarray(s.store.scores[u], dtype=np.float64))
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": dump_config(self.config),
            "vocab_size": self.split.vocab_size,
            "epoch": s.epoch,
            "step": s.step,
            "optimizer_groups": opt["param_groups"],
            "optimizer_state": opt_meta,
            "store": None if s.store is None else {"epoch": s.store.epoch, "users": users},
            "history": s.history,
            "refresh_log": s.refresh_log,
            "best_metric": s.best_metric,
            "best_epoch": s.best_epoch,
            "has_best": s.best_params is not None,
        }
        tensors = {k: v.detach().contiguous().clone() for k, v in tensors.items()}
        blob = save_safetensors(tensors, metadata={"state": json.dumps(meta, sort_keys=True)})
        Path(path).write_bytes(blob)

    @classmethod
    def restore(cls, path: str | Path, split: SplitDataset, **kwargs) -> "Trainer":
        meta, tensors = load_checkpoint(path)
        config = from_flat(parse_config_text(meta["config"]))
        if meta["vocab_size"] != split.vocab_size:
            raise CheckpointError(f"checkpoint vocab {meta['vocab_size']} != dataset vocab {split.vocab_size}")
        trainer = cls(config, split, **kwargs)
        trainer.model.load_state_dict(_prefixed(tensors, "model."))
        opt_state = {}
        for pid, extra in meta["optimizer_state"].items():
            entry = dict(extra)
            entry.update(_prefixed(tensors, f"optimizer.{pid}."))
            opt_state[int(pid)] = entry
        trainer.state.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["optimizer_groups"]})
        st = meta["store"]
        store = None if st is None else ScoreStore(
            {u: tensors[f"store.{i}"].numpy() for i, u in enumerate(st["users"])}, st["epoch"])
        trainer.state = TrainState(
            epoch=meta["epoch"], model=trainer.model, optimizer=trainer.state.optimizer, store=store,
            history=meta["history"], refresh_log=meta["refresh_log"], step=meta["step"],
            best_metric=meta["best_metric"], best_epoch=meta["best_epoch"],
            best_params=_prefixed(tensors, "best.") if meta["has_best"] else None,
        )
        return trainer


def _prefixed(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """(metadata, tensors) of a checkpoint; any malformed file raises CheckpointError."""
    try:
        blob = Path(path).read_bytes()
        tensors = load_safetensors(blob)
        (header_len,) = struct.unpack("<Q", blob[:8])
        header = json.loads(blob[8: 8 + header_len])
        meta = json.loads(header["__metadata__"]["state"])
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('format_version')} != supported {CHECKPOINT_VERSION}")
    return meta, tensors


def load_model(path: str | Path) -> tuple[SequenceRecommender, ExperimentConfig]:
    """Best (or last) model from a checkpoint, in evaluation mode."""
    meta, tensors = load_checkpoint(path)
    config = from_flat(parse_config_text(meta["config"]))
    model = SequenceRecommender(config.encoder, meta["vocab_size"])
    model.load_state_dict(_prefixed(tensors, "best." if meta["has_best"] else "model."))
    return model.eval(), config


@dataclass
class TrainResult:
    model: SequenceRecommender
    history: list[dict]
    test: dict[str, float]
    refresh_log: list[int]
    trainer: Trainer


def train(config: ExperimentConfig, split: SplitDataset, **kwargs) -> TrainResult:
    trainer = Trainer(config, split, **kwargs)
    trainer.run()
    return TrainResult(trainer.best_model(), trainer.state.history, trainer.test_metrics(),
                       list(trainer.state.refresh_log), trainer)
