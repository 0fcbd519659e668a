"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the terminal
summary) or ``python3 tests/test_acceptance.py`` to just print them.
"""

from __future__ import annotations

import math
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from oracles import (  # noqa: E402
    LinearSurrogate,
    brute_force_metrics,
    brute_force_rank,
    central_difference,
    random_scores,
    relative_error,
    sort_oracle_highest,
    sort_oracle_lowest,
)

from ec4srec import augment as aug  # noqa: E402
from ec4srec.config import ExperimentConfig  # noqa: E402
from ec4srec.data import MASK, PAD, SyntheticConfig, generate_synthetic, pad_left, split_leave_one_out  # noqa: E402
from ec4srec.encoders import EncoderSpec, SequenceRecommender  # noqa: E402
from ec4srec.experiments import DESK_DEFAULTS, ordering_holds, run_desk_scale, run_oracle_experiment  # noqa: E402
from ec4srec.explain import (  # noqa: E402
    integrated_gradients_attributions,
    normalize_scores,
    occlusion_scores,
    saliency_scores,
    schedule_updates,
)
from ec4srec.losses import cl_loss, cl_minus_loss, cl_plus_loss, rec_loss, sl_loss, sl_plus_loss  # noqa: E402
from ec4srec.metrics import ranking_metrics, target_ranks  # noqa: E402
from ec4srec.trainer import Trainer, train  # noqa: E402

RESULTS: list[str] = []


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{number}] {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def tiny_model(seed, d=4, dtype=torch.float64):
    torch.manual_seed(seed)
    model = SequenceRecommender(EncoderSpec(d=d, layers=2, heads=2, max_len=8, dropout=0.0), 20)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return model.to(dtype).eval()


def tiny_split(n_users=20):
    return split_leave_one_out(generate_synthetic(0, SyntheticConfig(n_users=n_users)).dataset, "last")


def tiny_config(**overrides):
    flat = {"mode": "full", "batch_size": 20, "lr": 0.005, "seed": 1, "encoder.d": 8, "encoder.max_len": 12,
            "encoder.layers": 1, "eval_ks": (3,), "select_metric": "NDCG@3"}
    flat.update(overrides)
    return ExperimentConfig().replace(**flat)


# 1 ---------------------------------------------------------------------------

def test_1_synthetic_oracle_gap():
    start = time.time()
    reports = [run_oracle_experiment(seed) for seed in (0, 1, 2)]
    rand = np.mean([r.random["NDCG@3"] for r in reports])
    orac = np.mean([r.oracle["NDCG@3"] for r in reports])
    gap = (orac - rand) / rand
    report(1, "synthetic oracle masking", gap >= 0.15 and time.time() - start < 600,
           f"NDCG@3 random {rand:.4f} oracle {orac:.4f} gap {gap:+.1%} (need >= +15%), {time.time() - start:.0f}s")


# 2 ---------------------------------------------------------------------------

def test_2_loss_gradients():
    g = torch.Generator().manual_seed(0)

    def views(count):
        return [torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(count)]

    targets = torch.tensor([2, 4, 5])
    cases = {
        "rec_loss": (lambda h, table: rec_loss(h, table, targets), views(1) + [torch.randn(7, 4, generator=g, dtype=torch.float64)]),
        "cl_loss": (cl_loss, views(2)),
        "sl_loss": (lambda a, b: sl_loss(a, b, tau=0.7), views(2)),
        "cl_plus_loss": (cl_plus_loss, views(2)),
        "cl_minus_loss": (cl_minus_loss, views(3)),
        "sl_plus_loss": (lambda a, b: sl_plus_loss(a, b, tau=1.3), views(2)),
    }
    worst = {}
    for name, (fn, inputs) in cases.items():
        leaves = [x.clone().requires_grad_(True) for x in inputs]
        analytic = torch.autograd.grad(fn(*leaves), leaves)
        numeric = central_difference(fn, [x.clone() for x in inputs])
        worst[name] = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    top = max(worst.values())
    report(2, "loss gradients vs finite differences", top < 1e-4, f"max rel error {top:.2e} (need < 1e-4)")


# 3 ---------------------------------------------------------------------------

def test_3_explanation_correctness():
    lin = LinearSurrogate(20, 5, seed=1)
    seq = [3, 9, 4, 12, 7, 3]
    w = np.abs(lin.item_weights()[seq].numpy())
    occ_err = np.max(np.abs(normalize_scores(occlusion_scores(seq, lin, 5)) - w / w.sum()))

    model = tiny_model(5)
    sal_seq = [4, 8, 3, 12, 6]
    ids = pad_left([sal_seq], 8)
    tgt = torch.tensor([9])
    emb = model.embed(ids).detach().clone()
    (fd,) = central_difference(lambda e: model.target_score_embedded(e, ids != PAD, tgt).sum(), [emb])
    expected = fd[0].abs().sum(-1).numpy()
    sal_err = np.max(np.abs(saliency_scores(sal_seq, model, 9, max_len=8) - expected)) / np.max(np.abs(expected))

    lin0 = LinearSurrogate(20, 4, seed=6, zero_mask=False)
    ig_ids = torch.tensor([[PAD, 5, 6, 7]])
    e = lin0.embed(ig_ids).detach()
    b = lin0.embed(torch.tensor([[PAD, MASK, MASK, MASK]])).detach()
    ig_err = max((integrated_gradients_attributions(lin0, ig_ids, torch.tensor([3]), steps) - (e - b) * lin0.c)
                 .abs().max().item() for steps in (1, 2, 7, 32))

    deep = tiny_model(8)
    c_ids = pad_left([[4, 9, 2, 15, 7]], 8)
    base_ids = torch.where(c_ids != PAD, torch.full_like(c_ids, MASK), c_ids)
    with torch.no_grad():
        gap = (deep.target_score(c_ids, torch.tensor([11])) - deep.target_score(base_ids, torch.tensor([11]))).item()
    residual = {n: abs(integrated_gradients_attributions(deep, c_ids, torch.tensor([11]), n).sum().item() - gap)
                for n in (64, 256)}
    ok = occ_err < 1e-6 and sal_err < 1e-3 and ig_err < 1e-12 and residual[256] < residual[64]
    report(3, "explanation correctness", ok,
           f"occlusion {occ_err:.1e}, saliency rel {sal_err:.1e}, IG linear {ig_err:.1e}, "
           f"IG residual {residual[64]:.2e} -> {residual[256]:.2e}")


# 4 ---------------------------------------------------------------------------

def test_4_normalization():
    rng = np.random.default_rng(0)
    worst_sum, min_entry = 0.0, math.inf
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        raw = rng.exponential(size=n) * 10.0 ** rng.integers(-6, 7)
        raw[rng.random(n) < 0.2] = 0.0
        out = normalize_scores(raw)
        worst_sum = max(worst_sum, abs(out.sum() - 1))
        min_entry = min(min_entry, out.min())
    uniform = np.allclose(normalize_scores(np.zeros(7)), np.full(7, 1 / 7))
    report(4, "score normalization", worst_sum < 1e-6 and min_entry >= 0 and uniform,
           f"max |sum-1| {worst_sum:.1e}, min entry {min_entry:.2e}, zero->uniform {uniform}")


# 5 ---------------------------------------------------------------------------

def test_5_schedule_and_refresh_audit():
    split = tiny_split()
    checks = []
    for N, p, want in ((100, 3, (25, 50, 75)), (150, 5, (25, 50, 75, 100, 125))):
        sched = schedule_updates(N, p).update_epochs
        log = Trainer(tiny_config(epochs=N, p=p), split)
        log.run()
        checks.append((N, p, sched == want, log.state.refresh_log == list(want), log.state.refresh_log))
    ok = all(a and b for _, _, a, b, _ in checks)
    report(5, "refresh schedule and trainer audit", ok,
           "; ".join(f"N={N} p={p} schedule {a} audit {log}" for N, p, a, _, log in checks))


# 6 ---------------------------------------------------------------------------

def test_6_metric_oracle():
    rng = np.random.default_rng(0)
    scores = np.round(rng.normal(size=(100, 50)), 1)  # rounding forces ties
    targets = rng.integers(0, 50, size=100)
    oracle_ranks = [brute_force_rank(scores[i].tolist(), int(targets[i])) for i in range(100)]
    ranks = target_ranks(torch.tensor(scores), torch.tensor(targets)).numpy()
    exact = ranks.tolist() == oracle_ranks
    for k in (1, 3, 5, 10, 20):
        hr, nd = brute_force_metrics(oracle_ranks, k)
        got = ranking_metrics(ranks, [k])
        exact = exact and got[f"HR@{k}"] == hr and got[f"NDCG@{k}"] == nd
    half = ranking_metrics([3], [3])["NDCG@3"]
    report(6, "metric oracle", exact and half == 0.5, f"bit-exact {exact}, rank 3 NDCG@3 = {half}")


# 7 ---------------------------------------------------------------------------

def test_7_augmentation_properties():
    rng = np.random.default_rng(0)
    failures = Counter()
    for _ in range(10_000):
        n = int(rng.integers(2, 30))
        s = rng.integers(2, 60, size=n).tolist()
        scores = random_scores(rng, n)
        mu = float(rng.uniform(0.05, 0.95))
        k = int(math.floor(mu * n))
        low, high = sort_oracle_lowest(scores, k), sort_oracle_highest(scores, k)
        failures["argmin-k"] += aug.lowest_k(scores, k).tolist() != low
        failures["argmax-k"] += aug.highest_k(scores, k).tolist() != high
        crop = aug.random_crop(s, mu, rng).items
        failures["crop length"] += len(crop) != max(1, math.floor(mu * n))
        failures["rord multiset"] += sorted(aug.random_reorder(s, mu, rng).items) != sorted(s)
        failures["erord multiset"] += sorted(aug.erord(s, scores, mu, rng).items) != sorted(s)
        if 1 <= k < n:
            pos, neg = aug.ecrop(s, scores, mu).items, aug.ecrop(s, scores, mu, "negative").items
            failures["ecrop length"] += len(pos) != n - k or len(neg) != k
            failures["ecrop partition"] += Counter(pos) + Counter(neg) != Counter(s)
        failures["emask count"] += aug.emask(s, scores, mu).items.count(MASK) != k

    s, sc = [10, 11, 12], [0.5, 0.3, 0.2]
    candidates = [(11, 12), (10,), (10, 13)]
    probs = aug.retrieval_probabilities(s, sc, candidates)
    draw_rng = np.random.default_rng(1)
    draws = Counter(aug.ertrl(s, sc, candidates, draw_rng).items for _ in range(4000))
    freq_err = max(abs(draws[c] / 4000 - p) for c, p in zip(candidates, probs))
    bad = {name: v for name, v in failures.items() if v}
    report(7, "augmentation properties", not bad and freq_err <= 0.05,
           f"10000 instances, failures {bad or 'none'}; ertrl max freq error {freq_err:.3f} (p={np.round(probs, 3).tolist()})")


# 8 ---------------------------------------------------------------------------

def test_8_desk_scale_ordering():
    start = time.time()
    split = split_leave_one_out(generate_synthetic(0, SyntheticConfig(n_users=1000)).dataset,
                                DESK_DEFAULTS["train_samples"])
    res = run_desk_scale(split, seeds=(0, 1, 2))
    holds = [ordering_holds(res, s) for s in (0, 1, 2)]
    table = ", ".join(f"{m} " + "/".join(f"{v:.4f}" for v in r.values()) for m, r in res.items())
    report(8, "desk-scale mode ordering", sum(holds) >= 2,
           f"NDCG@5 per seed {table}; ordering per seed {holds} (need 2 of 3), "
           f"on seed means {ordering_holds(res)}, {time.time() - start:.0f}s")


# 9 ---------------------------------------------------------------------------

def test_9_determinism_and_resume(tmp_path):
    split = tiny_split(40)
    cfg = tiny_config(epochs=6, p=1, batch_size=8)
    same = train(cfg, split).history == train(cfg, split).history
    full_steps, resumed_steps = [], []
    Trainer(cfg, split, step_callback=full_steps.append).run()
    first = Trainer(cfg, split, step_callback=resumed_steps.append)
    first.run(until=4)
    first.checkpoint(tmp_path / "ckpt.safetensors")
    Trainer.restore(tmp_path / "ckpt.safetensors", split, step_callback=resumed_steps.append).run()
    resumed = resumed_steps == full_steps
    report(9, "determinism and resume", same and resumed,
           f"identical history {same}, resumed losses bit-identical {resumed} ({len(full_steps)} steps)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
