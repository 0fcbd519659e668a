import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import central_difference, relative_error

from ec4srec.losses import (
    LossConfig,
    active_terms,
    cl_loss,
    cl_minus_loss,
    cl_plus_loss,
    composite,
    nce_term,
    rec_loss,
    sim,
    sl_loss,
    sl_plus_loss,
)

E1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
E2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
ONE_NEG = -math.log(math.e / (math.e + 1))  # 0.3133


def t(*rows):
    return torch.tensor(rows, dtype=torch.float64)


def test_sim_examples():
    assert sim(E1, torch.zeros(2, dtype=torch.float64)) == 0
    assert sim(E1, E1) == 1
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(20, 8, generator=g, dtype=torch.float64), torch.randn(20, 8, generator=g, dtype=torch.float64)
    brute = torch.tensor([sum(a[i, j].item() * b[i, j].item() for j in range(8)) for i in range(20)], dtype=torch.float64)
    assert torch.max(torch.abs(sim(a, b) - brute)) < 1e-12


def test_rec_loss_examples():
    table = torch.zeros(4, 2, dtype=torch.float64)
    table[2:] = t([1.0, 0.0], [1.0, 0.0])
    assert rec_loss(t([1.0, 1.0]), table, torch.tensor([3])).item() == pytest.approx(math.log(2))
    table[2:] = t([100.0, 0.0], [0.0, 0.0])
    assert rec_loss(t([1.0, 0.0]), table, torch.tensor([2])).item() < 1e-40
    raw = [1.0, 2.0, 3.0, 0.0, -1.0]
    table = torch.zeros(7, 1, dtype=torch.float64)
    table[2:, 0] = torch.tensor(raw, dtype=torch.float64)
    expected = -math.log(math.exp(3.0) / sum(math.exp(x) for x in raw))
    assert rec_loss(t([1.0]), table, torch.tensor([4])).item() == pytest.approx(expected, abs=1e-12)


def test_rec_loss_rejects_reserved_target():
    with pytest.raises(ValueError):
        rec_loss(t([1.0]), torch.zeros(4, 1, dtype=torch.float64), torch.tensor([1]))


def test_nce_term_example_and_vanishing_negative():
    assert nce_term(E1, E1, E2[None]).item() == pytest.approx(ONE_NEG, abs=1e-4)
    far = torch.stack([E2, torch.tensor([-1e6, 0.0], dtype=torch.float64)])
    assert nce_term(E1, E1, far).item() == pytest.approx(ONE_NEG, abs=1e-12)


def test_cl_loss_one_negative():
    # two users; user 0's views equal E1, user 1's are set so that the one-sided term uses E2 as negative
    z1, z2 = torch.stack([E1, E2]), torch.stack([E1, E2])
    # row 0: positive E1 (sim 1), negatives E2, E2 (sim 0) -> -log(e / (e + 2))
    expected = -math.log(math.e / (math.e + 2))
    assert cl_loss(z1, z2).item() == pytest.approx(expected, abs=1e-12)
    rows = nce_term(E1, E1, torch.stack([E2])).item()
    assert rows == pytest.approx(ONE_NEG, abs=1e-4)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_cl_loss_uniform(n):
    # identical views: the partner and the 2(n-1) other-user views all have sim 1
    z = E1.repeat(n, 1)
    assert cl_loss(z, z).item() == pytest.approx(math.log(2 * n - 1), abs=1e-12)


def test_cl_plus_examples():
    z = E1.repeat(2, 1)
    assert cl_plus_loss(z, z).item() == pytest.approx(math.log(3), abs=1e-12)
    z1 = torch.stack([E1, -1e4 * E1])
    assert cl_plus_loss(z1, z1, reduction="none")[0].item() == pytest.approx(0.0, abs=1e-12)


def test_cl_plus_equals_cl_on_random_batches():
    g = torch.Generator().manual_seed(1)
    for _ in range(10):
        a, b = torch.randn(5, 4, generator=g), torch.randn(5, 4, generator=g)
        assert torch.equal(cl_plus_loss(a, b), cl_loss(a, b))


def test_cl_minus_examples():
    v = E1.repeat(2, 1)
    assert cl_minus_loss(v, v, v).item() == pytest.approx(math.log(5), abs=1e-12)
    neg = E1.repeat(2, 1)
    pos = -1e4 * E1.repeat(2, 1)
    assert cl_minus_loss(neg, pos, pos).item() == pytest.approx(0.0, abs=1e-12)


def test_cl_minus_decreases_when_positives_move_away():
    g = torch.Generator().manual_seed(2)
    neg, p1, p2 = (torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(3))
    base = cl_minus_loss(neg, p1, p2).item()
    pushed = cl_minus_loss(neg, p1 - 0.5 * neg, p2 - 0.5 * neg).item()
    assert pushed < base


def test_sl_examples():
    h = torch.stack([E1, E2])
    # both anchor orders: each -log(e/(e+2)) with the two other-user views as negatives
    assert sl_loss(h, h).item() == pytest.approx(-2 * math.log(math.e / (math.e + 2)), abs=1e-12)
    # the single-negative example: anchor E1, positive E1, one negative E2, both orders -> 2 * 0.3133
    two = nce_term(E1, E1, E2[None]) + nce_term(E1, E1, E2[None])
    assert two.item() == pytest.approx(0.6266, abs=1e-4)
    n = 4
    g = torch.Generator().manual_seed(3)
    a, b = torch.randn(n, 3, generator=g, dtype=torch.float64), torch.randn(n, 3, generator=g, dtype=torch.float64)
    flat = sl_loss(a, b, tau=1e9).item()
    assert flat == pytest.approx(2 * math.log(2 * n - 1), abs=1e-6)
    assert torch.equal(sl_plus_loss(a, b, 0.7), sl_loss(a, b, 0.7))


def test_sl_decreases_with_positive_similarity():
    h = t([1.0, 0.0], [0.0, 1.0], [0.5, 0.5])
    values = []
    for s in (0.0, 0.5, 1.0, 2.0):
        pos = h.clone()
        pos[0] = t([s, 0.0])[0]
        values.append(sl_loss(h, pos, reduction="none")[0].item())
    assert values == sorted(values, reverse=True) and len(set(values)) == 4


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_losses_finite_nonnegative_and_shift_invariant(seed, shift):
    g = torch.Generator().manual_seed(seed)
    v = [torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(3)]
    for value in (cl_loss(v[0], v[1]), sl_loss(v[0], v[1], 0.5), cl_minus_loss(v[2], v[0], v[1])):
        assert torch.isfinite(value) and value.item() >= 0
    anchor, pos, negs = v[0][0], v[1][0], v[2]
    base = nce_term(anchor, pos, negs)
    # adding the same constant to every logit: append a coordinate that contributes `shift` to each sim
    a2 = torch.cat([anchor, torch.tensor([1.0], dtype=torch.float64)])
    p2 = torch.cat([pos, torch.tensor([shift], dtype=torch.float64)])
    n2 = torch.cat([negs, torch.full((3, 1), shift, dtype=torch.float64)], 1)
    assert nce_term(a2, p2, n2).item() == pytest.approx(base.item(), abs=1e-9)


def test_reductions():
    g = torch.Generator().manual_seed(4)
    a, b = torch.randn(4, 3, generator=g), torch.randn(4, 3, generator=g)
    per = cl_loss(a, b, reduction="none")
    assert per.shape == (4,)
    torch.testing.assert_close(cl_loss(a, b, reduction="sum"), per.sum())
    torch.testing.assert_close(cl_loss(a, b), per.mean())
    with pytest.raises(ValueError):
        cl_loss(a[:1], b[:1])


# gradients -------------------------------------------------------------------

def _views(seed, n=3, d=4, count=3):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(n, d, generator=g, dtype=torch.float64) for _ in range(count)]


LOSS_CASES = {
    "rec": (lambda h, table: rec_loss(h, table, torch.tensor([2, 4, 5])), lambda s: [
        _views(s)[0], torch.randn(7, 4, generator=torch.Generator().manual_seed(s), dtype=torch.float64)]),
    "cl": (cl_loss, lambda s: _views(s, count=2)),
    "sl": (lambda a, b: sl_loss(a, b, tau=0.7), lambda s: _views(s, count=2)),
    "cl+": (cl_plus_loss, lambda s: _views(s, count=2)),
    "cl-": (cl_minus_loss, lambda s: _views(s, count=3)),
    "sl+": (lambda a, b: sl_plus_loss(a, b, tau=1.3), lambda s: _views(s, count=2)),
}


@pytest.mark.parametrize("name", list(LOSS_CASES))
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(name, seed):
    fn, make = LOSS_CASES[name]
    inputs = make(seed)
    leaves = [x.clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*leaves), leaves)
    numeric = central_difference(fn, [x.clone() for x in inputs])
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < 1e-4


# composite -------------------------------------------------------------------

def test_active_terms_per_mode():
    cfg = LossConfig(lam=0.3, lam_cl_plus=0.1, lam_cl_minus=0.2, lam_sl_plus=0.4)
    assert active_terms("cl4srec", cfg, False) == {"cl": 0.3}
    assert active_terms("duorec", cfg, True) == {"sl": 0.3}
    assert active_terms("full", cfg, False) == {"cl": 0.3, "sl": 0.3}
    assert active_terms("full", cfg, True) == {"cl+": 0.1, "cl-": 0.2, "sl+": 0.4}
    assert active_terms("ssl", cfg, True) == {"cl+": 0.1, "cl-": 0.2}
    assert active_terms("sl", cfg, True) == {"sl+": 0.4}
    assert active_terms("full", cfg, True, ("cl+", "sl+")) == {"cl+": 0.1, "sl+": 0.4}
    assert active_terms("ssl", LossConfig(lam_cl_minus=0.0), True) == {"cl+": 0.1}


def test_composite_all_zero_is_rec():
    zero = LossConfig(lam=0, lam_cl_plus=0, lam_cl_minus=0, lam_sl_plus=0)
    comp = {"rec": torch.tensor(1.5), "cl": torch.tensor(9.0), "sl": torch.tensor(9.0),
            "cl+": torch.tensor(9.0), "cl-": torch.tensor(9.0), "sl+": torch.tensor(9.0)}
    for mode in ("warmup", "cl4srec", "duorec", "ssl", "sl", "full"):
        for guided in (False, True):
            assert composite(comp, active_terms(mode, zero, guided)).item() == 1.5


def test_composite_full_term_by_term():
    cfg = LossConfig(lam_cl_plus=0.2, lam_cl_minus=0.3, lam_sl_plus=0.5)
    h, p1, p2, neg, rt = _views(7, n=2, count=5)
    table = torch.randn(6, 4, generator=torch.Generator().manual_seed(8), dtype=torch.float64)
    targets = torch.tensor([3, 5])
    comp = {"rec": rec_loss(h, table, targets), "cl+": cl_plus_loss(p1, p2),
            "cl-": cl_minus_loss(neg, p1, p2), "sl+": sl_plus_loss(h, rt)}
    expected = comp["rec"] + 0.2 * comp["cl+"] + 0.3 * comp["cl-"] + 0.5 * comp["sl+"]
    assert composite(comp, active_terms("full", cfg, True)).item() == pytest.approx(expected.item(), abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1)
