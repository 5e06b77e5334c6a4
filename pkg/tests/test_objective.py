import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetprune.autograd import Tensor
from budgetprune.model import DomainMaskSet
from budgetprune.objective import (
    BudgetLossState,
    SharingLossConfig,
    active_fraction,
    budget_loss,
    cross_entropy,
    hard_intersection_fraction,
    intersection_size,
    sharing_loss,
    total_loss,
    update_multiplier,
)


def mask(values, name="d"):
    """A mask set whose switches are +/-0.5 so binarization at 0 gives ``values``."""
    return DomainMaskSet(name, [Tensor(np.where(np.asarray(v) > 0, 0.5, -0.5), requires_grad=True) for v in values])


def test_cross_entropy_cases():
    assert cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7))
    assert cross_entropy(Tensor([[500.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)


def test_budget_loss_examples():
    ms = mask([[1, 1, 1, 0, 0], [1, 1, 1, 0, 0]])  # theta = 0.6
    assert budget_loss(ms, BudgetLossState(0.5, {"d": 2.0})).item() == pytest.approx(0.2)
    assert budget_loss(ms, BudgetLossState(0.6, {"d": 2.0})).item() == 0.0
    assert budget_loss(ms, BudgetLossState(0.5, {"d": 0.0})).item() == 0.0
    assert budget_loss(ms, BudgetLossState(0.9, {"d": 5.0})).item() == 0.0


def test_budget_loss_gradient_reaches_switches_inside_clip():
    ms = mask([[1, 1, 1, 0, 0, 1]])
    budget_loss(ms, BudgetLossState(0.5, {"d": 3.0})).backward()
    assert np.allclose(ms.switches[0].grad, 3.0 / 6)


def test_update_multiplier_examples():
    s = BudgetLossState(0.5, {"d": 1.0}, lr=0.1)
    assert update_multiplier(s, "d", 0.7) == pytest.approx(1.02)
    assert update_multiplier(s, "d", 0.5) == pytest.approx(1.02)
    z = BudgetLossState(0.5, {"d": 0.0}, lr=0.1)
    assert update_multiplier(z, "d", 0.1) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30), st.floats(0.05, 1.0))
def test_multiplier_stays_non_negative_and_tracks_violation(fracs, beta):
    s = BudgetLossState(beta, {"d": 0.0}, lr=0.05)
    prev = 0.0
    for f in fracs:
        lam = update_multiplier(s, "d", f)
        assert lam >= 0.0
        if f > beta + 1e-9:
            assert lam > prev
        elif f <= beta:
            assert lam <= prev
        prev = lam


def test_beta_is_immutable_and_lambda_non_negative():
    s = BudgetLossState(0.5)
    with pytest.raises(AttributeError):
        s.beta = 0.3
    with pytest.raises(ValueError):
        BudgetLossState(0.5, {"d": -1.0})


def test_sharing_loss_two_domain_example():
    a, b = mask([[1, 1, 0, 0]], "a"), mask([[1, 0, 1, 0]], "b")
    assert intersection_size([a, b]).item() == 1.0
    assert sharing_loss([a, b], SharingLossConfig(1.0, 4), 0.5).item() == pytest.approx(0.5)


def test_sharing_loss_single_domain_at_budget_is_zero(caplog):
    a = mask([[1, 1, 0, 0]])
    assert sharing_loss([a], SharingLossConfig(1.0, 4), 0.5).item() == 0.0
    assert "degenerate" in caplog.text


def test_sharing_loss_clamps_large_intersections():
    a, b = mask([[1, 1, 1, 0]], "a"), mask([[1, 1, 1, 1]], "b")
    assert sharing_loss([a, b], SharingLossConfig(2.0, 4), 0.5).item() == 0.0


def test_sharing_gradient_reaches_every_domain():
    a, b = mask([[1, 1, 0, 0]], "a"), mask([[1, 0, 1, 0]], "b")
    sharing_loss([a, b], SharingLossConfig(1.0, 4), 0.5).backward()
    # d loss / d s_a[c] = -(1/(M beta)) * b[c]
    assert np.allclose(a.switches[0].grad, [-0.5, 0.0, -0.5, 0.0])
    assert np.allclose(b.switches[0].grad, [-0.5, -0.5, 0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0), st.floats(0.0, 3.0))
def test_losses_non_negative_and_sharing_monotone(seed, beta, weight):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(2, 12))
    bits = gen.integers(0, 2, size=(3, n))
    cfg = SharingLossConfig(weight, n)
    losses = []
    for k in range(n + 1):
        # force the first k positions on in every domain: intersection grows with k
        b = bits.copy()
        b[:, :k] = 1
        sets = [mask([row], f"d{i}") for i, row in enumerate(b)]
        losses.append(sharing_loss(sets, cfg, beta).item())
        assert budget_loss(sets[0], BudgetLossState(beta, {"d0": weight})).item() >= 0
    assert all(x >= 0 for x in losses)
    assert all(later <= earlier + 1e-15 for earlier, later in zip(losses, losses[1:]))


def test_identical_masks_at_budget():
    n, beta = 10, 0.35
    k = math.ceil(n * beta)
    row = [1] * k + [0] * (n - k)
    sets = [mask([row], f"d{i}") for i in range(3)]
    lps = sharing_loss(sets, SharingLossConfig(1.0, n), beta).item()
    assert lps <= 1.0 * (1 - math.floor(n * beta) / (n * beta)) + 1e-12
    assert active_fraction(sets[0]).item() <= beta + 1 / n
    assert hard_intersection_fraction(sets) == k / n


def test_total_loss_is_a_sum():
    assert total_loss(Tensor(1.0), Tensor(0.2), Tensor(0.5)).item() == pytest.approx(1.7)
    ce = Tensor(0.8)
    assert total_loss(ce, Tensor(0.0), Tensor(0.0)).item() == ce.item()
