from __future__ import annotations

import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tapinn import autodiff as ad
from tapinn import losses as L
from tapinn.duffing import DuffingParams
from tapinn.errors import LengthMismatchError, NonFiniteError

P12 = DuffingParams(delta=0.3, alpha=-1.0, beta=1.0, omega=1.2)


def brute_triplet(emb: np.ndarray, labels, margin: float, count: bool = False):
    """Exhaustive enumeration oracle over ordered (a, p, n)."""
    hinges = []
    for a, p, n in itertools.product(range(len(labels)), repeat=3):
        if a != p and labels[a] == labels[p] and labels[n] != labels[a]:
            dap = math.dist(emb[a], emb[p])
            dan = math.dist(emb[a], emb[n])
            hinges.append(max(0.0, dap - dan + margin))
    mean = sum(hinges) / len(hinges) if hinges else 0.0
    return (mean, len(hinges)) if count else mean


class TestDataLoss:
    def test_identical(self):
        assert float(L.data_loss(np.ones(5), np.ones(5))) == 0.0

    def test_unit(self):
        assert float(L.data_loss(np.array([1.0, 1.0]), np.zeros(2))) == 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 40)), rng.normal(size=(3, 40))
        assert float(L.data_loss(a, b)) == pytest.approx(np.mean((a - b) ** 2), rel=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            L.data_loss(np.ones(3), np.ones(4))


class TestPhysicsResidual:
    def test_manufactured_solution(self):
        # x = sin(t); choose forcing so that the residual vanishes identically
        t = np.linspace(0, 10, 101)
        p = DuffingParams(delta=0.3, alpha=-1.0, beta=1.0, omega=1.0)
        x, xd, xdd = np.sin(t), np.cos(t), -np.sin(t)
        g = xdd + p.delta * xd + p.alpha * x + p.beta * x**3
        x_, xd_, xdd_ = ad.time_derivatives(lambda s, z: ad.sin(s), None, t)
        r = L.ode_residual(x_, xd_, xdd_, t, 0.0, p) - g
        assert np.mean(np.asarray(r) ** 2) < 1e-10

    def test_cosine_stub_hand_value(self):
        loss = L.physics_residual(lambda s, z: ad.cos(s), None, 0.5, np.array([0.0]), P12)
        assert float(loss) == pytest.approx(2.25, abs=1e-14)

    def test_constant_at_equilibrium(self):
        loss = L.physics_residual(lambda s, z: s * 0.0 + 1.0, None, 0.0,
                                  np.array([0.0, 1.3, 7.0]), P12)
        assert float(loss) == 0.0

    def test_empty_points(self):
        with pytest.raises(ValueError):
            L.physics_residual(lambda s, z: s, None, 0.5, np.array([]), P12)


class TestTriplet:
    def test_satisfied_margin_gives_zero(self):
        emb = np.array([[0.0, 0.0], [0.1, 0.0], [0.5, 0.0]])
        # only anchor 0 has d(a,p)=0.1, d(a,n)=0.5; anchor 1 has d=0.1, 0.4
        assert float(L.triplet_loss(emb, [1, 1, 2], 0.2)) == 0.0

    def test_coincident_gives_margin(self):
        emb = np.zeros((4, 3))
        assert float(L.triplet_loss(emb, [0.3, 0.3, 0.8, 0.8], 0.2)) == pytest.approx(0.2, abs=1e-15)

    def test_four_items_two_labels_has_eight_triplets(self):
        a, p, n = L.triplet_indices(np.array([0, 0, 1, 1]))
        assert len(a) == 8

    def test_brute_force_example(self):
        emb = np.random.default_rng(0).normal(size=(4, 3))
        labels = [0.3, 0.3, 0.8, 0.8]
        assert float(L.triplet_loss(emb, labels, 0.2)) == pytest.approx(
            brute_triplet(emb, labels, 0.2), rel=1e-13)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 8).flatmap(lambda b: st.tuples(
        hnp.arrays(np.float64, (b, 3), elements=st.floats(-2, 2)),
        st.lists(st.sampled_from([0.3, 0.5, 0.8]), min_size=b, max_size=b))),
        st.floats(0.05, 1.0))
    def test_brute_force_equivalence(self, data, margin):
        emb, labels = data
        want, n_triplets = brute_triplet(emb, labels, margin, count=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            got = float(ad.value_of(L.triplet_loss(emb, labels, margin)))
        degenerate = any(issubclass(w.category, L.DegenerateBatchWarning) for w in caught)
        assert degenerate == (n_triplets == 0)
        assert got >= 0.0
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_degenerate_single_label(self):
        with pytest.warns(L.DegenerateBatchWarning):
            assert L.triplet_loss(np.zeros((3, 2)), [0.5, 0.5, 0.5]) == 0.0

    def test_too_few_items(self):
        with pytest.raises(ValueError):
            L.triplet_loss(np.zeros((1, 2)), [0.5])

    def test_bad_margin(self):
        with pytest.raises(ValueError):
            L.triplet_loss(np.zeros((2, 2)), [0.3, 0.8], margin=0.0)

    def test_gradient_finite_at_coincident_points(self):
        _, g = ad.grad(lambda q: L.triplet_loss(q["z"], [0, 0, 1, 1]), {"z": np.zeros((4, 2))})
        assert np.all(np.isfinite(g["z"]))


class TestSobolev:
    def test_perfect(self):
        x, v = np.ones(4), np.arange(4.0)
        assert float(L.sobolev_loss((x, v), (x, v))) == 0.0

    def test_derivative_off_by_one(self):
        x, v = np.ones(4), np.arange(4.0)
        assert float(L.sobolev_loss((x, v + 1.0), (x, v))) == 1.0

    def test_sum_of_two_mse(self):
        rng = np.random.default_rng(1)
        a, b, c, d = rng.normal(size=(4, 30))
        got = float(L.sobolev_loss((a, b), (c, d)))
        assert got == pytest.approx(float(L.data_loss(a, c)) + float(L.data_loss(b, d)), rel=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            L.sobolev_loss((np.ones(3), np.ones(3)), (np.ones(3), np.ones(2)))


class TestTotal:
    def test_weighted_sum(self):
        out = L.total_loss(1.0, 2.0, 3.0, alpha=1.0, beta=0.1)
        assert out.total == pytest.approx(3.3, abs=1e-15)
        assert (out.data, out.physics, out.metric) == (1.0, 2.0, 3.0)

    def test_beta_zero_ignores_metric(self):
        assert L.total_loss(1.0, 2.0, 3.0, 1.0, 0.0).total == L.total_loss(1.0, 2.0, 99.0, 1.0, 0.0).total

    def test_alpha_beta_zero_is_data(self):
        assert L.total_loss(1.5, 2.0, 3.0, 0.0, 0.0).total == 1.5

    def test_nonfinite(self):
        with pytest.raises(NonFiniteError):
            L.total_loss(1.0, math.nan, 0.0)

    @settings(max_examples=50)
    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
    def test_nonnegative_parts_give_nonnegative_total(self, d, p, m):
        assert L.total_loss(d, p, m).total >= 0.0
