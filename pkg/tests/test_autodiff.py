from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tapinn import autodiff as ad
from tapinn import neural as nn
from tapinn.autodiff import DualScalar
from tapinn.errors import NonFiniteError


def central_fd(fn, params: dict, h: float = 1e-5) -> dict:
    """Independent oracle: central differences of a plain-numpy scalar function."""
    out = {}
    for k, a in params.items():
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            plus = {n: v.copy() for n, v in params.items()}
            minus = {n: v.copy() for n, v in params.items()}
            plus[k][i] += h
            minus[k][i] -= h
            g[i] = (fn(plus) - fn(minus)) / (2 * h)
        out[k] = g
    return out


def assert_rel_close(got: dict, want: dict, rtol: float, floor: float = 1e-8):
    for k in want:
        err = np.abs(got[k] - want[k]) / np.maximum(np.abs(want[k]), floor)
        # entries whose true gradient is near zero are judged on absolute error
        small = np.abs(want[k]) < floor
        assert np.all((err < rtol) | (small & (np.abs(got[k] - want[k]) < 1e-9))), k


class TestReverseMode:
    def test_quadratic(self):
        loss, g = ad.grad(lambda q: ad.sum(ad.power(q["p"], 2)), {"p": np.array([1.0, 2.0, 3.0])})
        assert loss == 14.0
        np.testing.assert_array_equal(g["p"], [2.0, 4.0, 6.0])

    def test_constant_loss_zero_grad(self):
        loss, g = ad.grad(lambda q: 3.5, {"p": np.ones(4)})
        assert loss == 3.5
        np.testing.assert_array_equal(g["p"], np.zeros(4))

    def test_unused_param_zero_grad(self):
        _, g = ad.grad(lambda q: ad.sum(q["a"]), {"a": np.ones(2), "b": np.ones(3)})
        np.testing.assert_array_equal(g["b"], np.zeros(3))

    def test_wrt_subset(self):
        params = {"a": np.ones(2), "b": np.full(2, 2.0)}
        _, g = ad.grad(lambda q: ad.sum(q["a"] * q["b"]), params, wrt=["b"])
        assert list(g) == ["b"]
        np.testing.assert_array_equal(g["b"], [1.0, 1.0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_raises(self):
        with pytest.raises(NonFiniteError):
            ad.grad(lambda q: ad.sum(q["a"] / 0.0), {"a": np.ones(2)})

    def test_mlp_matches_fd(self):
        rng = np.random.default_rng(0)
        params = {"w1": rng.normal(size=(3, 5)), "b1": rng.normal(size=5),
                  "w2": rng.normal(size=(5, 2)), "b2": rng.normal(size=2)}
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(4, 2))

        def f(q):
            h = ad.tanh(ad.linear(x, q["w1"], q["b1"]))
            out = ad.sigmoid(ad.linear(h, q["w2"], q["b2"]))
            return ad.mean(ad.power(out - y, 2)) + ad.sum(ad.cos(q["b1"]) * ad.sin(q["b1"]))

        def f_np(q):
            h = np.tanh(x @ q["w1"] + q["b1"])
            out = 1 / (1 + np.exp(-(h @ q["w2"] + q["b2"])))
            return np.mean((out - y) ** 2) + np.sum(np.cos(q["b1"]) * np.sin(q["b1"]))

        loss, g = ad.grad(f, params)
        assert loss == pytest.approx(f_np(params), rel=1e-14)
        assert_rel_close(g, central_fd(f_np, params), 1e-5)

    def test_structural_ops_match_fd(self):
        rng = np.random.default_rng(1)
        params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}

        def f(q):
            c = ad.concat([q["a"], ad.reshape(q["b"], (1, 4))], axis=0)
            picked = ad.take(c, (np.array([0, 3, 3]), np.array([1, 2, 2])))
            d = ad.sqrt(ad.sum(ad.power(c, 2), axis=1) + 1.0)
            return ad.sum(picked * 2.0) + ad.mean(d) + ad.sum(ad.relu(c[1:]) / (1.0 + c[:-1] ** 2))

        def f_np(q):
            c = np.concatenate([q["a"], q["b"][None]], 0)
            picked = c[[0, 3, 3], [1, 2, 2]]
            d = np.sqrt(np.sum(c**2, 1) + 1.0)
            return np.sum(picked * 2) + d.mean() + np.sum(np.maximum(c[1:], 0) / (1 + c[:-1] ** 2))

        _, g = ad.grad(f, params)
        assert_rel_close(g, central_fd(f_np, params), 1e-5)

    def test_lstm_encoder_matches_fd(self):
        dims = {"obs_dim": 2, "lstm_hidden": 3, "latent_dim": 2, "gen_hidden": [4], "n_out": 1}
        p = nn.init_params("tapinn", 0, dims)
        enc = {k: v for k, v in p.arrays.items() if k.startswith("encoder.")}
        window = np.random.default_rng(2).normal(size=(2, 5, 2))

        def f(q):
            return ad.sum(ad.power(nn.encoder_forward(window, q), 2))

        _, g = ad.grad(f, enc)
        assert_rel_close(g, central_fd(lambda q: float(ad.value_of(f(q))), enc), 1e-5)


def poly_jet(t):
    return t * t


class TestJets:
    def test_identity(self):
        x, xd, xdd = ad.time_derivatives(lambda t, z: t, None, np.array([0.3, 2.0]))
        np.testing.assert_array_equal(x, [0.3, 2.0])
        np.testing.assert_array_equal(xd, [1.0, 1.0])
        np.testing.assert_array_equal(xdd, [0.0, 0.0])

    def test_square(self):
        t = np.array([-1.5, 0.0, 3.0])
        x, xd, xdd = ad.time_derivatives(lambda t, z: poly_jet(t), None, t)
        np.testing.assert_array_equal(x, t**2)
        np.testing.assert_array_equal(xd, 2 * t)
        np.testing.assert_array_equal(xdd, [2.0, 2.0, 2.0])

    @pytest.mark.parametrize("name,fn,d1,d2", [
        ("tanh", ad.tanh, lambda t: 1 - np.tanh(t) ** 2,
         lambda t: -2 * np.tanh(t) * (1 - np.tanh(t) ** 2)),
        ("sigmoid", ad.sigmoid, lambda t: np.exp(-t) / (1 + np.exp(-t)) ** 2,
         lambda t: np.exp(-t) * (np.exp(-t) - 1) / (1 + np.exp(-t)) ** 3),
        ("cube", lambda u: u ** 3, lambda t: 3 * t**2, lambda t: 6 * t),
        ("cos", ad.cos, lambda t: -np.sin(t), lambda t: -np.cos(t)),
        ("sin", ad.sin, np.cos, lambda t: -np.sin(t)),
    ])
    def test_unit_functions(self, name, fn, d1, d2):
        t = np.linspace(-2.0, 2.0, 17)
        _, xd, xdd = ad.time_derivatives(lambda s, z: fn(s), None, t)
        np.testing.assert_allclose(xd, d1(t), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(xdd, d2(t), rtol=1e-12, atol=1e-14)

    def test_composition_sum_product(self):
        # f = tanh(t^2) * cos(t) + 3t
        t = np.linspace(-1.5, 1.5, 11)
        _, xd, xdd = ad.time_derivatives(lambda s, z: ad.tanh(s * s) * ad.cos(s) + 3.0 * s, None, t)
        th = np.tanh(t**2)
        sech2 = 1 - th**2
        u1 = 2 * t * sech2
        u2 = 2 * sech2 + (2 * t) ** 2 * (-2 * th * sech2)
        want1 = u1 * np.cos(t) - th * np.sin(t) + 3
        want2 = u2 * np.cos(t) - 2 * u1 * np.sin(t) - th * np.cos(t)
        np.testing.assert_allclose(xd, want1, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(xdd, want2, rtol=1e-12, atol=1e-13)

    def test_division(self):
        t = np.array([0.5, 1.0, 2.0])
        _, xd, xdd = ad.time_derivatives(lambda s, z: 1.0 / (1.0 + s * s), None, t)
        np.testing.assert_allclose(xd, -2 * t / (1 + t**2) ** 2, rtol=1e-12)
        np.testing.assert_allclose(xdd, (6 * t**2 - 2) / (1 + t**2) ** 3, rtol=1e-12)

    def test_generator_matches_fd(self):
        p = nn.init_params("tapinn", 4)
        rng = np.random.default_rng(5)
        z = rng.normal(size=p.dims["latent_dim"])
        t = rng.uniform(0.5, 9.5, size=6)
        g = lambda tt, zz: nn.generator_forward(tt, zz, p.arrays)
        x, xd, xdd = ad.time_derivatives(g, z, t)
        h = 1e-4
        f = lambda tt: np.asarray(g(tt, z))
        fd1 = (f(t + h) - f(t - h)) / (2 * h)
        fd2 = (f(t + h) - 2 * f(t) + f(t - h)) / h**2
        np.testing.assert_allclose(x, f(t), rtol=1e-14)
        np.testing.assert_allclose(xd, fd1, rtol=1e-4)
        np.testing.assert_allclose(xdd, fd2, rtol=1e-4, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
    def test_linearity(self, a, b, t0):
        t = np.array([t0])
        f = lambda s: ad.tanh(s) * s
        g = lambda s: ad.cos(s * 2.0)
        comb = ad.time_derivatives(lambda s, z: a * f(s) + b * g(s), None, t)
        fs = ad.time_derivatives(lambda s, z: f(s), None, t)
        gs = ad.time_derivatives(lambda s, z: g(s), None, t)
        for c, fi, gi in zip(comb, fs, gs):
            np.testing.assert_allclose(c, a * fi + b * gi, rtol=1e-12, atol=1e-12)


class TestForwardOverReverse:
    def test_gradient_through_second_derivative(self):
        """d/dθ of mean(ẍ²) on a tiny generator against central differences."""
        dims = {"obs_dim": 2, "lstm_hidden": 2, "latent_dim": 2, "gen_hidden": [5, 4], "n_out": 1}
        p = nn.init_params("tapinn", 7, dims)
        gen = {k: v for k, v in p.arrays.items() if k.startswith("generator.")}
        z = np.array([[0.3, -0.4], [1.1, 0.2]])
        t = np.array([[0.5, 2.5, 7.0], [1.0, 4.0, 9.0]])

        def f(q):
            x, xd, xdd = ad.time_derivatives(lambda s, zz: nn.generator_forward(s, zz, q), z, t)
            return ad.mean(ad.power(xdd + 0.3 * xd - x, 2))

        _, g = ad.grad(f, gen)
        fd = central_fd(lambda q: float(ad.value_of(f(q))), gen)
        assert_rel_close(g, fd, 1e-4, floor=1e-6)

    def test_mixed_var_and_jet_arithmetic(self):
        params = {"w": np.array([2.0])}

        def f(q):
            jet = DualScalar.seed(np.array([1.5]))
            y = q["w"] * jet * jet
            return ad.sum(y.d2)

        loss, g = ad.grad(f, params)
        assert loss == 4.0
        np.testing.assert_allclose(g["w"], [2.0])
