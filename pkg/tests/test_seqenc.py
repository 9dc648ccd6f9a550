"""GRU cell and encoder against a scalar re-implementation."""

import math

import numpy as np
import pytest

from vtmatch import diffcore as dc
from vtmatch import seqenc
from vtmatch.diffcore import Tensor


def zero_gru(input_dim, hidden_dim):
    rng = np.random.default_rng(0)
    p = seqenc.init_gru(input_dim, hidden_dim, rng)
    for t in p.named_parameters("g").values():
        t.value[...] = 0.0
    return p


def random_gru(input_dim, hidden_dim, seed):
    rng = np.random.default_rng(seed)
    p = seqenc.init_gru(input_dim, hidden_dim, rng)
    for t in (p.b_z, p.b_r, p.b_h):
        t.value[...] = rng.normal(size=t.value.shape)
    return p


def scalar_gru_step(p, x, h):
    """Element-by-element evaluation of the three gate equations."""
    hd, idim = p.hidden_dim, p.input_dim
    named = {k.split(".")[1]: v.value for k, v in p.named_parameters("g").items()}

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    out = np.zeros((hd, 1))
    z = np.zeros(hd)
    r = np.zeros(hd)
    for i in range(hd):
        az = named["b_z"][i, 0] + sum(named["w_z"][i, j] * x[j, 0] for j in range(idim))
        ar = named["b_r"][i, 0] + sum(named["w_r"][i, j] * x[j, 0] for j in range(idim))
        for j in range(hd):
            az += named["u_z"][i, j] * h[j, 0]
            ar += named["u_r"][i, j] * h[j, 0]
        z[i], r[i] = sig(az), sig(ar)
    for i in range(hd):
        ah = named["b_h"][i, 0] + sum(named["w_h"][i, j] * x[j, 0] for j in range(idim))
        for j in range(hd):
            ah += named["u_h"][i, j] * r[j] * h[j, 0]
        cand = math.tanh(ah)
        out[i, 0] = (1.0 - z[i]) * h[i, 0] + z[i] * cand
    return out


class TestGruStep:
    def test_zero_weights_halve_the_state(self):
        p = zero_gru(3, 4)
        h = Tensor(np.arange(1.0, 5.0).reshape(4, 1))
        out = seqenc.gru_step(p, dc.zeros(3), h)
        np.testing.assert_allclose(out.value, 0.5 * h.value)

    def test_all_zero_inputs_stay_zero(self):
        p = zero_gru(3, 4)
        out = seqenc.gru_step(p, dc.zeros(3), dc.zeros(4))
        np.testing.assert_array_equal(out.value, np.zeros((4, 1)))

    def test_matches_scalar_oracle(self):
        p = random_gru(2, 2, seed=5)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 1))
        h = rng.normal(size=(2, 1))
        out = seqenc.gru_step(p, Tensor(x), Tensor(h))
        np.testing.assert_allclose(out.value, scalar_gru_step(p, x, h), atol=1e-12)

    def test_shape_mismatch(self):
        p = zero_gru(3, 4)
        with pytest.raises(dc.ShapeMismatchError):
            seqenc.gru_step(p, dc.zeros(4), dc.zeros(4))
        with pytest.raises(dc.ShapeMismatchError):
            seqenc.gru_step(p, dc.zeros(3), dc.zeros(3))


class TestGruEncode:
    def test_length_one_equals_single_step(self):
        p = random_gru(3, 4, seed=8)
        x = Tensor(np.random.default_rng(9).normal(size=(3, 1)))
        h0 = dc.zeros(4)
        states = seqenc.gru_encode(p, [x], h0)
        assert len(states) == 1
        np.testing.assert_array_equal(
            states[0].value, seqenc.gru_step(p, x, h0).value
        )

    def test_zero_weights_zero_state(self):
        p = zero_gru(2, 3)
        seq = [dc.zeros(2) for _ in range(4)]
        for s in seqenc.gru_encode(p, seq):
            np.testing.assert_array_equal(s.value, np.zeros((3, 1)))

    def test_equals_chained_steps(self):
        p = random_gru(3, 4, seed=10)
        rng = np.random.default_rng(11)
        seq = [Tensor(rng.normal(size=(3, 1))) for _ in range(3)]
        states = seqenc.gru_encode(p, seq)
        h = dc.zeros(4)
        for x, s in zip(seq, states):
            h = seqenc.gru_step(p, x, h)
            np.testing.assert_array_equal(s.value, h.value)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            seqenc.gru_encode(zero_gru(2, 2), [])

    def test_prefix_property(self):
        p = random_gru(3, 4, seed=12)
        rng = np.random.default_rng(13)
        seq = [Tensor(rng.normal(size=(3, 1))) for _ in range(6)]
        full = seqenc.gru_encode(p, seq)
        for t in range(1, 7):
            prefix = seqenc.gru_encode(p, seq[:t])
            for a, b in zip(prefix, full[:t]):
                np.testing.assert_array_equal(a.value, b.value)


class TestGradients:
    @pytest.mark.parametrize("length", [1, 4, 8])
    def test_final_state_gradcheck(self, length):
        p = random_gru(3, 4, seed=20 + length)
        rng = np.random.default_rng(30 + length)
        seq_values = [rng.normal(size=(3, 1)) for _ in range(length)]
        w = dc.constant(rng.normal(size=(4, 1)))
        named = p.named_parameters("g")

        def loss_fn(_):
            states = seqenc.gru_encode(p, [Tensor(v) for v in seq_values])
            return dc.sum_all(states[-1] * w)

        assert dc.grad_check(loss_fn, named, eps=1e-5) < 1e-4


class TestInit:
    def test_glorot_bounds_and_zero_biases(self):
        rng = np.random.default_rng(3)
        p = seqenc.init_gru(10, 20, rng, "enc")
        bound_w = np.sqrt(6.0 / 30)
        assert np.abs(p.w_z.value).max() <= bound_w
        np.testing.assert_array_equal(p.b_h.value, np.zeros((20, 1)))
        assert p.w_z.name == "enc.w_z"

    def test_seed_determinism(self):
        a = seqenc.init_gru(4, 5, np.random.default_rng(42))
        b = seqenc.init_gru(4, 5, np.random.default_rng(42))
        np.testing.assert_array_equal(a.w_h.value, b.w_h.value)
