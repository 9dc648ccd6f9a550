"""Single-layer GRU cell and sequence encoder.

The same cell is instantiated four times across the model: over frames,
over words, over conditioned clip vectors and over conditioned sentence
vectors. Update rule (standard update/reset-gate GRU):

    z = sigma(W_z x + U_z h + b_z)
    r = sigma(W_r x + U_r h + b_r)
    h~ = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * h~
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = ["GruParams", "init_gru", "gru_step", "gru_encode"]


@dataclass
class GruParams:
    input_dim: int
    hidden_dim: int
    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    def named_parameters(self, prefix):
        return {
            f"{prefix}.{field}": getattr(self, field)
            for field in ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")
        }


def _glorot(rng, rows, cols):
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_gru(input_dim, hidden_dim, rng, prefix=""):
    """Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    def w():
        return Tensor(_glorot(rng, hidden_dim, input_dim))

    def u():
        return Tensor(_glorot(rng, hidden_dim, hidden_dim))

    def b():
        return Tensor(np.zeros((hidden_dim, 1)))

    params = GruParams(input_dim, hidden_dim, w(), w(), w(), u(), u(), u(), b(), b(), b())
    for name, t in params.named_parameters(prefix or "gru").items():
        t.name = name
    return params


def gru_step(params, x, h):
    if x.shape != (params.input_dim, 1):
        raise dc.ShapeMismatchError("gru_step.input", x.shape, (params.input_dim, 1))
    if h.shape != (params.hidden_dim, 1):
        raise dc.ShapeMismatchError("gru_step.state", h.shape, (params.hidden_dim, 1))
    z = dc.sigmoid(params.w_z @ x + params.u_z @ h + params.b_z)
    r = dc.sigmoid(params.w_r @ x + params.u_r @ h + params.b_r)
    h_cand = dc.tanh(params.w_h @ x + params.u_h @ (r * h) + params.b_h)
    one_minus_z = dc.add_scalar(dc.neg(z), 1.0)
    return one_minus_z * h + z * h_cand


def gru_encode(params, seq, h0=None):
    """All hidden states of a unidirectional pass; h0 defaults to zero."""
    seq = list(seq)
    if not seq:
        raise ValueError("gru_encode: empty sequence")
    h = h0 if h0 is not None else dc.zeros(params.hidden_dim)
    states = []
    for x in seq:
        h = gru_step(params, x, h)
        states.append(h)
    return states
