"""Recurrent cells, linear layers and input normalization."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, ModelFault
from . import autograd as ag
from .autograd import Tensor

CELL_KINDS = ("rnn", "gru", "lstm")


class Module:
    def parameters(self):
        """Ordered ``(name, Tensor)`` pairs."""
        out = []
        for key, val in self.__dict__.items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", p) for n, p in val.parameters())
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{key}.{i}.{n}", p) for n, p in item.parameters())
        return out

    def check_finite(self):
        for name, p in self.parameters():
            if not np.all(np.isfinite(p.data)):
                raise ModelFault(f"non-finite values in weight tensor {name!r}")


def _param(data, name):
    return Tensor(np.asarray(data, dtype=float), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        bound = 1.0 / np.sqrt(n_in)
        self.W = _param(rng.uniform(-bound, bound, (n_in, n_out)), "W")
        self.b = _param(rng.uniform(-bound, bound, n_out), "b")

    def __call__(self, x):
        return x @ self.W + self.b


class RecurrentCell(Module):
    """One recurrent layer. ``state`` is a tuple of tensors ``[B, H]``."""

    gates = 1

    def __init__(self, n_in, n_hidden, rng):
        self.n_in = n_in
        self.n_hidden = n_hidden
        bound = 1.0 / np.sqrt(n_hidden)
        g = self.gates * n_hidden
        self.Wx = _param(rng.uniform(-bound, bound, (n_in, g)), "Wx")
        self.Wh = _param(rng.uniform(-bound, bound, (n_hidden, g)), "Wh")
        self.bx = _param(rng.uniform(-bound, bound, g), "bx")
        self.bh = _param(rng.uniform(-bound, bound, g), "bh")

    def zero_state(self, batch):
        return (Tensor(np.zeros((batch, self.n_hidden))),)

    def _check(self, x, state):
        if x.shape[-1] != self.n_in:
            raise ContractError(f"cell expects {self.n_in} inputs, got {x.shape[-1]}")
        if any(s.shape[-1] != self.n_hidden for s in state):
            raise ContractError("hidden state width mismatch")


class RNNCell(RecurrentCell):
    gates = 1

    def __call__(self, x, state):
        (h,) = state
        h = ag.tanh(x @ self.Wx + self.bx + h @ self.Wh + self.bh)
        return h, (h,)


class GRUCell(RecurrentCell):
    """Gate order in the weight columns: reset, update, candidate."""

    gates = 3

    def __call__(self, x, state):
        (h,) = state
        H = self.n_hidden
        gx = x @ self.Wx + self.bx
        gh = h @ self.Wh + self.bh
        r = ag.sigmoid(gx[..., :H] + gh[..., :H])
        z = ag.sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H])
        n = ag.tanh(gx[..., 2 * H :] + r * gh[..., 2 * H :])
        h = (1.0 - z) * n + z * h
        return h, (h,)


class LSTMCell(RecurrentCell):
    """Gate order in the weight columns: input, forget, cell, output."""

    gates = 4

    def zero_state(self, batch):
        z = np.zeros((batch, self.n_hidden))
        return (Tensor(z), Tensor(z.copy()))

    def __call__(self, x, state):
        h, c = state
        H = self.n_hidden
        g = x @ self.Wx + self.bx + h @ self.Wh + self.bh
        i = ag.sigmoid(g[..., :H])
        f = ag.sigmoid(g[..., H : 2 * H])
        cand = ag.tanh(g[..., 2 * H : 3 * H])
        o = ag.sigmoid(g[..., 3 * H :])
        c = f * c + i * cand
        h = o * ag.tanh(c)
        return h, (h, c)


def make_cell(kind, n_in, n_hidden, rng):
    try:
        cls = {"rnn": RNNCell, "gru": GRUCell, "lstm": LSTMCell}[kind]
    except KeyError:
        raise ContractError(f"unknown cell kind {kind!r}") from None
    return cls(n_in, n_hidden, rng)


def cell_forward(cell, x, state=None):
    """Advance ``cell`` one step; returns ``(output, new_state)``.

    Raises :class:`ModelFault` naming the offending tensor if any weight is
    non-finite.
    """
    cell.check_finite()
    x = ag.as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if state is None:
        state = cell.zero_state(x.shape[0])
    state = tuple(ag.as_tensor(s) for s in state)
    cell._check(x, state)
    return cell(x, state)


class Normalizer:
    """Fixed per-feature standardization fitted on the training split.

    Stands in for batch normalization on the recurrent inputs.
    """

    def __init__(self, n_features):
        self.mean = np.zeros(n_features)
        self.std = np.ones(n_features)

    def fit(self, features, min_std=1e-3):
        f = np.asarray(features, dtype=float).reshape(-1, self.mean.shape[0])
        self.mean = f.mean(axis=0)
        self.std = np.maximum(f.std(axis=0), min_std)
        return self

    def __call__(self, x):
        return (ag.as_tensor(x) - self.mean) * (1.0 / self.std)


def dropout(x, rate, rng, training):
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep
