"""Training losses over predicted quaternion tensors ``[B, T, S, 4]``.

Targets are plain arrays. Every loss is averaged jointly over batch, time
and segments.
"""

from __future__ import annotations

import numpy as np

from .. import quaternion as Q
from ..errors import ContractError
from . import autograd as ag

LOSSES = ("qad", "mse", "qdist", "relqad")


def qad_loss(pred, target):
    return ag.qad(pred, target).mean()


def mse_loss(pred, target):
    return ag.square(pred - target).mean()


def qdist_loss(pred, target):
    sign = np.where(np.sum(pred.data * target, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    return ag.square(pred * sign - target).mean()


def relqad_loss(pred, target, root=0):
    rel_t = Q.relative_to_root(target, root)
    rel_p = ag.qmul(ag.qconj(pred[..., root : root + 1, :]), pred)
    # the root term is identically zero; keep it out of the graph
    is_root = (np.arange(pred.shape[-2]) == root)[:, None]
    rel_p = ag.where(is_root, rel_t, rel_p)
    return qad_loss(rel_p, rel_t)


def compute_loss(name, pred, target):
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    try:
        fn = {"qad": qad_loss, "mse": mse_loss, "qdist": qdist_loss, "relqad": relqad_loss}[name]
    except KeyError:
        raise ContractError(f"unknown loss {name!r}") from None
    return fn(pred, target)
