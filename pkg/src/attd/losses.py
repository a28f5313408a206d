"""Answer cross-entropy, attention alignment divergence and the two stage objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .model import ForwardOutput
from .numcore import Tensor


@dataclass
class LossReport:
    total: Tensor
    l_q: float
    batch_size: int
    l_r: float | None = None
    kl: float | None = None

    def as_dict(self) -> dict:
        out = {"total": self.total.item(), "l_q": self.l_q, "batch_size": self.batch_size}
        if self.l_r is not None:
            out["l_r"] = self.l_r
        if self.kl is not None:
            out["kl"] = self.kl
        return out


def cross_entropy(y: Tensor, a) -> Tensor:
    """``-log(max(y[a], 1e-12))``; batched over leading axes of ``y``."""
    return nc.cross_entropy(nc.as_tensor(y), a)


def forward_kl(p: Tensor, q: Tensor) -> Tensor:
    """``KL(p || q)`` over the last axis of flattened attention maps."""
    p, q = nc.as_tensor(p), nc.as_tensor(q)
    if p.ndim > 2:
        p = p.reshape(p.shape[0], -1)
    if q.ndim > 2:
        q = q.reshape(q.shape[0], -1)
    return nc.forward_kl(p, q)


def _require_reasoning(out: ForwardOutput) -> None:
    if out.y_r is None or out.alpha_r is None:
        raise nc.ContractError("stage losses need train-mode outputs with the reasoning branch")


def stage1_loss(out: ForwardOutput, targets) -> LossReport:
    """Mean question CE plus mean reasoning CE."""
    _require_reasoning(out)
    targets = np.asarray(targets)
    l_q = cross_entropy(out.y_q, targets).mean()
    l_r = cross_entropy(out.y_r, targets).mean()
    return LossReport(l_q + l_r, l_q.item(), len(targets), l_r=l_r.item())


def stage2_loss(out: ForwardOutput, targets, kl_weight: float = 1.0, kl_fn=forward_kl) -> LossReport:
    """Mean question CE plus ``kl_weight`` times mean ``KL(alpha_q || alpha_r)``.

    ``alpha_r`` is detached, so nothing flows back into the reasoning decoder.
    """
    _require_reasoning(out)
    targets = np.asarray(targets)
    l_q = cross_entropy(out.y_q, targets).mean()
    kl = kl_fn(out.alpha_q, nc.stop_gradient(out.alpha_r)).mean()
    return LossReport(l_q + kl * kl_weight, l_q.item(), len(targets), kl=kl.item())
