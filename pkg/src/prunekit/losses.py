"""The three supervision signals and their weighted fusion.

For one layer, let F be the baseline feature map and F' the pruned one, viewed
as M channels by N = H*Z spatial positions per example:

* reconstruction: mean squared map difference, 1/(2T) * ||F - F'||^2 with
  T = M*H*Z;
* correlation: 1/(4 N^2 M^2) * (||Gf - Gf'||^2 + ||Gs - Gs'||^2), where
  Gf = F F^T captures which channels co-activate and Gs = F^T F captures where
  activation mass sits spatially;
* classification: mean softmax cross-entropy of the pruned network's logits.

Batched inputs are averaged per example, then over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .network import Network, forward
from .tensor import ShapeError, Tape, Tensor

LOSS_KEYS = ("r", "s", "c")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the correlation (alpha) and classification (beta) terms."""
    alpha: float = 0.001
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


@dataclass
class LossBreakdown:
    l_r: float
    l_s: float
    l_c: float
    total: float
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)


def _as_batched(name: str, f: Tensor) -> np.ndarray:
    if f.data.ndim == 3:
        return f.data[None]
    if f.data.ndim == 4:
        return f.data
    raise ShapeError(f"{name}: expected [M,H,Z] or [B,M,H,Z], got {f.shape}")


def reconstruction_loss(f_base: Tensor, f_pruned: Tensor,
                        tape: Optional[Tape] = None) -> Tensor:
    if f_base.shape != f_pruned.shape:
        raise ShapeError(
            f"reconstruction_loss: shapes {f_base.shape} and {f_pruned.shape} differ")
    fb = _as_batched("reconstruction_loss", f_base)
    fp = _as_batched("reconstruction_loss", f_pruned)
    bsz = fb.shape[0]
    t_norm = fb[0].size  # M * H * Z
    diff = fb - fp
    out = Tensor((diff * diff).sum() / (2.0 * t_norm * bsz))
    if tape is not None:
        def bw(g):
            gp = g * (fp - fb) / (t_norm * bsz)
            return (-gp).reshape(f_base.shape), gp.reshape(f_pruned.shape)
        tape.record(out, (f_base, f_pruned), bw)
    return out


def correlation_loss(f_base: Tensor, f_pruned: Tensor,
                     tape: Optional[Tape] = None) -> Tensor:
    if f_base.shape != f_pruned.shape:
        raise ShapeError(
            f"correlation_loss: shapes {f_base.shape} and {f_pruned.shape} differ")
    fb = _as_batched("correlation_loss", f_base)
    fp = _as_batched("correlation_loss", f_pruned)
    bsz, m = fb.shape[0], fb.shape[1]
    n = fb.shape[2] * fb.shape[3]
    fb2 = fb.reshape(bsz, m, n)
    fp2 = fp.reshape(bsz, m, n)

    gf_b = fb2 @ fb2.transpose(0, 2, 1)
    gf_p = fp2 @ fp2.transpose(0, 2, 1)
    gs_b = fb2.transpose(0, 2, 1) @ fb2
    gs_p = fp2.transpose(0, 2, 1) @ fp2
    df = gf_b - gf_p
    ds = gs_b - gs_p
    coef = 1.0 / (4.0 * n * n * m * m)
    out = Tensor(coef * ((df * df).sum() + (ds * ds).sum()) / bsz)
    if tape is not None:
        def bw(g):
            # d||A - FF^T||^2 / dF = -4 (A - FF^T) F for symmetric difference
            c = g * coef / bsz
            gp = -4.0 * c * (df @ fp2 + fp2 @ ds)
            gb = 4.0 * c * (df @ fb2 + fb2 @ ds)
            return gb.reshape(f_base.shape), gp.reshape(f_pruned.shape)
        tape.record(out, (f_base, f_pruned), bw)
    return out


def classification_loss(net_pruned: Network, images: Tensor, labels: np.ndarray,
                        tape: Optional[Tape] = None) -> Tensor:
    logits = forward(net_pruned, images, tape=tape)
    return T.softmax_cross_entropy(logits, labels, tape)


def joint_loss(l_r: Tensor, l_s: Tensor, l_c: Tensor, w: LossWeights,
               enabled: frozenset | set = frozenset(LOSS_KEYS),
               tape: Optional[Tape] = None) -> LossBreakdown:
    """Weighted fusion over the enabled terms; disabled terms contribute zero."""
    enabled = frozenset(enabled)
    if not enabled:
        raise ValueError("joint_loss: no loss terms enabled")
    unknown = enabled - set(LOSS_KEYS)
    if unknown:
        raise ValueError(f"joint_loss: unknown loss flags {sorted(unknown)}")
    for name, term in (("l_r", l_r), ("l_s", l_s), ("l_c", l_c)):
        if term is not None and not np.isfinite(term.data).all():
            raise ValueError(f"joint_loss: {name} is not finite")

    total = None
    for key, term, coef in (("r", l_r, 1.0), ("s", l_s, w.alpha), ("c", l_c, w.beta)):
        if key not in enabled:
            continue
        if term is None:
            raise ValueError(f"joint_loss: enabled term {key!r} was not provided")
        part = term if coef == 1.0 else T.scale(term, coef, tape)
        total = part if total is None else T.add(total, part, tape)
    return LossBreakdown(
        l_r=l_r.item() if l_r is not None else 0.0,
        l_s=l_s.item() if l_s is not None else 0.0,
        l_c=l_c.item() if l_c is not None else 0.0,
        total=total.item(),
        total_tensor=total,
    )
