"""Training objective: label BCE, prototype separation and mined triplet terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import LabelError, MiningError


def label_loss(scores, targets) -> nx.Tensor:
    """Sum of -[t log s(y) + (1-t) log(1-s(y))] with s the logistic function.

    Written as softplus(y) - t*y, which never evaluates log(0).
    """
    scores = nx.as_tensor(scores)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != scores.shape:
        raise LabelError(f"targets {targets.shape} do not match scores {scores.shape}")
    if np.any(~np.isfinite(targets)) or np.any((targets < 0.0) | (targets > 1.0)):
        raise LabelError("label targets must lie in [0, 1]")
    return nx.tsum(nx.softplus(scores) - scores * targets)


def triplet_loss(scores, positives, negatives, margin: float | None = None) -> nx.Tensor:
    """sum_v [max over mined negatives - min over positives] of the scores.

    ``scores`` is a (B, N) score matrix; ``positives[v]`` and ``negatives[v]``
    are column indices into it. With ``margin`` set the per-video term becomes
    max(0, term + margin).
    """
    scores = nx.as_tensor(scores)
    terms = []
    for v, (pos, neg) in enumerate(zip(positives, negatives)):
        if len(pos) == 0 or len(neg) == 0:
            raise MiningError(f"video {v} has an empty positive or negative set")
        hardest_neg = nx.tmax(nx.getitem(scores, (v, np.asarray(neg, dtype=int))))
        weakest_pos = nx.tmin(nx.getitem(scores, (v, np.asarray(pos, dtype=int))))
        term = hardest_neg - weakest_pos
        if margin is not None:
            term = nx.relu(term + margin)
        terms.append(term)
    if not terms:
        raise MiningError("triplet loss over an empty batch")
    return nx.tsum(nx.stack(terms))


@dataclass
class LossFlags:
    label: bool = True
    pro: bool = True
    triple: bool = True


@dataclass
class LossBreakdown:
    l_label: float
    l_pro: float
    l_triple: float
    l_total: float
    flags: LossFlags = field(default_factory=LossFlags)
    total: nx.Tensor | None = None


def total_loss(l_label, l_pro, l_triple, flags: LossFlags | None = None) -> LossBreakdown:
    """Unweighted sum of the enabled terms; disabled terms may be passed as None."""
    flags = flags or LossFlags()
    parts = [(flags.label, l_label), (flags.pro, l_pro), (flags.triple, l_triple)]
    total = None
    for enabled, term in parts:
        if enabled:
            if term is None:
                raise ValueError("an enabled loss term was not computed")
            total = nx.as_tensor(term) if total is None else total + term
    if total is None:
        total = nx.Tensor(0.0)

    def value(term):
        return float(nx.as_tensor(term).data) if term is not None else 0.0

    return LossBreakdown(value(l_label), value(l_pro), value(l_triple), float(total.data), flags, total)
