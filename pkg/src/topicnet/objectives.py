"""Contrastive objective, saliency loss, and their joint combination.

Anchors are pooled gated layer-5 features; positives are the same
construction at the shallower configured layers.  Negatives arrive by
three routes: other groups' anchors, mismatched feature/gate pairings,
and (only when exactly two groups are present) fused-gate features.
Every similarity enters as exp(cos/tau); a module counter tracks how
many such terms were evaluated so inference can assert it did none.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, ShapeError
from .tensor import Tensor, reduce_sum

_NORM_FLOOR_SQ = 1e-24

_psi_evals = 0


def reset_psi_evals() -> None:
    global _psi_evals
    _psi_evals = 0


def psi_eval_count() -> int:
    return _psi_evals


def route_count(m: int) -> int:
    """Negative routes in play: 3 for a 2-group step, else 2."""
    if m < 2:
        raise ConfigError(f"contrastive learning needs at least 2 groups, got {m}")
    return 3 if m == 2 else 2


def pooled_feature(x: Tensor, e: Tensor) -> Tensor:
    """Gate then global-average-pool [N,D,H,W] to a D-vector."""
    if x.ndim != 4 or x.shape[1] != e.shape[-1]:
        raise ShapeError(f"pooled_feature: channel mismatch between {x.shape} and {e.shape}")
    return (x * e.reshape((1, x.shape[1], 1, 1))).mean(axis=(0, 2, 3))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity with norms floored at 1e-12."""
    na = reduce_sum(a * a).clamp_min(_NORM_FLOOR_SQ).sqrt()
    nb = reduce_sum(b * b).clamp_min(_NORM_FLOOR_SQ).sqrt()
    return reduce_sum(a * b) / (na * nb)


def _psi_term(anchor: Tensor, other: Tensor, tau: float) -> Tensor:
    global _psi_evals
    _psi_evals += 1
    return (cosine(anchor, other) / tau).exp()


def psi_positive(anchor: Tensor, positives: list, tau: float) -> Tensor:
    """Sum of exp(cos/tau) over the positive set.

    An empty set (positive layers = {5} only) degenerates to the
    anchor's self-term exp(1/tau), keeping the loss well defined.
    """
    if not positives:
        return _psi_term(anchor, anchor, tau)
    total = _psi_term(anchor, positives[0], tau)
    for other in positives[1:]:
        total = total + _psi_term(anchor, other, tau)
    return total


def negatives_intergroup(anchors: list, m: int) -> list:
    """Route 1 for group m: every other group's anchor."""
    if len(anchors) < 2:
        raise ConfigError(f"contrastive learning needs at least 2 groups, got {len(anchors)}")
    return [anchor for l, anchor in enumerate(anchors) if l != m]


def negatives_mismatched_attention(features: list, gates: list) -> list:
    """Route 2 at one layer: pooled(x_j, e_k) over ordered pairs j != k."""
    out = []
    for j, x in enumerate(features):
        for k, e in enumerate(gates):
            if j != k:
                out.append(pooled_feature(x, e))
    return out


def negatives_fused_attention(features: list, gates: list) -> list:
    """Route 3 at one layer: pooled(x_j, e_j + e_k) over ordered j != k.

    The summed gate lies in (0, 2) and is intentionally not re-scaled.
    """
    out = []
    for j, x in enumerate(features):
        for k in range(len(gates)):
            if j != k:
                out.append(pooled_feature(x, gates[j] + gates[k]))
    return out


def psi_negative_total(anchor: Tensor, route1: list, route2: list, route3: list, tau: float, h: int) -> Tensor:
    """Sum exp(cos/tau) over the active routes (1 and 2, plus 3 iff H=3)."""
    if h not in (2, 3):
        raise ConfigError(f"route count must be 2 or 3, got {h}")
    negatives = list(route1) + list(route2) + (list(route3) if h == 3 else [])
    if not negatives:
        raise ConfigError("no negative samples supplied")
    total = _psi_term(anchor, negatives[0], tau)
    for other in negatives[1:]:
        total = total + _psi_term(anchor, other, tau)
    return total


def contrastive_loss(psi_pos: Tensor, psi_neg: Tensor) -> Tensor:
    """-log(psi+ / (psi+ + psi-)); positive, pushes psi- down."""
    return -((psi_pos / (psi_pos + psi_neg)).log())


def saliency_loss(maps: Tensor, masks: Tensor, dice_factor_two: bool = False):
    """Per-image 1 - sum(M*T)/sum(M+T), averaged over the batch.

    As written the ratio tops out at 1/2 on a perfect binary match;
    `dice_factor_two` doubles the numerator into the standard Dice form.
    Returns (loss, degenerate) where degenerate flags any image whose
    sum(M+T) fell below 1e-12 and contributed a constant 1 instead.
    """
    if maps.shape != masks.shape:
        raise ShapeError(f"saliency_loss: {maps.shape} vs {masks.shape}")
    n = maps.shape[0]
    factor = 2.0 if dice_factor_two else 1.0
    degenerate = False
    total = None
    for i in range(n):
        m = maps.narrow(0, i, 1)
        t = masks.narrow(0, i, 1)
        denom = reduce_sum(m + t)
        if denom.item() < 1e-12:
            term = Tensor(1.0)
            degenerate = True
        else:
            term = 1.0 - factor * reduce_sum(m * t) / denom
        total = term if total is None else total + term
    return total * (1.0 / n), degenerate


def total_loss(l_cl: Tensor, l_s: Tensor, lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    return lambda1 * l_cl + lambda2 * l_s


@dataclass
class ContrastiveBatch:
    """Per-step contrastive inputs for all M groups.

    anchors[m] is group m's pooled layer-5 feature; positives[m] its
    shallower-layer features; route2/route3 are shared by every anchor
    while route 1 is derived per anchor from the other groups.
    """

    anchors: list
    positives: list
    route2: list
    route3: list
    tau: float

    def __post_init__(self):
        m = len(self.anchors)
        self.m = m
        self.h = route_count(m)
        if len(self.positives) != m:
            raise ConfigError(f"{len(self.positives)} positive sets for {m} anchors")
        if self.h == 3 and not self.route3:
            raise ConfigError("2-group batches require the fused-attention route")
        dim = self.anchors[0].shape[0]
        vectors = list(self.anchors) + self.route2 + self.route3
        for group in self.positives:
            vectors += list(group)
        for vec in vectors:
            if vec.shape != (dim,):
                raise ShapeError(f"feature shape {vec.shape} does not match dim {dim}")

    def loss(self) -> Tensor:
        """Mean over groups of -log(psi+ / (psi+ + psi-))."""
        total = None
        for m, anchor in enumerate(self.anchors):
            psi_pos = psi_positive(anchor, self.positives[m], self.tau)
            psi_neg = psi_negative_total(
                anchor,
                negatives_intergroup(self.anchors, m),
                self.route2,
                self.route3,
                self.tau,
                self.h,
            )
            term = contrastive_loss(psi_pos, psi_neg)
            total = term if total is None else total + term
        return total * (1.0 / len(self.anchors))


@dataclass
class LossReport:
    """Scalars of one training step; tensors keep their tape links."""

    l_cl: Tensor
    l_s: Tensor
    l: Tensor
    lambda1: float = 1.0
    lambda2: float = 1.0
    degenerate: bool = False
    psi_terms: int = 0
    extras: dict = field(default_factory=dict)
