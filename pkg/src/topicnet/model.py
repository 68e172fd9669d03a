"""Full pipeline assembly: encode, propagate per layer, decode, losses.

A forward pass takes M image groups at once.  All M*N images share one
encoder pass; propagation is group-local per pyramid layer with the IGP
and GPP parameters shared across layers.  Training mode additionally
assembles the cross-group contrastive batch; inference never touches
the contrastive module (the psi counter stays untouched).
"""

from __future__ import annotations

import numpy as np

from .backbone import decode, encode, init_params
from .config import TrainConfig
from .errors import ConfigError, ShapeError
from .gpp import gpp_block, recalibrate
from .igp import igp_block, to_working_resolution
from .objectives import (
    ContrastiveBatch,
    LossReport,
    negatives_fused_attention,
    negatives_mismatched_attention,
    pooled_feature,
    psi_eval_count,
    route_count,
    saliency_loss,
    total_loss,
)
from .tensor import Tensor


def build_params(cfg: TrainConfig) -> dict:
    return init_params(cfg.seed, cfg.encoder_channels, cfg.feature_dim)


def _group_slice(tensor: Tensor, m: int, n: int) -> Tensor:
    return tensor.narrow(0, m * n, n)


def forward_topicnet(images: list, params: dict, cfg: TrainConfig, mode: str = "train", masks: list = None):
    """(maps, report): M saliency-map tensors plus a LossReport in train mode.

    images: M arrays [N,3,H,W], already normalized; masks: M binary
    arrays [N,1,H,W], train mode only.  Groups must hold distinct
    categories (the sampler's job).  Inference accepts a single group.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown mode {mode!r}")
    m_groups = len(images)
    if m_groups == 0:
        raise ShapeError("no groups supplied")
    n = images[0].shape[0]
    for arr in images:
        if arr.shape != images[0].shape:
            raise ShapeError("groups disagree on image shape")
    train = mode == "train"
    if train and masks is None:
        raise ConfigError("train mode needs ground-truth masks")
    if train and m_groups < 2 and cfg.use_clm:
        raise ConfigError(f"contrastive training needs at least 2 groups, got {m_groups}")

    psi_before = psi_eval_count()
    if train and cfg.use_clm:
        shallow = tuple(i for i in cfg.positive_layers if i in (1, 2))
        layers = sorted({3, 4, 5} | set(shallow) | set(cfg.negative_layers))
    else:
        shallow = ()
        layers = [3, 4, 5]

    batch = Tensor(np.concatenate([np.asarray(a, dtype=np.float64) for a in images], axis=0))
    feats = encode(batch, params, contrast_layers=shallow)

    maps = []
    gated_inputs = {}  # (m, layer) -> lateral features
    gates = {}  # (m, layer) -> e vector
    for m in range(m_groups):
        z = {}
        for i in layers:
            lateral = _group_slice(feats["lat"][i], m, n)
            working = to_working_resolution(lateral, cfg.working_resolution, cfg.resize_mode)
            consensus = igp_block(working, params, cfg.igp_softmax_before_mean)
            attended, gate = gpp_block(consensus, params)
            gated_inputs[(m, i)] = lateral
            gates[(m, i)] = gate
            if i in (3, 4, 5):
                z[i] = recalibrate(lateral, gate)
        maps.append(
            decode(
                z[3], z[4], z[5],
                _group_slice(feats["x"][1], m, n),
                _group_slice(feats["x"][0], m, n),
                params,
            )
        )

    if not train:
        return maps, None

    degenerate = False
    l_s = None
    for m in range(m_groups):
        term, bad = saliency_loss(maps[m], Tensor(np.asarray(masks[m], dtype=np.float64)), cfg.dice_factor_two)
        degenerate = degenerate or bad
        l_s = term if l_s is None else l_s + term
    l_s = l_s * (1.0 / m_groups)

    if cfg.use_clm:
        anchors = [pooled_feature(gated_inputs[(m, 5)], gates[(m, 5)]) for m in range(m_groups)]
        positives = [
            [pooled_feature(gated_inputs[(m, i)], gates[(m, i)]) for i in cfg.positive_layers if i != 5]
            for m in range(m_groups)
        ]
        route2, route3 = [], []
        fused = route_count(m_groups) == 3
        for i in cfg.negative_layers:
            features = [gated_inputs[(m, i)] for m in range(m_groups)]
            layer_gates = [gates[(m, i)] for m in range(m_groups)]
            route2 += negatives_mismatched_attention(features, layer_gates)
            if fused:
                route3 += negatives_fused_attention(features, layer_gates)
        l_cl = ContrastiveBatch(anchors, positives, route2, route3, cfg.tau).loss()
    else:
        l_cl = Tensor(0.0)

    l = total_loss(l_cl, l_s, cfg.lambda1, cfg.lambda2)
    report = LossReport(
        l_cl=l_cl,
        l_s=l_s,
        l=l,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        degenerate=degenerate,
        psi_terms=psi_eval_count() - psi_before,
    )
    return maps, report
