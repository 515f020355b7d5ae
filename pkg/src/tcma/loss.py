"""Hierarchical training objective.

Each granularity level contributes a bidirectional contrastive term over its
batch similarity matrix plus a channel-wise Pearson regularizer over its
(video, text) feature matrices; the three level losses combine linearly
under the level weights.

Raw cosines live in [-1, 1], which makes an unscaled InfoNCE nearly flat, so
similarities are multiplied by a learnable logit scale (CLIP convention,
initialized to 100, clamped to [1, 1000]) before exponentiation; the scale
can be disabled via :class:`LossConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError, ShapeError

VARIANCE_FLOOR = 1e-24


@dataclass
class LossConfig:
    alpha: float = 0.05            # cross-channel decorrelation weight
    beta: float = 0.001            # same-channel consistency weight
    lambda_video: float = 5.0
    lambda_frame: float = 5.0
    lambda_patch: float = 1.0
    use_logit_scale: bool = True

    def validate(self) -> None:
        for name in ("alpha", "beta", "lambda_video", "lambda_frame", "lambda_patch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if self.lambda_video == self.lambda_frame == self.lambda_patch == 0:
            raise ConfigError("all level weights are zero")

    def lambdas(self) -> dict[str, float]:
        return {"video": self.lambda_video, "frame": self.lambda_frame, "patch": self.lambda_patch}


# ---------------------------------------------------------------------------
# graph-level builders


def contrastive_node(sim: ad.Node, scale) -> ad.Node:
    """Sum of both InfoNCE directions over a square similarity matrix.

    Rows index texts, columns videos; diagonal entries are the positives.
    Stable log-softmax via max-subtracted logsumexp.
    """
    b1, b2 = sim.value.shape
    if b1 != b2:
        raise ShapeError(f"contrastive loss needs a square matrix, got {sim.value.shape}")
    z = sim * scale
    diag = ad.diagonal2d(z)
    t2v = ad.mean_axis(ad.logsumexp_last(z) - diag)
    v2t = ad.mean_axis(ad.logsumexp_last(ad.transpose2d(z)) - diag)
    return t2v + v2t


def pearson_node(v: ad.Node, t: ad.Node, cfg: LossConfig) -> ad.Node:
    """beta * sum_d (1 - rho(v_d, t_d))^2 + alpha * sum_{d1 != d2} rho(v_d1, t_d2)^2.

    Channels whose batch variance falls below the floor define rho = 0, so a
    collapsed channel contributes a full unit of same-channel distance
    instead of a division blow-up.
    """
    if v.value.shape != t.value.shape:
        raise ShapeError(f"pearson feature shapes differ: {v.value.shape} vs {t.value.shape}")
    b = v.value.shape[0]
    if b < 2:
        raise ShapeError("pearson regularizer needs a batch of at least 2")

    def col_normalize(x: ad.Node) -> ad.Node:
        centered = x - ad.mean_axis(x, axis=0, keepdims=True)
        ss = ad.sum_axis(centered * centered, axis=0)  # (D,)
        live = (ss.value >= b * VARIANCE_FLOOR).astype(np.float64)  # constant gate
        return (centered * live) / ad.sqrt(ad.clamp_min(ss, b * VARIANCE_FLOOR))

    corr = ad.einsum2("bd,be->de", col_normalize(v), col_normalize(t))
    same = ad.diagonal2d(corr)
    same_term = ad.sum_axis((1.0 - same) * (1.0 - same))
    cross_term = ad.sum_axis(corr * corr) - ad.sum_axis(same * same)
    return cfg.beta * same_term + cfg.alpha * cross_term


def hierarchical_node(sims: dict[str, ad.Node], feats: dict[str, tuple[ad.Node, ad.Node]],
                      cfg: LossConfig, scale) -> tuple[ad.Node, dict[str, ad.Node]]:
    """Weighted combination over levels; returns (total, unweighted per-level)."""
    cfg.validate()
    total = None
    breakdown: dict[str, ad.Node] = {}
    for level, lam in cfg.lambdas().items():
        if lam == 0 or level not in sims:
            continue
        term = contrastive_node(sims[level], scale)
        if level in feats:
            term = term + pearson_node(*feats[level], cfg)
        breakdown[level] = term
        total = term * lam if total is None else total + term * lam
    if total is None:
        raise ConfigError("no loss level was computed")
    return total, breakdown


# ---------------------------------------------------------------------------
# value-level convenience (same math on constants)


def contrastive_bidirectional(sim: np.ndarray, scale: float = 1.0) -> float:
    if not scale > 0:
        raise DomainError(f"contrastive scale must be positive, got {scale}")
    return float(contrastive_node(ad.constant(sim), float(scale)).value)


def pearson_coefficient(x, y) -> float:
    """Plain Pearson correlation; degenerate variance (below 1e-24) gives 0."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"pearson_coefficient length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ShapeError("pearson_coefficient needs at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    if (xc @ xc) / x.size < VARIANCE_FLOOR or (yc @ yc) / y.size < VARIANCE_FLOOR:
        return 0.0
    return float((xc @ yc) / (np.linalg.norm(xc) * np.linalg.norm(yc)))


def pearson_regularizer(v: np.ndarray, t: np.ndarray, cfg: LossConfig) -> float:
    return float(pearson_node(ad.constant(v), ad.constant(t), cfg).value)


def hierarchical_loss(sims: dict[str, np.ndarray], feats: dict[str, tuple[np.ndarray, np.ndarray]],
                      cfg: LossConfig, scale: float = 1.0) -> tuple[float, dict[str, float]]:
    """Value-level hierarchical loss over precomputed matrices.

    ``sims`` maps level name to its square similarity matrix; ``feats`` maps
    level name to that level's (video, text) batch feature matrices.
    """
    sim_nodes = {k: ad.constant(m) for k, m in sims.items()}
    feat_nodes = {k: (ad.constant(a), ad.constant(b)) for k, (a, b) in feats.items()}
    total, breakdown = hierarchical_node(sim_nodes, feat_nodes, cfg, float(scale))
    return float(total.value), {k: float(n.value) for k, n in breakdown.items()}
