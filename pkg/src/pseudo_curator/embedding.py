"""Linear similarity embedding trained with an IoF-supervised contrastive loss."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .geometry import iof
from .reweight import RoiFeatureRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedConfig:
    iof_threshold: float = 0.7
    embed_dim: int | None = None  # None keeps the input dimension
    learning_rate: float = 1e-2
    epochs: int = 200
    max_pairs_per_image: int = 10000
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.iof_threshold < 1.0:
            raise ValueError("iof_threshold must be in (0, 1)")
        if self.embed_dim is not None and self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.max_pairs_per_image <= 0:
            raise ValueError("max_pairs_per_image must be positive")


@dataclass
class EmbeddingMatrix:
    W: np.ndarray
    losses: list[float] = field(default_factory=list)
    warning: str | None = None

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("embedding matrix has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass(frozen=True)
class PairLabel:
    i: int
    j: int
    y: int


def pair_labels(rois: Sequence[RoiFeatureRecord], t: float = 0.7) -> list[PairLabel]:
    """Label every unordered RoI pair of one image: 1 iff either box covers the other by > t."""
    ordered = sorted(rois, key=lambda r: r.roi_id)
    out = []
    for a, ra in enumerate(ordered):
        for rb in ordered[a + 1:]:
            y = int(iof(ra.box, rb.box) > t or iof(rb.box, ra.box) > t)
            out.append(PairLabel(ra.roi_id, rb.roi_id, y))
    return out


def sim_loss(d: float, y: int) -> float:
    return y * (1.0 - d) ** 2 + (1 - y) * d**2


def embed(W: EmbeddingMatrix | np.ndarray, f: np.ndarray) -> np.ndarray:
    W = W.W if isinstance(W, EmbeddingMatrix) else np.asarray(W, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] != W.shape[1]:
        raise ValidationError(f"feature of shape {f.shape} does not fit embedding {W.shape}")
    return W @ f


def _pair_terms(W: np.ndarray, Fi: np.ndarray, Fj: np.ndarray, y: np.ndarray):
    U = Fi @ W.T
    V = Fj @ W.T
    nu = np.linalg.norm(U, axis=1)
    nv = np.linalg.norm(V, axis=1)
    ok = (nu > 0) & (nv > 0)
    c = np.zeros(len(y))
    c[ok] = np.einsum("pk,pk->p", U[ok], V[ok]) / (nu[ok] * nv[ok])
    d = np.minimum(np.abs(c), 1.0)
    loss = y * (1.0 - d) ** 2 + (1.0 - y) * d**2
    return U, V, nu, nv, ok, c, d, loss


def loss_and_gradient(W: EmbeddingMatrix | np.ndarray, pairs) -> tuple[float, np.ndarray]:
    """Mean contrastive loss over ``(f_i, f_j, y)`` pairs and its gradient in W.

    The similarity is ``|cos(W f_i, W f_j)|``; the gradient of ``|.|`` uses
    ``sign`` (0 at exactly 0).  Pairs where either embedding vanishes count
    as similarity 0 and contribute no gradient.
    """
    W = W.W if isinstance(W, EmbeddingMatrix) else np.asarray(W, dtype=np.float64)
    if isinstance(pairs, tuple) and len(pairs) == 3 and isinstance(pairs[0], np.ndarray) and pairs[0].ndim == 2:
        Fi, Fj, y = (np.asarray(p, dtype=np.float64) for p in pairs)
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValidationError("loss_and_gradient needs at least one pair")
        Fi = np.array([p[0] for p in pairs], dtype=np.float64)
        Fj = np.array([p[1] for p in pairs], dtype=np.float64)
        y = np.array([p[2] for p in pairs], dtype=np.float64)
    if Fi.shape[1] != W.shape[1] or Fj.shape[1] != W.shape[1]:
        raise ValidationError(f"feature dim {Fi.shape[1]} does not fit embedding {W.shape}")

    U, V, nu, nv, ok, c, d, loss = _pair_terms(W, Fi, Fj, y)
    n = len(y)
    grad = np.zeros_like(W)
    if np.any(ok):
        U, V, nu, nv, c, d, yk = U[ok], V[ok], nu[ok], nv[ok], c[ok], d[ok], y[ok]
        g = (2.0 * (d - yk) * np.sign(c))[:, None]
        dc_du = V / (nu * nv)[:, None] - (c / nu**2)[:, None] * U
        dc_dv = U / (nu * nv)[:, None] - (c / nv**2)[:, None] * V
        grad = (g * dc_du).T @ Fi[ok] + (g * dc_dv).T @ Fj[ok]
    return float(loss.sum() / n), grad / n


def initial_matrix(embed_dim: int, input_dim: int) -> np.ndarray:
    """Identity, truncated or zero-padded to ``embed_dim x input_dim``."""
    return np.eye(embed_dim, input_dim, dtype=np.float64)


def collect_pairs(rois: Sequence[RoiFeatureRecord], cfg: EmbedConfig):
    """Gather labeled pairs per image, subsampling each image to the pair cap."""
    rng = np.random.default_rng(cfg.rng_seed)
    by_image: dict[int, list[RoiFeatureRecord]] = defaultdict(list)
    for r in rois:
        by_image[r.image_id].append(r)
    Fi, Fj, ys = [], [], []
    for image_id in sorted(by_image):
        group = by_image[image_id]
        lookup = {r.roi_id: r for r in group}
        labels = pair_labels(group, cfg.iof_threshold)
        if len(labels) > cfg.max_pairs_per_image:
            keep = np.sort(rng.choice(len(labels), size=cfg.max_pairs_per_image, replace=False))
            labels = [labels[k] for k in keep]
        for p in labels:
            Fi.append(lookup[p.i].feature)
            Fj.append(lookup[p.j].feature)
            ys.append(p.y)
    if not ys:
        raise ValidationError("no RoI pairs available for similarity training")
    return np.array(Fi), np.array(Fj), np.array(ys, dtype=np.float64)


def train_embedding(rois: Sequence[RoiFeatureRecord], cfg: EmbedConfig = EmbedConfig()) -> EmbeddingMatrix:
    Fi, Fj, y = collect_pairs(rois, cfg)
    input_dim = Fi.shape[1]
    W = initial_matrix(cfg.embed_dim or input_dim, input_dim)
    losses = []
    for _ in range(cfg.epochs):
        loss, grad = loss_and_gradient(W, (Fi, Fj, y))
        losses.append(loss)
        W = W - cfg.learning_rate * grad
    final, _ = loss_and_gradient(W, (Fi, Fj, y))
    losses.append(final)
    warning = None
    if final > losses[0]:
        warning = f"similarity loss rose from {losses[0]:.6g} to {final:.6g}"
        logger.warning(warning)
    return EmbeddingMatrix(W, losses, warning)
