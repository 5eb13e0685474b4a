"""Learned critic for cross-modal embedding alignment.

Two projection heads (one per modality) map features into a shared space;
the InfoNCE objective separates same-index (congruent) pairs from all other
(incongruent) pairs inside one scene batch. Teacher-side features are
detached before projection, but both heads' weights train.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .core_types import FeatureMap


class ProjectionHead:
    """A 3-layer MLP with ReLU between layers; output is L2-normalized."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        rng = rng or np.random.default_rng(0)
        dims = [(in_dim, hidden_dim), (hidden_dim, hidden_dim), (hidden_dim, out_dim)]
        self.params: dict[str, DiffValue] = {}
        for i, (d_in, d_out) in enumerate(dims, start=1):
            scale = np.sqrt(2.0 / d_in)
            self.params[f"w{i}"] = ad.parameter(rng.normal(0.0, scale, (d_in, d_out)))
            self.params[f"b{i}"] = ad.parameter(np.zeros(d_out))

    def named_params(self, prefix: str = ""):
        return {prefix + k: v for k, v in self.params.items()}


def project(head: ProjectionHead, feature) -> DiffValue:
    """Forward pass; rows come out unit-length.

    An exactly-zero pre-normalization row maps to the first basis vector
    (the degenerate direction has no gradient anyway).
    """
    x = ad.coerce(feature)
    single = x.value.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.value.size))
    if x.value.shape[1] != head.in_dim:
        raise ValueError(f"expected input dimension {head.in_dim}, "
                         f"got {x.value.shape[1]}")
    p = head.params
    h = ad.relu(x @ p["w1"] + p["b1"])
    h = ad.relu(h @ p["w2"] + p["b2"])
    y = h @ p["w3"] + p["b3"]
    norms = np.sqrt((y.value ** 2).sum(axis=1))
    if np.any(norms == 0.0):
        basis = np.zeros_like(y.value)
        basis[norms == 0.0, 0] = 1.0
        y = y + ad.constant(basis)
    out = y / ad.l2norm(y, axis=1, keepdims=True)
    if single:
        out = ad.reshape(out, (out.value.shape[1],))
    return out


@dataclass
class CriticHandle:
    head_2d: ProjectionHead
    head_3d: ProjectionHead
    tau: float = 0.07

    def __post_init__(self):
        if self.head_2d.out_dim != self.head_3d.out_dim:
            raise ValueError("both projection heads must share an output dimension")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def named_params(self):
        out = self.head_2d.named_params("critic.2d.")
        out.update(self.head_3d.named_params("critic.3d."))
        return out


def make_critic(feature_dim_2d: int, feature_dim_3d: int, tau: float = 0.07,
                hidden_dim: int | None = None, out_dim: int | None = None,
                seed: int = 0) -> CriticHandle:
    """Default geometry: hidden = input dim, output = half the 2D input dim."""
    hidden = hidden_dim or feature_dim_2d
    out = out_dim or max(2, feature_dim_2d // 2)
    rng = np.random.default_rng(seed)
    return CriticHandle(
        head_2d=ProjectionHead(feature_dim_2d, hidden, out, rng),
        head_3d=ProjectionHead(feature_dim_3d, hidden, out, rng),
        tau=tau,
    )


class PairBatch:
    """K+1 projected vector pairs; the positive pairing is by index."""

    __slots__ = ("x_2d", "x_3d")

    def __init__(self, x_2d, x_3d):
        self.x_2d = _as_matrix(x_2d)
        self.x_3d = _as_matrix(x_3d)
        if self.x_2d.value.shape != self.x_3d.value.shape:
            raise ValueError("paired projections must share one shape")
        if self.x_2d.value.shape[0] < 2:
            raise ValueError("a pair batch needs at least 2 pairs")

    def __len__(self):
        return self.x_2d.value.shape[0]


def _as_matrix(x) -> DiffValue:
    if isinstance(x, DiffValue):
        return x if x.value.ndim == 2 else ad.reshape(x, (1, x.value.size))
    if isinstance(x, (list, tuple)):
        rows = [ad.coerce(v) for v in x]
        if any(isinstance(v, DiffValue) and v.requires_grad for v in rows):
            return ad.concat([ad.reshape(r, (1, r.value.size)) for r in rows], axis=0)
        return ad.constant(np.stack([r.value for r in rows]))
    return ad.coerce(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def infonce_per_anchor(x2d: DiffValue, x3d: DiffValue, tau: float,
                       include_positive: bool) -> DiffValue:
    """Per-anchor -log(exp(s_ii/tau) / D_i) over the similarity matrix."""
    n = x2d.value.shape[0]
    s = (x2d @ ad.transpose_last2(x3d)) * (1.0 / tau)
    e = ad.exp(s)
    eye = ad.constant(np.eye(n))
    diag_e = ad.vsum(e * eye, axis=1)
    denom = ad.vsum(e, axis=1)
    if not include_positive:
        denom = denom - diag_e
    s_ii = ad.vsum(s * eye, axis=1)
    return ad.log(denom) - s_ii


def infonce_loss(batch: PairBatch, tau: float, include_positive: bool) -> DiffValue:
    """Mean per-anchor InfoNCE over the batch."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return ad.vmean(infonce_per_anchor(batch.x_2d, batch.x_3d, tau, include_positive))


def ncs_per_anchor(x2d: DiffValue, x3d: DiffValue) -> DiffValue:
    """Positive-pairs-only alternative: per-anchor 1 - cosine similarity."""
    n = x2d.value.shape[0]
    eye = ad.constant(np.eye(n))
    diag = ad.vsum((x2d @ ad.transpose_last2(x3d)) * eye, axis=1)
    return 1.0 - diag


def ncs_loss(batch: PairBatch) -> DiffValue:
    """Mean negative-cosine-similarity loss over the positive pairs."""
    return ad.vmean(ncs_per_anchor(batch.x_2d, batch.x_3d))


# -- feature sampling -----------------------------------------------------

def _bilinear_coords(fmap: FeatureMap, points) -> tuple[np.ndarray, np.ndarray]:
    """(flat corner indices (N, 4), weights (N, 4)) for each query point."""
    grid = fmap.grid
    h, w = grid.height_cells, grid.width_cells
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rows = np.empty(len(pts))
    cols = np.empty(len(pts))
    for i, (x, y) in enumerate(pts):
        r, c = grid.world_to_cell(x, y)
        rows[i], cols[i] = r, c
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.clip(np.floor(rows), 0, max(h - 2, 0)).astype(np.intp)
    c0 = np.clip(np.floor(cols), 0, max(w - 2, 0)).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rows - r0
    fc = cols - c0
    idx = np.stack([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1], axis=1)
    wts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc,
                    fr * (1 - fc), fr * fc], axis=1)
    return idx, wts


def bilinear_sample_many(fmap: FeatureMap, points) -> DiffValue:
    """Sample the map at world points; (N, C), differentiable in the map."""
    idx, wts = _bilinear_coords(fmap, points)
    h, w, c = fmap.shape
    flat = ad.reshape(fmap.values, (h * w, c))
    corners = ad.take_rows(flat, idx.reshape(-1))
    corners = ad.reshape(corners, (idx.shape[0], 4, c))
    return ad.vsum(corners * ad.constant(wts[:, :, None]), axis=1)


def bilinear_sample(fmap: FeatureMap, point: tuple[float, float]) -> DiffValue:
    """Sample one world point; out-of-bounds points clamp to the boundary."""
    out = bilinear_sample_many(fmap, [point])
    return ad.reshape(out, (fmap.channels,))


def critic_class_loss(critic: CriticHandle, student_embeddings_at_refs,
                      teacher_map: FeatureMap, reference_points,
                      include_positive: bool = True) -> DiffValue:
    """InfoNCE between student embeddings and teacher features sampled at
    the same reference points (same-position pairs are the positives)."""
    pts = np.atleast_2d(np.asarray(reference_points, dtype=np.float64))
    if len(pts) < 2:
        raise ValueError("critic loss needs at least 2 reference points")
    s_emb = _as_matrix(student_embeddings_at_refs)
    if s_emb.value.shape[0] != len(pts):
        raise ValueError("one embedding per reference point required")
    t_feats = bilinear_sample_many(teacher_map, pts)
    x2d = project(critic.head_2d, s_emb)
    x3d = project(critic.head_3d, ad.stop_gradient(t_feats))
    return infonce_loss(PairBatch(x2d, x3d), critic.tau, include_positive)
