"""Embedding-space analysis of domain shift.

Collects pooled backbone embeddings per water type, quantifies pairwise domain
gaps (squared mean distance per dimension plus squared Frobenius distance of
covariances), and projects embeddings to 2-D with a deterministic
power-iteration PCA for plotting. PCA replaces stochastic neighbor methods on
purpose: acceptance checks need bit-reproducible output.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch

from .model import NetworkConfig, NetworkWeights, backbone_forward


@dataclass
class EmbeddingSet:
    matrix: np.ndarray  # n x d float64
    tag: str
    checkpoint_id: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 2:
            raise ValueError("embedding set needs an n x d matrix with n >= 2")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding set contains non-finite entries")


def collect_embeddings(
    weights: NetworkWeights,
    config: NetworkConfig,
    images: list[np.ndarray],
    tag: str,
    checkpoint_id: str = "",
) -> EmbeddingSet:
    """One backbone forward per image; row i is the pooled embedding of image i."""
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    rows = []
    with torch.no_grad():
        for img in images:
            t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))
            feats = backbone_forward(t, weights, config)
            rows.append(feats.embedding[0].to(torch.float64).numpy())
    return EmbeddingSet(np.stack(rows), tag=tag, checkpoint_id=checkpoint_id)


def _cov(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0, keepdims=True)
    return centered.T @ centered / (x.shape[0] - 1)


def domain_gap(a: EmbeddingSet | np.ndarray, b: EmbeddingSet | np.ndarray) -> float:
    """Symmetric gap: ||mean(A)-mean(B)||^2 / d  +  ||C(A)-C(B)||^2_F."""
    am = a.matrix if isinstance(a, EmbeddingSet) else np.asarray(a, dtype=np.float64)
    bm = b.matrix if isinstance(b, EmbeddingSet) else np.asarray(b, dtype=np.float64)
    if am.ndim != 2 or bm.ndim != 2 or am.shape[1] != bm.shape[1]:
        raise ValueError("embedding sets must share dimensionality")
    if am.shape[0] < 2 or bm.shape[0] < 2:
        raise ValueError("each set needs n >= 2 rows")
    d = am.shape[1]
    mean_term = float(((am.mean(axis=0) - bm.mean(axis=0)) ** 2).sum() / d)
    cov_term = float(((_cov(am) - _cov(bm)) ** 2).sum())
    return mean_term + cov_term


@dataclass
class PCAResult:
    projection: np.ndarray  # n x k
    components: np.ndarray  # k x d orthonormal rows (zero rows when deficient)
    eigenvalues: np.ndarray  # k
    deficient: list[int]  # indices of components beyond the data rank


_PCA_ITERS = 200
_PCA_TOL = 1e-9


def pca_project(x: np.ndarray, k: int = 2) -> PCAResult:
    """Project onto the top-k covariance eigenvectors via power iteration.

    Deterministic by construction: fixed pseudo-random start vector, fixed
    iteration budget, deflation after each component, and a sign convention
    that makes each component's largest-magnitude coordinate positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more rows than components (n={n}, k={k})")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1)
    start = np.random.Generator(np.random.PCG64(0xC0FFEE)).standard_normal(d)
    components = np.zeros((k, d))
    eigenvalues = np.zeros(k)
    deficient: list[int] = []
    scale = max(float(np.trace(cov)), 1e-30)
    work = cov.copy()
    for j in range(k):
        v = start.copy()
        v /= np.linalg.norm(v)
        for _ in range(_PCA_ITERS):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm < 1e-15 * scale:
                break
            w /= norm
            done = np.linalg.norm(w - v) < _PCA_TOL
            v = w
            if done:
                break
        lam = float(v @ work @ v)
        if lam <= 1e-12 * scale:
            deficient.append(j)
            continue
        # sign convention: largest-magnitude coordinate is positive
        peak = np.argmax(np.abs(v))
        if v[peak] < 0:
            v = -v
        components[j] = v
        eigenvalues[j] = lam
        work = work - lam * np.outer(v, v)
    return PCAResult(
        projection=centered @ components.T,
        components=components,
        eigenvalues=eigenvalues,
        deficient=deficient,
    )


def projections_to_csv(sets_and_points: list[tuple[EmbeddingSet, np.ndarray]]) -> str:
    """CSV rows `tag,checkpoint,x,y` for exported 2-D projections."""
    out = io.StringIO()
    out.write("tag,checkpoint,x,y\n")
    for eset, pts in sets_and_points:
        for x, y in np.asarray(pts)[:, :2]:
            out.write(f"{eset.tag},{eset.checkpoint_id},{x:.8g},{y:.8g}\n")
    return out.getvalue()


def gap_matrix(sets: list[EmbeddingSet]) -> dict:
    """Pairwise gap dictionary keyed by tag, symmetric with zero diagonal."""
    out: dict[str, dict[str, float]] = {}
    for a in sets:
        out[a.tag] = {}
        for b in sets:
            out[a.tag][b.tag] = 0.0 if a is b else domain_gap(a, b)
    return out
