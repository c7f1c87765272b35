"""Post-hoc analysis of generated kernels.

Per-sample kernels are pulled out of a trained model's dynamic layer,
compared filter-by-filter with cosine similarity, and projected to 2-d with
a power-iteration PCA to see whether samples of one class cluster.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .dynamic import DynamicConv2d, GeneratedKernel, SEConv2d
from .exceptions import UsageError
from .formats import write_pgm, write_wnk
from .numerics import PCA_MAX_ITER, PCA_TOL
from .tensor import Tensor


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    layer: str = ""
    sample: str = "static"

    @property
    def n(self) -> int:
        return self.values.shape[0]


def extract_kernels(model, images: np.ndarray, layer: str, labels: Sequence[int] | None = None,
                    batch_size: int = 64) -> list[GeneratedKernel]:
    """One single-sample GeneratedKernel per input image for a dynamic layer."""
    try:
        block = model.block(layer)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    conv = block.conv
    if not isinstance(conv, DynamicConv2d) or (isinstance(conv, SEConv2d) and conv.cfg.placement != "kernel"):
        raise UsageError(f"layer {layer!r} is a static convolution; it has no per-sample kernels")
    images = np.asarray(images, dtype=np.float32)
    was_training = model.training
    model.eval()
    kernels: list[GeneratedKernel] = []
    try:
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                trace: list = []
                model(Tensor(images[start:start + batch_size]), trace=trace)
                x = dict(trace)[f"{layer}.input"]
                k = conv.kernels(x).data
                for i in range(k.shape[0]):
                    idx = start + i
                    meta = {"index": idx}
                    if labels is not None:
                        meta["class"] = int(labels[idx])
                    kernels.append(GeneratedKernel(k[i:i + 1].copy(), source=layer, batch_id=idx, meta=meta))
    finally:
        model.train(was_training)
    return kernels


def dump_kernels(kernels: Sequence[GeneratedKernel], out_dir: str | os.PathLike, prefix: str = "sample",
                 sidecar: str | None = "kernels.csv") -> list[Path]:
    """Write one WNK1 file per kernel and, optionally, an ``index,class`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in kernels:
        p = out / f"{prefix}_{k.batch_id:04d}.wnk"
        write_wnk(p, k)
        paths.append(p)
    if sidecar:
        with open(out / sidecar, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "class"])
            for k in kernels:
                w.writerow([k.batch_id, k.meta.get("class", "")])
    return paths


def _filters(kernel) -> np.ndarray:
    data = kernel.data if isinstance(kernel, GeneratedKernel) else np.asarray(kernel)
    if data.ndim == 5:
        if data.shape[0] != 1:
            raise UsageError(f"expected a single-sample kernel, got batch of {data.shape[0]}")
        data = data[0]
    if data.ndim != 4:
        raise UsageError(f"expected a (C_out, C_in, kh, kw) kernel, got shape {data.shape}")
    return data.reshape(data.shape[0], -1).astype(np.float64)


def cosine_similarity_matrix(kernel, layer: str = "", sample: str = "static") -> SimilarityMatrix:
    """Pairwise cosine similarity between flattened output filters.

    A zero-norm filter gets similarity 0 with every other filter and 1 with itself.
    """
    f = _filters(kernel)
    norms = np.linalg.norm(f, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = f / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    np.fill_diagonal(sim, 1.0)
    return SimilarityMatrix(sim, layer, sample)


def mean_offdiag(sim: SimilarityMatrix | np.ndarray) -> float:
    """Mean of |s_ij| over i != j."""
    v = sim.values if isinstance(sim, SimilarityMatrix) else np.asarray(sim)
    n = v.shape[0]
    if n < 2:
        return 0.0
    mask = ~np.eye(n, dtype=bool)
    return float(np.abs(v[mask]).mean())


def heatmap_pixels(sim: SimilarityMatrix) -> np.ndarray:
    return np.floor(255.0 * (np.clip(sim.values, -1, 1) + 1.0) / 2.0 + 0.5).astype(np.uint8)


def heatmap_emit(sim: SimilarityMatrix, path: str | os.PathLike) -> Path:
    """Write the matrix as a P5 PGM; -1 maps to black, +1 to white."""
    write_pgm(path, heatmap_pixels(sim))
    return Path(path)


def _top_components(X: np.ndarray, k: int, tol: float, max_iter: int) -> np.ndarray:
    """Leading ``k`` eigenvectors of X^T X by power iteration with deflation.

    Iterates on whichever of X^T X (d x d) or X X^T (n x n) is smaller.
    Returns a (k, d) array; a component with zero variance is all zeros.
    """
    n, d = X.shape
    use_gram = n < d
    A = X @ X.T if use_gram else X.T @ X
    dim = A.shape[0]
    scale = max(float(np.abs(A).max()), 1e-300)
    rng = np.random.default_rng(0)
    found: list[np.ndarray] = []
    comps = np.zeros((k, d))
    for c in range(k):
        v = rng.standard_normal(dim)
        for u in found:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        eig = 0.0
        for _ in range(max_iter):
            w = A @ v
            for u in found:
                w -= (u @ w) * u
            eig = float(np.linalg.norm(w))
            if eig <= 1e-12 * scale:
                break
            w /= eig
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        if eig <= 1e-12 * scale:
            break
        found.append(v)
        direction = X.T @ v if use_gram else v
        direction = direction / np.linalg.norm(direction)
        if direction[np.argmax(np.abs(direction))] < 0:
            direction = -direction
        comps[c] = direction
    return comps


class KernelPCA2D(TransformerMixin, BaseEstimator):
    """Center flattened kernels and project them onto the top principal directions.

    Parameters
    ----------
    n_components : int
        Number of directions kept (2 for plotting).
    tol, max_iter : float, int
        Power-iteration stopping rule per component.
    """

    def __init__(self, n_components: int = 2, tol: float = PCA_TOL, max_iter: int = PCA_MAX_ITER):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(_stack(X), dtype=np.float64, ensure_min_samples=2)
        self.mean_ = X.mean(axis=0)
        self.components_ = _top_components(X - self.mean_, self.n_components, self.tol, self.max_iter)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, ["mean_", "components_"])
        X = check_array(_stack(X), dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


def _stack(X):
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], GeneratedKernel):
        return np.stack([k.data.reshape(-1) for k in X])
    X = np.asarray(X)
    return X.reshape(X.shape[0], -1) if X.ndim > 2 else X


def project_weights_2d(kernels: Sequence[GeneratedKernel] | np.ndarray, classes: Sequence | None = None,
                       method: str = "pca") -> list[tuple[float, float, object]]:
    """(x, y, class) per kernel on the top-2 principal directions."""
    if method != "pca":
        raise UsageError(f"unsupported projection {method!r}; only 'pca' is built in")
    if len(kernels) < 2:
        raise UsageError(f"projection needs at least 2 kernels, got {len(kernels)}")
    if classes is None:
        classes = [k.meta.get("class", "") if isinstance(k, GeneratedKernel) else "" for k in kernels]
    xy = KernelPCA2D(2).fit_transform(kernels)
    return [(float(a), float(b), c) for (a, b), c in zip(xy, classes)]


def write_projection_csv(path: str | os.PathLike, points, indices: Sequence[int] | None = None) -> Path:
    """CSV with columns ``index,class,x,y``; doubles as the kernel sidecar."""
    indices = range(len(points)) if indices is None else indices
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "class", "x", "y"])
        for i, (x, y, c) in zip(indices, points):
            w.writerow([i, c, repr(x), repr(y)])
    return Path(path)


def min_pairwise_distance(kernels: Sequence[GeneratedKernel]) -> float:
    """Smallest Frobenius distance between any two kernels."""
    flat = np.stack([k.data.reshape(-1).astype(np.float64) for k in kernels])
    return float(pdist(flat).min())
