"""Dense linear algebra and clustering statistics.

Everything here works on plain ``numpy`` arrays. Matrices are small (at most a
few hundred rows), so the routines favour clarity and robustness over speed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError


@dataclass(frozen=True)
class EigResult:
    values: np.ndarray
    vectors: np.ndarray


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


@dataclass(frozen=True)
class Partition:
    """Cluster labels over items; ``labels[i]`` is in ``[0, k)``."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise DimensionError("labels must be a 1-D vector")
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        """Build a partition from arbitrary hashable labels, numbered by first appearance."""
        codes: dict = {}
        out = [codes.setdefault(lab, len(codes)) for lab in np.asarray(labels).tolist()]
        return cls(np.array(out, dtype=np.int64), max(len(codes), 1))

    def __len__(self) -> int:
        return len(self.labels)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def _labels(p) -> np.ndarray:
    return p.labels if isinstance(p, Partition) else np.asarray(p)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so that its largest-magnitude entry is positive."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _check_symmetric(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-9 * scale:
        raise DimensionError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def jacobi_eig(a, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations on a symmetric matrix.

    Returns unsorted ``(values, vectors)``; columns of ``vectors`` are the
    eigenvectors. Cost is O(n^3) per sweep with a Python-level loop over pairs,
    so keep ``n`` modest.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n < 2 or norm == 0.0:
        return np.diag(a).copy(), v
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    return np.diag(a).copy(), v


def sym_eig(a, method: str = "lapack") -> EigResult:
    """Full spectrum of a symmetric matrix, eigenvalues descending.

    ``method="jacobi"`` uses the in-repo rotation solver instead of LAPACK.
    Eigenvector signs are fixed so the largest-magnitude entry is positive.
    """
    a = _check_symmetric(a)
    if method == "lapack":
        values, vectors = np.linalg.eigh(a)
    elif method == "jacobi":
        values, vectors = jacobi_eig(a)
    else:
        raise ValueError(f"unknown eigen method {method!r}")
    order = np.argsort(-values, kind="stable")
    return EigResult(values[order], _fix_signs(vectors[:, order]))


def top_eigvecs(a, r: int) -> np.ndarray:
    """The ``r`` leading eigenvectors of a symmetric matrix as columns."""
    return sym_eig(a).vectors[:, :r]


def svd(a, method: str = "lapack") -> SvdResult:
    """Thin SVD with descending singular values and sign-fixed left vectors.

    ``method="jacobi"`` builds the decomposition from the Jacobi eigensolver
    applied to the smaller Gram matrix.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("svd expects a 2-D array")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if method == "lapack":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    elif method == "jacobi":
        u, s, vt = _svd_jacobi(a)
    else:
        raise ValueError(f"unknown svd method {method!r}")
    if u.size:
        idx = np.argmax(np.abs(u), axis=0)
        signs = np.sign(u[idx, np.arange(u.shape[1])])
        signs[signs == 0] = 1.0
        u = u * signs
        vt = vt * signs[:, None]
    return SvdResult(u, s, vt)


def _orthonormal_completion(basis: np.ndarray, n: int, need: int) -> np.ndarray:
    """``need`` unit vectors in R^n orthogonal to the columns of ``basis``."""
    out = []
    cols = [basis[:, i] for i in range(basis.shape[1])]
    for e in np.eye(n):
        w = e - sum((c @ e) * c for c in cols) if cols else e.copy()
        nw = np.linalg.norm(w)
        if nw > 1e-8:
            w = w / nw
            cols.append(w)
            out.append(w)
            if len(out) == need:
                break
    return np.array(out).T.reshape(n, need)


def _svd_jacobi(a: np.ndarray):
    m, n = a.shape
    r = min(m, n)
    transpose = m < n
    b = a.T if transpose else a  # b is tall: (rows >= cols)
    vals, vecs = jacobi_eig(b.T @ b)
    order = np.argsort(-vals, kind="stable")
    vals, v = vals[order], vecs[:, order]
    s = np.sqrt(np.clip(vals, 0.0, None))
    u = np.zeros((b.shape[0], r))
    keep = s > 1e-12 * max(s[0] if s.size else 0.0, 1e-300)
    u[:, keep] = (b @ v[:, keep]) / s[keep]
    # re-orthonormalise the computed columns (Gram squaring loses some precision)
    if keep.any():
        q, rr = np.linalg.qr(u[:, keep])
        u[:, keep] = q * np.sign(np.diag(rr))
    if (~keep).any():
        u[:, ~keep] = _orthonormal_completion(u[:, keep], b.shape[0], int((~keep).sum()))
        s[~keep] = 0.0
    if transpose:
        return v, s, u.T
    return u, s, v.T


# ----------------------------------------------------------------- clustering


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if p.ndim != 2:
        raise DimensionError("points must be an (n, d) array")
    return p


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = _sq_dists(points, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, _sq_dists(points, points[idx][None, :])[:, 0])
    return np.array(centers)


def _repair_empty(points, labels, centers, k):
    sizes = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(sizes == 0):
        d = np.sum((points - centers[labels]) ** 2, axis=1)
        d[sizes[labels] <= 1] = -1.0
        i = int(np.argmax(d))
        sizes[labels[i]] -= 1
        labels[i] = j
        sizes[j] = 1
        centers[j] = points[i]
    return labels, centers


def lloyd(points, centers, max_iter: int = 300):
    """Lloyd iterations from given centers.

    Returns ``(labels, centers, wcss_history)``; the history holds the
    within-cluster sum of squares after every assignment step.
    """
    points = _as_points(points)
    centers = np.array(centers, dtype=np.float64, copy=True)
    k = len(centers)
    labels = None
    history = []
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(points, centers), axis=1)
        new, centers = _repair_empty(points, new, centers, k)
        history.append(float(np.sum((points - centers[new]) ** 2)))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centers[j] = points[labels == j].mean(axis=0)
    return labels, centers, history


def _canonical(labels: np.ndarray, k: int) -> np.ndarray:
    mapping = {}
    for lab in labels.tolist():
        mapping.setdefault(lab, len(mapping))
    return np.array([mapping[lab] for lab in labels.tolist()], dtype=np.int64)


def kmeans(points, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> Partition:
    """k-means++ seeded Lloyd clustering, best of ``restarts`` by WCSS.

    Labels are renumbered by first appearance so results are comparable
    across runs.
    """
    points = _as_points(points)
    n = len(points)
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    best, best_wcss = None, np.inf
    for _ in range(max(restarts, 1)):
        labels, _, history = lloyd(points, _kmeanspp(points, k, rng), max_iter)
        if history[-1] < best_wcss:
            best, best_wcss = labels, history[-1]
    return Partition(_canonical(best, k), k)


def wcss(points, part: Partition) -> float:
    points = _as_points(points)
    total = 0.0
    for j in range(part.k):
        members = points[part.labels == j]
        if len(members):
            total += float(np.sum((members - members.mean(axis=0)) ** 2))
    return total


def silhouette(points, part) -> float:
    """Mean Rousseeuw silhouette under Euclidean distance.

    Items in singleton clusters score 0.
    """
    points = _as_points(points)
    labels = _labels(part)
    k = part.k if isinstance(part, Partition) else int(labels.max()) + 1
    if len(labels) != len(points):
        raise DimensionError("partition and points differ in length")
    sizes = np.bincount(labels, minlength=k)
    if k < 2:
        raise ValueError("silhouette needs at least two clusters")
    if np.any(sizes == 0):
        raise ValueError("silhouette got an empty cluster")
    d = np.sqrt(np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1))
    onehot = np.zeros((len(points), k))
    onehot[np.arange(len(points)), labels] = 1.0
    sums = d @ onehot  # (n, k) total distance to each cluster
    own = sizes[labels]
    a = np.where(own > 1, sums[np.arange(len(points)), labels] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(len(points)), labels] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand(p, q) -> float:
    """Permutation-adjusted Rand index between two labelings of the same items."""
    a, b = _labels(p), _labels(q)
    if len(a) != len(b):
        raise ValueError("partitions cover different numbers of items")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if n else 0, bi.max() + 1 if n else 0))
    np.add.at(table, (ai, bi), 1.0)
    index = _comb2(table).sum()
    sa, sb = _comb2(table.sum(axis=1)).sum(), _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sa * sb / total if total > 0 else 0.0
    maximum = 0.5 * (sa + sb)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(dx @ dx), math.sqrt(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("zero variance input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))
