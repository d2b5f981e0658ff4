"""Base costs, centered kernels, and kernel-PCA embeddings.

A cost spec names one of the supported base costs on a space (powered
Euclidean distances, an exponential-kernel cost, a precomputed embedding, or
an explicit dense matrix). Costs of negative type induce a positive
semi-definite centered kernel; embedding a measure means diagonalizing that
kernel and keeping the leading principal coordinates, after which squared
Euclidean distances between features reproduce the base cost (exactly at full
rank, in the least-squares sense when truncated).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .measures import DiscreteMeasure

DEFAULT_DIM = 20
DENSE_EIGH_CUTOFF = 4096
_CNT_REL_TOL = 1e-6
_SUBSPACE_SEED = 1797569733

POINT_KINDS = ("sq_euclidean", "euclidean", "p_norm", "exp_kernel")
ALL_KINDS = POINT_KINDS + ("precomputed_embedding", "dense_matrix")


@dataclass(frozen=True, eq=False)
class CostSpec:
    """A base cost on one input space.

    Kinds: ``sq_euclidean``, ``euclidean`` (plain distance), ``p_norm``
    (``||x - x'||^p`` for 0 < p <= 2), ``exp_kernel`` (Gaussian-kernel cost
    ``2 (1 - exp(-||x - x'||^2 / (2 sigma^2)))``), ``precomputed_embedding``
    (squared distances of externally supplied coordinates), and
    ``dense_matrix`` (explicit symmetric matrix with zero diagonal).
    """

    kind: str
    p: float | None = None
    sigma: float | None = None
    path: str | None = None
    payload: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "p_norm":
            if self.p is None or not (0.0 < self.p <= 2.0):
                raise ValueError(f"p_norm exponent must satisfy 0 < p <= 2, got {self.p!r}")
        if self.kind == "exp_kernel":
            if self.sigma is None or not (self.sigma > 0.0):
                raise ValueError(f"exp_kernel radius must be positive, got {self.sigma!r}")
        if self.kind in ("precomputed_embedding", "dense_matrix") and self.payload is None:
            raise ValueError(f"{self.kind} cost needs its file payload")

    @property
    def differentiable(self) -> bool:
        return (
            self.kind in ("sq_euclidean", "exp_kernel")
            or (self.kind == "p_norm" and self.p is not None and self.p > 1.0)
        )

    def describe(self) -> str:
        if self.kind == "p_norm":
            return f"p_norm:{self.p:g}"
        if self.kind == "exp_kernel":
            return f"exp:{self.sigma:g}"
        if self.kind in ("precomputed_embedding", "dense_matrix"):
            tag = "embedding" if self.kind == "precomputed_embedding" else "matrix"
            return f"{tag}:{self.path}"
        return self.kind


def _load_numeric_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as handle:
        lines = [ln.strip() for ln in handle if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty file")
    first = lines[0].split(",")[0].strip()
    try:
        float(first)
        start = 0
    except ValueError:
        start = 1  # header row, e.g. a point-cloud style file
    if start == len(lines):
        raise ValueError(f"{path}: no numeric rows")
    data = np.loadtxt(io.StringIO("\n".join(lines[start:])), delimiter=",", ndmin=2)
    if start == 1:
        names = [c.strip() for c in lines[0].split(",")]
        if names and names[-1] == "w":
            data = data[:, :-1]
    return data


def load_embedding_payload(path) -> np.ndarray:
    coords = _load_numeric_csv(path)
    if not np.all(np.isfinite(coords)):
        raise ValueError(f"{path}: embedding coordinates contain non-finite entries")
    return coords


def load_matrix_payload(path) -> np.ndarray:
    mat = _load_numeric_csv(path)
    if mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{path}: cost matrix must be square, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{path}: cost matrix contains non-finite entries")
    if np.abs(mat - mat.T).max() > 1e-9:
        raise ValueError(f"{path}: cost matrix is not symmetric within 1e-9")
    if np.abs(np.diag(mat)).max() > 1e-9:
        raise ValueError(f"{path}: cost matrix diagonal is not zero within 1e-9")
    mat = 0.5 * (mat + mat.T)
    np.fill_diagonal(mat, 0.0)
    return mat


def parse_cost_spec(text: str) -> CostSpec:
    """Parse the CLI cost grammar.

    Accepted forms: ``sq_euclidean``, ``euclidean``, ``p_norm:<p>``,
    ``exp:<sigma>``, ``embedding:<path>``, ``matrix:<path>``.
    """
    text = text.strip()
    if text in ("sq_euclidean", "euclidean"):
        return CostSpec(kind=text)
    head, sep, arg = text.partition(":")
    if not sep:
        raise ValueError(f"unknown cost spec {text!r}")
    if head == "p_norm":
        try:
            return CostSpec(kind="p_norm", p=float(arg))
        except ValueError as exc:
            raise ValueError(f"bad p_norm exponent in {text!r}") from exc
    if head == "exp":
        try:
            return CostSpec(kind="exp_kernel", sigma=float(arg))
        except ValueError as exc:
            raise ValueError(f"bad exp radius in {text!r}") from exc
    if head == "embedding":
        return CostSpec(kind="precomputed_embedding", path=arg, payload=load_embedding_payload(arg))
    if head == "matrix":
        return CostSpec(kind="dense_matrix", path=arg, payload=load_matrix_payload(arg))
    raise ValueError(f"unknown cost spec {text!r}")


def squared_distances(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    if y is None:
        y = x
    sq = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * (x @ y.T)
    return np.maximum(sq, 0.0)


def cost_matrix(spec: CostSpec, measure: DiscreteMeasure) -> np.ndarray:
    """Evaluate the self cost matrix of a measure under a cost spec."""
    if spec.kind == "dense_matrix":
        if spec.payload.shape[0] != measure.n:
            raise ValueError(
                f"cost matrix size {spec.payload.shape[0]} does not match {measure.n} points"
            )
        return np.array(spec.payload)
    if spec.kind == "precomputed_embedding":
        if spec.payload.shape[0] != measure.n:
            raise ValueError(
                f"embedding rows {spec.payload.shape[0]} do not match {measure.n} points"
            )
        c = squared_distances(spec.payload)
    elif spec.kind == "sq_euclidean":
        c = squared_distances(measure.points)
    elif spec.kind == "euclidean":
        c = np.sqrt(squared_distances(measure.points))
    elif spec.kind == "p_norm":
        c = squared_distances(measure.points) ** (spec.p / 2.0)
    elif spec.kind == "exp_kernel":
        sq = squared_distances(measure.points)
        c = 2.0 * (1.0 - np.exp(-sq / (2.0 * spec.sigma**2)))
    else:  # pragma: no cover - guarded by CostSpec validation
        raise ValueError(f"unhandled cost kind {spec.kind!r}")
    np.fill_diagonal(c, 0.0)
    return c


def cost_gradients(spec: CostSpec, points: np.ndarray) -> np.ndarray:
    """Gradients ``G[m, i] = grad_x c(x, points[i]) at x = points[m]``.

    Only differentiable kinds are supported; ``p_norm`` needs p > 1 so the
    gradient vanishes at coincident points instead of blowing up.
    """
    if not spec.differentiable:
        raise ValueError(f"cost kind {spec.describe()!r} is not differentiable")
    diff = points[:, None, :] - points[None, :, :]
    if spec.kind == "sq_euclidean":
        return 2.0 * diff
    sq = (diff**2).sum(axis=2)
    if spec.kind == "exp_kernel":
        s2 = spec.sigma**2
        return (2.0 / s2) * np.exp(-sq / (2.0 * s2))[:, :, None] * diff
    # p_norm, p > 1: p ||d||^(p-2) d, extended by 0 at d = 0.
    with np.errstate(divide="ignore"):
        scale = np.where(sq > 0.0, sq ** ((spec.p - 2.0) / 2.0), 0.0)
    return spec.p * scale[:, :, None] * diff


@dataclass(frozen=True, eq=False)
class CenteredKernel:
    """A kernel matrix whose weighted row sums vanish.

    Obtained from a cost matrix by the base-point construction plus weighted
    double centering; for costs of negative type the matrix is PSD up to
    round-off.
    """

    matrix: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        k, w = self.matrix, self.weights
        if k.ndim != 2 or k.shape[0] != k.shape[1] or w.shape != (k.shape[0],):
            raise ValueError("kernel matrix and weights have inconsistent shapes")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def diagonal(self) -> np.ndarray:
        return np.diag(self.matrix).copy()


def kernel_from_cost(cost: np.ndarray, weights: np.ndarray, base_index: int = 0) -> CenteredKernel:
    """Build the centered kernel of a cost matrix.

    The raw kernel ``(c(x_i, x_base) + c(x_base, x_j) - c(x_i, x_j)) / 2`` is
    double-centered against the weights; the result does not depend on the
    base point, which the tests check directly.
    """
    cost = np.asarray(cost, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = cost.shape[0]
    if not 0 <= base_index < n:
        raise ValueError(f"base index {base_index} out of range for size {n}")
    raw = 0.5 * (cost[:, base_index][:, None] + cost[base_index, :][None, :] - cost)
    row = weights @ raw
    col = raw @ weights
    grand = float(weights @ row)
    centered = raw - row[None, :] - col[:, None] + grand
    centered = 0.5 * (centered + centered.T)
    return CenteredKernel(matrix=centered, weights=weights)


@dataclass(frozen=True, eq=False)
class KpcaResult:
    features: np.ndarray
    eigenvalues: np.ndarray  # top-D, after clamping, descending
    eigenvectors: np.ndarray  # (n, D), sign-normalized
    clamped: int
    explained_variance: float


def _dense_spectrum(matrix):
    vals, vecs = scipy.linalg.eigh(matrix)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def _subspace_spectrum(matrix, k, tol=1e-8, max_sweeps=1000):
    """Top-k eigenpairs by blocked subspace iteration with Rayleigh-Ritz.

    Deterministic: the start block comes from a fixed-seed generator, so
    repeated runs agree bit for bit. Convergence targets the eigenpairs of
    largest magnitude, which matches the leading positive eigenvalues for the
    (approximately PSD) centered kernels this is used on.
    """
    n = matrix.shape[0]
    b = min(n, k + 8)
    rng = np.random.default_rng(_SUBSPACE_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((n, b)))
    y = matrix @ q
    prev = None
    for _ in range(max_sweeps):
        t = q.T @ y
        t = 0.5 * (t + t.T)
        vals, rot = scipy.linalg.eigh(t)
        order = np.argsort(vals)[::-1]
        vals, rot = vals[order], rot[:, order]
        q = q @ rot
        y = y @ rot
        if prev is not None and np.all(
            np.abs(vals[:k] - prev[:k]) <= tol * np.maximum(1.0, np.abs(vals[:k]))
        ):
            break
        prev = vals
        q, _ = np.linalg.qr(y)
        y = matrix @ q
    return vals[:k], q[:, :k]


def _apply_sign_convention(vecs: np.ndarray) -> np.ndarray:
    out = np.array(vecs)
    for d in range(out.shape[1]):
        idx = int(np.argmax(np.abs(out[:, d])))
        if out[idx, d] < 0.0:
            out[:, d] = -out[:, d]
    return out


def kernel_pca(kernel: CenteredKernel, dim: int, dense_cutoff: int = DENSE_EIGH_CUTOFF) -> KpcaResult:
    """Leading principal coordinates of a centered kernel.

    Eigenvalues are sorted descending; negative ones among the selected
    leading block are clamped to zero (their count is reported). Features are
    ``V_d * sqrt(lambda_d)``. The explained-variance ratio uses the positive
    part of the spectrum; when no positive eigenvalue exists the cost is not
    of negative type on this sample and embedding is refused.
    """
    n = kernel.n
    if not 1 <= dim <= n:
        raise ValueError(f"embedding dimension {dim} out of range for {n} points")
    if n <= dense_cutoff:
        vals, vecs = _dense_spectrum(kernel.matrix)
        positive_total = float(np.maximum(vals, 0.0).sum())
    else:
        vals, vecs = _subspace_spectrum(kernel.matrix, dim)
        # Only the leading block is known; the positive spectrum sums to the
        # trace for a PSD matrix, which is the relevant regime here.
        positive_total = float(max(np.trace(kernel.matrix), np.maximum(vals, 0.0).sum()))
    top_vals = vals[:dim]
    top_vecs = _apply_sign_convention(vecs[:, :dim])
    clamped = int(np.sum(top_vals < 0.0))
    top_vals = np.maximum(top_vals, 0.0)
    scale = float(np.abs(vals).max()) if vals.size else 0.0
    if positive_total <= 1e-12 * max(scale, 1e-300):
        raise ValueError("kernel has no positive eigenvalue; cost is not CNT on this sample")
    explained = float(top_vals.sum() / positive_total)
    features = top_vecs * np.sqrt(top_vals)[None, :]
    return KpcaResult(
        features=features,
        eigenvalues=top_vals,
        eigenvectors=top_vecs,
        clamped=clamped,
        explained_variance=explained,
    )


class EmbeddedMeasure:
    """A measure carried into feature space.

    Attributes:
        features: (n, D) principal coordinates, weighted-centered.
        weights: marginal weights.
        half_sq_norms: s_i = ||X_i||^2 / 2, the augmentation coordinate.
        explained_variance: kept spectral mass ratio (1.0 on exact paths).
        eigenvalues / eigenvectors: kernel spectrum backing the features,
            None on the exact fast paths where no eigendecomposition ran.
    """

    def __init__(self, features, weights, explained_variance=1.0, eigenvalues=None, eigenvectors=None):
        features = np.asarray(features, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        if features.ndim != 2 or weights.shape != (features.shape[0],):
            raise ValueError("features and weights have inconsistent shapes")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite entries")
        self.features = np.ascontiguousarray(features)
        self.features.setflags(write=False)
        self.weights = np.ascontiguousarray(weights)
        self.weights.setflags(write=False)
        self.half_sq_norms = 0.5 * (self.features**2).sum(axis=1)
        self.half_sq_norms.setflags(write=False)
        self.explained_variance = float(explained_variance)
        self.eigenvalues = None if eigenvalues is None else np.array(eigenvalues)
        self.eigenvectors = None if eigenvectors is None else np.array(eigenvectors)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def augmented(self) -> np.ndarray:
        """Features with the s column appended, shape (n, D + 1)."""
        return np.column_stack([self.features, self.half_sq_norms])

    def covariance(self) -> np.ndarray:
        return self.features.T @ (self.weights[:, None] * self.features)

    def trace_second_moment(self) -> float:
        """T = sum_i a_i ||X_i||^2 = trace of the feature covariance."""
        return float(self.weights @ (self.features**2).sum(axis=1))

    def __repr__(self):
        return f"EmbeddedMeasure(n={self.n}, dim={self.dim}, ev={self.explained_variance:.3f})"


def _centered(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return points - (weights @ points)[None, :]


def embed_measure(
    measure: DiscreteMeasure,
    spec: CostSpec,
    dim: int = DEFAULT_DIM,
    dense_cutoff: int = DENSE_EIGH_CUTOFF,
) -> EmbeddedMeasure:
    """Embed a measure so squared feature distances reproduce the base cost.

    For ``sq_euclidean`` (and precomputed embeddings) with the requested
    dimension at least the ambient one, the exact fast path returns the
    weighted-mean-centered coordinates directly; everything else goes through
    the centered kernel and its PCA.
    """
    if spec.kind == "sq_euclidean" and dim >= measure.dim:
        return EmbeddedMeasure(_centered(measure.points, measure.weights), measure.weights)
    if spec.kind == "precomputed_embedding" and dim >= spec.payload.shape[1]:
        if spec.payload.shape[0] != measure.n:
            raise ValueError(
                f"embedding rows {spec.payload.shape[0]} do not match {measure.n} points"
            )
        return EmbeddedMeasure(_centered(spec.payload, measure.weights), measure.weights)
    if dim > measure.n:
        raise ValueError(f"embedding dimension {dim} exceeds support size {measure.n}")
    cost = cost_matrix(spec, measure)
    kernel = kernel_from_cost(cost, measure.weights)
    res = kernel_pca(kernel, dim, dense_cutoff=dense_cutoff)
    return EmbeddedMeasure(
        res.features,
        measure.weights,
        explained_variance=res.explained_variance,
        eigenvalues=res.eigenvalues,
        eigenvectors=res.eigenvectors,
    )


@dataclass(frozen=True)
class CntDiagnostic:
    min_eigenvalue: float
    max_abs_eigenvalue: float
    is_cnt: bool


def cnt_diagnostic(cost: np.ndarray, weights: np.ndarray) -> CntDiagnostic:
    """Check conditional negativity of a cost matrix on given weights.

    The cost has negative type iff the centered kernel is PSD; round-off is
    absorbed by the relative gate ``lambda_min >= -1e-6 * max |lambda|``.
    """
    kernel = kernel_from_cost(cost, weights)
    vals = scipy.linalg.eigvalsh(kernel.matrix)
    lo = float(vals[0])
    scale = float(np.abs(vals).max()) if vals.size else 0.0
    return CntDiagnostic(
        min_eigenvalue=lo,
        max_abs_eigenvalue=scale,
        is_cnt=bool(lo >= -_CNT_REL_TOL * max(scale, 1e-300)),
    )


def covariance_spectrum(embedded: EmbeddedMeasure) -> np.ndarray:
    """Eigenvalues of the weighted feature covariance, descending, >= 0."""
    vals = scipy.linalg.eigvalsh(embedded.covariance())
    return np.maximum(vals[::-1], 0.0)
