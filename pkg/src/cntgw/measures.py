"""Discrete measures, transport couplings, and their delimited-file formats.

A measure is a weighted point cloud. Couplings come in two flavors: dense
matrices, and implicit couplings reconstructed on demand from Sinkhorn dual
potentials so that large plans never have to be materialized at once. All
arrays are float64 and read-only after construction; every consumer in the
package relies on that immutability for thread safety.
"""

from __future__ import annotations

import io
import os

import numpy as np

# Row-block size used whenever an implicit coupling is reduced without
# densification.
BLOCK_SIZE = 1024

_WEIGHT_SUM_TOL = 1e-9
# Total-mass gate for dense plans: meant to catch inconsistent construction,
# not the sub-0.1% mass drift of a truncated symmetrized Sinkhorn run.
_MASS_TOL = 1e-3
TRIPLET_THRESHOLD = 1e-12


def _as_readonly(arr, dtype=np.float64):
    out = np.ascontiguousarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


class DiscreteMeasure:
    """A weighted point cloud in some ambient Euclidean space.

    Args:
        points: array of shape (n, dim) with finite entries.
        weights: array of shape (n,) with strictly positive entries summing
            to 1 within 1e-9. When None, uniform weights are used.
    """

    def __init__(self, points, weights=None):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ValueError(f"points must be a (n, dim) array, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("points contain non-finite entries")
        n = points.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ValueError(f"weights shape {weights.shape} does not match {n} points")
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights contain non-finite entries")
        if np.any(weights <= 0.0):
            raise ValueError("weights must be strictly positive")
        total = float(weights.sum())
        if abs(total - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1 within {_WEIGHT_SUM_TOL}, got {total!r}")
        self.points = _as_readonly(points)
        self.weights = _as_readonly(weights)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def centroid(self) -> np.ndarray:
        """Weighted mean of the support points."""
        return self.weights @ self.points

    def radius(self) -> float:
        """Largest distance from any support point to the weighted centroid."""
        return float(np.sqrt(((self.points - self.centroid()) ** 2).sum(axis=1).max()))

    def normalized(self) -> "DiscreteMeasure":
        """Rescale so the radius is 1. Degenerate single-point clouds pass through."""
        r = self.radius()
        if r <= 0.0:
            return self
        return DiscreteMeasure(self.points / r, self.weights)

    def __repr__(self):
        return f"DiscreteMeasure(n={self.n}, dim={self.dim})"


class DenseCoupling:
    """A transport plan stored as a dense nonnegative matrix.

    Total mass must be 1 within 1e-6; marginal agreement with the stored
    weight vectors is a diagnostic (see marginal_error), not a constructor
    requirement, because truncated Sinkhorn runs produce near-feasible plans.
    """

    def __init__(self, matrix, source_weights, target_weights):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("coupling matrix must be 2-dimensional")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("coupling matrix contains non-finite entries")
        if np.any(matrix < 0.0):
            raise ValueError("coupling matrix has negative entries")
        mass = float(matrix.sum())
        if abs(mass - 1.0) > _MASS_TOL:
            raise ValueError(f"coupling mass must be 1 within {_MASS_TOL}, got {mass!r}")
        source_weights = np.asarray(source_weights, dtype=np.float64)
        target_weights = np.asarray(target_weights, dtype=np.float64)
        if source_weights.shape != (matrix.shape[0],) or target_weights.shape != (matrix.shape[1],):
            raise ValueError("marginal weight shapes do not match the coupling matrix")
        self.matrix = _as_readonly(matrix)
        self.source_weights = _as_readonly(source_weights)
        self.target_weights = _as_readonly(target_weights)

    @property
    def shape(self):
        return self.matrix.shape

    def row_marginal(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    def col_marginal(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def row_blocks(self, block_size: int = BLOCK_SIZE):
        """Yield (i0, i1, matrix block) covering all rows in order."""
        n = self.matrix.shape[0]
        for i0 in range(0, n, block_size):
            i1 = min(i0 + block_size, n)
            yield i0, i1, self.matrix[i0:i1]

    def densify(self) -> "DenseCoupling":
        return self


class ImplicitCoupling:
    """A Sinkhorn plan represented by its dual potentials.

    Entries are reconstructed in the log domain as
    ``pi_ij = a_i b_j exp((f_i + g_j - c_ij) / eps_eff)`` where ``c`` comes
    from the stored cost provider (anything exposing ``shape`` and
    ``rows(i0, i1)``, see the sinkhorn module). Reductions over the plan walk
    row blocks so the full matrix is never required.

    Args:
        f: source potential, shape (n,), finite.
        g: target potential, shape (m,), finite.
        cost: cost provider of shape (n, m).
        source_weights: marginal weights a, shape (n,).
        target_weights: marginal weights b, shape (m,).
        eps_eff: the temperature the potentials were computed at. Recorded
            here so densification never has to guess, in particular after an
            annealed run.
    """

    def __init__(self, f, g, cost, source_weights, target_weights, eps_eff):
        f = np.asarray(f, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        n, m = cost.shape
        if f.shape != (n,) or g.shape != (m,):
            raise ValueError("potential shapes do not match the cost provider")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise ValueError("potentials contain non-finite entries")
        if not (eps_eff > 0.0 and np.isfinite(eps_eff)):
            raise ValueError(f"eps_eff must be positive and finite, got {eps_eff!r}")
        source_weights = np.asarray(source_weights, dtype=np.float64)
        target_weights = np.asarray(target_weights, dtype=np.float64)
        if source_weights.shape != (n,) or target_weights.shape != (m,):
            raise ValueError("marginal weight shapes do not match the cost provider")
        self.f = _as_readonly(f)
        self.g = _as_readonly(g)
        self.cost = cost
        self.source_weights = _as_readonly(source_weights)
        self.target_weights = _as_readonly(target_weights)
        self.eps_eff = float(eps_eff)

    @property
    def shape(self):
        return self.cost.shape

    def row_blocks(self, block_size: int = BLOCK_SIZE):
        """Yield (i0, i1, reconstructed plan block) covering all rows in order."""
        log_a = np.log(self.source_weights)
        log_bg = np.log(self.target_weights) + self.g / self.eps_eff
        n = self.shape[0]
        for i0 in range(0, n, block_size):
            i1 = min(i0 + block_size, n)
            c = self.cost.rows(i0, i1)
            log_p = (log_a[i0:i1] + self.f[i0:i1] / self.eps_eff)[:, None] + log_bg[None, :]
            log_p -= c / self.eps_eff
            yield i0, i1, np.exp(log_p)

    def row_marginal(self) -> np.ndarray:
        out = np.empty(self.shape[0])
        for i0, i1, block in self.row_blocks():
            out[i0:i1] = block.sum(axis=1)
        return out

    def col_marginal(self) -> np.ndarray:
        out = np.zeros(self.shape[1])
        for _, _, block in self.row_blocks():
            out += block.sum(axis=0)
        return out

    def densify(self) -> DenseCoupling:
        """Materialize the plan as a DenseCoupling.

        Raises:
            FloatingPointError: if any reconstructed entry is non-finite,
                reporting the first offending index pair.
        """
        n, m = self.shape
        dense = np.empty((n, m))
        for i0, i1, block in self.row_blocks():
            dense[i0:i1] = block
        if not np.all(np.isfinite(dense)):
            i, j = np.argwhere(~np.isfinite(dense))[0]
            raise FloatingPointError(
                f"implicit coupling has a non-finite entry at ({int(i)}, {int(j)}); "
                "potentials are likely inconsistent with eps_eff"
            )
        return DenseCoupling(dense, self.source_weights, self.target_weights)


def marginal_error(coupling) -> float:
    """Unweighted L1 marginal violation: ||row - a||_1 + ||col - b||_1."""
    row = coupling.row_marginal()
    col = coupling.col_marginal()
    return float(
        np.abs(row - coupling.source_weights).sum() + np.abs(col - coupling.target_weights).sum()
    )


def kl_divergence(coupling) -> float:
    """KL(pi | a x b) with the 0 log 0 = 0 convention.

    For implicit couplings the log-ratio is read off the potentials,
    ``log(pi_ij / (a_i b_j)) = (f_i + g_j - c_ij) / eps_eff``, which avoids
    both densification and any log of a vanishing entry.
    """
    if isinstance(coupling, ImplicitCoupling):
        total = 0.0
        inv_eps = 1.0 / coupling.eps_eff
        for i0, i1, block in coupling.row_blocks():
            c = coupling.cost.rows(i0, i1)
            log_ratio = (coupling.f[i0:i1, None] + coupling.g[None, :] - c) * inv_eps
            total += float((block * log_ratio).sum())
        return total
    pi = coupling.matrix
    ref = np.outer(coupling.source_weights, coupling.target_weights)
    mask = pi > 0.0
    return float((pi[mask] * np.log(pi[mask] / ref[mask])).sum())


def _write_header_comment(handle, header):
    if header:
        for line in str(header).splitlines():
            handle.write(f"# {line}\n")


def load_point_cloud(path) -> DiscreteMeasure:
    """Read a point cloud CSV with header ``x0,x1,...`` and optional ``w``.

    Comment lines starting with '#' are skipped. A missing weight column
    means uniform weights.
    """
    with open(path, "r", encoding="utf-8") as handle:
        lines = [ln.strip() for ln in handle if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty point cloud file")
    names = [c.strip() for c in lines[0].split(",")]
    coord_names = [c for c in names if c != "w"]
    expected = [f"x{i}" for i in range(len(coord_names))]
    if coord_names != expected or names.count("w") > 1 or (
        "w" in names and names[-1] != "w"
    ):
        raise ValueError(
            f"{path}: expected header 'x0,x1,...[,w]', got {lines[0]!r}"
        )
    try:
        data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed numeric data ({exc})") from exc
    if data.shape[1] != len(names):
        raise ValueError(f"{path}: row width {data.shape[1]} does not match header {names}")
    if "w" in names:
        return DiscreteMeasure(data[:, :-1], data[:, -1])
    return DiscreteMeasure(data)


def save_point_cloud(path, measure: DiscreteMeasure, header=None) -> None:
    """Write a point cloud CSV (header ``x0,...,w``) with an optional comment."""
    with open(path, "w", encoding="utf-8") as handle:
        _write_header_comment(handle, header)
        cols = [f"x{i}" for i in range(measure.dim)] + ["w"]
        handle.write(",".join(cols) + "\n")
        data = np.column_stack([measure.points, measure.weights])
        np.savetxt(handle, data, delimiter=",", fmt="%.17g")


def save_coupling(path, coupling, dense: bool = False, header=None) -> None:
    """Write a coupling as i,j,value triplets, or as a dense matrix.

    Triplet mode omits entries below 1e-12. Implicit couplings are walked
    block by block either way.
    """
    n, m = coupling.shape
    with open(path, "w", encoding="utf-8") as handle:
        _write_header_comment(handle, header)
        if dense:
            handle.write(",".join(f"c{j}" for j in range(m)) + "\n")
            for _, _, block in coupling.row_blocks():
                np.savetxt(handle, block, delimiter=",", fmt="%.17g")
        else:
            handle.write("i,j,value\n")
            for i0, _, block in coupling.row_blocks():
                keep = np.argwhere(block >= TRIPLET_THRESHOLD)
                for bi, j in keep:
                    handle.write(f"{i0 + bi},{j},{block[bi, j]:.17g}\n")


def load_coupling(path, source_weights, target_weights) -> DenseCoupling:
    """Read a coupling written by save_coupling (triplet or dense form)."""
    source_weights = np.asarray(source_weights, dtype=np.float64)
    target_weights = np.asarray(target_weights, dtype=np.float64)
    with open(path, "r", encoding="utf-8") as handle:
        lines = [ln.strip() for ln in handle if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty coupling file")
    body = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    if lines[0].startswith("i,j,"):
        matrix = np.zeros((source_weights.size, target_weights.size))
        rows = body[:, 0].astype(int)
        cols = body[:, 1].astype(int)
        if rows.min(initial=0) < 0 or rows.max(initial=0) >= matrix.shape[0] or (
            cols.min(initial=0) < 0 or cols.max(initial=0) >= matrix.shape[1]
        ):
            raise ValueError(f"{path}: triplet indices out of range")
        matrix[rows, cols] = body[:, 2]
    else:
        matrix = body
    return DenseCoupling(matrix, source_weights, target_weights)


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
