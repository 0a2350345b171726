"""Spatial adjacency construction, sparsification, and map statistics.

Two kinds of N x N weight matrices flow through the engine: a static
geographic one built from a thresholded Gaussian kernel on great-circle
distances, and dynamic ones generated per encoder block from spatial
attention and sparsified under a sparsity-ratio rule. Everything here is
plain numpy over immutable arrays; the differentiable mirror used inside
model training reuses `sparsify_decision` so both paths branch identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class GeoAdjacency:
    """Static distance-kernel weights with their construction parameters."""
    matrix: np.ndarray          # N x N, zero diagonal, entries in [0, 1]
    sigma: float                # kernel width, km
    kappa: float                # distance cutoff, km

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def nonzero_ratio(self) -> float:
        n = self.n
        return float(np.count_nonzero(self.matrix)) / float(n * n)


@dataclass(frozen=True)
class GeneratedAdjacency:
    """One dynamically generated map plus the sparsification parameters."""
    matrix: np.ndarray
    tau: float
    rho: float
    source_block: int = 0
    truncated: bool = True      # which branch of the sparsity rule fired


@dataclass(frozen=True)
class AdjacencyOptions:
    """Post-processing switches for generated maps.

    Defaults follow the generated-matrix convention: symmetric, self-loops
    on, weights truncated. The geographic matrix uses none of these.
    """
    set_diag: bool = True
    undirected: bool = True
    truncate: bool = True
    threshold: float | None = None   # overrides tau = 1/N when set

    def __post_init__(self):
        if self.threshold is not None and not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")


GEO_OPTIONS = AdjacencyOptions(set_diag=False, undirected=False, truncate=False)


def haversine_matrix(latitudes, longitudes) -> np.ndarray:
    """Pairwise great-circle distances in km (symmetric, zero diagonal)."""
    lat = np.radians(np.asarray(latitudes, dtype=np.float64))
    lon = np.radians(np.asarray(longitudes, dtype=np.float64))
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    a = np.clip(a, 0.0, 1.0)
    dist = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))
    np.fill_diagonal(dist, 0.0)
    return dist


def gaussian_kernel_adjacency(dist: np.ndarray, sigma: float | None = None,
                              kappa: float | None = None) -> GeoAdjacency:
    """W_ij = exp(-dist^2 / sigma^2) for dist <= kappa, else 0; no self-loops.

    sigma defaults to the standard deviation of the off-diagonal distances,
    kappa to their mean (the cutoff is otherwise a free parameter).
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    off = dist[~np.eye(n, dtype=bool)] if n > 1 else np.array([0.0])
    if sigma is None:
        sigma = float(off.std())
    if kappa is None:
        kappa = float(off.mean())
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    w = np.exp(-(dist ** 2) / (sigma ** 2))
    w[dist > kappa] = 0.0
    np.fill_diagonal(w, 0.0)
    return GeoAdjacency(matrix=w, sigma=sigma, kappa=kappa)


def spatial_attention(z_block: np.ndarray, wq: np.ndarray, wk: np.ndarray) -> np.ndarray:
    """Node attention score M_n from one encoder block's input.

    The temporal axis is flattened into features, projected to node-level
    queries/keys, and normalized row-wise: softmax(Q K^T / sqrt(D_k)).
    """
    z = np.asarray(z_block, dtype=np.float64)
    n = z.shape[0]
    flat = z.reshape(n, -1)
    if flat.shape[1] != wq.shape[0] or wq.shape != wk.shape:
        raise ValueError(f"spatial_attention: input features {flat.shape[1]} vs projections {wq.shape}/{wk.shape}")
    q = flat @ wq
    k = flat @ wk
    scores = (q @ k.T) / np.sqrt(wq.shape[1])
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def hard_threshold(m: np.ndarray, tau: float) -> np.ndarray:
    """Entries below tau go to zero; the rest are kept verbatim."""
    m = np.asarray(m, dtype=np.float64)
    return np.where(m < tau, 0.0, m)


def mobility_indicator(a: np.ndarray) -> float:
    """Fraction of strictly positive entries of a square matrix."""
    a = np.asarray(a)
    n = a.shape[0]
    return float(np.count_nonzero(a > 0)) / float(n * n)


def sparsify_decision(m: np.ndarray, geo: GeoAdjacency | None = None,
                      rho_default: float = 0.001, tau: float | None = None,
                      literal_rho: bool = False) -> tuple[float, float, bool]:
    """Branch of the sparsity-ratio rule for one attention map.

    Returns (tau, rho, use_thresholded). tau defaults to 1/N. rho is the
    non-zero ratio of the geographic matrix when one exists, else
    ``rho_default``; ``literal_rho`` instead reproduces the pseudocode
    as printed (rho read off the attention map itself). The thresholded
    candidate is used when its non-zero ratio exceeds rho, otherwise the
    map is kept untruncated.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if tau is None:
        tau = 1.0 / n
    if geo is not None:
        rho = mobility_indicator(m) if literal_rho else geo.nonzero_ratio()
    else:
        rho = rho_default
    candidate_ratio = mobility_indicator(hard_threshold(m, tau))
    return tau, rho, candidate_ratio > rho


def apply_adjacency_options(a: np.ndarray, options: AdjacencyOptions) -> np.ndarray:
    """Symmetrize by (A + A^T)/2 and/or write 1.0 on the diagonal."""
    out = np.asarray(a, dtype=np.float64).copy()
    if options.undirected:
        out = (out + out.T) / 2.0
    if options.set_diag:
        np.fill_diagonal(out, 1.0)
    return out


def sparsify(m: np.ndarray, geo: GeoAdjacency | None = None,
             options: AdjacencyOptions | None = None,
             rho_default: float = 0.001, source_block: int = 0,
             literal_rho: bool = False) -> GeneratedAdjacency:
    """Sparsify a row-stochastic attention map into a generated adjacency.

    tau = 1/N (or ``options.threshold``); the thresholded candidate wins only
    when it stays denser than the sparsity ratio rho, then the adjacency
    options are applied on top.
    """
    if options is None:
        options = AdjacencyOptions()
    m = np.asarray(m, dtype=np.float64)
    tau, rho, use_thresholded = sparsify_decision(
        m, geo, rho_default=rho_default, tau=options.threshold, literal_rho=literal_rho)
    if options.truncate and use_thresholded:
        out = hard_threshold(m, tau)
        truncated = True
    else:
        out = m.copy()
        truncated = False
    out = apply_adjacency_options(out, options)
    return GeneratedAdjacency(matrix=out, tau=tau, rho=rho,
                              source_block=source_block, truncated=truncated)


def normalize_sym(a: np.ndarray) -> np.ndarray:
    """D^(-1/2) A D^(-1/2) with D = diag(row sums); zero-degree rows stay zero."""
    a = np.asarray(a, dtype=np.float64)
    deg = a.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dis = np.where(deg > 0, deg ** -0.5, 0.0)
    return a * dis[..., :, None] * dis[..., None, :]


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------

def write_snapshot(path: str | Path, matrix: np.ndarray, block: int, sample_start: str) -> None:
    """CSV of N x N floats under a one-line `# N=.. block=.. sample_start=..` header."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    lines = [f"# N={n} block={block} sample_start={sample_start}"]
    for row in matrix:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_snapshot(path: str | Path) -> tuple[np.ndarray, int, str]:
    """Inverse of :func:`write_snapshot`; returns (matrix, block, sample_start)."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = text[0]
    if not header.startswith("# "):
        raise ValueError(f"{path}: missing snapshot header")
    fields = dict(part.split("=", 1) for part in header[2:].split())
    n = int(fields["N"])
    rows = [[float(v) for v in line.split(",")] for line in text[1:]]
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.shape != (n, n):
        raise ValueError(f"{path}: expected {n}x{n} matrix, got {matrix.shape}")
    return matrix, int(fields["block"]), fields["sample_start"]
