"""Normalized Laplacian, Jacobi eigendecomposition and the graph Fourier transform."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dataset import Graph, adjacency_digest, fmt17
from .errors import NumericalError, ValidationError

JACOBI_RTOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; an isolated node gets an all-zero row and column."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValidationError("adjacency must be symmetric")
    if np.any(a < 0):
        raise ValidationError("adjacency must have nonnegative weights")
    if np.any(np.diag(a) != 0):
        raise ValidationError("adjacency must have a zero diagonal")
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    upper = np.triu(inv_sqrt[:, None] * a * inv_sqrt[None, :], 1)
    lap = -(upper + upper.T)
    np.fill_diagonal(lap, nz.astype(np.float64))
    return lap


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Circle-method schedule: n-1 (or n) rounds of disjoint pairs covering every (p, q) once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[k], players[m - 1 - k]) for k in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        p = np.array([pq[0] for pq in pairs], dtype=np.intp)
        q = np.array([pq[1] for pq in pairs], dtype=np.intp)
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _off_norm(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def symmetric_eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-pairs of a real symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the ``n/2`` rotations of a round touch disjoint rows and can be
    applied together. Iterates until the off-diagonal Frobenius norm drops
    to ``1e-12 * ||m||_F``.

    Returns:
        (eigenvalues ascending, eigenvectors as columns). Each column is
        signed so that its largest-magnitude entry (first on ties) is positive.

    Raises:
        ValidationError: input not square or not symmetric within 1e-12.
        NumericalError: no convergence within 100 sweeps.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"matrix must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix contains non-finite values")
    if a.size and np.max(np.abs(a - a.T)) > 1e-12:
        raise ValidationError("matrix is not symmetric within 1e-12")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    tol = JACOBI_RTOL * float(np.linalg.norm(a))
    rounds = _round_robin(n)

    off = _off_norm(a)
    sweeps = 0
    while off > tol:
        if sweeps == JACOBI_MAX_SWEEPS:
            raise NumericalError(
                f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps; "
                f"off-diagonal residual {off:.3e} (target {tol:.3e})"
            )
        for p, q in rounds:
            apq = a[p, q]
            # entries below rounding of both diagonals are dropped, not rotated
            small = 100.0 * np.abs(apq)
            tiny = (np.abs(a[p, p]) + small == np.abs(a[p, p])) & (np.abs(a[q, q]) + small == np.abs(a[q, q]))
            a[p[tiny], q[tiny]] = 0.0
            a[q[tiny], p[tiny]] = 0.0
            rot = (apq != 0.0) & ~tiny
            if not np.any(rot):
                continue
            p, q, apq = p[rot], q[rot], apq[rot]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(1.0 + theta * theta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            cc, sc = c[:, None], s[:, None]

            rp, rq = a[p, :], a[q, :]
            a[p, :], a[q, :] = cc * rp - sc * rq, sc * rp + cc * rq
            cp, cq = a[:, p], a[:, q]
            a[:, p], a[:, q] = cp * c - cq * s, cp * s + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = vp * c - vq * s, vp * s + vq * c
        sweeps += 1
        off = _off_norm(a)

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    w, v = w[order], v[:, order]
    if n:
        lead = np.argmax(np.abs(v), axis=0)
        signs = np.where(v[lead, np.arange(n)] < 0, -1.0, 1.0)
        v = v * signs[None, :]
    return w, v


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Cached eigen-pairs of one graph's normalized Laplacian."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    graph_key: str = ""
    laplacian: np.ndarray | None = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=np.float64)
        u = np.asarray(self.eigenvectors, dtype=np.float64)
        if lam.ndim != 1 or u.shape != (lam.size, lam.size):
            raise ValidationError(
                f"basis shapes disagree: eigenvalues {lam.shape}, eigenvectors {u.shape}"
            )
        for arr in (lam, u):
            arr.flags.writeable = False
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenvectors", u)

    @property
    def size(self) -> int:
        return self.eigenvalues.size

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray, graph_key: str | None = None) -> "SpectralBasis":
        lap = normalized_laplacian(adjacency)
        lam, u = symmetric_eigh(lap)
        key = graph_key if graph_key is not None else adjacency_digest(adjacency)
        lap.flags.writeable = False
        return cls(lam, u, key, lap)


def gft(basis: SpectralBasis, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] != basis.size:
        raise ValidationError(f"signal has {h.shape[0]} rows, basis has {basis.size}")
    return basis.eigenvectors.T @ h


def igft(basis: SpectralBasis, h_hat: np.ndarray) -> np.ndarray:
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h_hat.shape[0] != basis.size:
        raise ValidationError(f"spectrum has {h_hat.shape[0]} rows, basis has {basis.size}")
    return basis.eigenvectors @ h_hat


class BasisCache:
    """Write-once map from adjacency digest to its :class:`SpectralBasis`.

    Lookups are lock-free; insertion takes a lock and keeps the first stored
    value if two threads raced to compute the same key.
    """

    def __init__(self):
        self._store: dict[str, SpectralBasis] = {}
        self._lock = threading.Lock()
        self.decompositions = 0
        self.hits = 0

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store

    def get(self, key: str) -> SpectralBasis | None:
        return self._store.get(key)

    def insert(self, basis: SpectralBasis) -> SpectralBasis:
        with self._lock:
            return self._store.setdefault(basis.graph_key, basis)

    def basis_for(self, graph: Graph) -> SpectralBasis:
        key = graph.adjacency_key
        found = self._store.get(key)
        if found is not None:
            self.hits += 1
            return found
        basis = SpectralBasis.from_adjacency(graph.adjacency, key)
        with self._lock:
            self.decompositions += 1
        return self.insert(basis)


def basis_for(cache: BasisCache, graph: Graph) -> SpectralBasis:
    return cache.basis_for(graph)


def dump_basis(basis: SpectralBasis, path) -> None:
    """Eigenvalues on the first line, then one row of U per line."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(fmt17(x) for x in basis.eigenvalues) + "\n")
        for row in basis.eigenvectors:
            fh.write(",".join(fmt17(x) for x in row) + "\n")
