"""Graph Laplacians, random link-failure models and consensus projections.

All stacked network vectors in this package are laid out node-major: a vector
of length ``N*M`` holds ``N`` blocks of ``M`` entries, one block per sensor.
Operators of the form ``L (x) I_M`` are applied blockwise by reshaping the
stacked vector to an ``(N, M)`` array, so the Kronecker product is never formed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

Edge = tuple[int, int]

ZERO_ROW_TOL = 1e-12
PSD_TOL = 1e-10
# lambda_2 below this fraction of lambda_N is reported as exactly zero
DISCONNECTED_RTOL = 1e-9


class GraphError(ValueError):
    pass


def _laplacian_spectrum(a: np.ndarray) -> np.ndarray:
    """Eigenvalues with the all-ones direction deflated exactly.

    A plain symmetric eigensolver returns the zero eigenvalue with an error of
    order ``eps * ||L||``; closed forms that divide by ``2 a b lambda + c`` with
    large ``b`` amplify that error, so the known null vector is split off with a
    Householder reflection first.
    """
    n = a.shape[0]
    if n == 1:
        return np.zeros(1)
    u = np.full(n, 1.0 / np.sqrt(n))
    u[0] += 1.0
    u /= np.linalg.norm(u)
    Q = (np.eye(n) - 2.0 * np.outer(u, u))[:, 1:]  # orthonormal basis of the complement of 1
    rest = np.linalg.eigvalsh(Q.T @ a @ Q)
    return np.sort(np.concatenate([[0.0], rest]))


class LaplacianMatrix:
    """Immutable symmetric positive-semidefinite graph Laplacian.

    Entries may be weighted (mean Laplacians of link-failure models are), but
    every instance is checked for symmetry, zero row sums and PSD-ness.
    """

    __slots__ = ("_entries", "_eigenvalues")

    def __init__(self, entries: np.ndarray):
        a = np.array(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise GraphError(f"Laplacian must be a non-empty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise GraphError("Laplacian has non-finite entries")
        if not np.array_equal(a, a.T):
            raise GraphError("Laplacian is not symmetric")
        if np.max(np.abs(a.sum(axis=1))) > ZERO_ROW_TOL * max(1.0, np.abs(a).max()):
            raise GraphError("Laplacian rows do not sum to zero")
        eig = _laplacian_spectrum(a)
        if eig[0] < -PSD_TOL * max(1.0, eig[-1]):
            raise GraphError(f"Laplacian is not positive semidefinite (min eigenvalue {eig[0]:.3e})")
        a.setflags(write=False)
        eig.setflags(write=False)
        self._entries = a
        self._eigenvalues = eig

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def n_nodes(self) -> int:
        return self._entries.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues in ascending order."""
        return self._eigenvalues

    def edges(self) -> list[Edge]:
        """Undirected edges ``(u, v)`` with ``u < v`` and a nonzero weight, sorted."""
        u, v = np.nonzero(np.triu(self._entries, k=1))
        return [(int(a), int(b)) for a, b in zip(u, v)]

    def ordered_links(self) -> list[Edge]:
        """Ordered pairs ``(n, l)``, receiver first, sorted lexicographically."""
        return sorted([(u, v) for u, v in self.edges()] + [(v, u) for u, v in self.edges()])

    def is_unweighted(self) -> bool:
        off = self._entries[~np.eye(self.n_nodes, dtype=bool)]
        return bool(np.all((off == 0.0) | (off == -1.0)))

    def __array__(self, dtype=None, copy=None):
        return self._entries if dtype is None else self._entries.astype(dtype)

    def __eq__(self, other) -> bool:
        return isinstance(other, LaplacianMatrix) and np.array_equal(self._entries, other._entries)

    def __hash__(self):
        return hash(self._entries.tobytes())

    def __repr__(self) -> str:
        return f"LaplacianMatrix(n_nodes={self.n_nodes}, edges={len(self.edges())})"


def laplacian_from_edges(n_nodes: int, edges: Iterable[Sequence[int]]) -> LaplacianMatrix:
    """Build ``L = D - A`` for a simple undirected graph."""
    if int(n_nodes) != n_nodes or n_nodes < 1:
        raise GraphError(f"n_nodes must be a positive integer, got {n_nodes!r}")
    n_nodes = int(n_nodes)
    L = np.zeros((n_nodes, n_nodes))
    seen: set[Edge] = set()
    for edge in edges:
        u, v = (int(e) for e in edge)
        if not (0 <= u < n_nodes and 0 <= v < n_nodes):
            raise GraphError(f"edge ({u}, {v}) has a node index outside [0, {n_nodes})")
        if u == v:
            raise GraphError(f"edge ({u}, {v}) is a self-loop")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise GraphError(f"edge ({u}, {v}) is duplicated")
        seen.add(key)
        L[u, v] = L[v, u] = -1.0
        L[u, u] += 1.0
        L[v, v] += 1.0
    return LaplacianMatrix(L)


def topology_edges(name: str, n_nodes: int) -> list[Edge]:
    """Edge lists for the named topologies ``complete``, ring, path and star."""
    n = int(n_nodes)
    if name == "complete":
        return [(u, v) for u in range(n) for v in range(u + 1, n)]
    if name == "ring":
        if n < 3:
            raise GraphError("a ring needs at least 3 nodes")
        return [(u, u + 1) for u in range(n - 1)] + [(0, n - 1)]
    if name == "path":
        return [(u, u + 1) for u in range(n - 1)]
    if name == "star":
        return [(0, v) for v in range(1, n)]
    raise GraphError(f"unknown topology {name!r}; expected complete, ring, path or star")


def named_laplacian(name: str, n_nodes: int) -> LaplacianMatrix:
    return laplacian_from_edges(n_nodes, topology_edges(name, n_nodes))


def algebraic_connectivity(L: LaplacianMatrix) -> float:
    """Second-smallest eigenvalue; exactly 0.0 for disconnected graphs."""
    eig = L.eigenvalues
    if len(eig) < 2:
        return 0.0
    lam2 = float(eig[1])
    if lam2 <= DISCONNECTED_RTOL * max(float(eig[-1]), 1e-300):
        return 0.0
    return lam2


def kron_apply(L: LaplacianMatrix | np.ndarray, x: np.ndarray, param_dim: int) -> np.ndarray:
    """Compute ``(L (x) I_M) x`` for a stacked vector without forming the product."""
    A = np.asarray(L, dtype=float)
    x = np.asarray(x, dtype=float)
    n = A.shape[0]
    if x.shape != (n * param_dim,):
        raise ValueError(f"expected stacked vector of length {n * param_dim}, got shape {x.shape}")
    return (A @ x.reshape(n, param_dim)).reshape(-1)


# -- link failures ---------------------------------------------------------

LINK_KINDS = ("fixed", "erasure", "gossip", "custom")


@dataclass(frozen=True, eq=False)
class LinkFailureModel:
    """Distribution of the per-iteration Laplacian ``L(i)``, i.i.d. over time.

    ``erasure`` drops every base edge independently with probability ``p``;
    ``gossip`` activates exactly one base edge chosen uniformly; ``custom``
    delegates to ``sampler(rng) -> iterable of edges`` (which may be spatially
    correlated) and needs ``declared_mean`` for any closed-form use.
    """

    base: LaplacianMatrix
    kind: str = "fixed"
    p: float = 0.0
    sampler: Callable[[np.random.Generator], Iterable[Sequence[int]]] | None = None
    declared_mean: LaplacianMatrix | None = None
    _edges: tuple[Edge, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise GraphError(f"unknown link-failure kind {self.kind!r}")
        if not self.base.is_unweighted():
            raise GraphError("link-failure base graph must be unweighted")
        if self.kind == "erasure" and not 0.0 <= self.p <= 1.0:
            raise GraphError(f"erasure probability must lie in [0, 1], got {self.p}")
        if self.kind == "custom" and self.sampler is None:
            raise GraphError("custom link-failure model needs a sampler")
        edges = tuple(self.base.edges())
        if self.kind == "gossip" and not edges:
            raise GraphError("gossip needs at least one base edge")
        object.__setattr__(self, "_edges", edges)

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self._edges

    @property
    def n_nodes(self) -> int:
        return self.base.n_nodes

    def sample_active(self, rng: np.random.Generator, size: int) -> np.ndarray | None:
        """Boolean activity mask of shape ``(size, n_edges)``; ``None`` means all active.

        Uses only ``rng.random`` so that drawing in chunks gives the same stream
        as drawing one iteration at a time.
        """
        E = len(self._edges)
        if self.kind == "fixed":
            return None
        if self.kind == "erasure":
            return rng.random((size, E)) >= self.p
        if self.kind == "gossip":
            pick = np.minimum((rng.random(size) * E).astype(np.int64), E - 1)
            mask = np.zeros((size, E), dtype=bool)
            mask[np.arange(size), pick] = True
            return mask
        index = {e: k for k, e in enumerate(self._edges)}
        mask = np.zeros((size, E), dtype=bool)
        for t in range(size):
            for edge in self.sampler(rng):
                u, v = (int(e) for e in edge)
                key = (min(u, v), max(u, v))
                if key not in index:
                    raise GraphError(f"custom sampler returned edge ({u}, {v}) which is not in the base graph")
                mask[t, index[key]] = True
        return mask

    def laplacian_from_mask(self, mask: np.ndarray | None) -> LaplacianMatrix:
        if mask is None:
            return self.base
        return laplacian_from_edges(self.n_nodes, [e for e, on in zip(self._edges, mask) if on])


def sample_laplacian(model: LinkFailureModel, rng: np.random.Generator) -> LaplacianMatrix:
    """Draw one ``L(i)``; a pure function of the model and the generator state."""
    mask = model.sample_active(rng, 1)
    return model.laplacian_from_mask(None if mask is None else mask[0])


def mean_laplacian(model: LinkFailureModel) -> LaplacianMatrix:
    """Closed-form ``E[L(i)]``."""
    B = model.base.entries
    if model.kind == "fixed":
        return model.base
    if model.kind == "erasure":
        return LaplacianMatrix((1.0 - model.p) * B)
    if model.kind == "gossip":
        return LaplacianMatrix(B / len(model.edges))
    if model.declared_mean is None:
        raise GraphError(
            "custom link-failure model has no declared mean; estimate it empirically "
            "(e.g. empirical_mean_laplacian) and pass it as declared_mean"
        )
    return model.declared_mean


def empirical_mean_laplacian(model: LinkFailureModel, rng: np.random.Generator, n_draws: int) -> np.ndarray:
    """Monte-Carlo estimate of ``E[L(i)]`` from ``n_draws`` samples."""
    mask = model.sample_active(rng, n_draws)
    E = len(model.edges)
    freq = np.ones(E) if mask is None else mask.mean(axis=0)
    n = model.n_nodes
    out = np.zeros((n, n))
    for (u, v), w in zip(model.edges, freq):
        out[u, v] -= w
        out[v, u] -= w
        out[u, u] += w
        out[v, v] += w
    return out


# -- consensus subspace ----------------------------------------------------


@dataclass(frozen=True)
class ConsensusProjector:
    """Orthogonal projector onto ``{1_N (x) y}``, i.e. ``(1/N) 1 1^T (x) I_M``."""

    n_nodes: int
    param_dim: int

    def __post_init__(self):
        if self.n_nodes < 1 or self.param_dim < 1:
            raise ValueError("n_nodes and param_dim must be positive")

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_nodes * self.param_dim,):
            raise ValueError(
                f"expected stacked vector of length {self.n_nodes * self.param_dim}, got shape {x.shape}"
            )
        avg = x.reshape(self.n_nodes, self.param_dim).mean(axis=0)
        return np.tile(avg, self.n_nodes)


def consensus_split(x: np.ndarray, proj: ConsensusProjector) -> tuple[np.ndarray, np.ndarray]:
    """Split a stacked vector into its consensus part and the orthogonal disagreement."""
    xc = proj.apply(x)
    return xc, np.asarray(x, dtype=float) - xc
