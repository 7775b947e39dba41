"""Communication graphs and doubly stochastic gossip weights."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InvalidInputError

# Padgett's Florentine marriage network without the isolated Pucci family.
FLORENTINE_FAMILIES = (
    "Acciaiuoli", "Albizzi", "Barbadori", "Bischeri", "Castellani",
    "Ginori", "Guadagni", "Lamberteschi", "Medici", "Pazzi",
    "Peruzzi", "Ridolfi", "Salviati", "Strozzi", "Tornabuoni",
)
FLORENTINE_EDGES = (
    ("Acciaiuoli", "Medici"),
    ("Albizzi", "Ginori"),
    ("Albizzi", "Guadagni"),
    ("Albizzi", "Medici"),
    ("Barbadori", "Castellani"),
    ("Barbadori", "Medici"),
    ("Bischeri", "Guadagni"),
    ("Bischeri", "Peruzzi"),
    ("Bischeri", "Strozzi"),
    ("Castellani", "Peruzzi"),
    ("Castellani", "Strozzi"),
    ("Guadagni", "Lamberteschi"),
    ("Guadagni", "Tornabuoni"),
    ("Medici", "Ridolfi"),
    ("Medici", "Salviati"),
    ("Medici", "Tornabuoni"),
    ("Pazzi", "Salviati"),
    ("Peruzzi", "Strozzi"),
    ("Ridolfi", "Strozzi"),
    ("Ridolfi", "Tornabuoni"),
)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected connected graph on nodes ``0..n-1``."""

    n: int
    adjacency: np.ndarray
    name: str = "custom"
    labels: tuple[str, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (self.n, self.n):
            raise InvalidInputError(f"adjacency must be {self.n}x{self.n}, got {adj.shape}")
        if np.any(np.diag(adj)):
            raise InvalidInputError("self-loops are not allowed")
        if not np.array_equal(adj, adj.T):
            raise InvalidInputError("adjacency must be symmetric")
        adj = adj.copy()
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        if not _connected(adj):
            raise InvalidInputError(f"graph {self.name!r} is not connected")

    @classmethod
    def from_edges(cls, n: int, edges, name: str = "custom", labels=None) -> "Graph":
        adj = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise InvalidInputError(f"edge ({i}, {j}) out of range for n={n}")
            adj[i, j] = adj[j, i] = True
        return cls(n, adj, name, labels)

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return [(int(a), int(b)) for a, b in zip(i, j)]

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.nonzero(self.adjacency[i])[0]]

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "name": self.name, "edges": [list(e) for e in self.edges]})

    @classmethod
    def from_json(cls, text: str) -> "Graph":
        doc = json.loads(text)
        return cls.from_edges(doc["n"], doc["edges"], doc.get("name", "custom"))


def _connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    if n == 0:
        return False
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.nonzero(adj[i] & ~seen)[0]:
            seen[j] = True
            stack.append(int(j))
    return bool(seen.all())


def build_ring(n: int) -> Graph:
    if n < 3:
        raise InvalidInputError(f"ring needs n >= 3, got {n}")
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)], "ring")


def build_chain(n: int) -> Graph:
    if n < 2:
        raise InvalidInputError(f"chain needs n >= 2, got {n}")
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)], "chain")


def build_complete(n: int) -> Graph:
    if n < 2:
        raise InvalidInputError(f"complete graph needs n >= 2, got {n}")
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)], "complete")


def build_florentine() -> Graph:
    index = {name: k for k, name in enumerate(FLORENTINE_FAMILIES)}
    edges = [(index[a], index[b]) for a, b in FLORENTINE_EDGES]
    return Graph.from_edges(len(FLORENTINE_FAMILIES), edges, "florentine", FLORENTINE_FAMILIES)


def build_graph(name: str, n: int | None = None) -> Graph:
    if name == "florentine":
        if n not in (None, len(FLORENTINE_FAMILIES)):
            raise InvalidInputError(f"florentine graph has {len(FLORENTINE_FAMILIES)} nodes, got n={n}")
        return build_florentine()
    builders = {"ring": build_ring, "chain": build_chain, "complete": build_complete}
    if name not in builders:
        raise InvalidInputError(f"unknown topology {name!r}")
    if n is None:
        raise InvalidInputError(f"topology {name!r} needs a node count")
    return builders[name](n)


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Symmetric doubly stochastic weights ``w`` respecting a graph's sparsity."""

    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InvalidInputError("mixing matrix must be square")
        if np.any(w < 0):
            raise InvalidInputError("mixing weights must be non-negative")
        if np.any(np.abs(w.sum(axis=1) - 1) > 1e-9) or np.any(np.abs(w.sum(axis=0) - 1) > 1e-9):
            raise InvalidInputError("mixing matrix must be doubly stochastic")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @classmethod
    def identity(cls, n: int) -> "MixingMatrix":
        return cls(np.eye(n))

    def respects(self, graph: Graph) -> bool:
        allowed = graph.adjacency | np.eye(graph.n, dtype=bool)
        return bool(np.all((self.w > 0) <= allowed))


def metropolis_weights(graph: Graph) -> MixingMatrix:
    """``w_ij = 1 / (1 + max(deg_i, deg_j))`` on edges; the diagonal takes the rest."""
    deg = graph.degrees()
    w = np.zeros((graph.n, graph.n))
    for i, j in graph.edges:
        w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    for i in range(graph.n):
        w[i, i] = 1.0 - w[i].sum()
    return MixingMatrix(w)


def spectral_gap(mixing: MixingMatrix, tol: float = 1e-13, max_iter: int = 200_000,
                 seed: int = 0) -> float:
    """``1 - |lambda_2|`` by power iteration on ``W - 11^T/n``.

    The magnitude estimate is ``||B v||`` for unit ``v``, which converges even
    when ``lambda_2`` and ``-lambda_2`` are both eigenvalues.
    """
    w = mixing.w
    n = w.shape[0]
    if n == 1:
        return 1.0
    deflated = w - np.full((n, n), 1.0 / n)
    v = np.random.default_rng(seed).standard_normal(n)
    v -= v.mean()
    v /= np.linalg.norm(v)
    est = np.inf
    for _ in range(max_iter):
        u = deflated @ v
        norm = np.linalg.norm(u)
        if norm < 1e-300:
            return 1.0
        if abs(norm - est) < tol:
            return float(1.0 - norm)
        est = norm
        v = u / norm
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")
