"""Directed variable graph, directed modularity and fast-unfolding community detection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import NonlinearModel

EDGE_THRESHOLD = 1e-9
BRUTE_FORCE_MAX_NODES = 12


@dataclass(frozen=True)
class Node:
    name: str
    kind: str       # "state" | "parameter" | "output"
    index: int      # index into x, theta or y


class DirectedGraph:
    """Unweighted digraph; ``A[i, j] = 1`` means an edge from node j to node i."""

    def __init__(self, nodes: Sequence[Node], A):
        A = np.asarray(A, float)
        n = len(nodes)
        if A.shape != (n, n):
            raise ValueError(f"adjacency shape {A.shape} does not match {n} nodes")
        if np.any(np.diag(A) != 0):
            raise ValueError("self-loops are not allowed")
        self.nodes = tuple(nodes)
        self.A = A
        self.A.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def m(self) -> float:
        return float(self.A.sum())

    @property
    def k_in(self) -> np.ndarray:
        return self.A.sum(axis=1)

    @property
    def k_out(self) -> np.ndarray:
        return self.A.sum(axis=0)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(nd.name for nd in self.nodes)

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def edges(self) -> list[tuple[int, int]]:
        """(source, destination) pairs in row-major order of the destination."""
        dst, src = np.nonzero(self.A)
        return sorted(zip(src.tolist(), dst.tolist()))

    def successors(self, name: str) -> list[str]:
        j = self.index_of(name)
        return [self.nodes[i].name for i in np.nonzero(self.A[:, j])[0]]

    def to_edge_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src", "dst", "src_kind", "dst_kind"])
            for s, d in self.edges():
                w.writerow([self.nodes[s].name, self.nodes[d].name, self.nodes[s].kind, self.nodes[d].kind])
        return path

    def to_adjacency_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["", *self.names])
            for name, row in zip(self.names, self.A):
                w.writerow([name, *(int(v) for v in row)])
        return path

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], names: Sequence[str] = ()) -> "DirectedGraph":
        A = np.zeros((n, n))
        for s, d in edges:
            if s != d:
                A[d, s] = 1.0
        names = names or [f"n{i}" for i in range(n)]
        return cls([Node(nm, "state", i) for i, nm in enumerate(names)], A)


class Partition:
    """Community label per node, relabelled to 0..K-1 by first appearance."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.argsort(np.argsort(first))
        self.labels = rank[inv].astype(int)
        self.labels.setflags(write=False)

    @property
    def n_communities(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def communities(self) -> list[list[int]]:
        return [np.nonzero(self.labels == c)[0].tolist() for c in range(self.n_communities)]

    def key(self) -> tuple[int, ...]:
        return tuple(self.labels.tolist())

    def __eq__(self, other):
        return isinstance(other, Partition) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __len__(self):
        return len(self.labels)

    def __repr__(self):
        return f"Partition({self.labels.tolist()})"

    @classmethod
    def from_groups(cls, n: int, groups: Sequence[Sequence[int]]) -> "Partition":
        labels = np.full(n, -1)
        for g, members in enumerate(groups):
            for i in members:
                if labels[i] != -1:
                    raise ValueError(f"node {i} assigned twice")
                labels[i] = g
        if np.any(labels < 0):
            raise ValueError("some nodes are not assigned to a group")
        return cls(labels)


def _normalized_blocks(model: NonlinearModel, x, theta, u, x_scale, theta_scale, y_scale):
    if model.structure is not None:
        J = model.structure(x, u, theta)
        fx, fth, hx, hth = J["fx"], J["ftheta"], J["hx"], J["htheta"]
    else:
        fx, fth = model.jac_f(x, u, theta)
        hx, hth = model.jac_h(x, theta)
    fx = fx * x_scale[None, :] / x_scale[:, None]
    fth = fth * theta_scale[None, :] / x_scale[:, None]
    hx = hx * x_scale[None, :] / y_scale[:, None]
    hth = hth * theta_scale[None, :] / y_scale[:, None]
    return fx, fth, hx, hth


def _scale(v, fallback):
    s = np.abs(np.asarray(v, float)) if fallback is None else np.asarray(fallback, float)
    return np.where(s > 0, s, 1.0)


def build_graph(model: NonlinearModel, selected, equilibrium, u=None, scales=None,
                threshold: float = EDGE_THRESHOLD) -> DirectedGraph:
    """Graph over the selected states/parameters plus all outputs.

    ``selected`` holds augmented-state indices (a ``SelectionResult`` works).
    Edges come from the model's structural Jacobian (or its one-step
    Jacobian) at ``equilibrium = (x_s, theta_s)``, scaled to relative units;
    entries with magnitude ``<= threshold`` count as zero.
    """
    x, theta = (np.asarray(v, float) for v in equilibrium)
    u = np.zeros(model.n_u) if u is None else np.asarray(u, float)
    idx = sorted(getattr(selected, "selected", selected))
    if any(i < 0 or i >= model.n_x + model.n_p for i in idx):
        raise ValueError("selected index out of range")
    xsc, tsc, ysc = scales if scales is not None else (None, None, None)
    x_scale = _scale(x, xsc)
    theta_scale = _scale(theta, tsc)
    y_scale = _scale(model.output(x, theta), ysc)
    fx, fth, hx, hth = _normalized_blocks(model, x, theta, u, x_scale, theta_scale, y_scale)

    states = [i for i in idx if i < model.n_x]
    params = [i - model.n_x for i in idx if i >= model.n_x]
    nodes = ([Node(model.state_names[i], "state", i) for i in states]
             + [Node(model.param_names[j], "parameter", j) for j in params]
             + [Node(model.output_names[k], "output", k) for k in range(model.n_y)])
    ns, npar = len(states), len(params)
    A = np.zeros((len(nodes), len(nodes)))
    big = lambda M: (np.abs(M) > threshold).astype(float)
    A[:ns, :ns] = big(fx[np.ix_(states, states)])
    A[:ns, ns:ns + npar] = big(fth[np.ix_(states, params)])
    A[ns + npar:, :ns] = big(hx[:, states])
    A[ns + npar:, ns:ns + npar] = big(hth[:, params])
    np.fill_diagonal(A, 0.0)
    return DirectedGraph(nodes, A)


def _modularity_matrix(A) -> tuple[np.ndarray, float]:
    m = float(A.sum())
    if m <= 0:
        raise ValueError("modularity is undefined for a graph without edges")
    return A - np.outer(A.sum(1), A.sum(0)) / m, m


def modularity(graph, partition) -> float:
    """Directed modularity of ``partition`` (graph may also be a raw adjacency matrix)."""
    A = graph.A if isinstance(graph, DirectedGraph) else np.asarray(graph, float)
    labels = partition.labels if isinstance(partition, Partition) else np.asarray(partition)
    if len(labels) != len(A):
        raise ValueError("partition does not cover every node")
    m = float(A.sum())
    if m <= 0:
        raise ValueError("modularity is undefined for a graph without edges")
    lab = Partition(labels).labels
    K = lab.max() + 1
    H = np.zeros((len(lab), K))
    H[np.arange(len(lab)), lab] = 1.0
    inner = np.einsum("ic,ij,jc->c", H, A, H)
    # per-community form: the one-community partition gives exactly 1 - 1 = 0
    return float(np.sum(inner / m - (H.T @ A.sum(1) / m) * (H.T @ A.sum(0) / m)))


# --------------------------------------------------------------------------- louvain

def _local_moves(W: np.ndarray, order: np.ndarray, on_move=None) -> np.ndarray:
    """Best-improvement node moves on weighted digraph ``W`` (self-loops allowed)."""
    n = len(W)
    m = W.sum()
    k_in, k_out = W.sum(1), W.sum(0)
    comm = np.arange(n)
    K_in, K_out = k_in.copy(), k_out.copy()
    sym = W + W.T
    improved = True
    while improved:
        improved = False
        for i in order:
            ci = comm[i]
            # take i out of its community
            K_in[ci] -= k_in[i]
            K_out[ci] -= k_out[i]
            cand = np.unique(np.concatenate([[ci], comm[np.nonzero(sym[i])[0]]]))
            w = np.bincount(comm, weights=sym[i], minlength=n)
            w[ci] -= sym[i, i]          # i's own loop is not a link to its old community
            gain = w[cand] / m - (k_in[i] * K_out[cand] + k_out[i] * K_in[cand]) / m ** 2
            own = gain[cand == ci][0]
            b = int(np.argmax(gain))
            best = cand[b]
            if gain[b] > own + 1e-12 and best != ci:
                comm[i] = best
                improved = True
                if on_move is not None:
                    on_move(comm)
            K_in[comm[i]] += k_in[i]
            K_out[comm[i]] += k_out[i]
    return Partition(comm).labels.copy()


def _aggregate(W: np.ndarray, labels: np.ndarray) -> np.ndarray:
    K = labels.max() + 1
    H = np.zeros((len(labels), K))
    H[np.arange(len(labels)), labels] = 1.0
    return H.T @ W @ H


@dataclass(frozen=True)
class LouvainResult:
    partition: Partition
    omega: float
    levels: tuple[Partition, ...]
    candidates: tuple[tuple[Partition, float], ...]   # best distinct partitions seen, by omega


def louvain_levels(graph: DirectedGraph, node_order: Optional[Sequence[int]] = None,
                   seed: Optional[int] = None, top_k: int = 5) -> LouvainResult:
    """Fast unfolding: local moves, aggregation, repeat until nothing moves.

    ``node_order`` fixes the scan order of the first level; otherwise
    ascending indices, or a shuffle drawn from ``seed``.
    """
    n = graph.n
    if n == 0:
        raise ValueError("empty graph")
    if graph.m == 0:
        p = Partition(np.arange(n))
        return LouvainResult(p, 0.0, (p,), ((p, 0.0),))
    if node_order is None:
        order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    else:
        order = np.asarray(node_order, int)
        if sorted(order.tolist()) != list(range(n)):
            raise ValueError("node_order must be a permutation of the nodes")

    seen: dict[Partition, float] = {}
    flat = np.arange(n)

    def record(comm):
        p = Partition(comm[flat])
        if p not in seen:
            seen[p] = modularity(graph, p)

    W = graph.A.copy()
    levels = []
    while True:
        labels = _local_moves(W, order, on_move=record)
        flat = labels[flat]
        part = Partition(flat)
        levels.append(part)
        seen.setdefault(part, modularity(graph, part))
        if labels.max() + 1 == len(W):
            break
        W = _aggregate(W, labels)
        order = np.arange(len(W))
        if len(W) == 1:
            break
    # the final level can repeat the previous one; drop exact duplicates
    uniq = []
    for p in levels:
        if not uniq or uniq[-1] != p:
            uniq.append(p)
    best = uniq[-1]
    ranked = sorted(seen.items(), key=lambda kv: (-kv[1], kv[0].key()))[:top_k]
    return LouvainResult(best, seen[best], tuple(uniq), tuple(ranked))


def louvain(graph: DirectedGraph, node_order: Optional[Sequence[int]] = None,
            seed: Optional[int] = None) -> Partition:
    return louvain_levels(graph, node_order, seed).partition


def rank_partitions(graph: DirectedGraph, restarts: int = 10, seed: int = 0,
                    top_k: int = 5) -> list[tuple[Partition, float]]:
    """Top distinct partitions over the default order plus ``restarts`` shuffled orders."""
    pool: dict[Partition, float] = {}
    for r in range(restarts + 1):
        res = louvain_levels(graph, seed=None if r == 0 else seed + r, top_k=top_k)
        for p, q in res.candidates:
            pool[p] = q
    return sorted(pool.items(), key=lambda kv: (-kv[1], kv[0].key()))[:top_k]


# --------------------------------------------------------------------------- brute force

def restricted_growth_strings(n: int) -> np.ndarray:
    """All set partitions of ``n`` items as canonical label rows (Bell(n) rows)."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int8)
    rows = np.zeros((1, 1), dtype=np.int8)
    mx = np.zeros(1, dtype=np.int8)
    for _ in range(1, n):
        reps = (mx + 2).astype(np.int64)
        parent = np.repeat(np.arange(len(rows)), reps)
        starts = np.cumsum(reps) - reps
        new = (np.arange(reps.sum()) - np.repeat(starts, reps)).astype(np.int8)
        rows = np.column_stack([rows[parent], new])
        mx = np.maximum(mx[parent], new)
    return rows


def enumerate_partitions_bruteforce(graph: DirectedGraph, batch: int = 200_000) -> tuple[Partition, float]:
    """Exact modularity maximizer over every set partition (at most 12 nodes)."""
    n = graph.n
    if n > BRUTE_FORCE_MAX_NODES:
        raise ValueError(f"brute force refused for {n} > {BRUTE_FORCE_MAX_NODES} nodes")
    if graph.m == 0:
        return Partition(np.zeros(n, dtype=int)), 0.0
    B, m = _modularity_matrix(graph.A)
    rgs = restricted_growth_strings(n)
    best_q, best_row = -np.inf, None
    for s in range(0, len(rgs), batch):
        L = rgs[s:s + batch]
        same = L[:, :, None] == L[:, None, :]
        q = np.einsum("bij,ij->b", same, B) / m
        k = int(np.argmax(q))
        if q[k] > best_q + 1e-15:
            best_q, best_row = float(q[k]), L[k]
    p = Partition(best_row)
    return p, modularity(graph, p)
