"""Subsystem extraction from a partition and per-subsystem observability screening."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph import DirectedGraph, Partition, modularity
from .model import AugmentedModel, NonlinearModel, Trajectory
from .sensitivity import default_rank_tol, rank_and_condition


@dataclass(frozen=True)
class SubsystemSpec:
    """One subsystem; all indices are global (augmented-state, output, input)."""

    id: int
    states: tuple[int, ...]
    params: tuple[int, ...]          # augmented indices, i.e. n_x + j
    outputs: tuple[int, ...]
    inputs: tuple[int, ...]
    chi: tuple[int, ...] = ()        # non-owned augmented entries entering local dynamics
    neighbors: tuple[int, ...] = ()

    def __post_init__(self):
        if set(self.chi) & set(self.states):
            raise ValueError("interaction set overlaps local states")

    @property
    def local(self) -> tuple[int, ...]:
        return tuple(self.states) + tuple(self.params)

    def names(self, model: NonlinearModel) -> dict:
        aug = model.augmented_names
        return {"id": self.id,
                "states": [aug[i] for i in self.states],
                "parameters": [aug[i] for i in self.params],
                "outputs": [model.output_names[k] for k in self.outputs],
                "inputs": [model.input_names[k] for k in self.inputs],
                "interactions": [aug[i] for i in self.chi],
                "neighbors": list(self.neighbors)}


def _structure(model: NonlinearModel, x, theta, u):
    if model.structure is not None:
        J = model.structure(x, u, theta)
        return J["fx"], J["ftheta"], J["fu"], J["hx"], J["htheta"]
    fx, fth = model.jac_f(x, u, theta)
    hx, hth = model.jac_h(x, theta)
    return fx - np.eye(model.n_x), fth, model.jac_f_u(x, u, theta), hx, hth


def _finish(model, groups_states, groups_params, groups_outputs, equilibrium, u, threshold):
    x, theta = (np.asarray(v, float) for v in equilibrium)
    u = np.zeros(model.n_u) if u is None else np.asarray(u, float)
    fx, fth, fu, _, _ = _structure(model, x, theta, u)
    dep = np.hstack([fx, fth])                     # local state rows, augmented columns
    owner = {}
    for g, (s, p) in enumerate(zip(groups_states, groups_params)):
        for i in (*s, *p):
            owner[i] = g
    specs = []
    for g, (s, p, o) in enumerate(zip(groups_states, groups_params, groups_outputs)):
        rows = list(s)
        cols = np.nonzero(np.any(np.abs(dep[rows]) > threshold, axis=0))[0] if rows else []
        local = set(s) | set(p)
        chi = tuple(int(c) for c in cols if c not in local)
        inputs = tuple(int(k) for k in np.nonzero(np.any(np.abs(fu[rows]) > threshold, axis=0))[0]) if rows else ()
        neigh = tuple(sorted({owner[c] for c in chi if c in owner}))
        specs.append(SubsystemSpec(g, tuple(sorted(s)), tuple(sorted(p)), tuple(sorted(o)), inputs, chi, neigh))
    return specs


def extract_subsystems(graph: DirectedGraph, partition: Partition, model: NonlinearModel,
                       equilibrium, u=None, threshold: float = 1e-9) -> list[SubsystemSpec]:
    """One subsystem per community of ``partition`` over the nodes of ``graph``."""
    if len(partition) != graph.n:
        raise ValueError("partition does not match graph")
    gs, gp, go = [], [], []
    for members in partition.communities():
        nodes = [graph.nodes[i] for i in members]
        s = [nd.index for nd in nodes if nd.kind == "state"]
        p = [model.n_x + nd.index for nd in nodes if nd.kind == "parameter"]
        o = [nd.index for nd in nodes if nd.kind == "output"]
        if o and not s:
            raise ValueError(f"community {len(gs)} has outputs but no states; it cannot be estimated")
        gs.append(s)
        gp.append(p)
        go.append(o)
    return _finish(model, gs, gp, go, equilibrium, u, threshold)


def subsystems_from_groups(model: NonlinearModel, groups: Sequence[Sequence[str]], equilibrium,
                           u=None, threshold: float = 1e-9) -> list[SubsystemSpec]:
    """Subsystems from explicit name groups (state, parameter and output names mixed).

    Outputs not named anywhere are attached to the group owning the state
    they depend on most strongly.
    """
    gs, gp, go = [], [], []
    seen = set()
    for grp in groups:
        s, p, o = [], [], []
        for name in grp:
            if name in seen:
                raise ValueError(f"{name!r} appears in more than one group")
            seen.add(name)
            if name in model.state_names:
                s.append(model.state_names.index(name))
            elif name in model.param_names:
                p.append(model.n_x + model.param_names.index(name))
            elif name in model.output_names:
                o.append(model.output_names.index(name))
            else:
                raise ValueError(f"unknown variable {name!r}")
        gs.append(s)
        gp.append(p)
        go.append(o)
    named_outputs = {k for o in go for k in o}
    if len(named_outputs) < model.n_y:
        x, theta = (np.asarray(v, float) for v in equilibrium)
        hx = model.jac_h(x, theta)[0]
        for k in range(model.n_y):
            if k in named_outputs:
                continue
            strength = [np.abs(hx[k, s]).sum() if s else 0.0 for s in gs]
            if max(strength) == 0:
                raise ValueError(f"output {model.output_names[k]} depends on no grouped state")
            go[int(np.argmax(strength))].append(k)
    return _finish(model, gs, gp, go, equilibrium, u, threshold)


def groups_to_partition(graph: DirectedGraph, specs: Sequence[SubsystemSpec], n_x: int) -> Partition:
    """Partition of the graph nodes induced by subsystem membership."""
    labels = np.full(graph.n, -1)
    for sp in specs:
        for i, nd in enumerate(graph.nodes):
            if (nd.kind == "state" and nd.index in sp.states) or \
               (nd.kind == "parameter" and n_x + nd.index in sp.params) or \
               (nd.kind == "output" and nd.index in sp.outputs):
                labels[i] = sp.id
    if np.any(labels < 0):
        missing = [graph.nodes[i].name for i in np.nonzero(labels < 0)[0]]
        raise ValueError(f"graph nodes not covered by any subsystem: {missing}")
    return Partition(labels)


@dataclass(frozen=True)
class SubsystemVerdict:
    id: int
    rank: int
    n_columns: int
    condition: float
    passed: bool
    reason: str = ""


def subsystem_observability_check(specs: Sequence[SubsystemSpec], aug: AugmentedModel, traj: Trajectory,
                                  N: int, scales=None, output_scales=None, t: Optional[int] = None,
                                  rank_tol: Optional[float] = None) -> list[SubsystemVerdict]:
    """Rank test of each subsystem's local windowed sensitivity matrix.

    Non-owned entries are treated as known signals, so only the local blocks
    of the augmented Jacobians enter the products.
    """
    t = len(traj) - 1 if t is None else t
    if t - N + 1 < 0:
        raise ValueError("window starts before the trajectory")
    n = aug.n
    cs = np.ones(n) if scales is None else np.asarray(scales, float)
    ys = np.ones(aug.base.n_y) if output_scales is None else np.asarray(output_scales, float)
    A_seq, C_seq = [], []
    for k in range(t - N + 1, t + 1):
        z = traj.augmented(k)
        C_seq.append(aug.jac_h(z))
        if k < t:
            A_seq.append(aug.jac_f(z, traj.input_at(k)))
    out = []
    for sp in specs:
        loc = list(sp.local)
        if not sp.outputs:
            out.append(SubsystemVerdict(sp.id, 0, len(loc), float("inf"), False, "no outputs"))
            continue
        if not loc:
            out.append(SubsystemVerdict(sp.id, 0, 0, float("inf"), False, "no local variables"))
            continue
        rows = list(sp.outputs)
        Phi = np.eye(len(loc))
        blocks = []
        for j in range(N):
            blocks.append(C_seq[j][np.ix_(rows, loc)] @ Phi)
            if j < N - 1:
                Phi = A_seq[j][np.ix_(loc, loc)] @ Phi
        S = np.vstack(blocks) * cs[loc][None, :] / np.tile(ys[rows], N)[:, None]
        rep = rank_and_condition(S, rank_tol if rank_tol is not None else default_rank_tol(S.shape))
        ok = rep.rank == len(loc)
        out.append(SubsystemVerdict(sp.id, rep.rank, len(loc), rep.condition, ok,
                                    "" if ok else f"rank {rep.rank} < {len(loc)}"))
    return out


@dataclass
class DecompositionResult:
    partition: Partition
    omega: float
    subsystems: list[SubsystemSpec]
    verdicts: list[SubsystemVerdict] = field(default_factory=list)
    candidates: list[tuple[Partition, float]] = field(default_factory=list)
    graph: Optional[DirectedGraph] = None

    def check(self):
        if self.graph is not None and abs(modularity(self.graph, self.partition) - self.omega) > 1e-12:
            raise ValueError("stored modularity disagrees with the partition")

    def to_dict(self, model: NonlinearModel) -> dict:
        def members(p: Partition):
            return [[self.graph.nodes[i].name for i in c] for c in p.communities()] if self.graph else []
        d = {"omega": self.omega,
             "n_subsystems": len(self.subsystems),
             "subsystems": [sp.names(model) for sp in self.subsystems],
             "verdicts": [{"id": v.id, "rank": v.rank, "n_columns": v.n_columns,
                           "condition": v.condition if np.isfinite(v.condition) else None, "passed": v.passed, "reason": v.reason}
                          for v in self.verdicts],
             "communities": members(self.partition),
             "candidates": [{"omega": q, "communities": members(p)} for p, q in self.candidates]}
        return d

    def to_json(self, model: NonlinearModel, path=None) -> str:
        text = json.dumps(self.to_dict(model), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text
