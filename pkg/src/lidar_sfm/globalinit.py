"""Global pose initialisation: maximum spanning tree seeding plus pose-graph optimisation.

Poses are world-from-station; an edge ``T_ij`` maps station-j coordinates into
station i, so a consistent graph satisfies ``T_j = T_i T_ij``.
"""
from __future__ import annotations

import logging
from collections import deque

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geom import RigidTransform, transform_error
from .residuals import pose_graph_residual
from .solver import PoseParams, ResidualTerm, SolverOptions, minimize

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


def largest_component(edges):
    """Station ids of the largest connected component (ties: the one holding the smallest id)."""
    nodes = sorted({e.i for e in edges} | {e.j for e in edges})
    if not nodes:
        raise GraphError("empty pose graph")
    pos = {n: k for k, n in enumerate(nodes)}
    rows = [pos[e.i] for e in edges]
    cols = [pos[e.j] for e in edges]
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
    _, labels = connected_components(g, directed=False)
    sizes = np.bincount(labels)
    best = max(range(len(sizes)), key=lambda c: (sizes[c], -min(k for k, lab in enumerate(labels) if lab == c)))
    return [n for n, lab in zip(nodes, labels) if lab == best]


def maximum_spanning_tree(edges):
    """Kruskal on support weights, heaviest first; ties go to the smaller ``(i, j)``."""
    if not edges:
        raise GraphError("empty pose graph")
    parent = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = []
    for e in sorted(edges, key=lambda e: (-e.support, min(e.i, e.j), max(e.i, e.j))):
        a, b = find(e.i), find(e.j)
        if a != b:
            parent[max(a, b)] = min(a, b)
            tree.append(e)
    return tree


def chain_initialize(tree, root):
    """Breadth-first composition from ``root`` (identity). Returns ``{station: pose}``."""
    adj = {}
    for e in tree:
        adj.setdefault(e.i, []).append((e.j, e.transform))
        adj.setdefault(e.j, []).append((e.i, e.transform.inverse()))
    poses = {root: RigidTransform()}
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j, T_ij in sorted(adj.get(i, []), key=lambda x: x[0]):
            if j not in poses:
                poses[j] = poses[i] @ T_ij
                queue.append(j)
    return poses


def pose_graph_problem(edges, poses, gauge):
    """Parameter blocks and the residual term of the pose graph."""
    ids = sorted(poses)
    pos = {s: k for k, s in enumerate(ids)}
    R = np.stack([poses[s].R for s in ids])
    t = np.stack([poses[s].t for s in ids])
    params = {"poses": PoseParams(R, t, [s == gauge for s in ids])}
    ei = np.array([pos[e.i] for e in edges], dtype=np.int64)
    ej = np.array([pos[e.j] for e in edges], dtype=np.int64)
    Rij = np.stack([e.transform.R for e in edges]) if edges else np.zeros((0, 3, 3))
    tij = np.stack([e.transform.t for e in edges]) if edges else np.zeros((0, 3))

    def evaluate(p, with_jac):
        P = p["poses"]
        r, Ji, Jj = pose_graph_residual(P.R[ei], P.t[ei], P.R[ej], P.t[ej], Rij, tij)
        if not with_jac:
            return r, None
        return r, [("poses", ei, Ji), ("poses", ej, Jj)]

    return params, ResidualTerm("pose_graph", evaluate), ids


def edge_residuals(edges, poses):
    """Per-edge (angle deg, translation m) of ``T_ij`` against ``T_i^-1 T_j``."""
    out = {}
    for e in edges:
        out[e.key] = transform_error(poses[e.i].inverse() @ poses[e.j], e.transform)
    return out


def pose_graph_optimize(edges, poses, gauge, options: SolverOptions | None = None):
    """Minimise the sum of squared twist residuals. Returns ``(poses, report)``."""
    params, term, ids = pose_graph_problem(edges, poses, gauge)
    res = minimize(params, [term], options or SolverOptions(max_iterations=100))
    P = res.params["poses"]
    out = {}
    for k, s in enumerate(ids):
        U, _, Vt = np.linalg.svd(P.R[k])
        out[s] = RigidTransform(U @ Vt, P.t[k])
    if not res.converged:
        log.warning("pose graph optimisation stopped: %s", res.termination)
    report = {
        "initial_cost": res.initial_cost,
        "final_cost": res.final_cost,
        "iterations": res.iterations,
        "termination": res.termination,
        "converged": res.converged,
        "cost_trace": res.cost_trace,
    }
    return out, report


def initialize(edges, options: SolverOptions | None = None):
    """MST seeding and pose-graph optimisation on the largest component.

    Returns ``(poses, report)``; stations outside the component are listed in
    the report and get no pose.
    """
    component = set(largest_component(edges))
    used = [e for e in edges if e.i in component and e.j in component]
    all_nodes = sorted({e.i for e in edges} | {e.j for e in edges})
    gauge = min(component)
    tree = maximum_spanning_tree(used)
    init = chain_initialize(tree, gauge)
    poses, rep = pose_graph_optimize(used, init, gauge, options)
    resid = edge_residuals(used, poses)
    rep.update(
        gauge=gauge,
        stations=len(component),
        excluded=[s for s in all_nodes if s not in component],
        tree=[[e.i, e.j] for e in tree],
        edges=len(used),
        max_residual_deg=max((a for a, _ in resid.values()), default=0.0),
        max_residual_m=max((t for _, t in resid.values()), default=0.0),
    )
    if rep["excluded"]:
        log.warning("%d stations outside the largest component were dropped", len(rep["excluded"]))
    return poses, rep
