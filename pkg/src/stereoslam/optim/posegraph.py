"""Rigid-body (SE(3)) pose-graph optimization.

Each edge (i, j, Z) measures the relative pose Z ~ T_i^-1 T_j between
camera-to-world poses.  The residual is log(Z^-1 T_i^-1 T_j); nodes are
perturbed on the right, T <- T exp(xi), which makes the objective invariant
to a common left (world-frame) transform of all nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..geometry import Pose, ad_twist, adjoint, se3_exp, se3_log
from .lm import LMConfig, run_lm


class DisconnectedGraphError(ValueError):
    pass


@dataclass
class PoseGraphEdge:
    source: int
    target: int
    relative: Pose
    information: np.ndarray | None = None  # 6x6, identity when None

    def info(self) -> np.ndarray:
        return np.eye(6) if self.information is None else np.asarray(self.information, dtype=float)


def edge_residual(Ti: Pose, Tj: Pose, Z: Pose) -> np.ndarray:
    return se3_log(Z.inverse() @ Ti.inverse() @ Tj).vector()


def _jr_inv(r):
    A = ad_twist(r)
    return np.eye(6) + 0.5 * A + (A @ A) / 12.0


@dataclass
class _System:
    H: np.ndarray
    b: np.ndarray

    def max_diagonal(self):
        return float(np.max(np.diag(self.H))) if self.H.size else 0.0

    def gradient_norm(self):
        return float(np.max(np.abs(self.b))) if self.b.size else 0.0


class PoseGraphProblem:
    def __init__(self, nodes: dict, edges, fixed):
        self.ids = sorted(nodes)
        self.pos = {k: i for i, k in enumerate(self.ids)}
        self.edges = list(edges)
        self.fixed = set(fixed)
        self.var = {}
        for k in self.ids:
            if k not in self.fixed:
                self.var[k] = len(self.var)
        self.initial = [nodes[k] for k in self.ids]
        self._infos = [e.info() for e in self.edges]

    def residuals(self, state):
        return [edge_residual(state[self.pos[e.source]], state[self.pos[e.target]], e.relative)
                for e in self.edges]

    def cost(self, state) -> float:
        return float(sum(r @ Om @ r for r, Om in zip(self.residuals(state), self._infos)))

    def linearize(self, state) -> _System:
        n = 6 * len(self.var)
        H = np.zeros((n, n))
        b = np.zeros(n)
        for e, Om in zip(self.edges, self._infos):
            Ti, Tj = state[self.pos[e.source]], state[self.pos[e.target]]
            r = edge_residual(Ti, Tj, e.relative)
            Jr = _jr_inv(r)
            blocks = []
            if e.source in self.var:
                blocks.append((self.var[e.source], -Jr @ adjoint(Tj.inverse() @ Ti)))
            if e.target in self.var:
                blocks.append((self.var[e.target], Jr))
            for a, Ja in blocks:
                sa = slice(6 * a, 6 * a + 6)
                b[sa] -= Ja.T @ Om @ r
                for c, Jc in blocks:
                    sc = slice(6 * c, 6 * c + 6)
                    H[sa, sc] += Ja.T @ Om @ Jc
        return _System(H, b)

    def solve(self, system: _System, damping: float):
        A = system.H + damping * np.eye(len(system.b))
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), system.b)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(A, system.b, rcond=None)[0]

    def predicted_reduction(self, system: _System, step, damping: float) -> float:
        return float(step @ system.b + damping * step @ step)

    def retract(self, state, step):
        out = list(state)
        for k, v in self.var.items():
            i = self.pos[k]
            out[i] = state[i] @ se3_exp(step[6 * v:6 * v + 6])
        return out


def check_connected(node_ids, edges) -> None:
    parent = {k: k for k in node_ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in edges:
        if e.source not in parent or e.target not in parent:
            raise ValueError(f"edge ({e.source}, {e.target}) references an unknown node")
        ra, rb = find(e.source), find(e.target)
        if ra != rb:
            parent[ra] = rb
    roots = {find(k) for k in node_ids}
    if len(roots) > 1:
        raise DisconnectedGraphError(f"pose graph has {len(roots)} components")


def pose_graph_optimize(nodes: dict, edges, fixed, config: LMConfig | None = None, log=None) -> dict:
    """Optimize camera-to-world node poses; fixed nodes are returned unchanged."""
    fixed = set(fixed)
    if not fixed:
        raise ValueError("at least one node must be fixed")
    check_connected(list(nodes), edges)
    config = config or LMConfig(max_iterations=20, relative_tolerance=1e-14)
    prob = PoseGraphProblem({k: T.normalized() for k, T in nodes.items()}, edges, fixed)
    if not prob.var:
        return dict(nodes)
    res = run_lm(prob, prob.initial, config, log=log)
    return {k: (nodes[k] if k in fixed else res.state[prob.pos[k]]) for k in prob.ids}
