"""Scene graph of posed images (nodes) and keypoint matches (edges).

Holds the per-node inlier/outlier confidence that drives training-image
sampling, initialized from match counts and later fused with rendering PSNR.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigurationError, InputError
from .geometry import Intrinsics, Pose, relative_angle_deg

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Node:
    id: int
    pose: Pose
    image: Optional[np.ndarray] = None
    confidence: float = 0.0
    gt_pose: Optional[Pose] = None

    def __post_init__(self):
        if self.confidence < 0:
            raise InputError(f"node {self.id}: confidence must be non-negative")


@dataclass(eq=False)
class Edge:
    i: int
    j: int
    matches: np.ndarray  # (m, 4): ui, vi, uj, vj

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=np.float64).reshape(-1, 4)
        if self.i == self.j:
            raise InputError("self-loop edge")
        if self.i > self.j:
            self.i, self.j = self.j, self.i
            self.matches = self.matches[:, [2, 3, 0, 1]]

    def __len__(self):
        return len(self.matches)


@dataclass(eq=False)
class SceneGraph:
    nodes: list
    edges: list
    intrinsics: Intrinsics
    isolated: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate node ids")
        self._index = {nid: k for k, nid in enumerate(ids)}
        seen = set()
        kept = []
        for e in self.edges:
            if e.i not in self._index or e.j not in self._index:
                raise InputError(f"edge ({e.i}, {e.j}) references an unknown node")
            if (e.i, e.j) in seen:
                raise InputError(f"duplicate edge ({e.i}, {e.j})")
            seen.add((e.i, e.j))
            if len(e) == 0:
                continue
            for node_id, cols in ((e.i, [0, 1]), (e.j, [2, 3])):
                uv = e.matches[:, cols]
                if not np.all(self.intrinsics.contains(uv[:, 0], uv[:, 1])):
                    raise InputError(f"edge ({e.i}, {e.j}) has keypoints outside image {node_id}")
            kept.append(e)
        self.edges = kept

    def __len__(self):
        return len(self.nodes)

    def index_of(self, node_id) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise InputError(f"unknown node id {node_id}") from None

    def node(self, node_id) -> Node:
        return self.nodes[self.index_of(node_id)]

    @property
    def ids(self):
        return [n.id for n in self.nodes]

    @property
    def confidence(self) -> np.ndarray:
        return np.array([n.confidence for n in self.nodes], dtype=np.float64)

    def with_confidence(self, values) -> "SceneGraph":
        nodes = [replace(n, confidence=float(c)) for n, c in zip(self.nodes, values)]
        return replace(self, nodes=nodes)

    def with_poses(self, poses) -> "SceneGraph":
        nodes = [replace(n, pose=p) for n, p in zip(self.nodes, poses)]
        return replace(self, nodes=nodes)

    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=int)
        for e in self.edges:
            deg[self.index_of(e.i)] += 1
            deg[self.index_of(e.j)] += 1
        return deg


def edge_angles(graph: SceneGraph) -> np.ndarray:
    """Relative rotation angle (degrees) of every edge, from the current node poses."""
    if not graph.edges:
        return np.zeros(0)
    qa = np.stack([graph.node(e.i).pose.rotation for e in graph.edges])
    qb = np.stack([graph.node(e.j).pose.rotation for e in graph.edges])
    return relative_angle_deg(qa, qb)


def prune(graph: SceneGraph, tau: float) -> SceneGraph:
    """Drop edges whose estimated relative rotation exceeds ``tau`` degrees."""
    if not 0 < tau <= 180:
        raise InputError(f"tau must be in (0, 180], got {tau}")
    angles = edge_angles(graph)
    edges = [e for e, a in zip(graph.edges, angles) if a <= tau]
    pruned = replace(graph, edges=edges)
    isolated = frozenset(n.id for n, d in zip(pruned.nodes, pruned.degree()) if d == 0)
    if isolated:
        logger.warning("pruning at tau=%.1f left %d isolated node(s): %s", tau, len(isolated), sorted(isolated))
    pruned.isolated = isolated
    return pruned


def raw_confidence(graph: SceneGraph) -> np.ndarray:
    """Mean match count over each node's incident edges; 0 for isolated nodes."""
    total = np.zeros(len(graph.nodes))
    count = np.zeros(len(graph.nodes))
    for e in graph.edges:
        for nid in (e.i, e.j):
            k = graph.index_of(nid)
            total[k] += len(e)
            count[k] += 1
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def init_confidence(graph: SceneGraph) -> SceneGraph:
    raw = raw_confidence(graph)
    if raw.sum() <= 0:
        raise ConfigurationError("every node is isolated; confidence cannot form a distribution")
    return graph.with_confidence(raw / raw.sum())


def update_confidence(graph: SceneGraph, psnr, lam: float = 1.0, gamma: float = 1.0) -> SceneGraph:
    """Fuse normalized per-node PSNR into the confidence, sharpen by ``gamma``, renormalize.

    Nodes with no incident edges stay at zero confidence.
    """
    psnr = np.asarray(psnr, dtype=np.float64).copy()
    if psnr.shape != (len(graph.nodes),):
        raise InputError("need one PSNR value per node")
    if lam < 0 or gamma < 1:
        raise InputError("lambda must be >= 0 and gamma >= 1")
    bad = ~np.isfinite(psnr)
    if bad.any():
        finite = psnr[~bad]
        fill = finite.min() if finite.size else 0.0
        logger.warning("non-finite PSNR for node(s) %s; using %.3f",
                       [graph.nodes[k].id for k in np.flatnonzero(bad)], fill)
        psnr[bad] = fill
    psnr = np.maximum(psnr, 0.0)
    total = psnr.sum()
    norm_psnr = psnr / total if total > 0 else np.full_like(psnr, 1.0 / len(psnr))

    conf = graph.confidence + lam * norm_psnr
    conf[graph.degree() == 0] = 0.0
    conf = conf**gamma
    if conf.sum() <= 0:
        raise ConfigurationError("updated confidence has no mass")
    return graph.with_confidence(conf / conf.sum())


def sample_training_set(graph: SceneGraph, count: int, rng) -> np.ndarray:
    """I.i.d. categorical draws of node indices (positions in ``graph.nodes``) from the confidence.

    ``rng`` may be a seed or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng)
    p = graph.confidence
    p = p / p.sum()
    return rng.choice(len(p), size=count, replace=True, p=p)


class IncidentMatch(NamedTuple):
    edge: Edge
    index: int
    node_is_i: bool

    @property
    def own_uv(self):
        row = self.edge.matches[self.index]
        return row[:2] if self.node_is_i else row[2:]

    @property
    def other_uv(self):
        row = self.edge.matches[self.index]
        return row[2:] if self.node_is_i else row[:2]

    @property
    def other_id(self):
        return self.edge.j if self.node_is_i else self.edge.i


def incident_matches(graph: SceneGraph, node_id) -> list:
    graph.index_of(node_id)
    out = []
    for e in graph.edges:
        if node_id in (e.i, e.j):
            is_i = e.i == node_id
            out.extend(IncidentMatch(e, k, is_i) for k in range(len(e)))
    return out


def match_table(graph: SceneGraph):
    """Per-node arrays of (own_u, own_v, other_index, other_u, other_v) for fast batched sampling."""
    tables = [[] for _ in graph.nodes]
    for e in graph.edges:
        a, b = graph.index_of(e.i), graph.index_of(e.j)
        m = e.matches
        tables[a].append(np.column_stack([m[:, 0], m[:, 1], np.full(len(m), b), m[:, 2], m[:, 3]]))
        tables[b].append(np.column_stack([m[:, 2], m[:, 3], np.full(len(m), a), m[:, 0], m[:, 1]]))
    return [np.concatenate(t) if t else np.zeros((0, 5)) for t in tables]
