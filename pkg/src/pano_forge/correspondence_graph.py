"""Frame-correspondence graph and long-range propagation.

Frames are nodes; two frames are joined when at least one of their view
pairs was accepted. Within a connected component every frame pair that was
never evaluated is run through the regular evaluate/refine procedure, which
finds correspondences the temporal window could not reach (loop closures).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations

from .correspondence_search import PROPAGATED, PairFailure, evaluate_candidates
from .errors import InvariantViolation

logger = logging.getLogger(__name__)

DEFAULT_K_MAX = 50
# graph-distance band used for components larger than k_max
FAR_BAND = (2, 4)


@dataclass
class FrameGraph:
    """Undirected graph over ``(video_id, timestamp_ms)`` frame ids.

    ``edges`` maps an ordered ``(a, b)`` with ``a < b`` to the best mean
    confidence among the records joining the two frames.
    """

    nodes: set = field(default_factory=set)
    edges: dict = field(default_factory=dict)

    def add_edge(self, a, b, weight):
        if a == b:
            raise InvariantViolation(f"self-loop on frame {a}")
        key = (a, b) if a < b else (b, a)
        self.nodes.update(key)
        if key not in self.edges or weight > self.edges[key]:
            self.edges[key] = float(weight)

    def adjacency(self):
        adj = {n: set() for n in self.nodes}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def __len__(self):
        return len(self.nodes)


def build_graph(records) -> FrameGraph:
    g = FrameGraph()
    video = None
    for k, r in enumerate(records):
        if video is None:
            video = r.video_id
        elif r.video_id != video:
            raise InvariantViolation(f"record {k} is from video {r.video_id!r}, graph holds {video!r}")
        g.add_edge((r.video_id, r.ts_a), (r.video_id, r.ts_b), r.mean_conf)
    return g


def connected_components(g: FrameGraph) -> list[list]:
    """Components as sorted node lists, ordered by their earliest frame."""
    adj = g.adjacency()
    seen, comps = set(), []
    for start in sorted(g.nodes):
        if start in seen:
            continue
        seen.add(start)
        comp, queue = [], deque([start])
        while queue:
            n = queue.popleft()
            comp.append(n)
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    queue.append(m)
        comps.append(sorted(comp))
    return comps


def hop_distances(adj, source, limit=None) -> dict:
    """BFS hop counts from ``source``, stopping beyond ``limit`` hops."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        n = queue.popleft()
        if limit is not None and dist[n] >= limit:
            continue
        for m in adj[n]:
            if m not in dist:
                dist[m] = dist[n] + 1
                queue.append(m)
    return dist


def propagation_pairs(component, g: FrameGraph, evaluated=frozenset(), k_max=DEFAULT_K_MAX):
    """Frame pairs of one component to evaluate, sorted by timestamp.

    ``evaluated`` holds unordered frame pairs (as sorted tuples) that were
    already tried. Components with more than ``k_max`` frames only consider
    pairs whose graph distance lies in the far band.
    """
    comp = sorted(component)
    if len(comp) <= k_max:
        cands = list(combinations(comp, 2))
    else:
        adj = g.adjacency()
        lo, hi = FAR_BAND
        cands = []
        for a in comp:
            for b, d in hop_distances(adj, a, hi).items():
                if a < b and lo <= d <= hi:
                    cands.append((a, b))
        cands.sort()
    return [p for p in cands if p not in evaluated]


def propagate(component, frames, estimator, cfg, g: FrameGraph, evaluated=frozenset(),
              k_max=DEFAULT_K_MAX, workers=1):
    """Evaluate all not-yet-tried frame pairs of a component.

    Args:
        component: node list from :func:`connected_components`.
        frames: mapping ``(video_id, timestamp_ms) -> PanoFrame``.
        evaluated: unordered frame pairs already tried (window pass, earlier
            propagation runs).

    Returns:
        ``(pairs, records, failures)``: the frame pairs that were tried, the
        accepted records (provenance ``propagated``) and per-view-pair failures.
    """
    pairs = propagation_pairs(component, g, evaluated, k_max)
    if not pairs:
        return [], [], []
    nodes = sorted({n for p in pairs for n in p})
    index = {n: i for i, n in enumerate(nodes)}
    panos = [frames[n] for n in nodes]
    tasks = [(index[a], index[b], ka, kb) for a, b in pairs for ka in range(4) for kb in range(4)]
    logger.info("propagating over %d frame pairs (%d view pairs)", len(pairs), len(tasks))
    results = evaluate_candidates(panos, tasks, estimator, cfg, PROPAGATED, workers)
    records = [r.record for r in results if not isinstance(r, PairFailure) and r.accepted]
    failures = [r for r in results if isinstance(r, PairFailure)]
    return pairs, records, failures
