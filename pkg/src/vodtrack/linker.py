"""Whole-video tubelet linking and re-scoring (Seq-NMS and Seq-Track-NMS).

Detections in consecutive frames are linked into a graph under an overlap
constraint; maximum-score paths (tubelets) are extracted one by one, each
member is re-scored to the tubelet's mean score, and overlapping same-class
detections are suppressed around every member. The two graph constraints
differ in which box represents frame ``t`` when testing overlap against
frame ``t+1``: the raw detection itself, or the tracker's predicted
next-frame box (which keeps links alive under large motion).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .detections import Detection
from .geometry import iou
from .tracker import TrackPrediction

__all__ = [
    "LinkGraph",
    "Tubelet",
    "LINK_IOU_DEFAULT",
    "build_graph_seqnms",
    "build_graph_seqtrack",
    "best_path",
    "rescore_and_suppress",
]

LINK_IOU_DEFAULT = 0.5


@dataclass(frozen=True)
class LinkGraph:
    """Per-frame node lists with directed edges between consecutive frames only.

    ``edges[t]`` maps a node index in frame ``t`` to its successor indices
    in frame ``t+1``. ``constraint`` records which predicate built the graph.
    """

    nodes: tuple[tuple[int, ...], ...]
    edges: tuple[dict[int, tuple[int, ...]], ...]
    constraint: str

    def __post_init__(self) -> None:
        if len(self.edges) != max(len(self.nodes) - 1, 0):
            raise ValueError("edge table must cover exactly the consecutive frame pairs")
        for t, table in enumerate(self.edges):
            for i, succs in table.items():
                if i not in self.nodes[t]:
                    raise ValueError(f"edge from unknown node {i} in frame {t}")
                for j in succs:
                    if j not in self.nodes[t + 1]:
                        raise ValueError(f"edge to unknown node {j} in frame {t + 1}")

    @property
    def n_frames(self) -> int:
        return len(self.nodes)

    def node_count(self) -> int:
        return sum(len(f) for f in self.nodes)


@dataclass(frozen=True)
class Tubelet:
    """A chain of (frame, detection index) members over strictly consecutive frames."""

    members: tuple[tuple[int, int], ...]
    path_score: float

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("tubelet must have at least one member")
        for (t0, _), (t1, _) in zip(self.members, self.members[1:]):
            if t1 != t0 + 1:
                raise ValueError("tubelet frames must be strictly consecutive")

    @property
    def rescored(self) -> float:
        return self.path_score / len(self.members)


def _build_graph(video: Sequence[Sequence[Detection]], link_box, link_iou: float, constraint: str) -> LinkGraph:
    nodes = tuple(tuple(range(len(frame))) for frame in video)
    edges = []
    for t in range(len(video) - 1):
        table: dict[int, tuple[int, ...]] = {}
        for i, det in enumerate(video[t]):
            probe = link_box(t, i, det)
            succs = tuple(
                j
                for j, nxt in enumerate(video[t + 1])
                if nxt.class_id == det.class_id and iou(probe, nxt.box) > link_iou
            )
            if succs:
                table[i] = succs
        edges.append(table)
    return LinkGraph(nodes=nodes, edges=tuple(edges), constraint=constraint)


def build_graph_seqnms(
    video: Sequence[Sequence[Detection]], link_iou: float = LINK_IOU_DEFAULT
) -> LinkGraph:
    """Link detections whose own boxes overlap across consecutive frames.

    An edge requires the same class and strictly more than ``link_iou``
    overlap between the frame-``t`` box and the frame-``t+1`` box.
    """
    return _build_graph(video, lambda t, i, det: det.box, link_iou, "seqnms")


def build_graph_seqtrack(
    video: Sequence[Sequence[Detection]],
    preds: Sequence[Sequence[TrackPrediction]],
    link_iou: float = LINK_IOU_DEFAULT,
) -> LinkGraph:
    """Link using each detection's tracker-predicted next-frame box.

    ``preds[t]`` must align index for index with ``video[t]``; the final
    frame's predictions are unused and may be absent.
    """
    n = len(video)
    if len(preds) not in (n, n - 1) and not (n == 0 and not preds):
        raise ValueError(f"predictions cover {len(preds)} frames, video has {n}")
    for t in range(n - 1):
        if len(preds[t]) != len(video[t]):
            raise ValueError(
                f"frame {t}: {len(preds[t])} predictions for {len(video[t])} detections"
            )

    def link_box(t, i, det):
        return preds[t][i].predicted_box

    return _build_graph(video, link_box, link_iou, "seqtrack")


def best_path(
    graph: LinkGraph,
    scores: Sequence[Sequence[float]],
    alive: Sequence[set[int]] | None = None,
) -> Tubelet | None:
    """Maximum-total-score path over the graph, by dynamic programming.

    Paths may start and end at any frame but must step through consecutive
    frames along edges. Score ties prefer the earliest start frame, then the
    lexicographically smallest index sequence. Returns ``None`` when no
    (alive) node exists.
    """
    if len(scores) != graph.n_frames:
        raise ValueError("scores must align with the graph's frames")
    if alive is None:
        alive = [set(frame) for frame in graph.nodes]

    # chains[t][i] = (total, start_frame, path) of the best chain ending at (t, i)
    chains: list[dict[int, tuple[float, int, tuple[int, ...]]]] = []
    best: tuple[float, int, tuple[int, ...]] | None = None

    def key(c):
        return (-c[0], c[1], c[2])

    for t in range(graph.n_frames):
        current: dict[int, tuple[float, int, tuple[int, ...]]] = {}
        incoming: dict[int, list[int]] = {}
        if t > 0:
            for i in chains[t - 1]:
                for j in graph.edges[t - 1].get(i, ()):
                    if j in alive[t]:
                        incoming.setdefault(j, []).append(i)
        for j in sorted(alive[t]):
            s = scores[t][j]
            cand = (s, t, (j,))
            for i in sorted(incoming.get(j, ())):
                total, start, path = chains[t - 1][i]
                ext = (total + s, start, path + (j,))
                if key(ext) < key(cand):
                    cand = ext
            current[j] = cand
            if best is None or key(cand) < key(best):
                best = cand
        chains.append(current)

    if best is None:
        return None
    total, start, path = best
    members = tuple((start + k, idx) for k, idx in enumerate(path))
    return Tubelet(members=members, path_score=total)


def rescore_and_suppress(
    video: Sequence[Sequence[Detection]],
    graph: LinkGraph,
    mode: str,
    nms_iou: float = 0.45,
) -> list[list[Detection]]:
    """Extract tubelets best-first, average their scores, suppress around members.

    Repeats until every detection is either re-scored as a tubelet member or
    suppressed (same class, overlap above ``nms_iou`` with a member in its
    frame). Emits the surviving detections in original frame order with
    their re-scored values; geometry is never modified.
    """
    if mode not in ("seqnms", "seqtrack"):
        raise ValueError(f"mode must be 'seqnms' or 'seqtrack', got {mode!r}")
    if graph.constraint != mode:
        raise ValueError(f"graph was built with {graph.constraint!r}, not {mode!r}")
    if len(video) != graph.n_frames:
        raise ValueError("video and graph frame counts differ")

    scores = [[d.score for d in frame] for frame in video]
    alive = [set(frame_nodes) for frame_nodes in graph.nodes]
    rescored: dict[tuple[int, int], float] = {}

    while any(alive_frame for alive_frame in alive):
        tube = best_path(graph, scores, alive)
        assert tube is not None
        mean = tube.rescored
        for t, i in tube.members:
            rescored[(t, i)] = mean
            alive[t].discard(i)
        for t, i in tube.members:
            member = video[t][i]
            for j in list(alive[t]):
                other = video[t][j]
                if other.class_id == member.class_id and iou(member.box, other.box) > nms_iou:
                    alive[t].discard(j)

    out: list[list[Detection]] = []
    for t, frame in enumerate(video):
        out.append(
            [d.with_score(rescored[(t, i)]) for i, d in enumerate(frame) if (t, i) in rescored]
        )
    return out
