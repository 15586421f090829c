"""Lattice weight normalization and line-graph conversion.

The pipeline is::

    EdgeLattice --forward_normalize--> ForwardNormalizedLattice
                --to_node_lattice-->   NodeLattice (marginals + backward weights)

Forward weights make the outgoing arcs of every state (plus a dummy "final"
arc for final states) sum to one, using sigmoid-squashed negative costs.
Marginals are path posteriors of each node; backward-normalized weights give
the relative importance of each incoming arc of a node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

from latres.errors import LatticeStructureError
from latres.lattice import BOS, EOS, EdgeLattice, topological_order

# log w^B is taken inside the forget gate; exact zeros would give -inf.
MIN_WEIGHT = 1e-12


def log_sigmoid(x: float) -> float:
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def _normalize_log(logits: list[float]) -> list[float]:
    m = max(logits)
    z = m + math.log(math.fsum(math.exp(v - m) for v in logits))
    return [math.exp(v - z) for v in logits]


@dataclass(frozen=True)
class ForwardNormalizedLattice:
    base: EdgeLattice
    arc_fw: tuple[float, ...]
    final_fw: dict[int, float]


def forward_normalize(lat: EdgeLattice) -> ForwardNormalizedLattice:
    """Per-state normalization of ``sigmoid(-cost)`` over outgoing arcs and final.

    Raises:
        LatticeStructureError: for a state with neither outgoing arcs nor finality.
    """
    out = lat.outgoing()
    arc_fw = [0.0] * len(lat.arcs)
    final_fw: dict[int, float] = {}
    for s in range(lat.num_states):
        logits = [log_sigmoid(-lat.arcs[i].cost) for i in out[s]]
        is_final = s in lat.finals
        if is_final:
            logits.append(log_sigmoid(-lat.finals[s]))
        if not logits:
            raise LatticeStructureError(f"state {s} has no outgoing arcs and is not final")
        weights = _normalize_log(logits)
        for i, w in zip(out[s], weights):
            arc_fw[i] = w
        if is_final:
            final_fw[s] = weights[-1]
    return ForwardNormalizedLattice(lat, tuple(arc_fw), final_fw)


class Node(NamedTuple):
    token: str
    marginal: float
    fwd: float
    edge: int  # index of the originating arc, -1 for <s> and </s>


class NodeArc(NamedTuple):
    src: int
    dst: int
    fwd: float  # transition weight: w^F of dst, or the final dummy weight into </s>
    bwd: float


@dataclass(frozen=True)
class NodeLattice:
    """Node-labeled lattice; node 0 is ``<s>``, the last node is ``</s>``.

    Nodes are stored in topological order.
    """

    nodes: tuple[Node, ...]
    arcs: tuple[NodeArc, ...]

    @property
    def sink(self) -> int:
        return len(self.nodes) - 1

    @property
    def tokens(self) -> list[str]:
        return [n.token for n in self.nodes]

    def predecessors(self) -> list[list[int]]:
        """Incoming arc indices per node."""
        preds: list[list[int]] = [[] for _ in self.nodes]
        for i, a in enumerate(self.arcs):
            preds[a.dst].append(i)
        return preds

    def successors(self) -> list[list[int]]:
        succ: list[list[int]] = [[] for _ in self.nodes]
        for i, a in enumerate(self.arcs):
            succ[a.src].append(i)
        return succ


def to_node_lattice(fnl: ForwardNormalizedLattice) -> NodeLattice:
    """Line-graph conversion, then marginal and backward-weight computation."""
    lat = fnl.base
    order = topological_order(lat)
    position = {s: k for k, s in enumerate(order)}
    # stable sort: origin position, then arc insertion order
    edge_order = sorted(range(len(lat.arcs)), key=lambda i: position[lat.arcs[i].src])
    node_of_edge = {e: k + 1 for k, e in enumerate(edge_order)}
    sink = len(edge_order) + 1

    nodes = [Node(BOS, 0.0, 1.0, -1)]
    nodes += [Node(lat.arcs[e].label, 0.0, fnl.arc_fw[e], e) for e in edge_order]
    nodes.append(Node(EOS, 0.0, 1.0, -1))

    out = lat.outgoing()
    arcs: list[NodeArc] = []
    for i in out[lat.start]:
        arcs.append(NodeArc(0, node_of_edge[i], fnl.arc_fw[i], 0.0))
    if lat.start in lat.finals:
        arcs.append(NodeArc(0, sink, fnl.final_fw[lat.start], 0.0))
    for e in edge_order:
        k = node_of_edge[e]
        d = lat.arcs[e].dst
        for i in out[d]:
            arcs.append(NodeArc(k, node_of_edge[i], fnl.arc_fw[i], 0.0))
        if d in lat.finals:
            arcs.append(NodeArc(k, sink, fnl.final_fw[d], 0.0))
    arcs.sort(key=lambda a: (a.dst, a.src))
    nl = NodeLattice(tuple(nodes), tuple(arcs))
    return compute_backward_normalized(compute_marginals(nl))


def compute_marginals(nl: NodeLattice) -> NodeLattice:
    """One forward sweep: ``w^M_e = sum_k w^M_k * w^F_e``, with ``w^M(<s>) = 1``."""
    marg = [0.0] * len(nl.nodes)
    marg[0] = 1.0
    preds = nl.predecessors()
    for e in range(1, len(nl.nodes)):
        marg[e] = math.fsum(marg[nl.arcs[i].src] * nl.arcs[i].fwd for i in preds[e])
    nodes = tuple(n._replace(marginal=m) for n, m in zip(nl.nodes, marg))
    return replace(nl, nodes=nodes)


def compute_backward_normalized(nl: NodeLattice) -> NodeLattice:
    """Incoming-arc weights from predecessor marginals.

    Ordinary nodes: ``w^M_k / sum_j w^M_j`` over predecessors ``j``.
    Arcs into ``</s>``: ``w^M_k`` times the final dummy weight of the
    origin edge's destination state.
    """
    preds = nl.predecessors()
    arcs = list(nl.arcs)
    sink = nl.sink
    for e in range(1, len(nl.nodes)):
        if e == sink:
            for i in preds[e]:
                a = arcs[i]
                arcs[i] = a._replace(bwd=nl.nodes[a.src].marginal * a.fwd)
        else:
            denom = math.fsum(nl.nodes[arcs[i].src].marginal for i in preds[e])
            for i in preds[e]:
                a = arcs[i]
                arcs[i] = a._replace(bwd=nl.nodes[a.src].marginal / denom)
    return replace(nl, arcs=tuple(arcs))


def edge_to_node_lattice(lat: EdgeLattice) -> NodeLattice:
    return to_node_lattice(forward_normalize(lat))


def enumerate_node_paths(nl: NodeLattice, limit: int = 100_000) -> list[tuple[list[str], float]]:
    """``(tokens, probability)`` for every <s>-></s> path, tokens stripped of <s>/</s>.

    The probability is the product of transition weights along the path.
    """
    succ = nl.successors()
    sink = nl.sink
    paths: list[tuple[list[str], float]] = []

    def walk(node: int, toks: list[str], prob: float) -> None:
        if node == sink:
            if len(paths) >= limit:
                raise LatticeStructureError(f"more than {limit} paths")
            paths.append((list(toks[1:]), prob))
            return
        for i in succ[node]:
            a = nl.arcs[i]
            toks.append(nl.nodes[node].token)
            walk(a.dst, toks, prob * a.fwd)
            toks.pop()

    walk(0, [], 1.0)
    return paths


def format_node_lattice(nl: NodeLattice) -> str:
    """Text dump: node lines ``idx token w_M`` then arc lines ``src dst w_B``."""
    lines = ["# nodes: idx token w_M"]
    lines += [f"{i} {n.token} {n.marginal:.6f}" for i, n in enumerate(nl.nodes)]
    lines.append("# arcs: src dst w_B")
    lines += [f"{a.src} {a.dst} {a.bwd:.6f}" for a in nl.arcs]
    return "\n".join(lines) + "\n"


def format_forward_normalized(fnl: ForwardNormalizedLattice) -> str:
    """Lattice text format with forward weights in place of costs."""
    lat = fnl.base
    lines = [f"{a.src} {a.dst} {a.label} {w!r}" for a, w in zip(lat.arcs, fnl.arc_fw)]
    lines += [f"{s} {fnl.final_fw[s]!r}" for s in sorted(lat.finals)]
    return "\n".join(lines) + "\n"
