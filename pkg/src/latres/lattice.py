"""Edge-labeled lattices: data model, text I/O, validation and path utilities.

A lattice is a weighted acyclic acceptor with a single start state (0). Arcs
carry a token and a first-pass cost; final states carry a final cost. The text
format is one record per line::

    src dst label [cost]     # arc
    state [cost]             # final state

"""

from __future__ import annotations

import heapq
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

from latres.errors import CapacityError, LatticeParseError, LatticeStructureError

EPSILON = "<eps>"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
RESERVED_TOKENS = (EPSILON, BOS, EOS, UNK)


class Arc(NamedTuple):
    src: int
    dst: int
    label: str
    cost: float


@dataclass(frozen=True)
class EdgeLattice:
    """Immutable edge-labeled lattice.

    Instances built through :func:`make_lattice` or :func:`parse_lattice_text`
    are validated; the constructor itself does no checking so that
    intermediate results can be assembled cheaply.
    """

    num_states: int
    arcs: tuple[Arc, ...]
    finals: Mapping[int, float]
    start: int = 0

    def outgoing(self) -> list[list[int]]:
        """Arc indices leaving each state, in insertion order."""
        out: list[list[int]] = [[] for _ in range(self.num_states)]
        for i, arc in enumerate(self.arcs):
            out[arc.src].append(i)
        return out

    def incoming(self) -> list[list[int]]:
        inc: list[list[int]] = [[] for _ in range(self.num_states)]
        for i, arc in enumerate(self.arcs):
            inc[arc.dst].append(i)
        return inc

    @property
    def labels(self) -> set[str]:
        return {arc.label for arc in self.arcs}


def make_lattice(
    arcs: Iterable[tuple],
    finals: Mapping[int, float] | Iterable[int],
    *,
    deterministic: bool = True,
) -> EdgeLattice:
    """Build and validate a lattice from plain tuples.

    ``arcs`` items are ``(src, dst, label)`` or ``(src, dst, label, cost)``.
    ``finals`` is a mapping state -> cost or an iterable of states (cost 0).
    """
    arc_list = []
    for a in arcs:
        if len(a) == 3:
            src, dst, label = a
            cost = 0.0
        else:
            src, dst, label, cost = a
        arc_list.append(Arc(int(src), int(dst), str(label), float(cost)))
    if isinstance(finals, Mapping):
        final_map = {int(s): float(c) for s, c in finals.items()}
    else:
        final_map = {int(s): 0.0 for s in finals}
    states = {0} | set(final_map)
    for arc in arc_list:
        states.add(arc.src)
        states.add(arc.dst)
    num_states = max(states) + 1
    lat = EdgeLattice(num_states, tuple(arc_list), dict(sorted(final_map.items())))
    validate(lat, deterministic=deterministic)
    return lat


def validate(lat: EdgeLattice, *, deterministic: bool = True) -> None:
    """Check density, acyclicity, trimming and (optionally) determinism.

    Raises:
        LatticeStructureError: naming the offending state or arc.
    """
    n = lat.num_states
    if n == 0:
        raise LatticeStructureError("lattice has no states")
    if lat.start != 0:
        raise LatticeStructureError("start state must be 0")
    seen = {0}
    for arc in lat.arcs:
        for s in (arc.src, arc.dst):
            if not 0 <= s < n:
                raise LatticeStructureError(f"state {s} out of range 0..{n - 1}")
        seen.add(arc.src)
        seen.add(arc.dst)
        if not math.isfinite(arc.cost):
            raise LatticeStructureError(f"arc {arc.src}->{arc.dst} has non-finite cost")
    for s, c in lat.finals.items():
        if not 0 <= s < n:
            raise LatticeStructureError(f"final state {s} out of range 0..{n - 1}")
        if not math.isfinite(c):
            raise LatticeStructureError(f"final state {s} has non-finite cost")
        seen.add(s)
    missing = sorted(set(range(n)) - seen)
    if missing:
        raise LatticeStructureError(f"state {missing[0]} is unreachable (state ids must be dense)")
    if not lat.finals:
        raise LatticeStructureError("lattice has no final state")

    topological_order(lat)

    out = lat.outgoing()
    inc = lat.incoming()
    fwd = _reach(0, out, lambda i: lat.arcs[i].dst)
    for s in range(n):
        if s not in fwd:
            raise LatticeStructureError(f"state {s} is unreachable from the start state")
    bwd: set[int] = set()
    for f in lat.finals:
        bwd |= _reach(f, inc, lambda i: lat.arcs[i].src)
    for s in range(n):
        if s not in bwd:
            raise LatticeStructureError(f"state {s} is dead (no path to a final state)")

    if deterministic:
        keys: set[tuple[int, str]] = set()
        for arc in lat.arcs:
            if arc.label == EPSILON:
                continue
            key = (arc.src, arc.label)
            if key in keys:
                raise LatticeStructureError(
                    f"duplicate arc label {arc.label!r} leaving state {arc.src} (lattice not deterministic)"
                )
            keys.add(key)


def _reach(root: int, adjacency: list[list[int]], step) -> set[int]:
    seen = {root}
    stack = [root]
    while stack:
        s = stack.pop()
        for i in adjacency[s]:
            t = step(i)
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return seen


def topological_order(lat: EdgeLattice) -> list[int]:
    """Kahn's algorithm; ties broken by ascending state id.

    Raises:
        LatticeStructureError: if the graph has a cycle.
    """
    indeg = [0] * lat.num_states
    out = lat.outgoing()
    for arc in lat.arcs:
        indeg[arc.dst] += 1
    heap = [s for s in range(lat.num_states) if indeg[s] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        s = heapq.heappop(heap)
        order.append(s)
        for i in out[s]:
            d = lat.arcs[i].dst
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(heap, d)
    if len(order) != lat.num_states:
        cyc = _find_cycle(lat)
        raise LatticeStructureError("cycle detected: " + "->".join(map(str, cyc)))
    return order


def _find_cycle(lat: EdgeLattice) -> list[int]:
    out = lat.outgoing()
    color = [0] * lat.num_states
    parent: dict[int, int] = {}
    for root in range(lat.num_states):
        if color[root]:
            continue
        stack = [(root, iter(out[root]))]
        color[root] = 1
        while stack:
            s, it = stack[-1]
            for i in it:
                d = lat.arcs[i].dst
                if color[d] == 1:
                    cyc = [d, s]
                    while cyc[-1] != d:
                        cyc.append(parent[cyc[-1]])
                    return cyc[::-1]
                if color[d] == 0:
                    color[d] = 1
                    parent[d] = s
                    stack.append((d, iter(out[d])))
                    break
            else:
                color[s] = 2
                stack.pop()
    return []


# ---------------------------------------------------------------------------
# Text I/O


def parse_lattice_text(text: str, *, deterministic: bool = True) -> EdgeLattice:
    """Parse the lattice text format and validate the result.

    Raises:
        LatticeParseError: malformed line (with line number) or empty input.
        LatticeStructureError: cycles, dead/unreachable states, duplicate arcs.
    """
    arcs = []
    finals: dict[int, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        try:
            if len(fields) in (3, 4):
                src, dst = int(fields[0]), int(fields[1])
                cost = float(fields[3]) if len(fields) == 4 else 0.0
                if src < 0 or dst < 0:
                    raise ValueError("negative state id")
                arcs.append((src, dst, fields[2], cost))
            elif len(fields) in (1, 2):
                state = int(fields[0])
                if state < 0:
                    raise ValueError("negative state id")
                if state in finals:
                    raise LatticeParseError(f"final state {state} declared twice", lineno)
                finals[state] = float(fields[1]) if len(fields) == 2 else 0.0
            else:
                raise ValueError(f"expected 1-4 fields, got {len(fields)}")
        except ValueError as exc:
            raise LatticeParseError(f"malformed record {raw!r} ({exc})", lineno) from None
    if not arcs and not finals:
        raise LatticeParseError("empty lattice: no arcs and no final states")
    if not finals:
        raise LatticeParseError("no final state declared")
    return make_lattice(arcs, finals, deterministic=deterministic)


def _fmt_cost(x: float) -> str:
    return repr(float(x))


def format_lattice_text(lat: EdgeLattice) -> str:
    lines = [f"{a.src} {a.dst} {a.label} {_fmt_cost(a.cost)}" for a in lat.arcs]
    lines += [f"{s} {_fmt_cost(c)}" for s, c in sorted(lat.finals.items())]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Path utilities


def count_paths(lat: EdgeLattice) -> int:
    """Number of complete paths, by dynamic programming (exact integer)."""
    order = topological_order(lat)
    out = lat.outgoing()
    suffix = [0] * lat.num_states
    for s in reversed(order):
        total = 1 if s in lat.finals else 0
        for i in out[s]:
            total += suffix[lat.arcs[i].dst]
        suffix[s] = total
    return suffix[0]


def enumerate_arc_paths(lat: EdgeLattice, limit: int) -> list[tuple[tuple[int, ...], float]]:
    """All complete paths as arc-index tuples with total cost (final cost included)."""
    out = lat.outgoing()
    paths: list[tuple[tuple[int, ...], float]] = []

    def walk(state: int, prefix: list[int], cost: float) -> None:
        if state in lat.finals:
            if len(paths) >= limit:
                raise CapacityError(f"lattice has more than {limit} paths")
            paths.append((tuple(prefix), cost + lat.finals[state]))
        for i in out[state]:
            arc = lat.arcs[i]
            prefix.append(i)
            walk(arc.dst, prefix, cost + arc.cost)
            prefix.pop()

    walk(lat.start, [], 0.0)
    return paths


def enumerate_paths(
    lat: EdgeLattice, limit: int = 100_000, *, skip_epsilon: bool = False
) -> list[tuple[list[str], float]]:
    """Brute-force list of ``(tokens, total_cost)`` sorted by cost then tokens.

    Raises:
        CapacityError: if there are more than ``limit`` paths.
    """
    result = []
    for arc_path, cost in enumerate_arc_paths(lat, limit):
        tokens = [lat.arcs[i].label for i in arc_path]
        if skip_epsilon:
            tokens = [t for t in tokens if t != EPSILON]
        result.append((tokens, cost))
    result.sort(key=lambda p: (p[1], p[0]))
    return result


def _compact(lat_arcs: Sequence[Arc], finals: Mapping[int, float], keep: Iterable[int]) -> EdgeLattice:
    """Renumber the kept states densely (ascending old id) and drop the rest."""
    mapping = {old: new for new, old in enumerate(sorted(keep))}
    arcs = tuple(
        Arc(mapping[a.src], mapping[a.dst], a.label, a.cost)
        for a in lat_arcs
        if a.src in mapping and a.dst in mapping
    )
    fin = {mapping[s]: c for s, c in sorted(finals.items()) if s in mapping}
    return EdgeLattice(len(mapping), arcs, fin)


def trim(num_states: int, arcs: Sequence[Arc], finals: Mapping[int, float]) -> EdgeLattice:
    """Keep only states that are both accessible and co-accessible."""
    out: list[list[int]] = [[] for _ in range(num_states)]
    inc: list[list[int]] = [[] for _ in range(num_states)]
    for i, a in enumerate(arcs):
        out[a.src].append(i)
        inc[a.dst].append(i)
    fwd = _reach(0, out, lambda i: arcs[i].dst)
    bwd: set[int] = set()
    for f in finals:
        bwd |= _reach(f, inc, lambda i: arcs[i].src)
    keep = fwd & bwd
    if 0 not in keep:
        raise LatticeStructureError("no complete path from the start state")
    return _compact(arcs, finals, keep)


def remove_epsilons(lat: EdgeLattice) -> EdgeLattice:
    """Remove ``<eps>`` arcs while preserving the (tokens, cost) path multiset.

    Every non-epsilon arc is extended by each epsilon run that follows it;
    epsilon runs leaving the start state are folded into new start arcs.

    Raises:
        LatticeStructureError: if several epsilon-only paths lead from the
            start state to final states (an empty-token path multiset that an
            epsilon-free acceptor cannot represent).
    """
    out = lat.outgoing()
    order = topological_order(lat)
    # closure[s]: every (state, cost) reachable from s by epsilon arcs only,
    # one entry per distinct epsilon path, including (s, 0.0).
    closure: dict[int, list[tuple[int, float]]] = {}
    for s in reversed(order):
        entries = [(s, 0.0)]
        for i in out[s]:
            a = lat.arcs[i]
            if a.label == EPSILON:
                entries.extend((q, a.cost + c) for q, c in closure[a.dst])
        closure[s] = entries

    new_arcs: list[Arc] = []

    def extend_from(src: int, q: int, lead: float) -> None:
        for i in out[q]:
            a = lat.arcs[i]
            if a.label == EPSILON:
                continue
            for q2, c2 in closure[a.dst]:
                new_arcs.append(Arc(src, q2, a.label, lead + a.cost + c2))

    finals: dict[int, float] = {s: c for s, c in lat.finals.items() if s != 0}
    start_exits = []
    for q, c in closure[0]:
        extend_from(0, q, c)
        if q in lat.finals:
            start_exits.append(c + lat.finals[q])
    for s in order:
        if s != 0:
            extend_from(s, s, 0.0)
    if len(start_exits) > 1:
        raise LatticeStructureError(
            "several epsilon-only paths from the start state reach final states"
        )
    if start_exits:
        finals[0] = start_exits[0]
    return trim(lat.num_states, new_arcs, finals)


def prune_to_nbest(lat: EdgeLattice, n: int) -> EdgeLattice:
    """Keep the ``n`` lowest-cost paths, rebuilt as a prefix tree.

    Shared prefixes keep their original arc costs; each leaf keeps its
    original final cost, so every kept path has its original total cost.

    Raises:
        ValueError: if ``n < 1``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    best = nbest_arc_paths(lat, n)
    arcs: list[Arc] = []
    finals: dict[int, float] = {}
    children: dict[tuple[int, int], int] = {}
    num_states = 1
    for arc_path, _ in best:
        node = 0
        for i in arc_path:
            key = (node, i)
            if key not in children:
                children[key] = num_states
                a = lat.arcs[i]
                arcs.append(Arc(node, num_states, a.label, a.cost))
                num_states += 1
            node = children[key]
        last_state = lat.arcs[arc_path[-1]].dst if arc_path else lat.start
        finals[node] = lat.finals[last_state]
    return EdgeLattice(num_states, tuple(arcs), dict(sorted(finals.items())))


def nbest_arc_paths(lat: EdgeLattice, n: int) -> list[tuple[tuple[int, ...], float]]:
    """The ``n`` best complete paths as arc-index tuples, by backward DP.

    Each state keeps its ``n`` best completions; ranking is by total cost,
    then token sequence, then arc indices, which matches
    :func:`enumerate_paths` ordering.
    """
    order = topological_order(lat)
    out = lat.outgoing()
    # per state: list of (cost, tokens, arcs) completions
    best: dict[int, list[tuple[float, tuple[str, ...], tuple[int, ...]]]] = {}
    for s in reversed(order):
        cands = []
        if s in lat.finals:
            cands.append((lat.finals[s], (), ()))
        for i in out[s]:
            a = lat.arcs[i]
            for c, toks, path in best[a.dst]:
                cands.append((a.cost + c, (a.label,) + toks, (i,) + path))
        cands.sort()
        best[s] = cands[:n]
    # recompute totals left-to-right so costs agree bit-for-bit with enumeration
    result = []
    for _, toks, path in best[0]:
        total = 0.0
        state = 0
        for i in path:
            total += lat.arcs[i].cost
            state = lat.arcs[i].dst
        result.append((path, total + lat.finals[state], toks))
    result.sort(key=lambda r: (r[1], r[2], r[0]))
    return [(p, c) for p, c, _ in result]


def nbest_paths(lat: EdgeLattice, n: int) -> list[tuple[list[str], float]]:
    """Top-``n`` ``(tokens, cost)`` pairs, ascending cost."""
    return [([lat.arcs[i].label for i in p], c) for p, c in nbest_arc_paths(lat, n)]


def chain_lattice(tokens: Sequence[str], costs: Sequence[float] | None = None) -> EdgeLattice:
    """Linear lattice spelling ``tokens``."""
    if costs is None:
        costs = [0.0] * len(tokens)
    arcs = [(i, i + 1, t, c) for i, (t, c) in enumerate(zip(tokens, costs))]
    return make_lattice(arcs, {len(tokens): 0.0})


@dataclass
class TokenVocabulary:
    """Bidirectional token <-> id map; reserved tokens take ids 0..3."""

    tokens: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        body = [t for t in self.tokens if t not in RESERVED_TOKENS]
        self.tokens = list(RESERVED_TOKENS) + list(dict.fromkeys(body))
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def lookup(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def token_of(self, index: int) -> str:
        return self.tokens[index]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    @property
    def eps_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3
