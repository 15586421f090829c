import itertools
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latres.errors import CapacityError, LatticeParseError, LatticeStructureError
from latres.lattice import (
    EPSILON,
    TokenVocabulary,
    chain_lattice,
    count_paths,
    enumerate_paths,
    format_lattice_text,
    make_lattice,
    nbest_paths,
    parse_lattice_text,
    prune_to_nbest,
    remove_epsilons,
    topological_order,
)

from lattice_gen import random_lattice


def path_multiset(paths, ndigits=9):
    return Counter((tuple(t), round(c, ndigits)) for t, c in paths)


def brute_force_paths(lat, skip_epsilon=False):
    """Independent DFS over arcs; no shared code with the library enumerator."""
    out = {}
    for a in lat.arcs:
        out.setdefault(a.src, []).append(a)
    found = []
    stack = [(0, (), 0.0)]
    while stack:
        s, toks, cost = stack.pop()
        if s in lat.finals:
            found.append((list(toks), cost + lat.finals[s]))
        for a in out.get(s, []):
            tok = () if (skip_epsilon and a.label == EPSILON) else (a.label,)
            stack.append((a.dst, toks + tok, cost + a.cost))
    return found


# -- parsing ------------------------------------------------------------------


def test_parse_minimal():
    lat = parse_lattice_text("0 1 hello 0.5\n1 0.0\n")
    assert lat.num_states == 2
    assert len(lat.arcs) == 1
    assert lat.arcs[0] == (0, 1, "hello", 0.5)
    assert dict(lat.finals) == {1: 0.0}


def test_parse_defaults_missing_costs():
    lat = parse_lattice_text("0 1 a\n1 2 b 1.5\n2\n")
    assert [a.cost for a in lat.arcs] == [0.0, 1.5]
    assert dict(lat.finals) == {2: 0.0}


def test_parse_empty_is_error():
    with pytest.raises(LatticeParseError):
        parse_lattice_text("")


def test_parse_malformed_line_reports_line_number():
    with pytest.raises(LatticeParseError) as err:
        parse_lattice_text("0 1 a 0.0\n1 x b 0.0\n2 0.0\n")
    assert err.value.line == 2
    assert "line 2" in str(err.value)


def test_parse_cycle_is_structure_error():
    with pytest.raises(LatticeStructureError, match="cycle"):
        parse_lattice_text("0 1 a 0.0\n1 0 b 0.0\n1 0.0\n")


def test_parse_names_dead_state():
    with pytest.raises(LatticeStructureError, match="state 2"):
        parse_lattice_text("0 1 a 0.0\n0 2 b 0.0\n1 0.0\n")


def test_parse_names_unreachable_state():
    with pytest.raises(LatticeStructureError, match="state 1"):
        parse_lattice_text("0 2 a 0.0\n1 2 b 0.0\n2 0.0\n")


def test_parse_rejects_duplicate_labels():
    with pytest.raises(LatticeStructureError, match="deterministic"):
        parse_lattice_text("0 1 a 0.0\n0 2 a 1.0\n1 0.0\n2 0.0\n")


def test_parse_rejects_non_finite_cost():
    with pytest.raises(LatticeStructureError):
        parse_lattice_text("0 1 a inf\n1 0.0\n")


def test_round_trip_random():
    rng = random.Random(5)
    for _ in range(200):
        lat = random_lattice(rng, 20)
        again = parse_lattice_text(format_lattice_text(lat))
        assert again == lat


# -- topological order --------------------------------------------------------


def test_topological_order_chain():
    assert topological_order(chain_lattice(["a", "b"])) == [0, 1, 2]


def test_topological_order_diamond_ties_by_id():
    lat = make_lattice([(0, 1, "a"), (0, 2, "b"), (1, 3, "c"), (2, 3, "d")], [3])
    assert topological_order(lat) == [0, 1, 2, 3]


def test_topological_order_prefers_lower_ids():
    # state 2 becomes ready before state 1 is even reachable
    lat = make_lattice([(0, 2, "a"), (2, 1, "b"), (1, 3, "c"), (0, 3, "d")], [3])
    assert topological_order(lat) == [0, 2, 1, 3]


def test_topological_order_random_dags():
    rng = random.Random(11)
    for _ in range(200):
        lat = random_lattice(rng, 50, min_states=40)
        pos = {s: k for k, s in enumerate(topological_order(lat))}
        assert sorted(pos) == list(range(lat.num_states))
        assert all(pos[a.src] < pos[a.dst] for a in lat.arcs)


# -- path enumeration ---------------------------------------------------------


def test_enumerate_chain():
    lat = make_lattice([(0, 1, "a", 0.5), (1, 2, "b", 0.5)], {2: 0.0})
    assert enumerate_paths(lat) == [(["a", "b"], 1.0)]


def test_enumerate_diamond():
    lat = make_lattice([(0, 1, "a", 0.1), (0, 2, "b", 0.2), (1, 3, "c", 0.0), (2, 3, "c", 0.0)], {3: 0.0})
    assert enumerate_paths(lat) == [(["a", "c"], 0.1), (["b", "c"], 0.2)]


def test_enumerate_sorted_by_cost_then_tokens():
    lat = make_lattice([(0, 1, "b", 1.0), (0, 1, "a", 1.0), (0, 1, "c", 0.5)], {1: 0.0})
    assert [t for t, _ in enumerate_paths(lat)] == [["c"], ["a"], ["b"]]


def test_enumerate_includes_final_costs():
    lat = make_lattice([(0, 1, "a", 1.0), (1, 2, "b", 1.0)], {1: 0.25, 2: 0.5})
    assert enumerate_paths(lat) == [(["a"], 1.25), (["a", "b"], 2.5)]


def test_enumerate_capacity_error():
    arcs = [(i, i + 1, lab, 0.0) for i in range(12) for lab in "ab"]
    lat = make_lattice(arcs, [12])
    assert count_paths(lat) == 4096
    with pytest.raises(CapacityError):
        enumerate_paths(lat, limit=4095)
    assert len(enumerate_paths(lat, limit=4096)) == 4096


def test_enumerate_count_matches_dp_and_brute_force():
    rng = random.Random(3)
    for _ in range(100):
        lat = random_lattice(rng, 10, min_states=10)
        paths = enumerate_paths(lat, limit=10_000)
        assert len(paths) == count_paths(lat)
        assert path_multiset(paths) == path_multiset(brute_force_paths(lat))


# -- epsilon removal ----------------------------------------------------------


def test_remove_single_epsilon():
    lat = make_lattice([(0, 1, "a", 1.0), (1, 2, EPSILON, 0.5)], {2: 0.0})
    out = remove_epsilons(lat)
    assert all(a.label != EPSILON for a in out.arcs)
    assert enumerate_paths(out) == [(["a"], 1.5)]
    assert len(out.arcs) == 1


def test_remove_epsilons_identity_without_epsilons():
    rng = random.Random(7)
    for _ in range(50):
        lat = random_lattice(rng, 15)
        out = remove_epsilons(lat)
        assert path_multiset(enumerate_paths(out)) == path_multiset(enumerate_paths(lat))


def test_remove_leading_epsilon():
    lat = make_lattice([(0, 1, EPSILON, 0.25), (1, 2, "a", 1.0), (0, 2, "b", 2.0)], {2: 0.0})
    out = remove_epsilons(lat)
    assert path_multiset(enumerate_paths(out)) == Counter({(("a",), 1.25): 1, (("b",), 2.0): 1})


def test_remove_epsilons_random_oracle():
    rng = random.Random(13)
    checked = 0
    while checked < 300:
        lat = random_lattice(rng, 12, n_eps=rng.randint(1, 3), max_paths=500)
        try:
            out = remove_epsilons(lat)
        except LatticeStructureError:
            # several epsilon-only complete paths: not representable, skip
            continue
        assert all(a.label != EPSILON for a in out.arcs)
        want = path_multiset(brute_force_paths(lat, skip_epsilon=True))
        assert path_multiset(enumerate_paths(out)) == want
        checked += 1


# -- n-best pruning -----------------------------------------------------------


def test_prune_fewer_paths_than_n():
    lat = chain_lattice(["a", "b", "c"], [0.5, 0.25, 0.125])
    out = prune_to_nbest(lat, 5)
    assert enumerate_paths(out) == enumerate_paths(lat)


def test_prune_keeps_cheapest():
    lat = make_lattice([(0, 1, "x", 1.0), (0, 1, "y", 2.0), (0, 1, "z", 3.0)], {1: 0.0})
    out = prune_to_nbest(lat, 2)
    assert enumerate_paths(out) == [(["x"], 1.0), (["y"], 2.0)]


def test_prune_zero_is_error():
    with pytest.raises(ValueError):
        prune_to_nbest(chain_lattice(["a"]), 0)


def test_prune_shares_prefixes():
    lat = make_lattice([(0, 1, "a", 0.0), (1, 2, "b", 0.0), (1, 2, "c", 1.0)], [2])
    out = prune_to_nbest(lat, 2)
    assert len(out.arcs) == 3
    assert [a.label for a in out.arcs].count("a") == 1


def test_prune_random_selects_top_n():
    rng = random.Random(17)
    for _ in range(150):
        lat = random_lattice(rng, 12, max_paths=300)
        full = enumerate_paths(lat)
        n = rng.randint(1, len(full) + 2)
        out = prune_to_nbest(lat, n)
        kept = enumerate_paths(out)
        assert len(kept) == min(n, len(full))
        assert path_multiset(kept) == path_multiset(full[:n])
        assert count_paths(out) == min(n, len(full))


def test_prune_identity_at_total_count():
    rng = random.Random(19)
    for _ in range(50):
        lat = random_lattice(rng, 10, max_paths=100)
        out = prune_to_nbest(lat, count_paths(lat))
        assert path_multiset(enumerate_paths(out)) == path_multiset(enumerate_paths(lat))


def test_nbest_paths_matches_enumeration_prefix():
    rng = random.Random(23)
    for _ in range(100):
        lat = random_lattice(rng, 12, max_paths=300)
        assert nbest_paths(lat, 5) == enumerate_paths(lat)[:5]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_prune_property(seed, n):
    lat = random_lattice(random.Random(seed), 10, max_paths=200)
    out = prune_to_nbest(lat, n)
    assert count_paths(out) == min(n, count_paths(lat))
    topological_order(out)


# -- vocabulary ---------------------------------------------------------------


def test_vocabulary_reserved_first():
    v = TokenVocabulary(["b", "a", "<s>", "b"])
    assert v.tokens[:4] == ["<eps>", "<s>", "</s>", "<unk>"]
    assert v.tokens[4:] == ["b", "a"]
    assert (v.eps_id, v.bos_id, v.eos_id, v.unk_id) == (0, 1, 2, 3)


def test_vocabulary_lookup_inverse():
    v = TokenVocabulary([f"w{i}" for i in range(30)])
    assert all(v.lookup(v.token_of(i)) == i for i in range(len(v)))
    assert v.lookup("never-seen") == v.unk_id


@pytest.mark.parametrize("n", [1, 2, 3])
def test_chain_lattice_single_path(n):
    toks = list(itertools.islice("abc", n))
    assert enumerate_paths(chain_lattice(toks)) == [(toks, 0.0)]
