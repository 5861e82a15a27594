import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_tree_doc, reference_verify
from tpop.protocol import (
    Commitment,
    build_tree,
    checks,
    commit,
    count_surviving_edges,
    fresh_salt,
    open_commitment,
    verify,
)
from tpop.types import MalformedTreeError, Position, ThetaParams, WitnessTree


def worked_example() -> WitnessTree:
    # g=0 names a1, a2; a1 names a3, a4 (approve); a2 names a5, a6 (reject)
    tree = WitnessTree(0)
    a1 = tree.add_child(0, 1, True)
    a2 = tree.add_child(0, 2, True)
    tree.add_child(a1, 3, True)
    tree.add_child(a1, 4, True)
    tree.add_child(a2, 5, False)
    tree.add_child(a2, 6, False)
    return tree


def test_worked_example_half_threshold():
    tree = worked_example()
    v = verify(tree, ThetaParams(0.5, 2, (2, 2)))
    assert v.truthful and v.failure_level is None
    assert v.confirmed_per_level == [1, 2]
    assert tree.nodes[2].pruned and not tree.nodes[1].pruned
    assert v.surviving_edges == 3 == count_surviving_edges(tree)


def test_worked_example_full_threshold():
    v = verify(worked_example(), ThetaParams(1.0, 2, (2, 2)))
    assert not v.truthful
    assert v.failure_level == 2


def test_fully_confirmed_trees():
    tree = WitnessTree(0)
    for i in range(6):
        tree.add_child(0, i + 1, True)
    v = verify(tree, ThetaParams(1, 1, (6,)))
    assert v.truthful and v.surviving_edges == 6 and v.confirmed_edges == 6
    root_only = WitnessTree(0)
    v = verify(root_only, ThetaParams(1, 1, (6,)))
    assert not v.truthful and v.failure_level == 1 and v.surviving_edges == 0


def test_duplicates_are_removed_first_instance_kept():
    tree = WitnessTree(0)
    a = tree.add_child(0, 1, True)
    b = tree.add_child(0, 2, True)
    tree.add_child(a, 3, True)
    tree.add_child(a, 4, True)
    tree.add_child(b, 3, True)  # same agent as under a
    tree.add_child(b, 0, True)  # the prover itself
    v = verify(tree, ThetaParams(0.5, 2, (2, 2)))
    assert [n.removed for n in tree.nodes] == [False, False, False, False, False, True, True]
    assert v.truthful
    assert not verify(tree, ThetaParams(1, 2, (2, 2))).truthful


def test_parent_naming_the_same_child_twice_gets_nothing():
    tree = WitnessTree(0)
    a = tree.add_child(0, 1, True)
    tree.add_child(a, 2, True)
    tree.add_child(a, 2, True)
    v = verify(tree, ThetaParams(0.5, 2, (1, 2)))
    assert v.confirmed_per_level[1] == 0
    assert not v.truthful


def test_checks_examples():
    tree = worked_example()
    named = {0}
    assert checks(tree, 3, 1, named, 2, 1.0)
    assert 3 in named
    assert not checks(tree, 3, 1, named, 2, 1.0)  # already named
    assert not checks(tree, 5, 2, {0}, 2, 0.5)  # does not approve
    tree.nodes[4].pruned = True
    assert not checks(tree, 3, 1, {0}, 2, 1.0)  # sibling quota broken


def test_verify_rejects_malformed_tree():
    tree = worked_example()
    tree.nodes[4].depth = 1
    with pytest.raises(MalformedTreeError):
        verify(tree, ThetaParams(0.5, 2, (2, 2)))
    with pytest.raises(MalformedTreeError):
        verify(worked_example(), ThetaParams(0.5, 1, (2,)))


def test_verify_is_repeatable():
    tree = worked_example()
    th = ThetaParams(0.5, 2, (2, 2))
    first = verify(tree, th)
    assert verify(tree, th) == first


def test_confirmed_edges_ignore_pruning_but_not_duplicates():
    tree = worked_example()
    tree.nodes[5].approves = True  # a5 approves a2, a6 still rejects
    v = verify(tree, ThetaParams(1, 2, (2, 2)))
    assert tree.nodes[2].pruned
    # a1 then lacks a sibling at t=1, so the prover's own edges go too
    assert tree.nodes[0].pruned
    assert v.surviving_edges == 2
    assert v.confirmed_edges == 5


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["0.25", "0.4", "0.5", "2/3", "0.75", "1"]))
def test_verify_agrees_with_reference(seed, t):
    doc, branching = random_tree_doc(np.random.default_rng(seed))
    tree = WitnessTree.from_dict(doc)
    th = ThetaParams(float(Fraction(t)), len(branching), tuple(branching))
    v = verify(tree, th)
    assert (v.truthful, v.failure_level) == reference_verify(doc, Fraction(t), branching)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_threshold_monotonicity(seed):
    doc, branching = random_tree_doc(np.random.default_rng(seed))
    tree = WitnessTree.from_dict(doc)
    passed = [
        verify(tree, ThetaParams(t, len(branching), tuple(branching))).truthful
        for t in (0.1, 0.25, 0.4, 0.5, 0.75, 1.0)
    ]
    # once it fails it keeps failing as t grows
    assert passed == sorted(passed, reverse=True)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.4, 0.5, 1.0]))
def test_surviving_ids_are_unique(seed, t):
    doc, branching = random_tree_doc(np.random.default_rng(seed))
    tree = WitnessTree.from_dict(doc)
    verify(tree, ThetaParams(t, len(branching), tuple(branching)))
    ids = [n.agent_id for n in tree.nodes if not n.removed]
    assert len(ids) == len(set(ids))


def _full_tree(h: int, w: int) -> WitnessTree:
    tree = WitnessTree(0)
    frontier = [0]
    for _ in range(h):
        nxt = []
        for p in frontier:
            for _ in range(w):
                nxt.append(tree.add_child(p, len(tree.nodes), True))
        frontier = nxt
    return tree


def test_verify_scales_at_most_quadratically():
    sizes, times = [], []
    for h in (1, 2, 3, 4):
        tree = _full_tree(h, 3)
        th = ThetaParams.uniform(1.0, h, 3)
        best = min(_timed(verify, tree, th) for _ in range(7))
        sizes.append(len(tree))
        times.append(best)
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    assert slope < 2.0, (sizes, times)


def _timed(fn, *args):
    t0 = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t0


class StubPopulation:
    def __init__(self, graph):
        self.graph = graph

    def neighbours(self, agent_id, at_claimed):
        ids = np.array(self.graph.get(agent_id, []), dtype=int)
        return ids, np.ones(len(ids), dtype=bool)

    def approves(self, child, child_at, parent, parent_at):
        return (child + parent) % 2 == 1


def test_build_tree_shapes():
    graph = {i: [j for j in range(10) if j != i] for i in range(10)}
    pop = StubPopulation(graph)
    th = ThetaParams(1, 2, (2, 2))
    tree = build_tree(0, pop, th, np.random.default_rng(1))
    assert len(tree) == 7
    tree.validate(th)
    for n in tree.nodes[1:]:
        assert n.agent_id in graph[tree.nodes[n.parent].agent_id]
        assert n.approves == ((n.agent_id + tree.nodes[n.parent].agent_id) % 2 == 1)
    again = build_tree(0, pop, th, np.random.default_rng(1))
    assert again.to_dict() == tree.to_dict()


def test_build_tree_short_neighbourhoods():
    pop = StubPopulation({0: [1, 2], 1: [0], 2: []})
    tree = build_tree(0, pop, ThetaParams(1, 2, (3, 3)), np.random.default_rng(0))
    assert sorted(tree.nodes[i].agent_id for i in tree.level(1)) == [1, 2]
    assert [tree.nodes[i].agent_id for i in tree.level(2)] == [0]
    lonely = build_tree(0, StubPopulation({}), ThetaParams(1, 1, (6,)), np.random.default_rng(0))
    assert len(lonely) == 1


def test_build_tree_children_are_uniform():
    pop = StubPopulation({0: list(range(1, 6))})
    rng = np.random.default_rng(5)
    hits = np.zeros(6)
    for _ in range(5000):
        tree = build_tree(0, pop, ThetaParams(1, 1, (2,)), rng)
        ids = [n.agent_id for n in tree.nodes[1:]]
        assert len(set(ids)) == 2
        hits[ids] += 1
    assert np.all(np.abs(hits[1:] / 5000 - 0.4) < 0.03)


def test_commitment_roundtrip():
    p, q = Position(1.5, -2.0), Position(1.5, -2.0000001)
    salt = fresh_salt()
    c = commit(p, salt)
    assert isinstance(c, Commitment) and len(c.digest) == 32
    assert commit(p, salt) == c
    assert commit(q, salt).digest != c.digest
    assert commit(p, fresh_salt()).digest != c.digest
    assert open_commitment(c, p, salt)
    assert not open_commitment(c, q, salt)
    assert not open_commitment(c, p, b"other")
    with pytest.raises(ValueError):
        commit(p, b"")
