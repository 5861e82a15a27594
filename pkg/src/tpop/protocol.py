"""Commit, tree building, checks and verification."""

from __future__ import annotations

import hashlib
import hmac
import secrets
import struct
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .types import Agent, Position, ThetaParams, WitnessTree, ceil_fraction

DIGEST_SIZE = 32


@dataclass(frozen=True)
class Commitment:
    digest: bytes
    salt: bytes


def _position_bytes(position: Position) -> bytes:
    return struct.pack("<dd", position.x, position.y)


def commit(position: Position, salt: bytes) -> Commitment:
    """Salted SHA-256 commitment over the little-endian coordinates."""
    if not salt:
        raise ValueError("salt must be non-empty")
    digest = hashlib.sha256(_position_bytes(position) + salt).digest()
    return Commitment(digest, bytes(salt))


def open_commitment(commitment: Commitment, position: Position, salt: bytes) -> bool:
    if not salt:
        return False
    digest = hashlib.sha256(_position_bytes(position) + salt).digest()
    return hmac.compare_digest(digest, commitment.digest)


def fresh_salt(nbytes: int = 16) -> bytes:
    return secrets.token_bytes(nbytes)


class Population(Protocol):
    """What tree building needs to know about the agents around a prover."""

    def neighbours(self, agent_id: int, at_claimed: bool) -> tuple[np.ndarray, np.ndarray]:
        """Ids perceived by ``agent_id`` when placed at its claimed (or real)
        position, with flags telling whether each is perceived at its claimed
        position."""

    def approves(
        self, child_id: int, child_at_claimed: bool, parent_id: int, parent_at_claimed: bool
    ) -> bool: ...


def build_tree(
    prover: Agent | int,
    population: Population,
    theta: ThetaParams,
    rng: np.random.Generator,
) -> WitnessTree:
    """Grow a witness tree level by level.

    Each parent names ``w_{d+1}`` children uniformly at random without
    replacement among the agents it perceives, or all of them when it
    perceives fewer. The prover is placed at its claimed position.
    """
    root_id = prover.id if isinstance(prover, Agent) else int(prover)
    tree = WitnessTree(root_id)
    frontier = [0]
    for d in range(1, theta.height + 1):
        w = theta.w(d)
        nxt = []
        for p in frontier:
            parent = tree.nodes[p]
            ids, at_claimed = population.neighbours(parent.agent_id, parent.at_claimed)
            n = len(ids)
            if n == 0:
                continue
            picks = rng.choice(n, size=w, replace=False) if n > w else rng.permutation(n)
            for j in picks:
                cid = int(ids[j])
                cflag = bool(at_claimed[j])
                ok = population.approves(cid, cflag, parent.agent_id, parent.at_claimed)
                nxt.append(tree.add_child(p, cid, ok, cflag))
        frontier = nxt
    return tree


def checks(
    tree: WitnessTree,
    child: int,
    parent: int,
    named: set[int],
    w_d: int,
    t: float,
) -> bool:
    """Decide whether ``child`` confirms ``parent``; register it in ``named`` if so."""
    c = tree.nodes[child]
    p = tree.nodes[parent]
    siblings = [tree.nodes[i] for i in p.children]
    surviving = sum(1 for s in siblings if not s.pruned)
    distinct = len({s.agent_id for s in siblings}) == len(siblings)
    if (
        c.approves
        and surviving >= ceil_fraction(t, w_d)
        and c.agent_id not in named
        and distinct
    ):
        named.add(c.agent_id)
        return True
    return False


@dataclass
class Verdict:
    truthful: bool
    failure_level: Optional[int]
    confirmed_per_level: list[int] = field(default_factory=list)
    surviving_edges: int = 0
    confirmed_edges: int = 0


def verify(tree: WitnessTree, theta: ThetaParams) -> Verdict:
    """Judge a witness tree from its deepest parents up to the prover.

    All levels are processed so that prune and duplicate flags are complete;
    the verdict reports the first level whose confirmed witness count falls
    below ``ceil(t * n_d)``.
    """
    tree.validate(theta)
    tree.reset_flags()
    nodes = tree.nodes
    t = theta.threshold
    named = {tree.root.agent_id}
    by_depth: list[list[int]] = [[] for _ in range(theta.height + 1)]
    for i, node in enumerate(nodes):
        by_depth[node.depth].append(i)

    confirmed = [0] * theta.height
    failure = None
    for d in range(theta.height - 1, -1, -1):
        w = theta.w(d + 1)
        quota = theta.parent_quota(d + 1)
        level_total = 0
        for b in by_depth[d]:
            k_b = 0
            for c in nodes[b].children:
                child = nodes[c]
                if child.agent_id in named:
                    # first instance in processing order keeps the id
                    child.removed = True
                    continue
                if not child.pruned and checks(tree, c, b, named, w, t):
                    k_b += 1
                named.add(child.agent_id)
            if k_b < quota:
                nodes[b].pruned = True
            level_total += k_b
        confirmed[d] = level_total
        if failure is None and level_total < theta.level_quota(d + 1):
            failure = d + 1

    return Verdict(
        truthful=failure is None,
        failure_level=failure,
        confirmed_per_level=confirmed,
        surviving_edges=count_surviving_edges(tree),
        confirmed_edges=count_confirmed_edges(tree),
    )


def count_surviving_edges(tree: WitnessTree) -> int:
    """Approval edges whose child and parent were both left in the tree."""
    nodes = tree.nodes
    total = 0
    for node in nodes[1:]:
        parent = nodes[node.parent]
        if (
            node.approves
            and not (node.pruned or node.removed)
            and not (parent.pruned or parent.removed)
        ):
            total += 1
    return total


def count_confirmed_edges(tree: WitnessTree) -> int:
    """Approval edges lying on an unbroken approval chain from the prover.

    Duplicates removed by verification break the chain; threshold pruning
    does not. This is the quantity the expected-edge model describes.
    """
    nodes = tree.nodes
    linked = [False] * len(nodes)
    linked[0] = True
    total = 0
    # parents always precede their children in build order, but hand-built
    # trees need not, so walk by depth
    for i in sorted(range(1, len(nodes)), key=lambda j: nodes[j].depth):
        node = nodes[i]
        if node.approves and not node.removed and linked[node.parent]:
            linked[i] = True
            total += 1
    return total
