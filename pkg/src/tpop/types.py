"""Domain types shared by the protocol, the analytical model and the simulator."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence


class TPoPError(Exception):
    """Base class for errors raised by this package."""


class ImpossibleStateError(TPoPError, ValueError):
    """An honest agent cannot claim a position other than its real one."""


class MalformedTreeError(TPoPError, ValueError):
    """A witness tree violates its structural invariants."""


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinates: ({self.x}, {self.y})")

    def dist2(self, other: "Position") -> float:
        dx = self.x - other.x
        dy = self.y - other.y
        return dx * dx + dy * dy


@dataclass(frozen=True)
class Attributes:
    honest: bool
    coerced: bool


class AgentState(enum.IntEnum):
    """The six admissible (honesty, coercion, claims-true-position) combinations.

    Values are 1-based so that ``state - 1`` indexes the 6-vectors and
    6x6 matrices of the analytical model.
    """

    S1 = 1  # dishonest, non-coerced, fake position
    S2 = 2  # dishonest, non-coerced, real position
    S3 = 3  # honest, non-coerced
    S4 = 4  # honest, coerced
    S5 = 5  # dishonest, coerced, fake position
    S6 = 6  # dishonest, coerced, real position

    @property
    def index(self) -> int:
        return int(self) - 1

    @property
    def honest(self) -> bool:
        return self in (AgentState.S3, AgentState.S4)

    @property
    def coerced(self) -> bool:
        return self in (AgentState.S4, AgentState.S5, AgentState.S6)

    @property
    def claims_true_position(self) -> bool:
        return self not in (AgentState.S1, AgentState.S5)


_STATE_TABLE = {
    (False, False, False): AgentState.S1,
    (False, False, True): AgentState.S2,
    (True, False, True): AgentState.S3,
    (True, True, True): AgentState.S4,
    (False, True, False): AgentState.S5,
    (False, True, True): AgentState.S6,
}


def classify_state(attributes: Attributes, claims_true_position: bool) -> AgentState:
    key = (attributes.honest, attributes.coerced, claims_true_position)
    try:
        return _STATE_TABLE[key]
    except KeyError:
        raise ImpossibleStateError(
            "honest agents always claim their real position"
        ) from None


@dataclass(frozen=True)
class Agent:
    id: int
    attributes: Attributes
    real_position: Position
    claimed_position: Position

    def __post_init__(self):
        same = self.real_position == self.claimed_position
        if self.attributes.honest and not same:
            raise ValueError(f"honest agent {self.id} must claim its real position")
        if not self.attributes.honest and same:
            raise ValueError(f"dishonest agent {self.id} must claim a fake position")

    @property
    def honest(self) -> bool:
        return self.attributes.honest

    @property
    def coerced(self) -> bool:
        return self.attributes.coerced

    def __eq__(self, other):
        if not isinstance(other, Agent):
            return NotImplemented
        return self.id == other.id

    def __hash__(self):
        return hash(self.id)


@dataclass(frozen=True)
class Environment:
    width: float
    height: float
    range_of_sight: float
    agent_count: int

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("environment dimensions must be positive")
        if not self.range_of_sight >= 0:
            raise ValueError("range of sight must be non-negative")
        if self.agent_count <= 0:
            raise ValueError("agent_count must be positive")
        if not math.isfinite(self.density):
            raise ValueError("density must be finite")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def density(self) -> float:
        return self.agent_count / self.area

    @property
    def expected_neighbours(self) -> float:
        """Mean number of agents inside a field of view, ignoring borders."""
        return self.density * math.pi * self.range_of_sight**2


def ceil_fraction(t: float, n: int) -> int:
    """``ceil(t * n)`` robust to float noise such as ``0.1 * 30``."""
    return math.ceil(round(t * n, 9))


@dataclass(frozen=True)
class ThetaParams:
    """Operating conditions: threshold, height and per-level branching."""

    threshold: float
    height: int
    branching: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(int(w) for w in self.branching))
        if not (0 < self.threshold <= 1):
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.height < 1:
            raise ValueError("height must be a positive integer")
        if len(self.branching) != self.height:
            raise ValueError(
                f"need {self.height} branching factors, got {len(self.branching)}"
            )
        if any(w < 1 for w in self.branching):
            raise ValueError("branching factors must be positive")

    @classmethod
    def uniform(cls, threshold: float, height: int, w: int) -> "ThetaParams":
        return cls(threshold, height, (w,) * height)

    def w(self, d: int) -> int:
        """Branching factor of level ``d`` (1-based): children per parent at ``d - 1``."""
        return self.branching[d - 1]

    @property
    def level_sizes(self) -> list[int]:
        return level_sizes(self)

    def n(self, d: int) -> int:
        """Witness slots at depth ``d``; ``n(0) == 1``."""
        return 1 if d == 0 else self.level_sizes[d - 1]

    def parent_quota(self, d: int) -> int:
        """Confirmed children a parent at depth ``d - 1`` needs to stay in the tree."""
        return ceil_fraction(self.threshold, self.w(d))

    def level_quota(self, d: int) -> int:
        """Confirmed witnesses needed at depth ``d``."""
        return ceil_fraction(self.threshold, self.n(d))

    @property
    def total_nodes(self) -> int:
        return 1 + sum(self.level_sizes)

    def with_threshold(self, threshold: float) -> "ThetaParams":
        return ThetaParams(threshold, self.height, self.branching)

    def __str__(self):
        ws = ",".join(str(w) for w in self.branching)
        return f"t={self.threshold:g},h={self.height},w={ws}"


def level_sizes(theta: ThetaParams) -> list[int]:
    sizes = []
    n = 1
    for w in theta.branching:
        n *= w
        sizes.append(n)
    return sizes


@dataclass
class TreeNode:
    """One slot of a witness tree.

    ``approves`` is the edge into this node: whether this node's agent
    approves its parent. ``at_claimed`` records the position the node was
    placed at when named (committed position or, for a dishonest agent seen
    by a non-coerced parent, its real one). ``pruned`` and ``removed`` are
    written by verification.
    """

    agent_id: int
    depth: int
    parent: Optional[int]
    approves: bool = False
    at_claimed: bool = True
    pruned: bool = False
    removed: bool = False
    children: list[int] = field(default_factory=list)


class WitnessTree:
    """Rooted tree of agent references; node 0 is the prover."""

    def __init__(self, root_id: int):
        self.nodes: list[TreeNode] = [TreeNode(root_id, 0, None)]

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    def add_child(
        self, parent: int, agent_id: int, approves: bool, at_claimed: bool = True
    ) -> int:
        p = self.nodes[parent]
        idx = len(self.nodes)
        self.nodes.append(TreeNode(agent_id, p.depth + 1, parent, approves, at_claimed))
        p.children.append(idx)
        return idx

    @property
    def height(self) -> int:
        return max(n.depth for n in self.nodes)

    def level(self, d: int) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.depth == d]

    def __len__(self):
        return len(self.nodes)

    def reset_flags(self) -> None:
        for n in self.nodes:
            n.pruned = False
            n.removed = False

    def validate(self, theta: Optional[ThetaParams] = None) -> None:
        """Raise :class:`MalformedTreeError` on any structural inconsistency."""
        if not self.nodes:
            raise MalformedTreeError("tree has no root")
        root = self.nodes[0]
        if root.depth != 0 or root.parent is not None:
            raise MalformedTreeError("root must sit at depth 0 without a parent")
        counts: dict[int, int] = {}
        for i, node in enumerate(self.nodes[1:], start=1):
            if node.parent is None or not (0 <= node.parent < len(self.nodes)):
                raise MalformedTreeError(f"node {i} has no valid parent")
            parent = self.nodes[node.parent]
            if node.depth != parent.depth + 1:
                raise MalformedTreeError(
                    f"node {i} at depth {node.depth} under parent at depth {parent.depth}"
                )
            if i not in parent.children:
                raise MalformedTreeError(f"node {i} missing from its parent's children")
            counts[node.depth] = counts.get(node.depth, 0) + 1
        for i, node in enumerate(self.nodes):
            for c in node.children:
                if not (0 < c < len(self.nodes)) or self.nodes[c].parent != i:
                    raise MalformedTreeError(f"node {i} lists a foreign child {c}")
        if theta is None:
            return
        for d, count in counts.items():
            if d > theta.height:
                raise MalformedTreeError(f"depth {d} exceeds height {theta.height}")
            if count > theta.n(d):
                raise MalformedTreeError(
                    f"{count} nodes at depth {d}, at most {theta.n(d)} allowed"
                )
        for node in self.nodes:
            if node.children and len(node.children) > theta.w(node.depth + 1):
                raise MalformedTreeError(
                    f"a parent at depth {node.depth} names {len(node.children)} "
                    f"children, at most {theta.w(node.depth + 1)} allowed"
                )

    # JSON document: {"root": id, "nodes": [{"id", "depth", "parent", "approves"}]}
    # with "parent" the index of the parent entry and nodes[0] the root.
    def to_dict(self) -> dict:
        return {
            "root": self.root.agent_id,
            "nodes": [
                {
                    "id": n.agent_id,
                    "depth": n.depth,
                    "parent": n.parent,
                    "approves": n.approves,
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WitnessTree":
        entries = doc["nodes"]
        if not entries or entries[0]["parent"] is not None:
            raise MalformedTreeError("first node must be the root")
        if entries[0]["id"] != doc["root"]:
            raise MalformedTreeError("root id does not match the first node")
        tree = cls(doc["root"])
        tree.nodes[0].depth = entries[0]["depth"]
        for e in entries[1:]:
            p = e["parent"]
            if not isinstance(p, int) or not (0 <= p < len(entries)):
                raise MalformedTreeError(f"bad parent reference {p!r}")
            tree.nodes.append(TreeNode(e["id"], e["depth"], p, bool(e["approves"])))
        for i, n in enumerate(tree.nodes[1:], start=1):
            tree.nodes[n.parent].children.append(i)
        tree.validate()
        return tree


def theta_from_levels(threshold: float, branching: Sequence[int]) -> ThetaParams:
    return ThetaParams(threshold, len(branching), tuple(branching))
