"""Closed-form probability model of T-PoP.

States are indexed 1..6 (see :class:`~tpop.types.AgentState`); vectors and
matrices use 0-based positions ``state - 1``. Matrices are oriented
parent-row x child-column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .types import AgentState, TPoPError, ThetaParams

STATES = tuple(AgentState)


class DomainError(TPoPError, ValueError):
    pass


class UnsupportedShapeError(TPoPError, ValueError):
    pass


def _check_prob(name: str, p: float) -> None:
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {p}")


def _state(u) -> AgentState:
    return u if isinstance(u, AgentState) else AgentState(int(u))


def state_probability(state: AgentState, p_h: float, p_c: float, claims_true: bool) -> float:
    """P(alpha) P(beta) P(gamma | ...) with gamma fixed by ``claims_true``."""
    pa = p_h if state.honest else 1.0 - p_h
    pb = p_c if state.coerced else 1.0 - p_c
    return pa * pb * (1.0 if state.claims_true_position == claims_true else 0.0)


def root_state_vector(p_h: float, p_c: float) -> np.ndarray:
    """Distribution of the prover's state; dishonest provers claim fake positions."""
    _check_prob("p_h", p_h)
    _check_prob("p_c", p_c)
    return np.array(
        [
            (1 - p_h) * (1 - p_c),
            0.0,
            p_h * (1 - p_c),
            p_h * p_c,
            (1 - p_h) * p_c,
            0.0,
        ]
    )


def selection_matrix(p_h: float, p_c: float) -> np.ndarray:
    """Probability that a parent in state u names a child in state v.

    Honest children always sit at their real position. A dishonest child is
    seen at its fake position by a coerced parent and at its real position by
    a non-coerced one. Dishonest agents placed at their real position never
    name witnesses, so rows s2 and s6 are empty.
    """
    _check_prob("p_h", p_h)
    _check_prob("p_c", p_c)
    m = np.zeros((6, 6))
    for u in STATES:
        if u in (AgentState.S2, AgentState.S6):
            continue
        for v in STATES:
            if v.honest:
                claims_true = True
            else:
                claims_true = not u.coerced
            m[u.index, v.index] = state_probability(v, p_h, p_c, claims_true)
    return m


# Rows: approving child, columns: parent.
_APPROVALS_CHILD_BY_PARENT = np.array(
    [
        [0, 0, 0, 1, 0, 0],
        [0, 0, 0, 0, 0, 0],
        [0, 0, 1, 1, 0, 0],
        [1, 0, 1, 1, 1, 0],
        [0, 0, 0, 1, 1, 0],
        [0, 0, 0, 0, 0, 0],
    ],
    dtype=float,
)


def approval_matrix() -> np.ndarray:
    """Entry (u, v) is 1 iff a child in state v approves a parent in state u."""
    return _APPROVALS_CHILD_BY_PARENT.T.copy()


def transition_matrix(p_h: float, p_c: float) -> np.ndarray:
    """``M ⊙ A``: probability of naming a child of state v that approves."""
    return selection_matrix(p_h, p_c) * approval_matrix()


def approval_probabilities(depth: int, p_h: float, p_c: float) -> np.ndarray:
    """Array ``P[u-1, d-1]`` of chain-approval probabilities for d = 1..depth."""
    t = transition_matrix(p_h, p_c)
    out = np.empty((6, depth))
    v = np.ones(6)
    for d in range(depth):
        v = t @ v
        out[:, d] = v
    return out


def approval_probability(u, d: int, p_h: float, p_c: float) -> float:
    """Probability that a depth-``d`` witness of a prover in state ``u`` is
    connected to it through approvals, ``e_u^T (M ⊙ A)^d 1``."""
    if d < 1:
        raise ValueError("depth must be at least 1")
    t = transition_matrix(p_h, p_c)
    return float(np.linalg.matrix_power(t, d)[_state(u).index].sum())


def binomial_tail(n: int, k_min: int, p: float) -> float:
    """P(X >= k_min) for X ~ Binomial(n, p), summed term by term in log space."""
    if k_min <= 0:
        return 1.0
    if k_min > n:
        return 0.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    lp, lq = math.log(p), math.log1p(-p)
    total = 0.0
    for k in range(k_min, n + 1):
        total += math.exp(math.log(math.comb(n, k)) + k * lp + (n - k) * lq)
    return min(total, 1.0)


def criterion1_probability(u, theta: ThetaParams, p_h: float, p_c: float) -> float:
    """Probability that every level collects at least ``ceil(t n_d)`` approvals,
    treating the ``n_d`` witnesses of a level as independent trials."""
    probs = approval_probabilities(theta.height, p_h, p_c)[_state(u).index]
    out = 1.0
    for d in range(1, theta.height + 1):
        out *= binomial_tail(theta.n(d), theta.level_quota(d), float(probs[d - 1]))
    return out


def poisson_cdf(lam: float, k: int) -> float:
    """P(N <= k) for N ~ Poisson(lam)."""
    if k < 0:
        return 0.0
    if lam == 0:
        return 1.0
    log_lam = math.log(lam)
    return min(1.0, sum(math.exp(-lam + j * log_lam - math.lgamma(j + 1)) for j in range(k + 1)))


def poisson_tail(lam: float, n: int) -> float:
    """P(N >= n) for N ~ Poisson(lam)."""
    if n <= 0:
        return 1.0
    if lam <= 0:
        return 0.0
    if lam >= n:
        return 1.0 - poisson_cdf(lam, n - 1)
    # small tail: sum it directly to keep relative precision
    log_lam = math.log(lam)
    total = 0.0
    j = n
    while True:
        term = math.exp(-lam + j * log_lam - math.lgamma(j + 1))
        total += term
        if term < 1e-18 * total:
            return total
        j += 1


def criterion2_probability(theta: ThetaParams, mu: float, r: float) -> float:
    """Probability that every parent finds enough neighbours under a Poisson
    point process of intensity ``mu``."""
    if mu <= 0 or r <= 0:
        raise ValueError("density and range must be positive")
    lam = mu * math.pi * r * r
    out = 1.0
    for i in range(theta.height):
        out *= poisson_tail(lam, theta.n(i + 1)) ** theta.n(i)
    return out


def kappa(k_mean: float, n: float, y: int, clamp: bool = False) -> float:
    """Probability that ``y`` fresh picks among ``k_mean`` neighbours avoid each
    other and ``n`` already-used agents: ``(k-n)(k-n-1)...(k-n-y+1) / k^y``."""
    if k_mean <= 0 or k_mean <= n + y - 1:
        if clamp:
            return 0.0
        raise DomainError(f"kappa needs k_mean > n + y - 1, got k={k_mean}, n={n}, y={y}")
    num = 1.0
    for i in range(y):
        num *= k_mean - n - i
    return num / k_mean**y


def _check_delta(delta: float, r: float) -> None:
    if r <= 0:
        raise DomainError("range must be positive")
    if not (0.0 <= delta <= 2.0 * r):
        raise DomainError(f"delta must lie in [0, 2r], got {delta}")


def distance_pdf(delta: float, r: float) -> float:
    """Density of the distance between two uniform points in a disk of radius r."""
    _check_delta(delta, r)
    x = delta / (2.0 * r)
    return (4.0 * delta / (math.pi * r * r)) * math.acos(x) - (
        2.0 * delta * delta / (math.pi * r**3)
    ) * math.sqrt(max(0.0, 1.0 - x * x))


def overlap_fraction(delta: float, r: float) -> float:
    """Shared area of two radius-r disks ``delta`` apart, over one disk's area."""
    _check_delta(delta, r)
    if delta == 0.0:
        return 1.0
    if delta == 2.0 * r:
        return 0.0
    lens = 2.0 * r * r * math.acos(delta / (2.0 * r)) - (delta / 2.0) * math.sqrt(
        4.0 * r * r - delta * delta
    )
    return lens / (math.pi * r * r)


def adaptive_simpson(
    f: Callable[[float], float], a: float, b: float, tol: float = 1e-6, max_depth: int = 50
) -> float:
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = simpson(fa, fm, fb, a, b)
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    while stack:
        a, b, fa, fm, fb, whole, eps, depth = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        delta = left + right - whole
        if depth >= max_depth or abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, eps / 2.0, depth + 1))
            stack.append((m, b, fm, frm, fb, right, eps / 2.0, depth + 1))
    return total


def _is_single_level(theta: ThetaParams) -> bool:
    return theta.height == 1


def _is_binary_two_level(theta: ThetaParams) -> bool:
    return theta.height == 2 and theta.branching == (2, 2)


def uniqueness_probability(theta: ThetaParams, k_mean: float, r: float, tol: float = 1e-6) -> float:
    """Approximate probability that a randomly built tree holds distinct agents.

    Supported shapes are single-level trees and the two-level binary tree;
    anything else needs the Monte-Carlo estimator in the simulator.
    """
    if _is_single_level(theta):
        return kappa(k_mean, 0, theta.branching[0], clamp=True)
    if not _is_binary_two_level(theta):
        raise UnsupportedShapeError(f"no closed form for tree shape {theta.branching}")
    if r <= 0:
        raise DomainError("range must be positive")

    def k(n, y=2):
        return kappa(k_mean, n, y, clamp=True)

    def near(delta):
        a = overlap_fraction(delta, r)
        return distance_pdf(delta, r) * k(2) * (
            (1 - a) ** 2 * k(2) + 2 * (1 - a) * a * k(3) + a * a * k(4)
        )

    def far(delta):
        a = overlap_fraction(delta, r)
        return distance_pdf(delta, r) * k(1) * (
            (1 - a) ** 2 * k(1) + 2 * (1 - a) * a * k(2) + a * a * k(3)
        )

    # the integrand has a kink at delta = r
    second_level = adaptive_simpson(near, 0.0, r, tol / 2) + adaptive_simpson(far, r, 2 * r, tol / 2)
    return k(0) * second_level


@dataclass(frozen=True)
class ModelParams:
    p_h: float
    p_c: float
    theta: ThetaParams
    mu: float = math.inf
    r: float = 1.0
    infinite_density: bool = False
    uniqueness: Optional[float] = None  # overrides the closed-form criterion 3

    def __post_init__(self):
        _check_prob("p_h", self.p_h)
        _check_prob("p_c", self.p_c)

    @property
    def k_mean(self) -> float:
        return self.mu * math.pi * self.r**2


def criterion_breakdown(u, model: ModelParams) -> tuple[float, float, float]:
    c1 = criterion1_probability(u, model.theta, model.p_h, model.p_c)
    if model.infinite_density or math.isinf(model.mu):
        return c1, 1.0, 1.0
    c2 = criterion2_probability(model.theta, model.mu, model.r)
    if model.uniqueness is not None:
        c3 = model.uniqueness
    else:
        c3 = uniqueness_probability(model.theta, model.k_mean, model.r)
    return c1, c2, c3


def tpop_probability(u, model: ModelParams) -> float:
    """Probability that a prover in state ``u`` obtains a proof of position."""
    c1, c2, c3 = criterion_breakdown(u, model)
    return c1 * c2 * c3


def grid_values(step: float) -> np.ndarray:
    count = round(1.0 / step)
    if count < 1 or abs(count * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide 1")
    return np.round(np.arange(count + 1) / count, 12)


@dataclass
class SurfaceSet:
    p_h: np.ndarray
    p_c: np.ndarray
    tp: np.ndarray  # [i_h, i_c], probabilities in [0, 1]
    tn: np.ndarray

    def rows(self):
        for i, ph in enumerate(self.p_h):
            for j, pc in enumerate(self.p_c):
                yield float(ph), float(pc), float(self.tp[i, j]), float(self.tn[i, j])


def true_positive_rate(model: ModelParams) -> float:
    """P(accepted | honest prover); honest provers are s3 or s4."""
    return (1 - model.p_c) * tpop_probability(AgentState.S3, model) + model.p_c * tpop_probability(
        AgentState.S4, model
    )


def true_negative_rate(model: ModelParams) -> float:
    """P(rejected | dishonest prover); dishonest provers are s1 or s5."""
    return 1.0 - (
        (1 - model.p_c) * tpop_probability(AgentState.S1, model)
        + model.p_c * tpop_probability(AgentState.S5, model)
    )


def theoretical_surfaces(
    theta: ThetaParams,
    grid_step: float = 0.1,
    infinite_density: bool = True,
    mu: float = math.inf,
    r: float = 1.0,
) -> SurfaceSet:
    values = grid_values(grid_step)
    tp = np.empty((len(values), len(values)))
    tn = np.empty_like(tp)
    uniq = None
    if not infinite_density:
        uniq = uniqueness_probability(theta, mu * math.pi * r * r, r)
    for i, ph in enumerate(values):
        for j, pc in enumerate(values):
            model = ModelParams(ph, pc, theta, mu, r, infinite_density, uniq)
            tp[i, j] = true_positive_rate(model)
            tn[i, j] = true_negative_rate(model)
    return SurfaceSet(values, values.copy(), tp, tn)


def _expected_edges(root: np.ndarray, step: np.ndarray, theta: ThetaParams) -> float:
    total = 0.0
    v = root
    for d in range(1, theta.height + 1):
        v = v @ step
        total += theta.n(d) * float(v.sum())
    return total


def expected_edges(theta: ThetaParams, p_h: float, p_c: float) -> float:
    """Expected number of approval edges connected to the prover."""
    return _expected_edges(root_state_vector(p_h, p_c), transition_matrix(p_h, p_c), theta)


PLATOON_STATES = (AgentState.S1, AgentState.S4, AgentState.S5)
PLATOON_APPROVALS = np.array([[0, 1, 0], [1, 1, 1], [1, 1, 1]], dtype=float)


def platoon_matrices(p_h: float, p_c: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Root vector, selection and approval matrices restricted to s1, s4, s5."""
    idx = [s.index for s in PLATOON_STATES]
    full = root_state_vector(p_h, p_c)
    root = full[idx]
    root[1] = 0.0  # an honest agent never leads a platoon
    m = selection_matrix(p_h, p_c)[np.ix_(idx, idx)]
    return root, m, PLATOON_APPROVALS.copy()


def platoon_expected_edges(theta: ThetaParams, p_h: float, p_c: float) -> float:
    root, m, a = platoon_matrices(p_h, p_c)
    return _expected_edges(root, m * a, theta)


HONEST_EDGES = (
    (AgentState.S3, AgentState.S3),
    (AgentState.S3, AgentState.S4),
    (AgentState.S4, AgentState.S3),
    (AgentState.S4, AgentState.S4),
)


def honest_edge_probability(parent: AgentState, child: AgentState, p_h: float, p_c: float) -> float:
    """Joint probability that a tree edge runs from ``parent`` to ``child``."""
    return float(
        root_state_vector(p_h, p_c)[parent.index] * selection_matrix(p_h, p_c)[parent.index, child.index]
    )


def optimal_honest_edge_points(points: int = 101) -> list[dict]:
    """Grid maximisers of the honest-edge probabilities (first maximiser on ties)."""
    values = np.linspace(0.0, 1.0, points)
    surfaces = {edge: np.empty((points, points)) for edge in HONEST_EDGES}
    for i, ph in enumerate(values):
        for j, pc in enumerate(values):
            root = root_state_vector(ph, pc)
            m = selection_matrix(ph, pc)
            for parent, child in HONEST_EDGES:
                surfaces[parent, child][i, j] = root[parent.index] * m[parent.index, child.index]
    table = []
    for (parent, child), surface in surfaces.items():
        i, j = np.unravel_index(int(np.argmax(surface)), surface.shape)
        table.append(
            {
                "entry": f"m{parent.value},{child.value}",
                "parent": parent.name.lower(),
                "child": child.name.lower(),
                "p_h": round(float(values[i]), 10),
                "p_c": round(float(values[j]), 10),
                "value": float(surface[i, j]),
            }
        )
    return table


def format_matrix(m: np.ndarray, precision: int = 4) -> str:
    states = STATES if m.shape[0] == 6 else PLATOON_STATES
    labels = [s.name.lower() for s in states]
    width = precision + 4
    lines = [" " * 4 + "".join(f"{lab:>{width}}" for lab in labels)]
    for lab, row in zip(labels, m):
        lines.append(f"{lab:<4}" + "".join(f"{x:>{width}.{precision}f}" for x in row))
    return "\n".join(lines)
