"""The clipped token term and the four loss-aggregation rules.

Each token contributes phi = min(rho * A, clamp(rho, 1-eps_low, 1+eps_high) * A),
the clipped surrogate term with the sequence-level advantage A shared by all
tokens of a response. The aggregation rule decides how these per-token terms
combine into one group objective J (a maximization objective; the
policy-gradient loss reported in diagnostics is -J):

  token         J = (1/N)  sum_i sum_t phi_{i,t}
  seq           J = (1/G)  sum_i (1/T_i) sum_t phi_{i,t}
  balanced      J = (k/G) L+ + ((G-k)/G) L-   with L+- the token-level means
                within the positive / negative sign subsets
  balanced_gen  sign balance by advantage mass: the sequence counts k, G-k
                become the masses M+- = sum |A_i| per side and the token
                means are weighted by Z+- = sum |A_i| T_i, so non-binary
                rewards are handled

An empty sign subset simply drops out (its weight already encodes the zero
count); when both subsets are empty the balanced objectives return 0 flagged
degenerate. Every rule also reports the analytic dJ/d rho for each token,
using the unclipped branch at clip ties so the gradient is defined everywhere.

Summations use exactly-rounded ``math.fsum``, which makes all four objectives
bit-for-bit invariant under permutation of responses and of tokens within a
response.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import fsum
from typing import Any, Sequence

import numpy as np

from .groups import AdvantageSet, RolloutGroup

__all__ = [
    "RULES",
    "ClipConfig",
    "AggregationResult",
    "RuleSums",
    "MissingRatiosError",
    "BoundaryProximityError",
    "phi",
    "objective_token",
    "objective_seq",
    "objective_balanced",
    "objective_balanced_gen",
    "gradient_check",
    "compute_rule_sums",
    "evaluate_arrays",
]

RULES = ("token", "seq", "balanced", "balanced_gen")


class MissingRatiosError(ValueError):
    """Objective evaluation was asked of a length-only group."""


class BoundaryProximityError(ValueError):
    """A ratio sits too close to a clip boundary for finite differencing."""

    def __init__(self, message: str, offenders: tuple[tuple[int, int, float], ...]):
        super().__init__(message)
        self.offenders = offenders


@dataclass(frozen=True)
class ClipConfig:
    """Asymmetric clip band [1 - clip_low, 1 + clip_high] for policy ratios."""

    clip_low: float = 0.2
    clip_high: float = 0.28

    def __post_init__(self) -> None:
        low = float(self.clip_low)
        high = float(self.clip_high)
        if not (math.isfinite(low) and 0.0 < low < 1.0):
            raise ValueError(f"clip_low must lie in (0, 1), got {self.clip_low!r}")
        if not (math.isfinite(high) and high > 0.0):
            raise ValueError(f"clip_high must be > 0, got {self.clip_high!r}")
        object.__setattr__(self, "clip_low", low)
        object.__setattr__(self, "clip_high", high)

    @property
    def lower(self) -> float:
        return 1.0 - self.clip_low

    @property
    def upper(self) -> float:
        return 1.0 + self.clip_high


@dataclass(frozen=True)
class AggregationResult:
    """One rule's objective value and per-token ratio gradient."""

    objective: float
    rule: str
    grad_ratios: tuple[np.ndarray, ...]
    degenerate: bool = False
    decomposition: Any = None


@dataclass(frozen=True)
class RuleSums:
    """Sign-partitioned sums shared by the objectives and their decompositions.

    ``pos_phi`` / ``neg_phi`` are the raw phi sums over the positive /
    negative subsets; ``pos_seq`` / ``neg_seq`` sum the per-response token
    means instead. ``m_pos``/``m_neg`` are the advantage masses and
    ``z_pos``/``z_neg`` the advantage-weighted token masses.
    """

    size: int
    k: int
    neg_count: int
    total_tokens: int
    n_pos: int
    n_neg: int
    pos_phi: float
    neg_phi: float
    pos_seq: float
    neg_seq: float
    m_pos: float
    m_neg: float
    z_pos: float
    z_neg: float
    clipped: int


def phi(ratio: float, advantage: float, clip: ClipConfig) -> float:
    """Clipped token contribution min(rho*A, clamp(rho)*A) for one token."""
    ratio = float(ratio)
    if ratio <= 0.0:
        raise ValueError(f"ratio must be > 0, got {ratio!r}")
    clamped = min(max(ratio, clip.lower), clip.upper)
    return min(ratio * advantage, clamped * advantage)


def _phi_array(ratios: np.ndarray, advantage: float, clip: ClipConfig) -> np.ndarray:
    clamped = np.clip(ratios, clip.lower, clip.upper)
    return np.minimum(ratios * advantage, clamped * advantage)


def _dphi_array(ratios: np.ndarray, advantage: float, clip: ClipConfig) -> np.ndarray:
    # Unclipped branch at ties, hence the inclusive comparisons.
    if advantage > 0.0:
        active = ratios <= clip.upper
    elif advantage < 0.0:
        active = ratios >= clip.lower
    else:
        return np.zeros_like(ratios)
    return advantage * active.astype(float)


def _clipped_count(ratios: np.ndarray, advantage: float, clip: ClipConfig) -> int:
    # A token counts as clipped when the clamped branch is the strict minimum.
    if advantage > 0.0:
        return int(np.count_nonzero(ratios > clip.upper))
    if advantage < 0.0:
        return int(np.count_nonzero(ratios < clip.lower))
    return 0


def compute_rule_sums(
    adv: AdvantageSet, ratio_arrays: Sequence[np.ndarray], clip: ClipConfig
) -> RuleSums:
    """Accumulate the sign-partitioned phi sums every rule is built from."""
    if len(ratio_arrays) != adv.size:
        raise ValueError(
            f"{len(ratio_arrays)} ratio arrays for {adv.size} advantages"
        )
    pos = set(adv.pos_indices)
    neg = set(adv.neg_indices)
    pos_phi: list[float] = []
    neg_phi: list[float] = []
    pos_seq: list[float] = []
    neg_seq: list[float] = []
    n_pos = n_neg = total = clipped = 0
    for i, arr in enumerate(ratio_arrays):
        a = adv.advantages[i]
        t = len(arr)
        total += t
        clipped += _clipped_count(arr, a, clip)
        if i in pos:
            s = fsum(_phi_array(arr, a, clip))
            pos_phi.append(s)
            pos_seq.append(s / t)
            n_pos += t
        elif i in neg:
            s = fsum(_phi_array(arr, a, clip))
            neg_phi.append(s)
            neg_seq.append(s / t)
            n_neg += t
        # zero-advantage responses contribute exactly zero everywhere
    m_pos = fsum(adv.advantages[i] for i in adv.pos_indices)
    m_neg = fsum(-adv.advantages[i] for i in adv.neg_indices)
    z_pos = fsum(adv.advantages[i] * len(ratio_arrays[i]) for i in adv.pos_indices)
    z_neg = fsum(-adv.advantages[i] * len(ratio_arrays[i]) for i in adv.neg_indices)
    return RuleSums(
        size=adv.size,
        k=adv.k,
        neg_count=len(adv.neg_indices),
        total_tokens=total,
        n_pos=n_pos,
        n_neg=n_neg,
        pos_phi=fsum(pos_phi),
        neg_phi=fsum(neg_phi),
        pos_seq=fsum(pos_seq),
        neg_seq=fsum(neg_seq),
        m_pos=m_pos,
        m_neg=m_neg,
        z_pos=z_pos,
        z_neg=z_neg,
        clipped=clipped,
    )


def evaluate_arrays(
    rule: str,
    adv: AdvantageSet,
    ratio_arrays: Sequence[np.ndarray],
    clip: ClipConfig,
    need_grad: bool = True,
) -> tuple[float, tuple[np.ndarray, ...] | None, RuleSums, bool]:
    """Evaluate one rule on raw ratio arrays.

    Returns (objective, per-response gradient arrays or None, the shared
    sign sums, degenerate flag). This is the array-level core behind the
    public objective functions; the training simulator calls it directly
    with ratios recomputed from logits.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")
    sums = compute_rule_sums(adv, ratio_arrays, clip)
    g = sums.size
    degenerate = False
    w_pos = w_neg = 0.0

    if rule == "token":
        objective = (sums.pos_phi + sums.neg_phi) / sums.total_tokens
    elif rule == "seq":
        objective = (sums.pos_seq + sums.neg_seq) / g
    elif rule == "balanced":
        term_pos = (sums.k / g) * (sums.pos_phi / sums.n_pos) if sums.k else 0.0
        term_neg = (
            (sums.neg_count / g) * (sums.neg_phi / sums.n_neg) if sums.neg_count else 0.0
        )
        objective = term_pos + term_neg
        degenerate = sums.k == 0 and sums.neg_count == 0
        if sums.k:
            w_pos = (sums.k / g) / sums.n_pos
        if sums.neg_count:
            w_neg = (sums.neg_count / g) / sums.n_neg
    else:  # balanced_gen
        term_pos = (sums.m_pos / g) * (sums.pos_phi / sums.z_pos) if sums.k else 0.0
        term_neg = (
            (sums.m_neg / g) * (sums.neg_phi / sums.z_neg) if sums.neg_count else 0.0
        )
        objective = term_pos + term_neg
        degenerate = sums.k == 0 and sums.neg_count == 0
        if sums.k:
            w_pos = (sums.m_pos / g) / sums.z_pos
        if sums.neg_count:
            w_neg = (sums.m_neg / g) / sums.z_neg

    grads: tuple[np.ndarray, ...] | None = None
    if need_grad:
        pos = set(adv.pos_indices)
        neg = set(adv.neg_indices)
        out = []
        for i, arr in enumerate(ratio_arrays):
            a = adv.advantages[i]
            if rule == "token":
                w = 1.0 / sums.total_tokens
            elif rule == "seq":
                w = 1.0 / (g * len(arr))
            elif i in pos:
                w = w_pos
            elif i in neg:
                w = w_neg
            else:
                w = 0.0
            gi = w * _dphi_array(arr, a, clip)
            gi.setflags(write=False)
            out.append(gi)
        grads = tuple(out)
    return objective, grads, sums, degenerate


def _ratio_arrays(group: RolloutGroup) -> list[np.ndarray]:
    arrays = []
    for i, resp in enumerate(group.responses):
        if resp.ratios is None:
            raise MissingRatiosError(
                f"group {group.prompt_id!r}: response {i} is length-only, "
                "objectives need per-token ratios"
            )
        arrays.append(np.asarray(resp.ratios, dtype=float))
    return arrays


def _objective(
    rule: str, group: RolloutGroup, adv: AdvantageSet, clip: ClipConfig
) -> AggregationResult:
    if adv.size != group.size:
        raise ValueError(
            f"advantage set of size {adv.size} does not match group of size {group.size}"
        )
    arrays = _ratio_arrays(group)
    objective, grads, _, degenerate = evaluate_arrays(rule, adv, arrays, clip)
    if not math.isfinite(objective):
        raise ValueError(f"non-finite {rule} objective for group {group.prompt_id!r}")
    assert grads is not None
    return AggregationResult(objective, rule, grads, degenerate=degenerate)


def objective_token(
    group: RolloutGroup, adv: AdvantageSet, clip: ClipConfig
) -> AggregationResult:
    """Mean of phi over all tokens in the group."""
    return _objective("token", group, adv, clip)


def objective_seq(
    group: RolloutGroup, adv: AdvantageSet, clip: ClipConfig
) -> AggregationResult:
    """Mean over responses of each response's token-mean of phi."""
    return _objective("seq", group, adv, clip)


def objective_balanced(
    group: RolloutGroup, adv: AdvantageSet, clip: ClipConfig
) -> AggregationResult:
    """Within-sign token means combined with sequence-count weights."""
    return _objective("balanced", group, adv, clip)


def objective_balanced_gen(
    group: RolloutGroup, adv: AdvantageSet, clip: ClipConfig
) -> AggregationResult:
    """Balanced aggregation with advantage masses, for non-binary rewards."""
    return _objective("balanced_gen", group, adv, clip)


def gradient_check(
    result: AggregationResult,
    group: RolloutGroup,
    adv: AdvantageSet,
    clip: ClipConfig,
    h: float = 1e-5,
) -> float:
    """Central-difference check of dJ/d rho against ``result.grad_ratios``.

    Every ratio must sit farther than 10*h from both clip boundaries (where
    phi has kinks); offenders raise BoundaryProximityError. Returns the
    maximum relative error max |analytic - numeric| / max(1, |a|, |n|).
    """
    if h <= 0.0:
        raise ValueError("h must be > 0")
    arrays = _ratio_arrays(group)
    if len(result.grad_ratios) != len(arrays) or any(
        gr.shape != arr.shape for gr, arr in zip(result.grad_ratios, arrays)
    ):
        raise ValueError("result gradient layout does not match group")
    offenders = []
    for i, arr in enumerate(arrays):
        for t, r in enumerate(arr):
            margin = min(abs(r - clip.lower), abs(r - clip.upper))
            if margin <= 10.0 * h or r <= h:
                offenders.append((i, t, float(r)))
    if offenders:
        raise BoundaryProximityError(
            f"{len(offenders)} ratio(s) within 10*h={10 * h:g} of a clip "
            f"boundary or of zero: {offenders[:5]}",
            tuple(offenders),
        )
    max_rel = 0.0
    for i, arr in enumerate(arrays):
        for t in range(len(arr)):
            orig = arr[t]
            arr[t] = orig + h
            j_plus = evaluate_arrays(result.rule, adv, arrays, clip, need_grad=False)[0]
            arr[t] = orig - h
            j_minus = evaluate_arrays(result.rule, adv, arrays, clip, need_grad=False)[0]
            arr[t] = orig
            numeric = (j_plus - j_minus) / (2.0 * h)
            analytic = float(result.grad_ratios[i][t])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            max_rel = max(max_rel, rel)
    return max_rel
