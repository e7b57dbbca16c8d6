"""Seeded identity suite behind ``grpoagg verify``.

Each check draws random instances from a shared generator, evaluates one of
the algebraic identities the aggregation rules must satisfy, and reports the
maximum observed error against a fixed tolerance. The suite manifest records
which exported operations each check exercises; together they must cover the
whole group-model / aggregation / decomposition surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, TextIO

import numpy as np

from .aggregate import (
    ClipConfig,
    gradient_check,
    objective_balanced,
    objective_balanced_gen,
    objective_seq,
    objective_token,
    phi,
)
from .decompose import (
    LengthStats,
    RegimeThresholds,
    ba_weight_identity,
    decompose,
    length_stats,
    regime_report,
)
from .groups import AdvantageSet, Response, RolloutGroup, binary_closed_form, normalize_advantages

__all__ = [
    "IdentityCheck",
    "SUITE",
    "REQUIRED_OPERATIONS",
    "covered_operations",
    "run_suite",
    "random_binary_group",
    "random_real_group",
    "random_smooth_group",
]

REQUIRED_OPERATIONS = frozenset(
    {
        "normalize_advantages",
        "binary_closed_form",
        "phi",
        "objective_token",
        "objective_seq",
        "objective_balanced",
        "objective_balanced_gen",
        "gradient_check",
        "decompose",
        "ba_weight_identity",
        "length_stats",
        "regime_report",
    }
)

_OBJECTIVES = {
    "token": objective_token,
    "seq": objective_seq,
    "balanced": objective_balanced,
    "balanced_gen": objective_balanced_gen,
}


def _response(rng: np.random.Generator, reward: float, length: int, lo: float, hi: float) -> Response:
    return Response(
        tokens=tuple(int(t) for t in rng.integers(1, 5, size=length)),
        reward=float(reward),
        ratios=tuple(float(r) for r in rng.uniform(lo, hi, size=length)),
    )


def random_binary_group(
    rng: np.random.Generator,
    max_group: int = 16,
    max_len: int = 10,
    ratio_low: float = 0.6,
    ratio_high: float = 1.6,
    eps_var: float = 0.0,
) -> RolloutGroup:
    """Random 0/1-reward group with 1 <= k <= G-1 and random lengths/ratios."""
    g = int(rng.integers(2, max_group + 1))
    k = int(rng.integers(1, g))
    rewards = np.zeros(g)
    rewards[rng.permutation(g)[:k]] = 1.0
    responses = tuple(
        _response(rng, r, int(rng.integers(1, max_len + 1)), ratio_low, ratio_high)
        for r in rewards
    )
    return RolloutGroup("p0", responses, eps_var)


def random_real_group(
    rng: np.random.Generator,
    max_group: int = 16,
    max_len: int = 10,
    ratio_low: float = 0.6,
    ratio_high: float = 1.6,
) -> RolloutGroup:
    """Random continuous-reward group (no sign-subset guarantees beyond G>=2)."""
    g = int(rng.integers(2, max_group + 1))
    rewards = rng.normal(size=g)
    responses = tuple(
        _response(rng, r, int(rng.integers(1, max_len + 1)), ratio_low, ratio_high)
        for r in rewards
    )
    return RolloutGroup("p0", responses, 0.0)


def random_smooth_group(
    rng: np.random.Generator,
    clip: ClipConfig,
    max_group: int = 8,
    max_len: int = 6,
    margin: float = 0.05,
) -> RolloutGroup:
    """Binary group with all ratios at least ``margin`` inside the clip band."""
    return random_binary_group(
        rng,
        max_group=max_group,
        max_len=max_len,
        ratio_low=clip.lower + margin,
        ratio_high=clip.upper - margin,
    )


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    operations: tuple[str, ...]
    tolerance: float
    run: Callable[[np.random.Generator, ClipConfig], float]


def _check_closed_form(rng: np.random.Generator, clip: ClipConfig) -> float:
    err = 0.0
    for _ in range(300):
        group = random_binary_group(rng, max_group=32)
        adv = normalize_advantages(group)
        pos, neg = binary_closed_form(group.size, adv.k)
        for a, r in zip(adv.advantages, group.rewards):
            err = max(err, abs(a - (pos if r == 1.0 else neg)))
    return err


def _check_shift_scale(rng: np.random.Generator, clip: ClipConfig) -> float:
    err = 0.0
    for _ in range(200):
        group = random_real_group(rng)
        try:
            adv = normalize_advantages(group)
        except ValueError:
            continue
        c = float(rng.normal()) * 3.0
        lam = float(rng.uniform(0.1, 5.0))
        shifted = RolloutGroup(
            group.prompt_id,
            tuple(
                Response(r.tokens, r.reward + c, r.ratios) for r in group.responses
            ),
            0.0,
        )
        scaled = RolloutGroup(
            group.prompt_id,
            tuple(
                Response(r.tokens, r.reward * lam, r.ratios) for r in group.responses
            ),
            0.0,
        )
        for other in (normalize_advantages(shifted), normalize_advantages(scaled)):
            for a, b in zip(adv.advantages, other.advantages):
                err = max(err, abs(a - b))
    return err


def _check_phi_values(rng: np.random.Generator, clip: ClipConfig) -> float:
    # Hand values for the default 0.2/0.28 band, plus random concavity in rho.
    spot = ClipConfig(0.2, 0.28)
    err = max(
        abs(phi(1.0, 2.0, spot) - 2.0),
        abs(phi(1.5, 1.0, spot) - 1.28),
        abs(phi(0.5, -1.0, spot) - (-0.8)),
    )
    for _ in range(500):
        a = float(rng.normal())
        x, y = np.sort(rng.uniform(0.05, 2.5, size=2))
        mid = 0.5 * (x + y)
        chord = 0.5 * (phi(float(x), a, clip) + phi(float(y), a, clip))
        err = max(err, chord - phi(float(mid), a, clip))
    return err


def _reconstruction(rule: str):
    def run(rng: np.random.Generator, clip: ClipConfig) -> float:
        err = 0.0
        for _ in range(300):
            group = random_binary_group(rng)
            adv = normalize_advantages(group)
            value = _OBJECTIVES[rule](group, adv, clip).objective
            report = decompose(group, adv, clip, rule)
            err = max(err, abs(value - report.reconstructed_objective))
        return err

    return run


def _check_ba_weights(rng: np.random.Generator, clip: ClipConfig) -> float:
    err = 0.0
    for _ in range(300):
        group = random_binary_group(rng)
        adv = normalize_advantages(group)
        ba, seq, match = ba_weight_identity(group, adv, clip)
        if not match:
            return math.inf
        err = max(err, abs(ba - seq))
    return err


def _check_gen_reduction(rng: np.random.Generator, clip: ClipConfig) -> float:
    err = 0.0
    for _ in range(300):
        group = random_binary_group(rng)
        adv = normalize_advantages(group)
        j_gen = objective_balanced_gen(group, adv, clip).objective
        j_ba = objective_balanced(group, adv, clip).objective
        err = max(err, abs(j_gen - j_ba))
    return err


def _check_mass_symmetry(rng: np.random.Generator, clip: ClipConfig) -> float:
    err = 0.0
    for _ in range(300):
        group = random_real_group(rng)
        try:
            adv = normalize_advantages(group)
        except ValueError:
            continue
        report = decompose(group, adv, clip, "balanced_gen")
        half = 0.5 * sum(abs(a) for a in adv.advantages)
        err = max(err, abs(report.m_pos - report.m_neg), abs(report.m_pos - half))
    return err


def _check_gradients(rng: np.random.Generator, clip: ClipConfig) -> float:
    err = 0.0
    rules = ("token", "seq", "balanced", "balanced_gen")
    for i in range(40):
        group = random_smooth_group(rng, clip)
        adv = normalize_advantages(group)
        rule = rules[i % 4]
        result = _OBJECTIVES[rule](group, adv, clip)
        err = max(err, gradient_check(result, group, adv, clip, h=1e-5))
    return err


def _check_permutation(rng: np.random.Generator, clip: ClipConfig) -> float:
    # fsum-based accumulation makes these bit-exact, hence tolerance 0.
    err = 0.0
    for _ in range(100):
        group = random_binary_group(rng)
        adv = normalize_advantages(group)
        perm = rng.permutation(group.size)
        pgroup = RolloutGroup(
            group.prompt_id, tuple(group.responses[i] for i in perm), 0.0
        )
        padv = AdvantageSet.from_advantages([adv.advantages[i] for i in perm])
        for fn in _OBJECTIVES.values():
            err = max(
                err,
                abs(fn(group, adv, clip).objective - fn(pgroup, padv, clip).objective),
            )
    return err


def _check_length_diagnostics(rng: np.random.Generator, clip: ClipConfig) -> float:
    lengths = (2, 4, 1, 1)
    group = RolloutGroup(
        "p0",
        tuple(
            Response((1,) * t, r, (1.0,) * t)
            for t, r in zip(lengths, (1.0, 1.0, 0.0, 0.0))
        ),
        0.0,
    )
    adv = normalize_advantages(group)
    stats = length_stats([group], [adv])
    err = max(
        abs(stats.mean_len - 2.0),
        abs(stats.len_cv - math.sqrt(1.5) / 2.0),
        abs((stats.len_gap or 0.0) - (-1.0)),
    )
    labels_ok = (
        regime_report(LengthStats(1.0, 0.9, 1.0, 1.0, 0.05)) == "favors-token"
        and regime_report(LengthStats(1.0, 0.1, 1.0, 1.0, 0.6)) == "favors-seq"
        and regime_report(LengthStats(1.0, 0.0, 1.0, 1.0, 0.0)) == "mixed"
        and regime_report(
            LengthStats(1.0, 0.9, 1.0, 1.0, 0.6), RegimeThresholds(0.5, 0.2)
        )
        == "mixed"
    )
    return err if labels_ok else math.inf


SUITE: tuple[IdentityCheck, ...] = (
    IdentityCheck(
        "closed_form_advantages",
        ("normalize_advantages", "binary_closed_form"),
        1e-10,
        _check_closed_form,
    ),
    IdentityCheck(
        "reward_shift_scale_invariance",
        ("normalize_advantages",),
        1e-10,
        _check_shift_scale,
    ),
    IdentityCheck("clipped_term_concavity", ("phi",), 1e-12, _check_phi_values),
    IdentityCheck(
        "token_decomposition",
        ("objective_token", "decompose"),
        1e-12,
        _reconstruction("token"),
    ),
    IdentityCheck(
        "seq_decomposition",
        ("objective_seq", "decompose"),
        1e-12,
        _reconstruction("seq"),
    ),
    IdentityCheck(
        "balanced_decomposition",
        ("objective_balanced", "decompose"),
        1e-12,
        _reconstruction("balanced"),
    ),
    IdentityCheck(
        "generalized_decomposition",
        ("objective_balanced_gen", "decompose"),
        1e-12,
        _reconstruction("balanced_gen"),
    ),
    IdentityCheck(
        "ba_weight_identity", ("ba_weight_identity",), 1e-12, _check_ba_weights
    ),
    IdentityCheck(
        "generalized_binary_reduction",
        ("objective_balanced_gen", "objective_balanced"),
        1e-12,
        _check_gen_reduction,
    ),
    IdentityCheck("mass_symmetry", ("decompose",), 1e-10, _check_mass_symmetry),
    IdentityCheck(
        "ratio_gradient_check",
        (
            "gradient_check",
            "objective_token",
            "objective_seq",
            "objective_balanced",
            "objective_balanced_gen",
        ),
        1e-5,
        _check_gradients,
    ),
    IdentityCheck(
        "permutation_invariance",
        (
            "objective_token",
            "objective_seq",
            "objective_balanced",
            "objective_balanced_gen",
        ),
        0.0,
        _check_permutation,
    ),
    IdentityCheck(
        "length_diagnostics",
        ("length_stats", "regime_report"),
        1e-12,
        _check_length_diagnostics,
    ),
)


def covered_operations() -> frozenset[str]:
    ops: set[str] = set()
    for check in SUITE:
        ops.update(check.operations)
    return frozenset(ops)


def run_suite(
    seed: int = 0,
    clip: ClipConfig = ClipConfig(),
    inject_fault: str | None = None,
    stream: TextIO | None = None,
) -> bool:
    """Run every identity check; print one line per check; True iff all pass."""
    missing = REQUIRED_OPERATIONS - covered_operations()
    if missing:
        raise AssertionError(f"suite manifest does not cover: {sorted(missing)}")
    if inject_fault is not None and inject_fault not in {c.name for c in SUITE}:
        raise ValueError(f"unknown identity {inject_fault!r}")

    def emit(text: str) -> None:
        if stream is not None:
            stream.write(text + "\n")

    emit(f"identity suite: seed={seed} clip=({clip.clip_low:g},{clip.clip_high:g})")
    all_ok = True
    for index, check in enumerate(SUITE):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        err = check.run(rng, clip)
        if inject_fault == check.name:
            err = math.inf
        ok = err <= check.tolerance
        all_ok &= ok
        emit(
            f"{'PASS' if ok else 'FAIL'} {check.name:<32} "
            f"max_err={err:.3e} tol={check.tolerance:g}"
        )
        if not ok:
            emit(f"  reproduce with: grpoagg verify --seed {seed}")
    emit(
        f"{sum(1 for _ in SUITE)} identities checked: "
        + ("all passed" if all_ok else "FAILURES PRESENT")
    )
    return all_ok
