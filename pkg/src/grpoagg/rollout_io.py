"""JSONL rollout-log ingestion and CSV metric emission.

Rollout logs are line-delimited JSON, one group per line:

    {"v": 1, "group_id": "g0", "prompt_id": "p0", "eps_var": 0.0,
     "responses": [{"tokens": [3, 1, 0], "reward": 1.0,
                    "ratios": [1.0, 0.98, 1.03]}, ...]}

``v`` defaults to 1 when absent. Each response supplies ``tokens`` or a bare
``token_count``, a ``reward``, and optionally ``ratios`` or a
``logp_new``/``logp_old`` pair (from which ratios are derived). Records with
only token counts are "length-only": they support length and advantage
diagnostics but not objective evaluation.

Metrics go to CSV with a fixed header and floats rendered with 10
significant digits, so a given record stream always produces byte-identical
output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .groups import Response, RolloutGroup

__all__ = [
    "METRIC_FIELDS",
    "MetricRecord",
    "RolloutLogError",
    "MalformedLineError",
    "RecordValidationError",
    "parse_rollout_line",
    "read_rollouts",
    "write_rollouts",
    "group_to_dict",
    "write_metrics",
    "read_metrics",
]

METRIC_FIELDS = (
    "step",
    "rule",
    "objective",
    "pg_loss",
    "len_cv",
    "len_gap",
    "tbar_pos",
    "tbar_neg",
    "mean_reward",
    "k_mean",
    "clip_fraction",
)


class RolloutLogError(ValueError):
    """Base class for rollout-log parsing failures; carries the line number."""

    def __init__(self, message: str, line_no: int | None = None):
        super().__init__(message)
        self.line_no = line_no


class MalformedLineError(RolloutLogError):
    """A line is not valid JSON or not an object."""


class RecordValidationError(RolloutLogError):
    """A parsed record violates the rollout schema."""


@dataclass(frozen=True)
class MetricRecord:
    """One (step, rule) row of the metric CSV; None renders as an empty field."""

    step: int
    rule: str
    objective: float | None
    pg_loss: float | None
    len_cv: float | None
    len_gap: float | None
    tbar_pos: float | None
    tbar_neg: float | None
    mean_reward: float | None
    k_mean: float | None
    clip_fraction: float | None

    def __post_init__(self) -> None:
        for name in METRIC_FIELDS[2:]:
            v = getattr(self, name)
            if v is not None and not math.isfinite(float(v)):
                raise ValueError(f"metric field {name} is non-finite: {v!r}")


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{float(value):.10g}"


def write_metrics(records: Sequence[MetricRecord], path: str | Path) -> None:
    """Write records to CSV; records must be ordered by non-decreasing step."""
    last = None
    for rec in records:
        if last is not None and rec.step < last:
            raise ValueError(
                f"records out of order: step {rec.step} after step {last}"
            )
        last = rec.step
    lines = [",".join(METRIC_FIELDS)]
    for rec in records:
        lines.append(
            ",".join(
                [str(rec.step), rec.rule]
                + [_fmt(getattr(rec, name)) for name in METRIC_FIELDS[2:]]
            )
        )
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"writing metrics to {path}: {exc}") from exc


def read_metrics(path: str | Path) -> list[MetricRecord]:
    """Parse a metric CSV written by write_metrics."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != ",".join(METRIC_FIELDS):
        raise ValueError(f"{path}: unexpected metric CSV header")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != len(METRIC_FIELDS):
            raise ValueError(f"{path}: bad row {line!r}")
        values = [None if p == "" else float(p) for p in parts[2:]]
        records.append(MetricRecord(int(parts[0]), parts[1], *values))
    return records


def _get_number(obj: dict, key: str, line_no: int | None, where: str) -> float:
    v = obj.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise RecordValidationError(
            f"line {line_no}: {where}: missing or non-numeric {key!r}", line_no
        )
    return float(v)


def _opt_list(obj: dict, key: str, line_no: int | None, where: str) -> list | None:
    v = obj.get(key)
    if v is None:
        return None
    if not isinstance(v, list):
        raise RecordValidationError(
            f"line {line_no}: {where}: {key!r} must be a list", line_no
        )
    return v


def parse_rollout_line(
    line: str, line_no: int | None = None, default_eps_var: float = 0.0
) -> RolloutGroup:
    """Parse one JSONL line into a validated RolloutGroup.

    ``default_eps_var`` applies to groups without an explicit ``eps_var``
    field. The line number is attached to the group for provenance and to
    any error raised.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLineError(f"line {line_no}: invalid JSON: {exc}", line_no) from exc
    if not isinstance(obj, dict):
        raise MalformedLineError(f"line {line_no}: expected a JSON object", line_no)
    version = obj.get("v", 1)
    if version != 1:
        raise RecordValidationError(
            f"line {line_no}: unsupported schema version {version!r}", line_no
        )
    prompt_id = obj.get("prompt_id")
    if not isinstance(prompt_id, str):
        raise RecordValidationError(
            f"line {line_no}: missing or non-string prompt_id", line_no
        )
    group_id = obj.get("group_id")
    if group_id is not None and not isinstance(group_id, str):
        raise RecordValidationError(
            f"line {line_no}: group_id must be a string", line_no
        )
    eps_var = (
        _get_number(obj, "eps_var", line_no, "group")
        if "eps_var" in obj
        else float(default_eps_var)
    )
    raw_responses = obj.get("responses")
    if not isinstance(raw_responses, list) or not raw_responses:
        raise RecordValidationError(
            f"line {line_no}: missing or empty responses list", line_no
        )
    responses = []
    for idx, raw in enumerate(raw_responses):
        where = f"response {idx}"
        if not isinstance(raw, dict):
            raise RecordValidationError(
                f"line {line_no}: {where}: expected an object", line_no
            )
        reward = _get_number(raw, "reward", line_no, where)
        tokens = _opt_list(raw, "tokens", line_no, where)
        token_count = raw.get("token_count")
        if tokens is None and token_count is None:
            raise RecordValidationError(
                f"line {line_no}: {where}: needs tokens or token_count", line_no
            )
        ratios = _opt_list(raw, "ratios", line_no, where)
        logp_new = _opt_list(raw, "logp_new", line_no, where)
        logp_old = _opt_list(raw, "logp_old", line_no, where)
        try:
            responses.append(
                Response(
                    tokens=tuple(tokens) if tokens is not None else None,
                    reward=reward,
                    ratios=tuple(ratios) if ratios is not None else None,
                    logp_new=tuple(logp_new) if logp_new is not None else None,
                    logp_old=tuple(logp_old) if logp_old is not None else None,
                    token_count=int(token_count) if token_count is not None else None,
                )
            )
        except (TypeError, ValueError) as exc:
            raise RecordValidationError(
                f"line {line_no}: {where}: {exc}", line_no
            ) from exc
    try:
        return RolloutGroup(
            prompt_id=prompt_id,
            responses=tuple(responses),
            eps_var=eps_var,
            group_id=group_id,
            source_line=line_no,
        )
    except ValueError as exc:
        raise RecordValidationError(f"line {line_no}: {exc}", line_no) from exc


def read_rollouts(
    path: str | Path, default_eps_var: float = 0.0
) -> Iterator[RolloutGroup]:
    """Stream validated groups from a JSONL file, one group per line.

    Raises MalformedLineError / RecordValidationError with the 1-based line
    number on the first invalid line. Whitespace-only lines are skipped.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield parse_rollout_line(line, line_no, default_eps_var)


def group_to_dict(group: RolloutGroup) -> dict:
    """Canonical JSON form of a group (fixed key order, floats via repr)."""
    responses = []
    for resp in group.responses:
        r: dict = {}
        if resp.tokens is not None:
            r["tokens"] = list(resp.tokens)
        else:
            r["token_count"] = resp.token_count
        r["reward"] = resp.reward
        if resp.ratios is not None:
            r["ratios"] = list(resp.ratios)
        if resp.logp_new is not None:
            r["logp_new"] = list(resp.logp_new)
            r["logp_old"] = list(resp.logp_old)
        responses.append(r)
    out: dict = {"v": 1}
    if group.group_id is not None:
        out["group_id"] = group.group_id
    out["prompt_id"] = group.prompt_id
    out["eps_var"] = group.eps_var
    out["responses"] = responses
    return out


def write_rollouts(groups: Iterable[RolloutGroup], path: str | Path) -> None:
    """Write groups as canonical JSONL (the read_rollouts round-trip form)."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for group in groups:
                fh.write(json.dumps(group_to_dict(group), separators=(",", ":")))
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"writing rollouts to {path}: {exc}") from exc
