"""Per-tensor drift norms, per-group selection policies, and bandwidth accounting.

Each client ranks its tensors by how much they moved since the previous round
(L1 norm of the elementwise difference) and transfers only a fraction of them:
the most-changed (`dp_greater`), the least-changed (`dp_less`), a seeded random
subset of the same size (`random`), or everything (`full`).  Thresholds are
computed independently per tensor group (encoder / decoder / shared) and
realized as exact top-k / bottom-k counts with a deterministic name tie-break,
so the transferred fraction is guaranteed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import ModelState
from .tensors import GROUPS, DeltaRecord, NamedTensor, diff, l1_norm, serialized_header_size

MODES = ("full", "dp_greater", "dp_less", "random")
SCOPES = ("pull_only", "push_and_pull")
DP_MODES = ("dp_greater", "dp_less")


@dataclass(frozen=True)
class PullPolicy:
    mode: str = "full"
    kept_fraction: float = 0.5
    scope: str = "pull_only"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown policy mode '{self.mode}' (choices: {MODES})")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown policy scope '{self.scope}' (choices: {SCOPES})")
        if self.mode == "full":
            object.__setattr__(self, "kept_fraction", 1.0)
        if not 0.0 < self.kept_fraction <= 1.0:
            raise ValueError(f"kept_fraction must be in (0, 1], got {self.kept_fraction}")
        if self.seed < 0:
            raise ValueError("policy seed must be non-negative")


@dataclass(frozen=True)
class SelectionResult:
    mode: str
    kept: tuple[str, ...]
    dropped: tuple[str, ...]
    thresholds: dict[str, float] = field(default_factory=dict)
    deltas: tuple[DeltaRecord, ...] = ()


@dataclass(frozen=True)
class BandwidthRecord:
    direction: str
    params_sent: int
    params_total: int
    bytes_sent: int


def tensor_deltas(current: ModelState, snapshot: ModelState) -> list[DeltaRecord]:
    """One record per tensor: L1 norm of (current - snapshot), sorted by (group, name)."""
    cur_names = set(current.tensors)
    snap_names = set(snapshot.tensors)
    if cur_names != snap_names:
        sym = sorted(cur_names ^ snap_names)
        raise ValueError(f"tensor name sets differ; symmetric difference: {sym}")
    records = []
    for name in sorted(cur_names):
        t = current.tensors[name]
        records.append(
            DeltaRecord(
                name=name,
                norm=l1_norm(diff(t, snapshot.tensors[name])),
                param_count=t.param_count,
                group=t.group,
            )
        )
    records.sort(key=lambda r: (r.group, r.name))
    return records


def kept_count(kept_fraction: float, total: int) -> int:
    return math.ceil(kept_fraction * total)


def select_threshold(
    deltas: Sequence[DeltaRecord], kept_fraction: float, mode: str
) -> tuple[float, list[str]]:
    """Threshold and kept names for one group: exact top-k (dp_greater) or bottom-k (dp_less).

    Records are ordered by norm with the name as tie-break (ties resolve to
    ascending name); the threshold is the norm of the boundary record.
    """
    if not deltas:
        raise ValueError("empty group")
    if mode not in DP_MODES:
        raise ValueError(f"select_threshold requires a dp mode, got '{mode}'")
    if not 0.0 < kept_fraction <= 1.0:
        raise ValueError(f"kept_fraction must be in (0, 1], got {kept_fraction}")
    if mode == "dp_greater":
        order = sorted(deltas, key=lambda r: (-r.norm, r.name))
    else:
        order = sorted(deltas, key=lambda r: (r.norm, r.name))
    k = kept_count(kept_fraction, len(order))
    kept = order[:k]
    return kept[-1].norm, [r.name for r in kept]


def _group_records(deltas: Iterable[DeltaRecord]) -> dict[str, list[DeltaRecord]]:
    groups: dict[str, list[DeltaRecord]] = {}
    for r in deltas:
        groups.setdefault(r.group, []).append(r)
    return groups


def select_from_deltas(deltas: Sequence[DeltaRecord], policy: PullPolicy) -> SelectionResult:
    """Apply a policy to precomputed delta records, per group."""
    all_names = sorted(r.name for r in deltas)
    if policy.mode == "full":
        return SelectionResult("full", tuple(all_names), (), {}, tuple(deltas))
    kept: list[str] = []
    thresholds: dict[str, float] = {}
    groups = _group_records(deltas)
    if policy.mode == "random":
        rng = np.random.default_rng(policy.seed)
        # Fixed group order so draws are reproducible regardless of input order.
        for group in GROUPS:
            if group not in groups:
                continue
            names = sorted(r.name for r in groups[group])
            k = kept_count(policy.kept_fraction, len(names))
            picked = rng.choice(len(names), size=k, replace=False)
            kept.extend(names[i] for i in sorted(int(j) for j in picked))
    else:
        for group in GROUPS:
            if group not in groups:
                continue
            theta, names = select_threshold(groups[group], policy.kept_fraction, policy.mode)
            thresholds[group] = theta
            kept.extend(names)
    kept_set = set(kept)
    dropped = tuple(n for n in all_names if n not in kept_set)
    return SelectionResult(policy.mode, tuple(sorted(kept)), dropped, thresholds, tuple(deltas))


def select_dp(current: ModelState, snapshot: ModelState | None, policy: PullPolicy) -> SelectionResult:
    """Select the tensors to transfer given the previous-round snapshot."""
    if snapshot is None:
        raise ValueError("no previous round: a snapshot is required for selection")
    return select_from_deltas(tensor_deltas(current, snapshot), policy)


def full_selection(model: ModelState, deltas: Sequence[DeltaRecord] = ()) -> SelectionResult:
    """Everything kept; used for round 0 and for accounting full pushes."""
    return SelectionResult("full", tuple(model.names()), (), {}, tuple(deltas))


def bandwidth(selection: SelectionResult, model, direction: str) -> BandwidthRecord:
    """Exact parameter and byte counts for transferring the kept tensors.

    `model` is anything with a `.tensors` name-to-NamedTensor mapping (a
    ModelState, or any ad-hoc inventory for accounting checks).
    """
    if direction not in ("pull", "push"):
        raise ValueError(f"direction must be 'pull' or 'push', got '{direction}'")
    params_sent = 0
    bytes_sent = 0
    for name in selection.kept:
        t = model.tensors.get(name)
        if t is None:
            raise ValueError(f"selection references unknown tensor '{name}'")
        params_sent += t.param_count
        bytes_sent += serialized_header_size(t) + 4 * t.param_count
    params_total = sum(t.param_count for t in model.tensors.values())
    return BandwidthRecord(direction, params_sent, params_total, bytes_sent)


def jaccard(a: set, b: set) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def cluster_persistence(reports) -> list[dict]:
    """Jaccard overlap of consecutive kept sets, per client and group.

    Accepts round reports that carry per-client selections; only rounds where a
    dp-mode selection was applied participate.  The overlap is reported, never
    asserted: it quantifies how stable the active/inactive split is over time.
    """
    dp_rounds = []
    for report in reports:
        selections = {
            rec.client_id: rec.selection
            for rec in report.clients
            if rec.selection.mode in DP_MODES
        }
        if selections:
            dp_rounds.append((report.round, selections))
    if len(dp_rounds) < 2:
        raise ValueError("need at least 2 rounds with dp-mode selections")
    out = []
    for (r0, sel0), (r1, sel1) in zip(dp_rounds, dp_rounds[1:]):
        for client_id in sorted(set(sel0) & set(sel1)):
            by_group0 = _kept_by_group(sel0[client_id])
            by_group1 = _kept_by_group(sel1[client_id])
            for group in GROUPS:
                if group not in by_group0 and group not in by_group1:
                    continue
                out.append(
                    {
                        "from_round": r0,
                        "to_round": r1,
                        "client_id": client_id,
                        "group": group,
                        "jaccard": jaccard(
                            by_group0.get(group, set()), by_group1.get(group, set())
                        ),
                    }
                )
    return out


def _kept_by_group(selection: SelectionResult) -> dict[str, set[str]]:
    kept = set(selection.kept)
    groups: dict[str, set[str]] = {}
    for record in selection.deltas:
        if record.name in kept:
            groups.setdefault(record.group, set()).add(record.name)
    # Selections without delta records (e.g. synthetic) fall back to name prefixes.
    if not groups:
        from .tensors import group_of

        for name in kept:
            groups.setdefault(group_of(name), set()).add(name)
    return groups
