"""Conflict-of-interest enforcement and collusion detection over donation ledgers.

Conflicts are symmetric agent pairs that may not exchange donations
(recent coauthorship, shared affiliation). Cartels are small agent groups
routing a dominant share of their donation pools to each other; detection
scores reciprocal pairs and strongly connected groups per round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import EmptyRowError, InsufficientHistoryError, ValidationError
from .mechanism import AllocationPlan, normalize_row
from .population import Community

REASON_COAUTHOR = "coauthor"
REASON_SHARED_AFFILIATION = "shared_affiliation"

PENALTY_VOID_AND_REDISTRIBUTE = "void_and_redistribute"
PENALTY_ZERO_INTERNAL_WEIGHTS = "zero_internal_weights"
PENALTY_POLICIES = (PENALTY_VOID_AND_REDISTRIBUTE, PENALTY_ZERO_INTERNAL_WEIGHTS)


@dataclass(frozen=True)
class CoiRules:
    """Which relationships count as conflicts of interest."""

    coauthor_window_years: int = 5
    shared_affiliation: bool = True

    def __post_init__(self):
        if self.coauthor_window_years < 0:
            raise ValidationError("coauthor_window_years must be >= 0")


@dataclass(frozen=True)
class CartelThresholds:
    """Detection thresholds for reciprocal pairs and collusive groups."""

    pair_reciprocity: float = 0.5
    internal_share: float = 0.6
    max_group_size: int = 5
    min_rounds: int = 2

    def __post_init__(self):
        if not (0.0 < self.pair_reciprocity <= 1.0):
            raise ValidationError("pair_reciprocity must be in (0, 1]")
        if not (0.0 < self.internal_share <= 1.0):
            raise ValidationError("internal_share must be in (0, 1]")
        if self.max_group_size < 2:
            raise ValidationError("max_group_size must be >= 2")
        if self.min_rounds < 1:
            raise ValidationError("min_rounds must be >= 1")


class ConflictSet:
    """Symmetric set of forbidden donor/recipient pairs with reason codes."""

    __slots__ = ("_pairs", "_adjacent")

    def __init__(self):
        self._pairs: dict[tuple[str, str], set[str]] = {}
        self._adjacent: dict[str, set[str]] = {}

    @staticmethod
    def _key(a: str, b: str) -> tuple[str, str]:
        if a == b:
            raise ValidationError(f"conflict pair cannot be a self-pair: {a!r}")
        return (a, b) if a < b else (b, a)

    def add(self, a: str, b: str, reason: str) -> None:
        key = self._key(a, b)
        self._pairs.setdefault(key, set()).add(reason)
        self._adjacent.setdefault(a, set()).add(b)
        self._adjacent.setdefault(b, set()).add(a)

    def conflicted(self, a: str, b: str) -> bool:
        if a == b:
            return False
        return self._key(a, b) in self._pairs

    def reasons(self, a: str, b: str) -> frozenset[str]:
        return frozenset(self._pairs.get(self._key(a, b), ()))

    def blocked(self, agent_id: str) -> frozenset[str]:
        return frozenset(self._adjacent.get(agent_id, ()))

    def pairs(self) -> list[tuple[str, str, frozenset[str]]]:
        return [(a, b, frozenset(r)) for (a, b), r in sorted(self._pairs.items())]

    def __len__(self) -> int:
        return len(self._pairs)

    def __bool__(self) -> bool:
        return bool(self._pairs)


def detect_conflicts(
    community: Community, rules: CoiRules, evaluation_year: int
) -> ConflictSet:
    """Flag agent pairs with recent coauthorship or (optionally) a shared affiliation."""
    conflicts = ConflictSet()
    for edge in community.coauthor_edges:
        if evaluation_year - edge.year <= rules.coauthor_window_years:
            conflicts.add(edge.a, edge.b, REASON_COAUTHOR)
    if rules.shared_affiliation:
        members: dict[str, list[str]] = {}
        for agent in community.agents:
            for affil in agent.affiliation_ids:
                members.setdefault(affil, []).append(agent.id)
        for ids in members.values():
            ids.sort()
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    conflicts.add(ids[i], ids[j], REASON_SHARED_AFFILIATION)
    return conflicts


def mask_plan(plan: AllocationPlan, conflicts: ConflictSet) -> AllocationPlan:
    """Zero conflicted weights and renormalize each surviving row.

    Raises EmptyRowError when every recipient of some donor is conflicted;
    callers wanting the uniform-domain fallback should use
    `mask_plan_with_fallback`.
    """
    masked: dict[str, dict[str, float]] = {}
    for donor in plan.donors():
        blocked = conflicts.blocked(donor)
        original = plan.row(donor)
        row = {r: w for r, w in original.items() if r not in blocked}
        if not row:
            raise EmptyRowError(donor, "all recipients conflicted")
        # untouched rows pass through unchanged so masking is exactly idempotent
        masked[donor] = normalize_row(row) if len(row) < len(original) else dict(original)
    return AllocationPlan(masked)


def mask_plan_with_fallback(
    plan: AllocationPlan, conflicts: ConflictSet, community: Community
) -> AllocationPlan:
    """Like `mask_plan`, but a fully conflicted donor falls back to a uniform
    split over the non-conflicted agents of its own domain."""
    masked: dict[str, dict[str, float]] = {}
    for donor in plan.donors():
        blocked = conflicts.blocked(donor)
        original = plan.row(donor)
        row = {r: w for r, w in original.items() if r not in blocked}
        if len(row) == len(original):
            masked[donor] = dict(original)
            continue
        if not row:
            peers = [
                aid
                for aid in community.domains.get(community.by_id[donor].domain_id, ())
                if aid != donor and aid not in blocked
            ]
            if not peers:
                raise EmptyRowError(donor, "all recipients conflicted, domain fallback empty")
            row = {p: 1.0 for p in peers}
        masked[donor] = normalize_row(row)
    return AllocationPlan(masked)


# -- donation ledger -----------------------------------------------------------


@dataclass(frozen=True)
class TransferRecord:
    round: int
    donor_id: str
    recipient_id: str
    amount: float


@dataclass
class DonationLedger:
    """Ordered record of realized transfers; amounts are strictly positive."""

    records: list[TransferRecord] = field(default_factory=list)

    def append(self, round: int, donor_id: str, recipient_id: str, amount: float) -> None:
        if not (amount > 0):
            raise ValidationError(f"transfer amounts must be > 0, got {amount}")
        self.records.append(TransferRecord(int(round), donor_id, recipient_id, float(amount)))

    def extend(self, round: int, transfers: Iterable[tuple[str, str, float]]) -> None:
        for donor, recipient, amount in transfers:
            self.append(round, donor, recipient, amount)

    def rounds(self) -> list[int]:
        return sorted({r.round for r in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def pools_by_round(self) -> dict[int, dict[str, float]]:
        pools: dict[int, dict[str, float]] = {}
        for rec in self.records:
            by_donor = pools.setdefault(rec.round, {})
            by_donor[rec.donor_id] = by_donor.get(rec.donor_id, 0.0) + rec.amount
        return pools

    def flows_by_round(self) -> dict[int, dict[tuple[str, str], float]]:
        flows: dict[int, dict[tuple[str, str], float]] = {}
        for rec in self.records:
            by_edge = flows.setdefault(rec.round, {})
            key = (rec.donor_id, rec.recipient_id)
            by_edge[key] = by_edge.get(key, 0.0) + rec.amount
        return flows


def audit_conflicted_transfers(
    ledger: DonationLedger, conflicts: ConflictSet
) -> list[TransferRecord]:
    """Every ledger record whose donor/recipient pair is in the conflict set."""
    return [r for r in ledger.records if conflicts.conflicted(r.donor_id, r.recipient_id)]


# -- cartel detection ----------------------------------------------------------


@dataclass(frozen=True)
class CartelFlag:
    """A detected reciprocal pair or collusive group."""

    members: frozenset[str]
    kind: str  # "pair" | "group"
    score: float
    threshold: float
    rounds_observed: int
    evidence: tuple[TransferRecord, ...]

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValidationError("a cartel flag needs at least two members")
        if not (self.score >= self.threshold):
            raise ValidationError(
                f"flag score {self.score} below its producing threshold {self.threshold}"
            )


def _best_consecutive_run(
    rounds: Sequence[int], qualifies: Mapping[int, bool], min_len: int
) -> list[int] | None:
    """Longest run of consecutive round numbers that all qualify; None if every
    run is shorter than min_len. Ties favor the earliest run."""
    best: list[int] = []
    current: list[int] = []
    for rnd in rounds:
        if qualifies.get(rnd, False) and (not current or rnd == current[-1] + 1):
            current.append(rnd)
        elif qualifies.get(rnd, False):
            current = [rnd]
        else:
            current = []
        if len(current) > len(best):
            best = list(current)
    return best if len(best) >= min_len else None


def _strongly_connected_components(
    nodes: Sequence[str], adjacency: Mapping[str, Sequence[str]]
) -> list[list[str]]:
    """Iterative Tarjan over a directed adjacency map."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    components: list[list[str]] = []
    counter = 0

    for root in nodes:
        if root in index:
            continue
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        work: list[tuple[str, Iterable[str]]] = [(root, iter(adjacency.get(root, ())))]
        while work:
            v, neighbors = work[-1]
            advanced = False
            for w in neighbors:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(adjacency.get(w, ()))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                component = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    component.append(w)
                    if w == v:
                        break
                components.append(sorted(component))
    return components


def _induced_strongly_connected(
    subset: frozenset[str], adjacency: Mapping[str, Sequence[str]]
) -> bool:
    """Is the subgraph induced by `subset` strongly connected? BFS both ways
    from an arbitrary member, restricted to subset-internal edges."""
    if len(subset) < 2:
        return False
    start = next(iter(subset))
    reverse: dict[str, list[str]] = {v: [] for v in subset}
    for v in subset:
        for w in adjacency.get(v, ()):
            if w in subset:
                reverse[w].append(v)

    def reach(seed: str, adj_lookup) -> set[str]:
        seen = {seed}
        frontier = [seed]
        while frontier:
            v = frontier.pop()
            for w in adj_lookup(v):
                if w in subset and w not in seen:
                    seen.add(w)
                    frontier.append(w)
        return seen

    forward = reach(start, lambda v: adjacency.get(v, ()))
    backward = reach(start, lambda v: reverse.get(v, ()))
    return forward == subset and backward == subset


def _connected_subsets(
    members: Sequence[str], undirected: Mapping[str, set[str]], max_size: int
) -> list[frozenset[str]]:
    """All connected induced vertex sets of size 2..max_size within one component.

    Growth is restricted to `members`: a strongly connected subset can never
    straddle two components, so wandering outside would only inflate the
    search space.
    """
    member_set = set(members)
    found: set[frozenset[str]] = set()
    for start in members:
        frontier: list[frozenset[str]] = [frozenset({start})]
        seen: set[frozenset[str]] = set(frontier)
        while frontier:
            subset = frontier.pop()
            if len(subset) >= 2:
                found.add(subset)
            if len(subset) == max_size:
                continue
            neighbors: set[str] = set()
            for v in subset:
                neighbors |= undirected.get(v, set()) & member_set
            for w in sorted(neighbors - subset):
                grown = subset | {w}
                if grown not in seen:
                    seen.add(grown)
                    frontier.append(grown)
    return sorted(found, key=lambda s: (len(s), sorted(s)))


def _collect_evidence(
    ledger: DonationLedger, members: frozenset[str], rounds: Sequence[int]
) -> tuple[TransferRecord, ...]:
    window = set(rounds)
    return tuple(
        r
        for r in ledger.records
        if r.round in window and r.donor_id in members and r.recipient_id in members
    )


def detect_cartels(
    ledger: DonationLedger,
    thresholds: CartelThresholds,
    fractions: Mapping[str, float] | None = None,
    totals_history: Mapping[int, Mapping[str, float]] | None = None,
) -> list[CartelFlag]:
    """Find reciprocal donation pairs and small collusive groups in a ledger.

    Pair flags: both directed shares (amount over the donor's per-round
    donation pool) stay at or above `pair_reciprocity` for at least
    `min_rounds` consecutive rounds.

    Group flags: candidate groups are strongly connected subgraphs (size
    <= max_group_size) of the aggregated donation digraph after dropping
    edges whose aggregate share falls below internal_share / max_group_size;
    a group is flagged when its per-round internal-flow share (internal
    transfers over the members' combined pools) stays at or above
    `internal_share` for at least `min_rounds` consecutive rounds. Flags of
    the same kind are maximal under set inclusion.

    When `fractions` and `totals_history` are supplied, per-round pools from
    the ledger are cross-checked against f_i * T_i.
    """
    rounds = ledger.rounds()
    if len(rounds) < thresholds.min_rounds:
        raise InsufficientHistoryError(
            f"ledger covers {len(rounds)} round(s); detector needs >= {thresholds.min_rounds}"
        )
    pools = ledger.pools_by_round()
    flows = ledger.flows_by_round()

    if fractions is not None and totals_history is not None:
        for rnd, by_donor in pools.items():
            totals = totals_history.get(rnd, {})
            for donor, pool in by_donor.items():
                expected = fractions.get(donor, 0.0) * totals.get(donor, 0.0)
                if expected > 0 and abs(pool - expected) > 1e-9 * expected:
                    raise ValidationError(
                        f"round {rnd}: donor {donor!r} ledger pool {pool!r} "
                        f"disagrees with f*T = {expected!r}"
                    )

    flags: list[CartelFlag] = []

    # (a) reciprocal pairs
    reciprocal: set[tuple[str, str]] = set()
    for by_edge in flows.values():
        for (donor, recipient) in by_edge:
            if (recipient, donor) in by_edge:
                reciprocal.add((donor, recipient) if donor < recipient else (recipient, donor))
    for a, b in sorted(reciprocal):
        min_share: dict[int, float] = {}
        for rnd in rounds:
            by_edge = flows.get(rnd, {})
            by_donor = pools.get(rnd, {})
            pool_a, pool_b = by_donor.get(a, 0.0), by_donor.get(b, 0.0)
            if pool_a <= 0 or pool_b <= 0:
                min_share[rnd] = 0.0
                continue
            share_ab = by_edge.get((a, b), 0.0) / pool_a
            share_ba = by_edge.get((b, a), 0.0) / pool_b
            min_share[rnd] = min(share_ab, share_ba)
        qualifies = {rnd: min_share[rnd] >= thresholds.pair_reciprocity for rnd in rounds}
        run = _best_consecutive_run(rounds, qualifies, thresholds.min_rounds)
        if run is None:
            continue
        members = frozenset({a, b})
        flags.append(
            CartelFlag(
                members=members,
                kind="pair",
                score=math.fsum(min_share[rnd] for rnd in run) / len(run),
                threshold=thresholds.pair_reciprocity,
                rounds_observed=len(run),
                evidence=_collect_evidence(ledger, members, run),
            )
        )

    # (b) collusive groups on the thresholded aggregate digraph
    agg_flow: dict[tuple[str, str], float] = {}
    agg_pool: dict[str, float] = {}
    for by_edge in flows.values():
        for key, amount in by_edge.items():
            agg_flow[key] = agg_flow.get(key, 0.0) + amount
    for by_donor in pools.values():
        for donor, pool in by_donor.items():
            agg_pool[donor] = agg_pool.get(donor, 0.0) + pool

    edge_floor = thresholds.internal_share / thresholds.max_group_size
    adjacency: dict[str, list[str]] = {}
    undirected: dict[str, set[str]] = {}
    nodes: set[str] = set()
    for (donor, recipient), amount in agg_flow.items():
        if agg_pool.get(donor, 0.0) <= 0:
            continue
        if amount / agg_pool[donor] >= edge_floor:
            adjacency.setdefault(donor, []).append(recipient)
            undirected.setdefault(donor, set()).add(recipient)
            undirected.setdefault(recipient, set()).add(donor)
            nodes.update((donor, recipient))
    for neighbors in adjacency.values():
        neighbors.sort()

    group_flags: list[CartelFlag] = []
    for component in _strongly_connected_components(sorted(nodes), adjacency):
        if len(component) < 2:
            continue
        for subset in _connected_subsets(component, undirected, thresholds.max_group_size):
            if not _induced_strongly_connected(subset, adjacency):
                continue
            share_by_round: dict[int, float] = {}
            for rnd in rounds:
                by_edge = flows.get(rnd, {})
                by_donor = pools.get(rnd, {})
                pool_total = math.fsum(by_donor.get(m, 0.0) for m in subset)
                if pool_total <= 0:
                    share_by_round[rnd] = 0.0
                    continue
                internal = math.fsum(
                    amount
                    for (donor, recipient), amount in by_edge.items()
                    if donor in subset and recipient in subset
                )
                share_by_round[rnd] = internal / pool_total
            qualifies = {rnd: share_by_round[rnd] >= thresholds.internal_share for rnd in rounds}
            run = _best_consecutive_run(rounds, qualifies, thresholds.min_rounds)
            if run is None:
                continue
            group_flags.append(
                CartelFlag(
                    members=subset,
                    kind="group",
                    score=math.fsum(share_by_round[rnd] for rnd in run) / len(run),
                    threshold=thresholds.internal_share,
                    rounds_observed=len(run),
                    evidence=_collect_evidence(ledger, subset, run),
                )
            )

    # keep only maximal groups
    kept: list[CartelFlag] = []
    for flag in group_flags:
        if any(flag.members < other.members for other in group_flags):
            continue
        kept.append(flag)
    flags.extend(kept)
    flags.sort(key=lambda f: (f.kind, sorted(f.members)))
    return flags


def apply_penalties(
    plan: AllocationPlan,
    flags: Sequence[CartelFlag],
    penalty_policy: str = PENALTY_VOID_AND_REDISTRIBUTE,
) -> AllocationPlan:
    """Void intra-cartel weights and renormalize the affected rows.

    Both named policies currently share this masking semantics; the names are
    kept distinct in configuration for forward compatibility.
    """
    if penalty_policy not in PENALTY_POLICIES:
        raise ValidationError(f"unknown penalty policy {penalty_policy!r}")
    if not flags:
        return plan
    banned: dict[str, set[str]] = {}
    for flag in flags:
        for member in flag.members:
            banned.setdefault(member, set()).update(flag.members - {member})
    adjusted: dict[str, dict[str, float]] = {}
    for donor in plan.donors():
        row = dict(plan.row(donor))
        if donor in banned:
            row = {r: w for r, w in row.items() if r not in banned[donor]}
            if not row:
                raise EmptyRowError(donor, "all recipients are cartel co-members")
            row = normalize_row(row)
        adjusted[donor] = row
    return AllocationPlan(adjusted)


@dataclass(frozen=True)
class IntegrityReport:
    """Audit outcome over one scenario's ledger."""

    conflicted_transfers: tuple[TransferRecord, ...]
    cartel_flags: tuple[CartelFlag, ...]
    cartel_scan: str  # "ok" | "skipped_insufficient_rounds"
    totals: dict

    @property
    def clean(self) -> bool:
        return not self.conflicted_transfers and not self.cartel_flags


def build_integrity_report(
    ledger: DonationLedger,
    conflicts: ConflictSet,
    thresholds: CartelThresholds,
) -> IntegrityReport:
    """Run the conflicted-transfer audit and (history permitting) cartel detection."""
    conflicted = tuple(audit_conflicted_transfers(ledger, conflicts))
    try:
        flags = tuple(detect_cartels(ledger, thresholds))
        scan = "ok"
    except InsufficientHistoryError:
        flags = ()
        scan = "skipped_insufficient_rounds"
    return IntegrityReport(
        conflicted_transfers=conflicted,
        cartel_flags=flags,
        cartel_scan=scan,
        totals={
            "n_transfers": len(ledger),
            "n_conflicted_transfers": len(conflicted),
            "n_cartel_flags": len(flags),
            "rounds_covered": len(ledger.rounds()),
        },
    )
