"""Donor behavior strategies, multi-round scenario execution and fraction sweeps.

Determinism contract: a scenario result is a pure function of its config
(including the seed). Every random draw runs on a substream keyed by
(master seed, round, donor's rank in sorted id order), so results do not
depend on iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ConvergenceError,
    EmptyRowError,
    EmptyTargetError,
    ValidationError,
)
from .integrity import (
    ConflictSet,
    DonationLedger,
    IntegrityReport,
    build_integrity_report,
    detect_conflicts,
)
from .mechanism import (
    AllocationPlan,
    FixedPointResult,
    FundingState,
    normalize_row,
    base_vector,
    donation_step,
    run_fixed_point,
    transfer_amounts,
    two_phase_round,
)
from .metrics import MetricsReport, build_metrics_report
from .policy import PolicyConfig, Predicate, apply_group_multiplier, predicate_plan, resolve_fractions
from .population import Community, CommunitySpec, generate_community, load_community

MODE_PER_ROUND_STEPPING = "per_round_stepping"
MODE_FIXED_POINT = "fixed_point_per_round"
MODE_TWO_PHASE = "two_phase"
MODES = (MODE_PER_ROUND_STEPPING, MODE_FIXED_POINT, MODE_TWO_PHASE)

STRATEGY_KINDS = (
    "uniform_random",
    "merit_proportional",
    "preferential",
    "predicate",
    "cartel",
    "top_recipient",
    "identity",
)

# Entropy prefix separating planning draws from community generation.
_STREAM_PLANS = 0x9D_0_7A7E


@dataclass(frozen=True)
class Strategy:
    """One donor behavior rule; `kind` selects the rule, the rest parameterize it."""

    kind: str
    out_degree: int = 10
    alpha: float = 1.0
    predicate: str | None = None
    members: tuple[str, ...] = ()
    internal_weight: float = 1.0
    background: "Strategy | None" = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigurationError([("/strategy/kind", f"unknown strategy {self.kind!r}")])
        if self.out_degree < 1:
            raise ConfigurationError([("/strategy/out_degree", "must be >= 1")])
        if self.kind == "predicate" and not self.predicate:
            raise ConfigurationError([("/strategy/predicate", "predicate strategy needs a predicate")])
        if self.kind == "cartel":
            if len(self.members) < 2:
                raise ConfigurationError([("/strategy/members", "cartel needs >= 2 members")])
            if not (0.0 < self.internal_weight <= 1.0):
                raise ConfigurationError([("/strategy/internal_weight", "must be in (0, 1]")])
        object.__setattr__(self, "members", tuple(self.members))

    @classmethod
    def from_dict(cls, doc: Mapping, pointer: str = "/strategy") -> "Strategy":
        if not isinstance(doc, Mapping) or "kind" not in doc:
            raise ConfigurationError([(pointer, "strategy must be an object with a 'kind' field")])
        background = doc.get("background")
        return cls(
            kind=doc["kind"],
            out_degree=int(doc.get("out_degree", 10)),
            alpha=float(doc.get("alpha", 1.0)),
            predicate=doc.get("predicate"),
            members=tuple(doc.get("members", ())),
            internal_weight=float(doc.get("internal_weight", 1.0)),
            background=cls.from_dict(background, pointer + "/background") if background else None,
        )

    def to_json_dict(self) -> dict:
        doc: dict = {"kind": self.kind, "out_degree": self.out_degree}
        if self.kind == "preferential":
            doc["alpha"] = self.alpha
        if self.predicate is not None:
            doc["predicate"] = self.predicate
        if self.members:
            doc["members"] = list(self.members)
            doc["internal_weight"] = self.internal_weight
        if self.background is not None:
            doc["background"] = self.background.to_json_dict()
        return doc


@dataclass(frozen=True)
class StrategyAssignment:
    """Default strategy plus tag- and agent-level overrides.

    Agent overrides beat tag overrides; among tag overrides the first matching
    key in mapping order wins.
    """

    default: Strategy
    per_tag: Mapping[str, Strategy] = field(default_factory=dict)
    per_agent: Mapping[str, Strategy] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "per_tag", dict(self.per_tag))
        object.__setattr__(self, "per_agent", dict(self.per_agent))

    def resolve(self, agent) -> Strategy:
        if agent.id in self.per_agent:
            return self.per_agent[agent.id]
        for tag, strategy in self.per_tag.items():
            if tag in agent.group_tags:
                return strategy
        return self.default

    def to_json_dict(self) -> dict:
        doc: dict = {"default": self.default.to_json_dict()}
        if self.per_tag:
            doc["per_tag"] = {t: s.to_json_dict() for t, s in self.per_tag.items()}
        if self.per_agent:
            doc["per_agent"] = {a: s.to_json_dict() for a, s in self.per_agent.items()}
        return doc


@dataclass(frozen=True)
class PriorView:
    """What a donor may see when planning: published totals of the prior round."""

    totals: np.ndarray
    round_index: int


def _donor_rng(seed: int, round_index: int, rank: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((_STREAM_PLANS, int(seed), int(round_index), int(rank))))


def _uniform_row(ids: Sequence[str]) -> dict[str, float]:
    return normalize_row({aid: 1.0 for aid in ids})


class _PlanContext:
    """Per-proposal shared state: score orderings and predicate matches are
    donor independent, so they are computed once per plan, not per row."""

    def __init__(self, community: Community, view: PriorView, conflicts: ConflictSet,
                 seed: int, evaluation_year: int, fallback_uniform_domain: bool):
        self.community = community
        self.view = view
        self.conflicts = conflicts
        self.seed = seed
        self.evaluation_year = evaluation_year
        self.fallback_uniform_domain = fallback_uniform_domain
        self.n = len(community)
        self._merit_order: list[int] | None = None
        self._pref_order: dict[float, list[int]] = {}
        self._predicate_matches: dict[str, tuple[str, ...]] = {}

    def rng_for(self, donor_id: str) -> np.random.Generator:
        return _donor_rng(self.seed, self.view.round_index, self.community.sorted_rank[donor_id])

    def merit_order(self) -> list[int]:
        if self._merit_order is None:
            agents = self.community.agents
            self._merit_order = sorted(range(self.n), key=lambda i: (-agents[i].merit, agents[i].id))
        return self._merit_order

    def preferential_order(self, alpha: float) -> list[int]:
        # alpha > 0 never reorders, but cache per exponent for clarity
        if alpha not in self._pref_order:
            totals = self.view.totals
            ids = self.community.ids
            self._pref_order[alpha] = sorted(range(self.n), key=lambda i: (-float(totals[i]), ids[i]))
        return self._pref_order[alpha]

    def predicate_matches(self, text: str) -> tuple[str, ...]:
        if text not in self._predicate_matches:
            predicate = Predicate.parse(text)
            self._predicate_matches[text] = tuple(
                a.id for a in self.community.agents if predicate.matches(a, self.evaluation_year)
            )
        return self._predicate_matches[text]

    def top_by_order(self, order: Sequence[int], donor_id: str, blocked: frozenset[str], k: int) -> list[str]:
        ids = self.community.ids
        chosen: list[str] = []
        for i in order:
            aid = ids[i]
            if aid == donor_id or aid in blocked:
                continue
            chosen.append(aid)
            if len(chosen) == k:
                break
        return chosen

    def sample_targets(self, rng: np.random.Generator, donor_id: str, blocked: frozenset[str],
                       k: int, exclude_extra: frozenset[str] = frozenset()) -> list[str]:
        """k distinct eligible recipients, by rejection sampling (O(k), not O(n))."""
        ids = self.community.ids
        excluded = {donor_id} | blocked | exclude_extra
        eligible_count = self.n - sum(1 for x in excluded if x in self.community.pos)
        if eligible_count <= 0:
            return []
        if eligible_count <= k:
            return [aid for aid in ids if aid not in excluded]
        chosen: list[str] = []
        taken: set[str] = set()
        while len(chosen) < k:
            need = k - len(chosen)
            for d in rng.integers(0, self.n, size=max(2 * need, 8)):
                aid = ids[int(d)]
                if aid in excluded or aid in taken:
                    continue
                taken.add(aid)
                chosen.append(aid)
                if len(chosen) == k:
                    break
        return chosen


def _fallback_row(ctx: _PlanContext, donor, blocked: frozenset[str], exc: Exception) -> dict[str, float]:
    if not ctx.fallback_uniform_domain:
        raise exc
    peers = [
        aid
        for aid in ctx.community.domains.get(donor.domain_id, ())
        if aid != donor.id and aid not in blocked
    ]
    if not peers:
        raise EmptyRowError(donor.id, "domain fallback is empty too") from exc
    return _uniform_row(peers)


def _build_row(ctx: _PlanContext, strategy: Strategy, donor) -> dict[str, float]:
    blocked = ctx.conflicts.blocked(donor.id)
    if ctx.n - 1 - sum(1 for x in blocked if x in ctx.community.pos) <= 0:
        raise EmptyRowError(donor.id, "every other agent is conflicted")
    kind = strategy.kind
    k = strategy.out_degree

    if kind == "uniform_random":
        rng = ctx.rng_for(donor.id)
        return _uniform_row(ctx.sample_targets(rng, donor.id, blocked, k))

    if kind == "merit_proportional":
        chosen = ctx.top_by_order(ctx.merit_order(), donor.id, blocked, k)
        weights = {aid: ctx.community.by_id[aid].merit for aid in chosen}
        positive = {aid: m for aid, m in weights.items() if m > 0}
        return normalize_row(positive) if positive else _uniform_row(chosen)

    if kind == "preferential":
        chosen = ctx.top_by_order(ctx.preferential_order(strategy.alpha), donor.id, blocked, k)
        totals = ctx.view.totals
        scores = {
            aid: float(totals[ctx.community.pos[aid]]) ** strategy.alpha
            for aid in chosen
            if totals[ctx.community.pos[aid]] > 0
        }
        return normalize_row(scores) if scores else _uniform_row(chosen)

    if kind == "predicate":
        blocked_all = blocked | {donor.id}
        selected = [aid for aid in ctx.predicate_matches(strategy.predicate) if aid not in blocked_all]
        if not selected:
            return _fallback_row(ctx, donor, blocked, EmptyTargetError(strategy.predicate, donor.id))
        return _uniform_row(selected)

    if kind == "cartel":
        if donor.id not in strategy.members:
            inner = strategy.background or Strategy(kind="uniform_random", out_degree=k)
            return _build_row(ctx, inner, donor)
        members = frozenset(strategy.members)
        partners = sorted(
            m for m in members if m != donor.id and m not in blocked and m in ctx.community.pos
        )
        rng = ctx.rng_for(donor.id)
        if not partners:
            outsiders = ctx.sample_targets(rng, donor.id, blocked, k, exclude_extra=members)
            if not outsiders:
                return _fallback_row(ctx, donor, blocked, EmptyRowError(donor.id, "cartel partners all conflicted"))
            return _uniform_row(outsiders)
        row = {m: strategy.internal_weight / len(partners) for m in partners}
        external = 1.0 - strategy.internal_weight
        if external > 0:
            targets = ctx.sample_targets(rng, donor.id, blocked, k, exclude_extra=members)
            if targets:
                for t in targets:
                    row[t] = row.get(t, 0.0) + external / len(targets)
        return normalize_row(row)

    if kind == "top_recipient":
        chosen = ctx.top_by_order(ctx.preferential_order(1.0), donor.id, blocked, 1)
        if not chosen:
            raise EmptyRowError(donor.id, "every other agent is conflicted")
        return {chosen[0]: 1.0}

    raise ValidationError(f"strategy {kind!r} cannot propose rows directly")


def propose_row(
    strategy: Strategy,
    donor,
    community: Community,
    view: PriorView,
    conflicts: ConflictSet,
    seed: int,
    evaluation_year: int = 2024,
    fallback_uniform_domain: bool = True,
) -> dict[str, float]:
    """Build one donor's masked, normalized donation row."""
    ctx = _PlanContext(community, view, conflicts, seed, evaluation_year, fallback_uniform_domain)
    return _build_row(ctx, strategy, donor)


def propose_plans(
    strategy: Strategy | StrategyAssignment,
    community: Community,
    view: PriorView,
    conflicts: ConflictSet,
    seed: int,
    evaluation_year: int = 2024,
    fallback_uniform_domain: bool = True,
) -> AllocationPlan:
    """Propose a full allocation plan: one masked row per scientist donor."""
    assignment = (
        strategy if isinstance(strategy, StrategyAssignment) else StrategyAssignment(default=strategy)
    )
    ctx = _PlanContext(community, view, conflicts, seed, evaluation_year, fallback_uniform_domain)
    rows: dict[str, dict[str, float]] = {}
    for agent in community.agents:
        if not agent.is_scientist:
            continue
        rows[agent.id] = _build_row(ctx, assignment.resolve(agent), agent)
    return AllocationPlan(rows)


# -- scenario execution ---------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to run one scenario deterministically."""

    policy: PolicyConfig
    strategy: StrategyAssignment
    rounds: int = 1
    mode: str = MODE_FIXED_POINT
    seed: int = 0
    community_spec: CommunitySpec | None = None
    community_file: str | None = None
    revision_strategy: Strategy | None = None

    def __post_init__(self):
        issues = []
        if self.rounds < 1:
            issues.append(("/rounds", "must be >= 1"))
        if self.mode not in MODES:
            issues.append(("/mode", f"must be one of {MODES}"))
        if (self.community_spec is None) == (self.community_file is None):
            issues.append(("/community", "exactly one of generate-spec or file is required"))
        if issues:
            raise ConfigurationError(issues)

    def load_or_generate_community(self) -> Community:
        if self.community_file is not None:
            return load_community(self.community_file)
        return generate_community(self.community_spec, self.seed)

    def to_json_dict(self) -> dict:
        community = (
            {"file": self.community_file}
            if self.community_file is not None
            else {"generate": self.community_spec.to_json_dict()}
        )
        doc = {
            "schema_version": 1,
            "seed": self.seed,
            "rounds": self.rounds,
            "mode": self.mode,
            "community": community,
            "policy": self.policy.to_json_dict(),
            "strategy": self.strategy.to_json_dict(),
        }
        if self.revision_strategy is not None:
            doc["revision_strategy"] = self.revision_strategy.to_json_dict()
        return doc


@dataclass(frozen=True)
class ScenarioResult:
    """Full outcome of one scenario run."""

    config: ScenarioConfig
    community: Community
    conflicts: ConflictSet
    fractions: np.ndarray
    base: np.ndarray
    history: tuple[FundingState, ...]
    ledger: DonationLedger
    fixed_point_results: tuple[FixedPointResult, ...]
    interim_results: tuple[FixedPointResult, ...]
    metrics: MetricsReport | None
    integrity: IntegrityReport | None
    completed: bool
    failure_reason: str | None = None

    @property
    def final_state(self) -> FundingState:
        return self.history[-1]


def run_scenario(config: ScenarioConfig, community: Community | None = None) -> ScenarioResult:
    """Execute a scenario: propose plans, apply policy levers, advance rounds.

    In stepping mode each round applies one donation step to the previous
    totals; in fixed-point mode each round freezes its plans and iterates to
    stationarity (so retained funds sum to the budget every recorded round);
    two-phase mode additionally publishes interim totals to a revision
    strategy within each round. A convergence failure yields a result with
    completed=False and the history up to the failing round.
    """
    policy = config.policy
    if community is None:
        community = config.load_or_generate_community()
    conflicts = detect_conflicts(community, policy.coi_rules, policy.evaluation_year)
    fractions = resolve_fractions(community, policy)
    base = base_vector(
        policy.total_budget, community, policy.public_fraction, policy.public_pref_mapping()
    )

    ledger = DonationLedger()
    history: list[FundingState] = []
    fp_results: list[FixedPointResult] = []
    interim_results: list[FixedPointResult] = []
    state = FundingState.from_totals(0, base, fractions, base)
    prior_totals = base.copy()
    failure: str | None = None

    for round_index in range(1, config.rounds + 1):
        view = PriorView(totals=prior_totals, round_index=round_index)
        plan = propose_plans(
            config.strategy,
            community,
            view,
            conflicts,
            config.seed,
            policy.evaluation_year,
            policy.fallback_uniform_domain,
        )
        plan = apply_group_multiplier(plan, community, policy.group_multipliers)

        if config.mode == MODE_PER_ROUND_STEPPING:
            ledger.extend(
                round_index, transfer_amounts(plan, fractions, state.incoming_total, community)
            )
            state = donation_step(state, plan, fractions, base, community)
            history.append(state)
        elif config.mode == MODE_FIXED_POINT:
            result = run_fixed_point(
                plan, fractions, base, community, policy.tolerance, policy.max_iter
            )
            if not result.converged:
                failure = (
                    f"round {round_index}: no convergence within {policy.max_iter} iterations "
                    f"(residual {result.final_residual:.3e})"
                )
                break
            fp_results.append(result)
            state = FundingState.from_totals(round_index, result.totals, fractions, base)
            history.append(state)
            ledger.extend(round_index, transfer_amounts(plan, fractions, result.totals, community))
        else:  # MODE_TWO_PHASE
            revision = config.revision_strategy or Strategy(kind="identity")

            def revise(interim_totals: np.ndarray) -> AllocationPlan:
                if revision.kind == "identity":
                    return plan
                revised = propose_plans(
                    revision,
                    community,
                    PriorView(totals=interim_totals, round_index=round_index),
                    conflicts,
                    config.seed,
                    policy.evaluation_year,
                    policy.fallback_uniform_domain,
                )
                return apply_group_multiplier(revised, community, policy.group_multipliers)

            try:
                outcome = two_phase_round(
                    plan, revise, fractions, base, community, policy.tolerance, policy.max_iter
                )
            except ConvergenceError as exc:
                failure = f"round {round_index}: {exc}"
                break
            interim_results.append(outcome.interim)
            fp_results.append(outcome.final)
            state = FundingState.from_totals(round_index, outcome.final.totals, fractions, base)
            history.append(state)
            ledger.extend(
                round_index,
                transfer_amounts(outcome.phase2_plan, fractions, outcome.final.totals, community),
            )

        prior_totals = state.incoming_total

    metrics: MetricsReport | None = None
    integrity: IntegrityReport | None = None
    if history:
        if fp_results:
            convergence = {
                "iterations": fp_results[-1].iterations,
                "final_residual": fp_results[-1].final_residual,
            }
        else:
            last_step = (
                float(np.abs(history[-1].incoming_total - (history[-2].incoming_total if len(history) > 1 else base)).sum())
                / policy.total_budget
            )
            convergence = {"iterations": len(history), "final_residual": last_step}
        metrics = build_metrics_report(
            history[-1].retained, community, policy.total_budget, convergence
        )
        integrity = build_integrity_report(ledger, conflicts, policy.cartel_thresholds)

    return ScenarioResult(
        config=config,
        community=community,
        conflicts=conflicts,
        fractions=fractions,
        base=base,
        history=tuple(history),
        ledger=ledger,
        fixed_point_results=tuple(fp_results),
        interim_results=tuple(interim_results),
        metrics=metrics,
        integrity=integrity,
        completed=failure is None,
        failure_reason=failure,
    )


# -- fraction sweeps --------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    fraction: float
    metrics: MetricsReport | None
    error: str | None = None


@dataclass(frozen=True)
class SweepResult:
    points: tuple[SweepPoint, ...]

    def gini_by_fraction(self) -> list[tuple[float, float]]:
        return [(p.fraction, p.metrics.gini) for p in self.points if p.metrics is not None]


def sweep(base_config: ScenarioConfig, f_values: Sequence[float]) -> SweepResult:
    """Re-run one scenario across default donation fractions.

    The community and all strategy draws are shared across points (same seed),
    so the fraction is the only thing that varies. Per-point failures are
    collected, not fatal.
    """
    if not f_values:
        raise ConfigurationError([("/f_values", "must be non-empty")])
    for f in f_values:
        if not (0.0 <= f < 1.0):
            raise ConfigurationError([("/f_values", f"fraction {f} outside [0, 1)")])
    community = base_config.load_or_generate_community()
    points: list[SweepPoint] = []
    for f in f_values:
        config = replace(base_config, policy=replace(base_config.policy, default_fraction=float(f)))
        try:
            result = run_scenario(config, community=community)
        except (ValidationError, ConfigurationError) as exc:
            points.append(SweepPoint(fraction=float(f), metrics=None, error=str(exc)))
            continue
        if not result.completed:
            points.append(SweepPoint(fraction=float(f), metrics=None, error=result.failure_reason))
        else:
            points.append(SweepPoint(fraction=float(f), metrics=result.metrics))
    return SweepResult(points=tuple(points))
