"""Policy levers on top of the core mechanism: per-agent donation fractions,
group bias multipliers, predicate-based redistribution, super-nodes and
per-domain budget partitioning."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, EmptyTargetError, ValidationError
from .integrity import CartelThresholds, CoiRules, ConflictSet, PENALTY_POLICIES, PENALTY_VOID_AND_REDISTRIBUTE
from .mechanism import AllocationPlan, normalize_row
from .population import Agent, Community, KIND_SUPER_NODE


@dataclass(frozen=True)
class PolicyConfig:
    """All tunable policy levers for one scenario.

    `fraction_overrides` maps group tags to donation fractions; when an agent
    carries several overridden tags, the first key in mapping order wins. An
    agent-level `fraction_override` beats any group override.
    """

    total_budget: float
    default_fraction: float = 0.5
    fraction_overrides: Mapping[str, float] = field(default_factory=dict)
    group_multipliers: Mapping[str, float] = field(default_factory=dict)
    public_fraction: float = 0.0
    public_pref: str | Mapping[str, float] = "uniform"
    tolerance: float = 1e-9
    max_iter: int = 100_000
    evaluation_year: int = 2024
    coi_rules: CoiRules = field(default_factory=CoiRules)
    cartel_thresholds: CartelThresholds = field(default_factory=CartelThresholds)
    penalty_policy: str = PENALTY_VOID_AND_REDISTRIBUTE
    fallback_uniform_domain: bool = True

    def __post_init__(self):
        issues = []
        if not (self.total_budget > 0):
            issues.append(("/total_budget", "must be > 0"))
        if not (0.0 <= self.default_fraction < 1.0):
            issues.append(("/default_fraction", "must be in [0, 1)"))
        for tag, f in self.fraction_overrides.items():
            if not (0.0 <= f < 1.0):
                issues.append((f"/fraction_overrides/{tag}", "must be in [0, 1)"))
        for tag, m in self.group_multipliers.items():
            if not (m > 0.0):
                issues.append((f"/group_multipliers/{tag}", "must be > 0"))
        if not (0.0 <= self.public_fraction <= 1.0):
            issues.append(("/public_fraction", "must be in [0, 1]"))
        if isinstance(self.public_pref, str) and self.public_pref != "uniform":
            issues.append(("/public_pref", f"unknown preset {self.public_pref!r}"))
        if not (self.tolerance > 0):
            issues.append(("/tolerance", "must be > 0"))
        if self.max_iter < 1:
            issues.append(("/max_iter", "must be >= 1"))
        if self.penalty_policy not in PENALTY_POLICIES:
            issues.append(("/penalty_policy", f"must be one of {PENALTY_POLICIES}"))
        if issues:
            raise ConfigurationError(issues)
        object.__setattr__(self, "fraction_overrides", dict(self.fraction_overrides))
        object.__setattr__(self, "group_multipliers", dict(self.group_multipliers))
        if isinstance(self.public_pref, Mapping):
            object.__setattr__(self, "public_pref", dict(self.public_pref))

    def public_pref_mapping(self) -> Mapping[str, float] | None:
        return None if isinstance(self.public_pref, str) else self.public_pref

    def to_json_dict(self) -> dict:
        return {
            "total_budget": self.total_budget,
            "default_fraction": self.default_fraction,
            "fraction_overrides": dict(self.fraction_overrides),
            "group_multipliers": dict(self.group_multipliers),
            "public_fraction": self.public_fraction,
            "public_pref": self.public_pref if isinstance(self.public_pref, str) else dict(self.public_pref),
            "tolerance": self.tolerance,
            "max_iter": self.max_iter,
            "evaluation_year": self.evaluation_year,
            "coi_rules": {
                "coauthor_window_years": self.coi_rules.coauthor_window_years,
                "shared_affiliation": self.coi_rules.shared_affiliation,
            },
            "cartel_thresholds": {
                "pair_reciprocity": self.cartel_thresholds.pair_reciprocity,
                "internal_share": self.cartel_thresholds.internal_share,
                "max_group_size": self.cartel_thresholds.max_group_size,
                "min_rounds": self.cartel_thresholds.min_rounds,
            },
            "penalty_policy": self.penalty_policy,
            "fallback_uniform_domain": self.fallback_uniform_domain,
        }


def resolve_fractions(community: Community, policy: PolicyConfig) -> np.ndarray:
    """Per-agent donation fractions in community order.

    Precedence: agent-level override, then the first matching tag in
    `fraction_overrides` order, then the default. Super-nodes are forced to 0.
    Override tags that match nobody raise a warning, not an error.
    """
    present = {t for a in community.agents for t in a.group_tags}
    for tag in policy.fraction_overrides:
        if tag not in present:
            warnings.warn(f"fraction override tag {tag!r} matches no agent", stacklevel=2)
    fractions = np.empty(len(community), dtype=float)
    for i, agent in enumerate(community.agents):
        if agent.kind == KIND_SUPER_NODE:
            fractions[i] = 0.0
            continue
        if agent.fraction_override is not None:
            fractions[i] = agent.fraction_override
            continue
        value = policy.default_fraction
        for tag, override in policy.fraction_overrides.items():
            if tag in agent.group_tags:
                value = override
                break
        fractions[i] = value
    if np.any(fractions < 0) or np.any(fractions >= 1):
        raise ValidationError("resolved donation fractions must lie in [0, 1)")
    return fractions


def apply_group_multiplier(
    plan: AllocationPlan, community: Community, multipliers: Mapping[str, float]
) -> AllocationPlan:
    """Reweight each donor row by recipient multipliers and renormalize.

    A recipient's multiplier is the product over its matching tags (1 when
    none match), so rows stay normalized and the budget stays conserved.
    """
    if not multipliers:
        return plan
    for tag, m in multipliers.items():
        if not (m > 0):
            raise ValidationError(f"multiplier for tag {tag!r} must be > 0, got {m}")
    factor: dict[str, float] = {}
    for agent in community.agents:
        m = 1.0
        for tag in agent.group_tags:
            if tag in multipliers:
                m *= multipliers[tag]
        factor[agent.id] = m
    reweighted: dict[str, dict[str, float]] = {}
    for donor in plan.donors():
        row = {r: w * factor.get(r, 1.0) for r, w in plan.row(donor).items()}
        reweighted[donor] = normalize_row(row)
    return AllocationPlan(reweighted)


# -- predicate-based redistribution --------------------------------------------

_PREDICATE_RE = re.compile(r"^\s*(?:tag=(?P<tag>\S+)|age<(?P<age>\d+)|domain=(?P<domain>\S+))\s*$")


@dataclass(frozen=True)
class Predicate:
    """Parsed recipient filter: tag=LABEL, age<YEARS or domain=ID."""

    kind: str  # "tag" | "age_below" | "domain"
    value: str = ""
    limit: int = 0
    text: str = ""

    @classmethod
    def parse(cls, text: str) -> "Predicate":
        match = _PREDICATE_RE.match(text)
        if not match:
            raise ConfigurationError(
                [("/predicate", f"cannot parse {text!r}; expected tag=LABEL, age<YEARS or domain=ID")]
            )
        if match.group("tag") is not None:
            return cls(kind="tag", value=match.group("tag"), text=text)
        if match.group("age") is not None:
            return cls(kind="age_below", limit=int(match.group("age")), text=text)
        return cls(kind="domain", value=match.group("domain"), text=text)

    def matches(self, agent: Agent, evaluation_year: int) -> bool:
        if not agent.is_scientist:
            return False
        if self.kind == "tag":
            return self.value in agent.group_tags
        if self.kind == "age_below":
            return (evaluation_year - agent.birth_year) < self.limit
        return agent.domain_id == self.value


def predicate_plan(
    donor: Agent,
    predicate: Predicate | str,
    community: Community,
    conflicts: ConflictSet,
    evaluation_year: int,
) -> dict[str, float]:
    """Uniform donation row over the scientists selected by `predicate`,
    excluding the donor and its conflicted counterparts."""
    if isinstance(predicate, str):
        predicate = Predicate.parse(predicate)
    blocked = conflicts.blocked(donor.id)
    selected = [
        a.id
        for a in community.agents
        if a.id != donor.id and a.id not in blocked and predicate.matches(a, evaluation_year)
    ]
    if not selected:
        raise EmptyTargetError(predicate.text or predicate.kind, donor.id)
    share = 1.0 / len(selected)
    return {aid: share for aid in selected}


def attach_super_node(community: Community, name: str, domain_id: str) -> Community:
    """Add a fundable project node: no base share, no donation obligation."""
    agent = Agent(
        id=name,
        kind=KIND_SUPER_NODE,
        group_tags=frozenset(),
        birth_year=0,
        domain_id=domain_id,
        affiliation_ids=frozenset(),
        merit=0.0,
    )
    return community.with_agent(agent)


def partition_budgets(
    community: Community,
    domain_budgets: Mapping[str, float],
    base_policy: PolicyConfig | None = None,
    exclude: Sequence[str] = (),
) -> list[tuple[Community, PolicyConfig]]:
    """Split a community into independent per-domain scenarios.

    Every populated domain must either carry a budget or be listed in
    `exclude`; cross-domain coauthor edges are dropped with the partition
    (cross-domain donations cannot occur inside a partitioned run).
    """
    issues = []
    excluded = set(exclude)
    populated = set(community.domains)
    for domain in sorted(populated - excluded - set(domain_budgets)):
        issues.append((f"/domain_budgets/{domain}", "populated domain lacks a budget"))
    for domain, budget in sorted(domain_budgets.items()):
        if domain not in populated:
            issues.append((f"/domain_budgets/{domain}", "budgeted domain has no agents"))
        elif not (budget > 0):
            issues.append((f"/domain_budgets/{domain}", "budget must be > 0"))
    if issues:
        raise ConfigurationError(issues)

    partitions: list[tuple[Community, PolicyConfig]] = []
    for domain in sorted(domain_budgets):
        member_ids = set(community.domains[domain])
        agents = tuple(a for a in community.agents if a.id in member_ids)
        edges = tuple(
            e for e in community.coauthor_edges if e.a in member_ids and e.b in member_ids
        )
        sub = Community(agents, edges)
        if base_policy is None:
            policy = PolicyConfig(total_budget=float(domain_budgets[domain]))
        else:
            policy = replace(base_policy, total_budget=float(domain_budgets[domain]))
        partitions.append((sub, policy))
    return partitions
