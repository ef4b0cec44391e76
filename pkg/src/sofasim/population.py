"""Synthetic scientific communities: agents, coauthorship graph, affiliations, tags.

Communities are immutable value objects. Generation is a pure function of
(spec, seed), so any community can be reproduced from its provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import ConfigurationError, ValidationError

COMMUNITY_SCHEMA_VERSION = 1

KIND_SCIENTIST = "scientist"
KIND_SUPER_NODE = "super_node"
_KINDS = (KIND_SCIENTIST, KIND_SUPER_NODE)

# Entropy prefix separating the community-generation RNG stream from the
# per-round planning streams that share the same master seed.
_STREAM_COMMUNITY = 0x5EED_C0_77


@dataclass(frozen=True)
class Agent:
    """One funding participant: a scientist or a fundable super-node project."""

    id: str
    kind: str = KIND_SCIENTIST
    group_tags: frozenset[str] = frozenset()
    birth_year: int = 1970
    domain_id: str = "domain-00"
    affiliation_ids: frozenset[str] = frozenset()
    merit: float = 1.0
    fraction_override: float | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("agent id must be a non-empty string")
        if self.kind not in _KINDS:
            raise ValidationError(f"agent {self.id!r}: unknown kind {self.kind!r}")
        if not (self.merit >= 0.0):
            raise ValidationError(f"agent {self.id!r}: merit must be >= 0, got {self.merit}")
        if self.fraction_override is not None and not (0.0 <= self.fraction_override < 1.0):
            raise ValidationError(
                f"agent {self.id!r}: fraction_override must be in [0, 1), got {self.fraction_override}"
            )
        object.__setattr__(self, "group_tags", frozenset(self.group_tags))
        object.__setattr__(self, "affiliation_ids", frozenset(self.affiliation_ids))

    @property
    def is_scientist(self) -> bool:
        return self.kind == KIND_SCIENTIST


class CoauthorEdge(NamedTuple):
    """Unordered coauthorship link; `a < b` lexicographically after normalization."""

    a: str
    b: str
    year: int


def _normalize_edge(a: str, b: str, year: int) -> CoauthorEdge:
    if a == b:
        raise ValidationError(f"self coauthorship edge on {a!r}")
    if b < a:
        a, b = b, a
    return CoauthorEdge(a, b, int(year))


@dataclass(frozen=True)
class Community:
    """Immutable population: agents plus the coauthorship graph between them."""

    agents: tuple[Agent, ...]
    coauthor_edges: tuple[CoauthorEdge, ...] = ()

    def __post_init__(self):
        agents = tuple(self.agents)
        object.__setattr__(self, "agents", agents)
        seen: set[str] = set()
        for agent in agents:
            if agent.id in seen:
                raise ValidationError(f"duplicate agent id {agent.id!r}")
            seen.add(agent.id)
        edges = tuple(_normalize_edge(*e) for e in self.coauthor_edges)
        dangling = sorted({x for e in edges for x in (e.a, e.b) if x not in seen})
        if dangling:
            raise ValidationError(
                "coauthor edges reference unknown agent ids: " + ", ".join(repr(x) for x in dangling)
            )
        pairs = [(e.a, e.b) for e in edges]
        if len(set(pairs)) != len(pairs):
            dupes = sorted({p for p in pairs if pairs.count(p) > 1})
            raise ValidationError(f"duplicate coauthor edges: {dupes}")
        object.__setattr__(self, "coauthor_edges", edges)

    # -- indexing helpers ---------------------------------------------------

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.agents)

    @cached_property
    def pos(self) -> dict[str, int]:
        return {a.id: i for i, a in enumerate(self.agents)}

    @cached_property
    def by_id(self) -> dict[str, Agent]:
        return {a.id: a for a in self.agents}

    @cached_property
    def scientist_mask(self) -> np.ndarray:
        mask = np.array([a.is_scientist for a in self.agents], dtype=bool)
        mask.setflags(write=False)
        return mask

    @cached_property
    def sorted_rank(self) -> dict[str, int]:
        """Rank of each id in lexicographic order; used to key RNG substreams."""
        return {aid: r for r, aid in enumerate(sorted(self.ids))}

    @cached_property
    def domains(self) -> dict[str, tuple[str, ...]]:
        members: dict[str, list[str]] = {}
        for a in self.agents:
            members.setdefault(a.domain_id, []).append(a.id)
        return {d: tuple(v) for d, v in members.items()}

    def __len__(self) -> int:
        return len(self.agents)

    @property
    def n_scientists(self) -> int:
        return int(self.scientist_mask.sum())

    def with_agent(self, agent: Agent) -> "Community":
        if agent.id in self.pos:
            raise ValidationError(f"agent id {agent.id!r} already present")
        return Community(self.agents + (agent,), self.coauthor_edges)

    # -- serialization --------------------------------------------------------

    def to_json_dict(self) -> dict:
        agents = []
        for a in self.agents:
            entry = {
                "id": a.id,
                "kind": a.kind,
                "group_tags": sorted(a.group_tags),
                "birth_year": a.birth_year,
                "domain_id": a.domain_id,
                "affiliation_ids": sorted(a.affiliation_ids),
                "merit": a.merit,
            }
            if a.fraction_override is not None:
                entry["fraction_override"] = a.fraction_override
            agents.append(entry)
        return {
            "schema_version": COMMUNITY_SCHEMA_VERSION,
            "agents": agents,
            "coauthor_edges": [[e.a, e.b, e.year] for e in self.coauthor_edges],
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "Community":
        if not isinstance(doc, Mapping):
            raise ValidationError("community document must be a JSON object")
        version = doc.get("schema_version", COMMUNITY_SCHEMA_VERSION)
        if version != COMMUNITY_SCHEMA_VERSION:
            raise ValidationError(f"unsupported community schema_version {version!r}")
        agents = []
        for i, entry in enumerate(doc.get("agents", [])):
            try:
                agents.append(
                    Agent(
                        id=entry["id"],
                        kind=entry.get("kind", KIND_SCIENTIST),
                        group_tags=frozenset(entry.get("group_tags", ())),
                        birth_year=int(entry.get("birth_year", 1970)),
                        domain_id=entry.get("domain_id", "domain-00"),
                        affiliation_ids=frozenset(entry.get("affiliation_ids", ())),
                        merit=float(entry.get("merit", 0.0)),
                        fraction_override=(
                            None
                            if entry.get("fraction_override") is None
                            else float(entry["fraction_override"])
                        ),
                    )
                )
            except KeyError as exc:
                raise ValidationError(f"agents[{i}]: missing field {exc}") from None
        edges = [tuple(e) for e in doc.get("coauthor_edges", ())]
        for i, e in enumerate(edges):
            if len(e) != 3:
                raise ValidationError(f"coauthor_edges[{i}]: expected [id_a, id_b, year], got {e!r}")
        return cls(tuple(agents), tuple(CoauthorEdge(str(a), str(b), int(y)) for a, b, y in edges))


def save_community(community: Community, path: str | Path) -> None:
    """Write the community as canonical UTF-8 JSON (sorted keys, LF endings)."""
    text = json.dumps(community.to_json_dict(), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")


def load_community(path: str | Path, format: str = "json") -> Community:
    """Load and validate a community file; raises ValidationError on bad content."""
    if format != "json":
        raise ConfigurationError([("/format", f"unsupported community format {format!r}")])
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    return Community.from_json_dict(doc)


# -- synthetic generation ----------------------------------------------------


@dataclass(frozen=True)
class CommunitySpec:
    """Parameters for synthetic community generation.

    group_tag_proportions maps a tag family to {tag label: probability}; each
    agent receives at most one tag per family and the per-family probabilities
    must sum to at most 1 (the remainder gets no tag from that family).
    """

    n_agents: int
    n_affiliations: int = 5
    n_domains: int = 1
    group_tag_proportions: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    coauthor_mean_degree: float = 0.0
    merit_mu: float = 0.0
    merit_sigma: float = 1.0
    intra_domain_bias: float = 0.8
    coauthor_year_range: tuple[int, int] = (2015, 2024)
    birth_year_range: tuple[int, int] = (1955, 2000)

    def __post_init__(self):
        issues = []
        if self.n_agents < 2:
            issues.append(("/n_agents", "must be >= 2"))
        if self.n_affiliations < 1:
            issues.append(("/n_affiliations", "must be >= 1"))
        if self.n_domains < 1:
            issues.append(("/n_domains", "must be >= 1"))
        if self.coauthor_mean_degree < 0:
            issues.append(("/coauthor_mean_degree", "must be >= 0"))
        if not (0.0 <= self.intra_domain_bias <= 1.0):
            issues.append(("/intra_domain_bias", "must be in [0, 1]"))
        if self.merit_sigma < 0:
            issues.append(("/merit_sigma", "must be >= 0"))
        for family, values in self.group_tag_proportions.items():
            total = 0.0
            for tag, p in values.items():
                if not (0.0 <= p <= 1.0):
                    issues.append((f"/group_tag_proportions/{family}/{tag}", "must be in [0, 1]"))
                total += p
            if total > 1.0 + 1e-9:
                issues.append((f"/group_tag_proportions/{family}", f"proportions sum to {total:.6g} > 1"))
        for name, rng in (("coauthor_year_range", self.coauthor_year_range),
                          ("birth_year_range", self.birth_year_range)):
            if len(rng) != 2 or rng[0] > rng[1]:
                issues.append((f"/{name}", "must be an ordered [low, high] pair"))
        if issues:
            raise ConfigurationError(issues)
        object.__setattr__(
            self,
            "group_tag_proportions",
            {f: dict(v) for f, v in self.group_tag_proportions.items()},
        )

    def to_json_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "n_affiliations": self.n_affiliations,
            "n_domains": self.n_domains,
            "group_tag_proportions": {f: dict(v) for f, v in self.group_tag_proportions.items()},
            "coauthor_mean_degree": self.coauthor_mean_degree,
            "merit_mu": self.merit_mu,
            "merit_sigma": self.merit_sigma,
            "intra_domain_bias": self.intra_domain_bias,
            "coauthor_year_range": list(self.coauthor_year_range),
            "birth_year_range": list(self.birth_year_range),
        }


def _agent_id(i: int) -> str:
    return f"agent-{i:05d}"


def generate_community(spec: CommunitySpec, seed: int) -> Community:
    """Deterministically synthesize a community from (spec, seed).

    All draws run off fixed substreams of one seed sequence, so the result is
    a pure function of its arguments regardless of platform or call order.
    """
    n = spec.n_agents
    root = np.random.SeedSequence((_STREAM_COMMUNITY, int(seed)))
    rng_domain, rng_affil, rng_tags, rng_birth, rng_merit, rng_edges = (
        np.random.default_rng(child) for child in root.spawn(6)
    )

    domain_ids = [f"domain-{k:02d}" for k in range(spec.n_domains)]
    affil_ids = [f"org-{k:03d}" for k in range(spec.n_affiliations)]
    domain_assign = rng_domain.integers(0, spec.n_domains, size=n)
    affil_assign = rng_affil.integers(0, spec.n_affiliations, size=n)
    birth_years = rng_birth.integers(spec.birth_year_range[0], spec.birth_year_range[1] + 1, size=n)
    merits = rng_merit.lognormal(spec.merit_mu, spec.merit_sigma, size=n)

    tags_per_agent: list[set[str]] = [set() for _ in range(n)]
    for family, values in spec.group_tag_proportions.items():
        labels = list(values.keys())
        probs = np.array([values[t] for t in labels], dtype=float)
        draws = rng_tags.random(n)
        cuts = np.cumsum(probs)
        # draw < first cut -> first label, etc.; draw beyond the last cut -> no tag
        slot = np.searchsorted(cuts, draws, side="right")
        for i in range(n):
            if slot[i] < len(labels):
                tags_per_agent[i].add(labels[slot[i]])

    agents = tuple(
        Agent(
            id=_agent_id(i),
            kind=KIND_SCIENTIST,
            group_tags=frozenset(tags_per_agent[i]),
            birth_year=int(birth_years[i]),
            domain_id=domain_ids[domain_assign[i]],
            affiliation_ids=frozenset({affil_ids[affil_assign[i]]}),
            merit=float(merits[i]),
        )
        for i in range(n)
    )

    members_by_domain: dict[int, np.ndarray] = {}
    for k in range(spec.n_domains):
        members_by_domain[k] = np.flatnonzero(domain_assign == k)

    m_target = int(round(n * spec.coauthor_mean_degree / 2.0))
    edges: dict[tuple[str, str], int] = {}
    lo, hi = spec.coauthor_year_range
    for _ in range(m_target):
        i = int(rng_edges.integers(0, n))
        domain_members = members_by_domain[int(domain_assign[i])]
        if rng_edges.random() < spec.intra_domain_bias and len(domain_members) > 1:
            j = i
            while j == i:
                j = int(domain_members[rng_edges.integers(0, len(domain_members))])
        else:
            j = i
            while j == i:
                j = int(rng_edges.integers(0, n))
        year = int(rng_edges.integers(lo, hi + 1))
        a, b = _agent_id(i), _agent_id(j)
        if b < a:
            a, b = b, a
        if (a, b) not in edges:  # collisions dropped, not retried
            edges[(a, b)] = year

    edge_tuples = tuple(CoauthorEdge(a, b, y) for (a, b), y in sorted(edges.items()))
    return Community(agents, edge_tuples)
