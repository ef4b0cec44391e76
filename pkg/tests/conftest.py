"""Shared fixtures: small hand-built communities and plans used across tests."""

from __future__ import annotations

import numpy as np
import pytest

from sofasim import Agent, AllocationPlan, Community


@pytest.fixture
def trio() -> Community:
    """Three unconnected scientists in separate domains and affiliations."""
    return Community(
        (
            Agent(id="agent-1", domain_id="dom-1", affiliation_ids=frozenset({"org-1"}), birth_year=1970),
            Agent(id="agent-2", domain_id="dom-2", affiliation_ids=frozenset({"org-2"}), birth_year=1980),
            Agent(id="agent-3", domain_id="dom-3", affiliation_ids=frozenset({"org-3"}), birth_year=1990),
        )
    )


@pytest.fixture
def cycle_plan() -> AllocationPlan:
    """agent-1 -> agent-2 -> agent-3 -> agent-1, full weight each."""
    return AllocationPlan(
        {
            "agent-1": {"agent-2": 1.0},
            "agent-2": {"agent-3": 1.0},
            "agent-3": {"agent-1": 1.0},
        }
    )


@pytest.fixture
def funnel_plan() -> AllocationPlan:
    """agent-1 and agent-2 both fund agent-3; agent-3 funds agent-1."""
    return AllocationPlan(
        {
            "agent-1": {"agent-3": 1.0},
            "agent-2": {"agent-3": 1.0},
            "agent-3": {"agent-1": 1.0},
        }
    )


@pytest.fixture
def half() -> np.ndarray:
    return np.full(3, 0.5)


@pytest.fixture
def ones() -> np.ndarray:
    return np.ones(3)


def random_instance(rng: np.random.Generator, n: int, out_degree: int = 4):
    """Random community + valid sparse plan + heterogeneous fractions + base.

    Returns (community, plan, fractions, base). Used for property checks.
    """
    agents = tuple(Agent(id=f"agent-{i:05d}", merit=float(rng.lognormal())) for i in range(n))
    community = Community(agents)
    rows = {}
    for i in range(n):
        others = [j for j in range(n) if j != i]
        k = min(out_degree, len(others))
        targets = rng.choice(others, size=k, replace=False)
        raw = rng.random(k) + 0.1
        raw /= raw.sum()
        rows[agents[i].id] = {agents[j].id: float(w) for j, w in zip(targets, raw)}
    plan = AllocationPlan(rows)
    fractions = rng.uniform(0.0, 0.9, size=n)
    base = rng.uniform(0.5, 2.0, size=n)
    return community, plan, fractions, base
