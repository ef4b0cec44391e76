"""Acceptance suite: one test per release criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from sofasim import (
    Agent,
    AllocationPlan,
    CartelThresholds,
    CoiRules,
    Community,
    CommunitySpec,
    FundingState,
    PolicyConfig,
    PriorView,
    ScenarioConfig,
    Strategy,
    StrategyAssignment,
    attach_super_node,
    closed_form_totals,
    cost_model,
    detect_cartels,
    detect_conflicts,
    donation_step,
    generate_community,
    load_community,
    propose_plans,
    run_fixed_point,
    run_scenario,
    sweep,
)
from sofasim.cli import main as cli_main

from conftest import random_instance
from test_integrity import brute_force_group_flags, brute_force_pair_flags


@contextmanager
def criterion(number: int, name: str):
    try:
        yield
    except BaseException:
        print(f"[acceptance] {number:02d} {name}: FAIL")
        raise
    print(f"[acceptance] {number:02d} {name}: PASS")


# -- 1 -----------------------------------------------------------------------------


def test_criterion_01_worked_donation_example():
    with criterion(1, "worked donation example"):
        community = Community((Agent(id="agent-1"), Agent(id="agent-2"), Agent(id="agent-3")))
        plan = AllocationPlan(
            {
                "agent-1": {"agent-2": 1.0},
                "agent-2": {"agent-1": 1.0},
                "agent-3": {"agent-1": 1.0},
            }
        )
        fractions = np.full(3, 0.5)
        base = np.full(3, 50_000.0)
        prev = FundingState.from_totals(0, np.array([0.0, 150_000.0, 150_000.0]), fractions, base)
        state = donation_step(prev, plan, fractions, base, community)
        i = community.pos["agent-1"]
        assert state.incoming_total[i] == 200_000.0
        assert state.donated_pool[i] == 100_000.0
        assert state.retained[i] == 100_000.0


# -- 2 -----------------------------------------------------------------------------


def _conservation_scenario(index: int) -> tuple[ScenarioConfig, Community]:
    rng = np.random.default_rng(5000 + index)
    if index < 90:
        n = int(rng.integers(10, 200))
    elif index < 97:
        n = int(rng.integers(200, 2000))
    else:
        n = int(rng.integers(5000, 10_001))
    spec = CommunitySpec(
        n_agents=n,
        n_affiliations=max(4, n // 40),
        n_domains=int(rng.integers(1, 5)),
        coauthor_mean_degree=float(rng.uniform(0.0, 3.0)),
        group_tag_proportions={
            "career": {"early_career": 0.3},
            "gender": {"gender:F": 0.5},
        },
    )
    community = generate_community(spec, seed=index)
    if index % 3 == 0:
        community = attach_super_node(community, "shared-facility", "domain-00")

    kinds = ["uniform_random", "merit_proportional", "preferential"]
    default = Strategy(kind=kinds[index % 3], out_degree=10)
    per_tag = {}
    if index % 4 == 0 and n < 500:
        per_tag["gender:F"] = Strategy(kind="predicate", predicate="tag=gender:F")
    assignment = StrategyAssignment(default=default, per_tag=per_tag)

    public_fraction = 0.1 if index % 2 else 0.0
    public_pref = "uniform"
    if public_fraction > 0 and index % 4 == 1:
        favored = [a.id for a in community.agents if a.is_scientist][:2]
        public_pref = {aid: 1.0 / len(favored) for aid in favored}

    policy = PolicyConfig(
        total_budget=float(rng.uniform(1e5, 1e7)),
        default_fraction=float(rng.uniform(0.1, 0.9)),
        fraction_overrides={"early_career": float(rng.uniform(0.0, 0.5))},
        public_fraction=public_fraction,
        public_pref=public_pref,
        tolerance=1e-11,
        coi_rules=CoiRules(coauthor_window_years=5, shared_affiliation=(n < 3000)),
    )
    config = ScenarioConfig(
        policy=policy,
        strategy=assignment,
        rounds=1 + index % 3,
        mode="two_phase" if (index % 10 == 3 and n < 500) else "fixed_point_per_round",
        revision_strategy=Strategy(kind="preferential", out_degree=10),
        seed=index,
        community_spec=spec,
    )
    return config, community


def test_criterion_02_budget_conservation_across_random_scenarios():
    with criterion(2, "budget conservation over 100 random scenarios"):
        checked_rounds = 0
        for index in range(100):
            config, community = _conservation_scenario(index)
            result = run_scenario(config, community=community)
            assert result.completed, (index, result.failure_reason)
            budget = config.policy.total_budget
            for state in result.history:
                assert float(state.retained.sum()) == pytest.approx(
                    budget, abs=1e-9 * budget
                ), f"scenario {index}, round {state.round_index}"
                checked_rounds += 1
        assert checked_rounds >= 100


# -- 3 -----------------------------------------------------------------------------


def test_criterion_03_fixed_point_matches_dense_oracle():
    with criterion(3, "fixed point vs dense solve on 50 random instances"):
        rng = np.random.default_rng(40)
        for _ in range(50):
            n = int(rng.integers(3, 201))
            community, plan, fractions, base = random_instance(rng, n)
            budget = float(base.sum())
            exact = closed_form_totals(plan, fractions, base, community)
            iterated = run_fixed_point(plan, fractions, base, community, tolerance=1e-12)
            assert iterated.converged
            assert float(np.max(np.abs(iterated.totals - exact))) <= 1e-8 * budget


# -- 4 -----------------------------------------------------------------------------


def test_criterion_04_geometric_convergence():
    with criterion(4, "geometric convergence and iteration count"):
        trio = Community((Agent(id="agent-1"), Agent(id="agent-2"), Agent(id="agent-3")))
        cycle = AllocationPlan(
            {
                "agent-1": {"agent-2": 1.0},
                "agent-2": {"agent-3": 1.0},
                "agent-3": {"agent-1": 1.0},
            }
        )
        result = run_fixed_point(cycle, np.full(3, 0.5), np.ones(3), trio, tolerance=1e-6)
        assert result.converged
        assert 20 <= result.iterations <= 22
        history = result.residual_history
        for k in range(len(history) - 1):
            assert history[k + 1] / history[k] <= 0.5 + 0.01

        rng = np.random.default_rng(41)
        for _ in range(20):
            n = int(rng.integers(3, 80))
            community, plan, fractions, base = random_instance(rng, n)
            res = run_fixed_point(plan, fractions, base, community, tolerance=1e-12)
            bound = float(fractions.max()) + 0.01
            for k in range(len(res.residual_history) - 1):
                assert res.residual_history[k + 1] / res.residual_history[k] <= bound


# -- 5 -----------------------------------------------------------------------------


def test_criterion_05_egalitarian_limit_and_monotone_inequality():
    with criterion(5, "zero-fraction equality and gini monotone in the fraction"):
        spec = CommunitySpec(n_agents=20, n_affiliations=20, coauthor_mean_degree=0.0)
        for seed in range(20):
            config = ScenarioConfig(
                policy=PolicyConfig(total_budget=2e6, default_fraction=0.0, tolerance=1e-11),
                strategy=StrategyAssignment(default=Strategy(kind="preferential", out_degree=3)),
                rounds=2,
                mode="fixed_point_per_round",
                seed=seed,
                community_spec=spec,
            )
            zero_point = run_scenario(config)
            assert zero_point.metrics.gini == 0.0  # uniform base, nothing circulates
            grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
            result = sweep(config, grid)
            ginis = [p.metrics.gini for p in result.points]
            assert all(g is not None for g in ginis)
            assert all(
                later >= earlier - 1e-12 for earlier, later in zip(ginis, ginis[1:])
            ), (seed, ginis)


# -- 6 -----------------------------------------------------------------------------


def test_criterion_06_coi_enforcement(tmp_path):
    with criterion(6, "conflict-of-interest enforcement and audit exit code"):
        # exhaustive ledger audits across seeds
        for seed in range(5):
            spec = CommunitySpec(
                n_agents=40, n_affiliations=6, n_domains=2, coauthor_mean_degree=5.0
            )
            config = ScenarioConfig(
                policy=PolicyConfig(total_budget=4e6),
                strategy=StrategyAssignment(default=Strategy(kind="uniform_random", out_degree=8)),
                rounds=3,
                mode="fixed_point_per_round",
                seed=seed,
                community_spec=spec,
            )
            result = run_scenario(config)
            assert result.completed
            assert len(result.conflicts) > 0
            for record in result.ledger.records:
                assert not result.conflicts.conflicted(record.donor_id, record.recipient_id)
            assert result.integrity.conflicted_transfers == ()

        # audit subcommand: clean run exits 0, planted conflicted transfer exits 4
        config_doc = {
            "seed": 2,
            "rounds": 2,
            "community": {
                "generate": {
                    "n_agents": 25,
                    "n_affiliations": 5,
                    "n_domains": 2,
                    "coauthor_mean_degree": 3.0,
                }
            },
            "policy": {"total_budget": 250000.0},
            "strategy": {"kind": "uniform_random", "out_degree": 6},
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config_doc))
        out = tmp_path / "out"
        assert cli_main(["generate", "--config", str(config_path), "--out-dir", str(tmp_path)]) == 0
        assert cli_main(["run", "--config", str(config_path), "--out-dir", str(out)]) == 0
        community_path = tmp_path / "community.json"
        assert (
            cli_main(
                ["audit", "--transfers", str(out / "transfers.csv"), "--community",
                 str(community_path), "--config", str(config_path),
                 "--out-dir", str(tmp_path / "audit-clean")]
            )
            == 0
        )
        community = load_community(community_path)
        conflicts = detect_conflicts(community, CoiRules(), 2024)
        a, b, _ = conflicts.pairs()[0]
        planted = tmp_path / "planted.csv"
        planted.write_text((out / "transfers.csv").read_text() + f"1,{a},{b},9.000000000\n")
        assert (
            cli_main(
                ["audit", "--transfers", str(planted), "--community", str(community_path),
                 "--config", str(config_path), "--out-dir", str(tmp_path / "audit-planted")]
            )
            == 4
        )


# -- 7 -----------------------------------------------------------------------------


def test_criterion_07_cartel_detection_precision_recall_and_oracle():
    with criterion(7, "planted-cartel recovery and brute-force equivalence"):
        thresholds = CartelThresholds(
            pair_reciprocity=0.5, internal_share=0.6, max_group_size=4, min_rounds=2
        )
        # planted recovery: internal share 0.9 >= 0.6 + 0.2, background <= 0.4
        true_positives = 0
        for seed in range(50):
            rng = np.random.default_rng(9000 + seed)
            spec = CommunitySpec(n_agents=30, n_affiliations=30, coauthor_mean_degree=0.0)
            community = generate_community(spec, seed=seed)
            members = tuple(
                community.ids[i] for i in rng.choice(len(community), size=3, replace=False)
            )
            config = ScenarioConfig(
                policy=PolicyConfig(total_budget=3e6, cartel_thresholds=thresholds),
                strategy=StrategyAssignment(
                    default=Strategy(
                        kind="cartel",
                        members=members,
                        internal_weight=0.9,
                        out_degree=10,
                    )
                ),
                rounds=2,
                mode="fixed_point_per_round",
                seed=seed,
                community_spec=spec,
            )
            result = run_scenario(config, community=community)
            assert result.completed
            groups = [f.members for f in result.integrity.cartel_flags if f.kind == "group"]
            assert groups == [frozenset(members)], (seed, groups)  # precision = recall = 1
            true_positives += 1
        assert true_positives == 50

        # exact agreement with subset-enumeration oracles on small instances
        from test_integrity import random_small_ledger

        for seed in range(8):
            ledger = random_small_ledger(seed, n=30, rounds=3)
            flags = detect_cartels(ledger, thresholds)
            got_groups = {f.members for f in flags if f.kind == "group"}
            got_pairs = {f.members for f in flags if f.kind == "pair"}
            assert got_groups == set(brute_force_group_flags(ledger, thresholds))
            assert got_pairs == set(brute_force_pair_flags(ledger, thresholds))


# -- 8 -----------------------------------------------------------------------------


def test_criterion_08_bias_lever_raises_group_share():
    with criterion(8, "group multiplier raises the tagged share, budget conserved"):
        spec = CommunitySpec(
            n_agents=12,
            n_affiliations=12,
            coauthor_mean_degree=0.0,
            group_tag_proportions={"gender": {"gender:F": 0.5}},
        )
        checked = 0
        for seed in range(25):
            community = generate_community(spec, seed=seed)
            tagged = np.array(["gender:F" in a.group_tags for a in community.agents])
            if not (2 <= int(tagged.sum()) <= 10):
                continue
            shares = []
            for m in (0.5, 1.0, 2.0, 4.0):
                config = ScenarioConfig(
                    policy=PolicyConfig(
                        total_budget=1.2e6,
                        group_multipliers={"gender:F": m},
                        tolerance=1e-11,
                    ),
                    strategy=StrategyAssignment(
                        default=Strategy(kind="uniform_random", out_degree=11)
                    ),
                    rounds=1,
                    mode="fixed_point_per_round",
                    seed=seed,
                    community_spec=spec,
                )
                result = run_scenario(config, community=community)
                kept = result.final_state.retained
                assert float(kept.sum()) == pytest.approx(1.2e6, abs=1e-9 * 1.2e6)
                shares.append(float(kept[tagged].sum() / kept.sum()))
            assert all(b > a for a, b in zip(shares, shares[1:])), (seed, shares)
            checked += 1
            if checked == 20:
                break
        assert checked == 20


# -- 9 -----------------------------------------------------------------------------


def test_criterion_09_cost_model_reference_figures():
    with criterion(9, "overhead cost arithmetic"):
        nserc = cost_model(
            n_applications=1,
            cost_per_application=40_000.0,
            funds_distributed=0.0,
            time_cost_unsuccessful=0.0,
            baseline_grant=30_000.0,
        )
        assert nserc.application_cost_exceeds_baseline is True
        horizon = cost_model(
            n_applications=0,
            cost_per_application=0.0,
            funds_distributed=5.5e9,
            time_cost_unsuccessful=1.4e9,
        )
        assert abs(horizon.overhead_ratio - 1.4 / 5.5) <= 1e-12


# -- 10 ----------------------------------------------------------------------------


def test_criterion_10_determinism_and_scale(tmp_path):
    with criterion(10, "byte-identical reruns and 1e5-agent convergence under 5s"):
        config_doc = {
            "seed": 31,
            "rounds": 2,
            "community": {
                "generate": {
                    "n_agents": 30,
                    "n_affiliations": 6,
                    "n_domains": 2,
                    "coauthor_mean_degree": 2.0,
                }
            },
            "policy": {"total_budget": 3.0e6},
            "strategy": {"kind": "preferential", "out_degree": 5},
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config_doc))
        for d in ("a", "b"):
            assert cli_main(["run", "--config", str(config_path), "--out-dir", str(tmp_path / d)]) == 0
        for name in ("funding_per_round.csv", "transfers.csv", "metrics.json", "integrity_report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        ma.pop("timing"), mb.pop("timing")
        assert ma == mb

        # scale: 1e5 agents, out-degree 10, f = 0.5, tolerance 1e-6
        n = 100_000
        agents = tuple(Agent(id=f"agent-{i:06d}") for i in range(n))
        community = Community(agents)
        ids = community.ids
        rng = np.random.default_rng(99)
        offsets = rng.integers(1, n, size=(n, 10))
        rows = {}
        for i in range(n):
            row: dict[str, float] = {}
            for off in offsets[i]:
                rid = ids[(i + int(off)) % n]
                row[rid] = row.get(rid, 0.0) + 0.1
            rows[ids[i]] = row
        plan = AllocationPlan(rows)
        fractions = np.full(n, 0.5)
        base = np.full(n, 1.0)
        started = time.perf_counter()
        result = run_fixed_point(plan, fractions, base, community, tolerance=1e-6)
        elapsed = time.perf_counter() - started
        assert result.converged
        assert elapsed < 5.0, f"fixed point took {elapsed:.2f}s"
        # at tolerance eps, retained can sit max_f * eps * budget away from the budget
        assert float(result.retained.sum()) == pytest.approx(float(n), abs=1e-6 * n)
