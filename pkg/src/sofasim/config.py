"""Scenario configuration: JSON schema, defaults and full-pass validation.

Validation collects every problem it can find (with a JSON-pointer path per
issue) instead of stopping at the first one.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigurationError
from .integrity import CartelThresholds, CoiRules
from .policy import PolicyConfig
from .population import CommunitySpec
from .simulation import MODES, ScenarioConfig, Strategy, StrategyAssignment

CONFIG_SCHEMA_VERSION = 1


def _get_number(doc: Mapping, key: str, pointer: str, issues: list, default=None, required=False):
    if key not in doc:
        if required:
            issues.append((f"{pointer}/{key}", "required field is missing"))
        return default
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        issues.append((f"{pointer}/{key}", f"expected a number, got {type(value).__name__}"))
        return default
    return value


def _parse_community(doc: Mapping, issues: list) -> tuple[CommunitySpec | None, str | None]:
    section = doc.get("community")
    if not isinstance(section, Mapping):
        issues.append(("/community", "required object with 'generate' or 'file'"))
        return None, None
    has_gen = "generate" in section
    has_file = "file" in section
    if has_gen == has_file:
        issues.append(("/community", "exactly one of 'generate' or 'file' is required"))
        return None, None
    if has_file:
        path = section["file"]
        if not isinstance(path, str) or not path:
            issues.append(("/community/file", "must be a non-empty path string"))
            return None, None
        return None, path
    gen = section["generate"]
    if not isinstance(gen, Mapping):
        issues.append(("/community/generate", "must be an object"))
        return None, None
    try:
        spec = CommunitySpec(
            n_agents=int(gen.get("n_agents", 0)),
            n_affiliations=int(gen.get("n_affiliations", 5)),
            n_domains=int(gen.get("n_domains", 1)),
            group_tag_proportions=gen.get("group_tag_proportions", {}),
            coauthor_mean_degree=float(gen.get("coauthor_mean_degree", 0.0)),
            merit_mu=float(gen.get("merit_mu", 0.0)),
            merit_sigma=float(gen.get("merit_sigma", 1.0)),
            intra_domain_bias=float(gen.get("intra_domain_bias", 0.8)),
            coauthor_year_range=tuple(gen.get("coauthor_year_range", (2015, 2024))),
            birth_year_range=tuple(gen.get("birth_year_range", (1955, 2000))),
        )
        return spec, None
    except ConfigurationError as exc:
        issues.extend((f"/community/generate{p}", m) for p, m in exc.issues)
    except (TypeError, ValueError) as exc:
        issues.append(("/community/generate", str(exc)))
    return None, None


def _parse_policy(doc: Mapping, issues: list) -> PolicyConfig | None:
    section = doc.get("policy")
    if not isinstance(section, Mapping):
        issues.append(("/policy", "required object (must set total_budget)"))
        return None
    budget = _get_number(section, "total_budget", "/policy", issues, required=True)
    coi = section.get("coi_rules", {})
    cartel = section.get("cartel_thresholds", {})
    if not isinstance(coi, Mapping):
        issues.append(("/policy/coi_rules", "must be an object"))
        coi = {}
    if not isinstance(cartel, Mapping):
        issues.append(("/policy/cartel_thresholds", "must be an object"))
        cartel = {}
    if budget is None:
        return None
    try:
        return PolicyConfig(
            total_budget=float(budget),
            default_fraction=float(_get_number(section, "default_fraction", "/policy", issues, 0.5)),
            fraction_overrides={
                str(k): float(v) for k, v in section.get("fraction_overrides", {}).items()
            },
            group_multipliers={
                str(k): float(v) for k, v in section.get("group_multipliers", {}).items()
            },
            public_fraction=float(_get_number(section, "public_fraction", "/policy", issues, 0.0)),
            public_pref=section.get("public_pref", "uniform"),
            tolerance=float(_get_number(section, "tolerance", "/policy", issues, 1e-9)),
            max_iter=int(_get_number(section, "max_iter", "/policy", issues, 100_000)),
            evaluation_year=int(_get_number(section, "evaluation_year", "/policy", issues, 2024)),
            coi_rules=CoiRules(
                coauthor_window_years=int(coi.get("coauthor_window_years", 5)),
                shared_affiliation=bool(coi.get("shared_affiliation", True)),
            ),
            cartel_thresholds=CartelThresholds(
                pair_reciprocity=float(cartel.get("pair_reciprocity", 0.5)),
                internal_share=float(cartel.get("internal_share", 0.6)),
                max_group_size=int(cartel.get("max_group_size", 5)),
                min_rounds=int(cartel.get("min_rounds", 2)),
            ),
            penalty_policy=section.get("penalty_policy", "void_and_redistribute"),
            fallback_uniform_domain=bool(section.get("fallback_uniform_domain", True)),
        )
    except ConfigurationError as exc:
        issues.extend((f"/policy{p}", m) for p, m in exc.issues)
    except Exception as exc:  # noqa: BLE001 - surfaced as one config issue
        issues.append(("/policy", str(exc)))
    return None


def _parse_strategy_section(doc: Mapping, issues: list) -> StrategyAssignment | None:
    section = doc.get("strategy", {"kind": "uniform_random"})
    if not isinstance(section, Mapping):
        issues.append(("/strategy", "must be an object"))
        return None
    try:
        if "kind" in section:
            return StrategyAssignment(default=Strategy.from_dict(section))
        default = section.get("default")
        if default is None:
            issues.append(("/strategy/default", "required when using per-group assignment"))
            return None
        return StrategyAssignment(
            default=Strategy.from_dict(default, "/strategy/default"),
            per_tag={
                str(t): Strategy.from_dict(s, f"/strategy/per_tag/{t}")
                for t, s in section.get("per_tag", {}).items()
            },
            per_agent={
                str(a): Strategy.from_dict(s, f"/strategy/per_agent/{a}")
                for a, s in section.get("per_agent", {}).items()
            },
        )
    except ConfigurationError as exc:
        issues.extend(exc.issues)
    return None


def parse_config_dict(doc: Mapping) -> ScenarioConfig:
    """Validate a parsed JSON document into a ScenarioConfig, or raise
    ConfigurationError carrying every detected issue."""
    if not isinstance(doc, Mapping):
        raise ConfigurationError([("", "configuration must be a JSON object")])
    issues: list[tuple[str, str]] = []

    version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        issues.append(("/schema_version", f"unsupported version {version!r}"))

    seed = _get_number(doc, "seed", "", issues, 0)
    rounds = _get_number(doc, "rounds", "", issues, 1)
    mode = doc.get("mode", "fixed_point_per_round")
    if mode not in MODES:
        issues.append(("/mode", f"must be one of {MODES}"))

    spec, community_file = _parse_community(doc, issues)
    policy = _parse_policy(doc, issues)
    strategy = _parse_strategy_section(doc, issues)

    revision = None
    if "revision_strategy" in doc:
        try:
            revision = Strategy.from_dict(doc["revision_strategy"], "/revision_strategy")
        except ConfigurationError as exc:
            issues.extend(exc.issues)

    if rounds is not None and rounds < 1:
        issues.append(("/rounds", "must be >= 1"))

    if issues:
        raise ConfigurationError(issues)

    try:
        return ScenarioConfig(
            policy=policy,
            strategy=strategy,
            rounds=int(rounds),
            mode=mode,
            seed=int(seed),
            community_spec=spec,
            community_file=community_file,
            revision_strategy=revision,
        )
    except ConfigurationError as exc:
        raise ConfigurationError(exc.issues) from None


def parse_and_validate_config(path: str | Path) -> ScenarioConfig:
    """Load, parse and fully validate a scenario configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError([("", f"config file not found: {path}")])
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError([("", f"config is not valid JSON: {exc}")]) from None
    return parse_config_dict(doc)


def config_hash(config: ScenarioConfig) -> str:
    """Stable sha256 over the resolved configuration (key order independent)."""
    canonical = json.dumps(config.to_json_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
