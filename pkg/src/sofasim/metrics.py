"""Inequality, concentration, convergence and overhead-cost metrics.

Inequality metrics are computed on retained funds (what agents keep for
research), not on gross incoming totals. Ties are broken by agent id so
reports are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .population import Community

TOP_SHARE_PERCENTS = (1, 5, 10, 25)


def _checked(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ValidationError("metric input must be a non-empty 1-d vector")
    if np.any(x < 0):
        raise ValidationError("metric input must be nonnegative")
    return x


def gini(x) -> float:
    """Gini coefficient of a nonnegative vector, in [0, (N-1)/N].

    Uses the sorted rank formula sum_i (2i - N - 1) x_(i) / (N sum x).
    """
    x = _checked(x)
    total = float(x.sum())
    if total <= 0.0:
        raise UndefinedMetricError("gini undefined for an all-zero vector")
    xs = np.sort(x)
    n = xs.size
    ranks = 2.0 * np.arange(1, n + 1) - n - 1
    return float(ranks.dot(xs) / (n * total))


def lorenz(x) -> list[tuple[float, float]]:
    """Lorenz curve points (population share, funding share), from (0,0) to (1,1)."""
    x = _checked(x)
    total = float(x.sum())
    if total <= 0.0:
        raise UndefinedMetricError("lorenz curve undefined for an all-zero vector")
    xs = np.sort(x)
    n = xs.size
    cumulative = np.concatenate(([0.0], np.cumsum(xs) / total))
    cumulative[-1] = 1.0
    return [(i / n, float(cumulative[i])) for i in range(n + 1)]


def top_share(x, k_percent: float) -> float:
    """Share of the total held by the richest ceil(k% * N) entries."""
    x = _checked(x)
    if not (0 < k_percent <= 100):
        raise ValidationError(f"k_percent must be in (0, 100], got {k_percent}")
    total = float(x.sum())
    if total <= 0.0:
        raise UndefinedMetricError("top share undefined for an all-zero vector")
    k = math.ceil(k_percent * x.size / 100.0)
    xs = np.sort(x)
    return float(xs[-k:].sum() / total)


def per_group_shares(x, community: Community, tags: Sequence[str] | None = None) -> dict[str, float]:
    """Share of the total held by each tagged group; defaults to every tag present."""
    x = _checked(x)
    if x.size != len(community):
        raise ValidationError("vector length must match the community size")
    total = float(x.sum())
    if total <= 0.0:
        raise UndefinedMetricError("group shares undefined for an all-zero vector")
    if tags is None:
        tags = sorted({t for a in community.agents for t in a.group_tags})
    shares: dict[str, float] = {}
    for tag in tags:
        mask = np.array([tag in a.group_tags for a in community.agents], dtype=bool)
        shares[tag] = float(x[mask].sum() / total)
    return shares


@dataclass(frozen=True)
class MetricsReport:
    """Inequality and convergence summary for one scenario outcome."""

    gini: float
    lorenz: tuple[tuple[float, float], ...]
    top_shares: dict[float, float]
    per_group_shares: dict[str, float]
    convergence: dict
    baseline_equal_split: tuple[float, ...]

    def to_json_dict(self) -> dict:
        return {
            "gini": self.gini,
            "lorenz": [[p, s] for p, s in self.lorenz],
            "top_shares": {str(k): v for k, v in self.top_shares.items()},
            "per_group_shares": dict(self.per_group_shares),
            "convergence": dict(self.convergence),
            "baseline_equal_split": list(self.baseline_equal_split),
        }


def build_metrics_report(
    retained: np.ndarray,
    community: Community,
    budget: float,
    convergence: Mapping | None = None,
) -> MetricsReport:
    """Assemble the standard report from a retained-funds vector."""
    retained = _checked(retained)
    n_sci = community.n_scientists
    if n_sci == 0:
        raise ValidationError("community contains no scientists")
    equal = budget / n_sci
    baseline = tuple(equal if a.is_scientist else 0.0 for a in community.agents)
    return MetricsReport(
        gini=gini(retained),
        lorenz=tuple(lorenz(retained)),
        top_shares={float(k): top_share(retained, k) for k in TOP_SHARE_PERCENTS},
        per_group_shares=per_group_shares(retained, community),
        convergence=dict(convergence or {}),
        baseline_equal_split=baseline,
    )


@dataclass(frozen=True)
class CostReport:
    """Application-overhead arithmetic for a proposal-based funding system."""

    n_applications: float
    cost_per_application: float
    total_application_cost: float
    funds_distributed: float
    time_cost_unsuccessful: float
    overhead_ratio: float
    baseline_grant: float | None = None

    @property
    def application_cost_exceeds_baseline(self) -> bool | None:
        if self.baseline_grant is None:
            return None
        return self.cost_per_application > self.baseline_grant

    def to_json_dict(self) -> dict:
        return {
            "n_applications": self.n_applications,
            "cost_per_application": self.cost_per_application,
            "total_application_cost": self.total_application_cost,
            "funds_distributed": self.funds_distributed,
            "time_cost_unsuccessful": self.time_cost_unsuccessful,
            "overhead_ratio": self.overhead_ratio,
            "baseline_grant": self.baseline_grant,
            "application_cost_exceeds_baseline": self.application_cost_exceeds_baseline,
        }


def cost_model(
    n_applications: float,
    cost_per_application: float,
    funds_distributed: float,
    time_cost_unsuccessful: float,
    baseline_grant: float | None = None,
) -> CostReport:
    """Pure overhead calculator: total application cost and wasted-time ratio."""
    for name, value in (
        ("n_applications", n_applications),
        ("cost_per_application", cost_per_application),
        ("funds_distributed", funds_distributed),
        ("time_cost_unsuccessful", time_cost_unsuccessful),
    ):
        if value < 0:
            raise ValidationError(f"{name} must be nonnegative, got {value}")
    if funds_distributed == 0 and time_cost_unsuccessful > 0:
        raise UndefinedMetricError("overhead ratio undefined: nonzero time cost, zero funds distributed")
    overhead = 0.0 if time_cost_unsuccessful == 0 else time_cost_unsuccessful / funds_distributed
    return CostReport(
        n_applications=n_applications,
        cost_per_application=cost_per_application,
        total_application_cost=n_applications * cost_per_application,
        funds_distributed=funds_distributed,
        time_cost_unsuccessful=time_cost_unsuccessful,
        overhead_ratio=overhead,
        baseline_grant=baseline_grant,
    )
