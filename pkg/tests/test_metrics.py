import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sofasim import (
    Agent,
    Community,
    UndefinedMetricError,
    ValidationError,
    build_metrics_report,
    cost_model,
    gini,
    lorenz,
    per_group_shares,
    top_share,
)


def gini_pairwise(x) -> float:
    """Independent oracle: mean absolute difference formula sum|xi-xj| / (2 n^2 mu)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    mu = x.mean()
    diff = np.abs(x[:, None] - x[None, :]).sum()
    return float(diff / (2 * n * n * mu))


def test_gini_equal_is_exactly_zero():
    assert gini(np.full(7, 3.5)) == 0.0


def test_gini_single_winner():
    assert gini(np.array([0.0, 0.0, 0.0, 1.0])) == pytest.approx(0.75, abs=1e-15)


def test_gini_funnel_retained_values():
    x = np.array([7 / 6, 0.5, 4 / 3])
    assert gini(x) == pytest.approx(gini_pairwise(x), abs=1e-12)
    assert gini(x) == pytest.approx(5 / 27, abs=1e-12)


def test_gini_errors():
    with pytest.raises(UndefinedMetricError):
        gini(np.zeros(4))
    with pytest.raises(ValidationError):
        gini(np.array([1.0, -0.5]))
    with pytest.raises(ValidationError):
        gini(np.array([]))


@given(
    arrays(
        float,
        st.integers(min_value=1, max_value=100),
        elements=st.floats(min_value=0.0, max_value=1e6, allow_nan=False),
    ).filter(lambda x: x.sum() > 1e-9),
    st.floats(min_value=1e-3, max_value=1e3),
)
@settings(max_examples=80, deadline=None)
def test_gini_scale_invariant_and_matches_pairwise_oracle(x, c):
    g = gini(x)
    assert abs(gini(c * x) - g) <= 1e-12
    assert abs(g - gini_pairwise(x)) <= 1e-12
    n = x.size
    assert -1e-15 <= g <= (n - 1) / n + 1e-15


def test_lorenz_shape_and_extremes():
    points = lorenz(np.array([0.0, 0.0, 0.0, 1.0]))
    assert points[0] == (0.0, 0.0)
    assert points[-1] == (1.0, 1.0)
    assert (0.75, 0.0) in points
    shares = [s for _, s in points]
    assert all(b >= a for a, b in zip(shares, shares[1:]))


def test_lorenz_is_convex():
    rng = np.random.default_rng(5)
    x = rng.lognormal(size=50)
    shares = [s for _, s in lorenz(x)]
    second = [shares[i + 1] - 2 * shares[i] + shares[i - 1] for i in range(1, len(shares) - 1)]
    assert all(d >= -1e-12 for d in second)


def test_top_share_equal_distribution():
    assert top_share(np.full(100, 2.0), 10) == pytest.approx(0.10, abs=1e-12)
    assert top_share(np.full(100, 2.0), 100) == 1.0


def test_top_share_rounds_population_up():
    # top 10% of 25 agents is ceil(2.5) = 3 agents
    x = np.arange(25, dtype=float)
    assert top_share(x, 10) == pytest.approx((24 + 23 + 22) / x.sum())


def test_per_group_shares_on_funnel_retained():
    community = Community(
        (
            Agent(id="agent-1"),
            Agent(id="agent-2"),
            Agent(id="agent-3", group_tags=frozenset({"winners"})),
        )
    )
    shares = per_group_shares(np.array([7 / 6, 0.5, 4 / 3]), community)
    assert shares["winners"] == pytest.approx(4 / 9, abs=1e-12)


def test_metrics_report_assembly():
    community = Community((Agent(id="a"), Agent(id="b"), Agent(id="s", kind="super_node", merit=0.0)))
    report = build_metrics_report(np.array([1.0, 3.0, 0.0]), community, budget=4.0,
                                  convergence={"iterations": 5, "final_residual": 1e-10})
    assert report.gini == pytest.approx(gini_pairwise(np.array([1.0, 3.0, 0.0])), abs=1e-12)
    assert report.baseline_equal_split == (2.0, 2.0, 0.0)
    assert report.convergence["iterations"] == 5
    doc = report.to_json_dict()
    assert doc["top_shares"]["10.0"] == report.top_shares[10.0]


def test_cost_model_grant_office_figures():
    # each application costs more to prepare than a flat starter grant would pay out
    report = cost_model(
        n_applications=1000,
        cost_per_application=40_000.0,
        funds_distributed=5.5e9,
        time_cost_unsuccessful=1.4e9,
        baseline_grant=30_000.0,
    )
    assert report.application_cost_exceeds_baseline is True
    assert report.total_application_cost == pytest.approx(4.0e7)
    assert report.overhead_ratio == pytest.approx(1.4 / 5.5, abs=1e-12)


def test_cost_model_degenerate_cases():
    assert cost_model(0, 40_000.0, 1.0, 0.0).total_application_cost == 0.0
    assert cost_model(10, 0.0, 0.0, 0.0).overhead_ratio == 0.0
    with pytest.raises(UndefinedMetricError):
        cost_model(1, 1.0, 0.0, 5.0)
    with pytest.raises(ValidationError):
        cost_model(-1, 1.0, 1.0, 0.0)
