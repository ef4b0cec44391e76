"""Core allocation mechanism: base grants, donation stepping, fixed-point solve.

The funding recurrence is T' = base + W^T diag(f) T, where W holds the sparse
row-stochastic donation weights, f the per-agent mandatory donation fractions
and T the incoming totals of the previous round. Because every row of W sums
to 1 and max f < 1, the update is a contraction in L1 with factor max f, so
iterating from T = base converges geometrically to the unique stationary
vector T* = (I - W^T diag(f))^-1 base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConvergenceError, SizeGuardError, ValidationError
from .population import Community

ROW_SUM_TOL = 1e-12
DENSE_SOLVE_MAX_N = 5000


def normalize_row(weights: Mapping[str, float]) -> dict[str, float]:
    """Scale a weight row to sum to 1; uses fsum so large rows stay within
    the 1e-12 row-sum invariant."""
    total = math.fsum(weights.values())
    if total <= 0.0:
        raise ValidationError("cannot normalize a row with non-positive total weight")
    return {r: w / total for r, w in weights.items()}


class AllocationPlan:
    """Sparse row-stochastic donation weights: donor id -> {recipient id: weight}.

    Invariants (enforced on construction): every weight is > 0, no donor
    allocates to itself, and each row sums to 1 within 1e-12. Treat instances
    as immutable.
    """

    __slots__ = ("_rows",)

    def __init__(self, rows: Mapping[str, Mapping[str, float]], *, validate: bool = True):
        clean: dict[str, dict[str, float]] = {}
        for donor, row in rows.items():
            clean[donor] = {r: float(w) for r, w in row.items()}
        if validate:
            for donor, row in clean.items():
                if not row:
                    raise ValidationError(f"donor {donor!r} has an empty allocation row")
                if donor in row:
                    raise ValidationError(f"donor {donor!r} allocates to itself")
                for r, w in row.items():
                    if not (w > 0.0):
                        raise ValidationError(
                            f"donor {donor!r}: weight on {r!r} must be > 0, got {w}"
                        )
                total = math.fsum(row.values())
                if abs(total - 1.0) > ROW_SUM_TOL:
                    raise ValidationError(
                        f"donor {donor!r}: row sums to {total!r}, expected 1 within {ROW_SUM_TOL}"
                    )
        self._rows = clean

    @property
    def rows(self) -> Mapping[str, Mapping[str, float]]:
        return self._rows

    def donors(self) -> Iterable[str]:
        return self._rows.keys()

    def row(self, donor: str) -> Mapping[str, float]:
        return self._rows[donor]

    def __contains__(self, donor: str) -> bool:
        return donor in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AllocationPlan):
            return NotImplemented
        return self._rows == other._rows

    def to_arrays(self, pos: Mapping[str, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flatten to (donor_idx, recipient_idx, weight) arrays under `pos` ordering."""
        donors: list[int] = []
        recips: list[int] = []
        weights: list[float] = []
        for donor, row in self._rows.items():
            try:
                di = pos[donor]
            except KeyError:
                raise ValidationError(f"plan donor {donor!r} not present in community") from None
            for recipient, w in row.items():
                try:
                    ri = pos[recipient]
                except KeyError:
                    raise ValidationError(
                        f"plan recipient {recipient!r} not present in community"
                    ) from None
                donors.append(di)
                recips.append(ri)
                weights.append(w)
        return (
            np.asarray(donors, dtype=np.intp),
            np.asarray(recips, dtype=np.intp),
            np.asarray(weights, dtype=float),
        )


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=float).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FundingState:
    """Per-round funding snapshot, aligned to the community agent order."""

    round_index: int
    incoming_total: np.ndarray
    retained: np.ndarray
    donated_pool: np.ndarray
    base_vector: np.ndarray

    @classmethod
    def from_totals(
        cls, round_index: int, totals: np.ndarray, fractions: np.ndarray, base: np.ndarray
    ) -> "FundingState":
        totals = np.asarray(totals, dtype=float)
        if np.any(totals < 0):
            raise ValidationError("incoming totals must be nonnegative")
        return cls(
            round_index=int(round_index),
            incoming_total=_freeze(totals),
            retained=_freeze((1.0 - fractions) * totals),
            donated_pool=_freeze(fractions * totals),
            base_vector=_freeze(base),
        )


@dataclass(frozen=True)
class FixedPointResult:
    """Outcome of iterating the donation recurrence to stationarity."""

    totals: np.ndarray
    retained: np.ndarray
    iterations: int
    residual_history: tuple[float, ...]
    converged: bool

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else 0.0


def base_vector(
    budget: float,
    community: Community,
    public_fraction: float = 0.0,
    public_pref: np.ndarray | Mapping[str, float] | None = None,
) -> np.ndarray:
    """Per-agent base grants: equal split of (1-p)*B plus p*B by public preference.

    Super-nodes get no base share. `public_pref` must be nonnegative, live on
    scientists only and sum to 1; None means the uniform preference (a no-op).
    """
    if not (budget > 0):
        raise ValidationError(f"budget must be > 0, got {budget}")
    if not (0.0 <= public_fraction <= 1.0):
        raise ValidationError(f"public_fraction must be in [0, 1], got {public_fraction}")
    n = len(community)
    mask = community.scientist_mask
    n_sci = int(mask.sum())
    if n_sci == 0:
        raise ValidationError("community contains no scientists to fund")

    q = np.zeros(n, dtype=float)
    if public_pref is None:
        q[mask] = 1.0 / n_sci
    elif isinstance(public_pref, Mapping):
        for aid, w in public_pref.items():
            if aid not in community.pos:
                raise ValidationError(f"public preference names unknown agent {aid!r}")
            q[community.pos[aid]] = float(w)
    else:
        q = np.asarray(public_pref, dtype=float)
        if q.shape != (n,):
            raise ValidationError(f"public preference must have length {n}")
    if np.any(q < 0):
        raise ValidationError("public preference weights must be nonnegative")
    if np.any(q[~mask] != 0):
        raise ValidationError("public preference must put no mass on super-nodes")
    total_q = float(q.sum())
    if abs(total_q - 1.0) > 1e-9:
        raise ValidationError(f"public preference sums to {total_q!r}, expected 1 within 1e-9")

    beta = np.zeros(n, dtype=float)
    beta[mask] = (1.0 - public_fraction) * budget / n_sci
    if public_fraction > 0:
        beta += public_fraction * budget * q
    return beta


def _prepare(
    plan: AllocationPlan,
    fractions: np.ndarray,
    base: np.ndarray,
    community: Community,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    n = len(community)
    fractions = np.asarray(fractions, dtype=float)
    base = np.asarray(base, dtype=float)
    if fractions.shape != (n,) or base.shape != (n,):
        raise ValidationError("fractions and base vectors must match the community size")
    if np.any(fractions < 0) or float(fractions.max(initial=0.0)) >= 1.0:
        raise ValidationError("donation fractions must satisfy 0 <= f < 1")
    if np.any(base < 0):
        raise ValidationError("base vector entries must be nonnegative")
    budget = float(base.sum())
    if budget <= 0:
        raise ValidationError("total base funding must be positive")
    obligated = {community.ids[i] for i in np.flatnonzero(fractions > 0)}
    missing = sorted(obligated - set(plan.donors()))
    if missing:
        raise ValidationError(
            "agents with a positive donation fraction lack an allocation row: "
            + ", ".join(repr(m) for m in missing[:5])
            + ("..." if len(missing) > 5 else "")
        )
    donor_idx, recip_idx, weights = plan.to_arrays(community.pos)
    # Per-edge donated share of the donor's incoming total; drops f=0 rows.
    edge_scale = weights * fractions[donor_idx]
    return donor_idx, recip_idx, edge_scale, budget


def donation_step(
    prev: FundingState,
    plan: AllocationPlan,
    fractions: np.ndarray,
    base: np.ndarray,
    community: Community,
) -> FundingState:
    """Advance one funding round: T' = base + W^T diag(f) T_prev."""
    donor_idx, recip_idx, edge_scale, _ = _prepare(plan, fractions, base, community)
    totals_prev = np.asarray(prev.incoming_total, dtype=float)
    if totals_prev.shape != (len(community),):
        raise ValidationError("previous state does not match the community size")
    if np.any(totals_prev < 0):
        raise ValidationError("previous incoming totals must be nonnegative")
    received = np.bincount(recip_idx, weights=edge_scale * totals_prev[donor_idx], minlength=len(community))
    return FundingState.from_totals(prev.round_index + 1, base + received, np.asarray(fractions, float), base)


def run_fixed_point(
    plan: AllocationPlan,
    fractions: np.ndarray,
    base: np.ndarray,
    community: Community,
    tolerance: float = 1e-9,
    max_iter: int = 100_000,
) -> FixedPointResult:
    """Iterate the donation recurrence from T = base until the budget-normalized
    L1 change drops to `tolerance` or `max_iter` steps elapse.

    Never raises on non-convergence; inspect `converged` on the result.
    """
    if not (tolerance > 0):
        raise ValidationError(f"tolerance must be > 0, got {tolerance}")
    if max_iter < 1:
        raise ValidationError(f"max_iter must be >= 1, got {max_iter}")
    donor_idx, recip_idx, edge_scale, budget = _prepare(plan, fractions, base, community)
    n = len(community)
    base = np.asarray(base, dtype=float)
    fractions = np.asarray(fractions, dtype=float)

    totals = base.copy()
    residuals: list[float] = []
    converged = False
    for _ in range(max_iter):
        nxt = base + np.bincount(recip_idx, weights=edge_scale * totals[donor_idx], minlength=n)
        residual = float(np.abs(nxt - totals).sum()) / budget
        residuals.append(residual)
        totals = nxt
        if residual <= tolerance:
            converged = True
            break

    return FixedPointResult(
        totals=_freeze(totals),
        retained=_freeze((1.0 - fractions) * totals),
        iterations=len(residuals),
        residual_history=tuple(residuals),
        converged=converged,
    )


def closed_form_totals(
    plan: AllocationPlan,
    fractions: np.ndarray,
    base: np.ndarray,
    community: Community,
) -> np.ndarray:
    """Exact stationary totals via a dense solve of (I - W^T diag(f)) T = base.

    Intended as an independent cross-check of `run_fixed_point`; guarded to
    small populations because the system matrix is materialized densely.
    """
    n = len(community)
    if n > DENSE_SOLVE_MAX_N:
        raise SizeGuardError(
            f"dense solve limited to {DENSE_SOLVE_MAX_N} agents (got {n}); use run_fixed_point"
        )
    donor_idx, recip_idx, edge_scale, _ = _prepare(plan, fractions, base, community)
    system = np.eye(n)
    np.subtract.at(system, (recip_idx, donor_idx), edge_scale)
    return np.linalg.solve(system, np.asarray(base, dtype=float))


def retained(totals: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Funds kept for research: (1 - f) * T, elementwise."""
    totals = np.asarray(totals, dtype=float)
    fractions = np.asarray(fractions, dtype=float)
    if totals.shape != fractions.shape:
        raise ValidationError("totals and fractions must have matching shapes")
    if np.any(fractions < 0) or np.any(fractions >= 1):
        raise ValidationError("donation fractions must satisfy 0 <= f < 1")
    return (1.0 - fractions) * totals


def transfer_amounts(
    plan: AllocationPlan,
    fractions: np.ndarray,
    totals: np.ndarray,
    community: Community,
) -> list[tuple[str, str, float]]:
    """Realized (donor, recipient, amount) transfers for given incoming totals.

    amount = w_ij * f_i * T_i; zero-amount edges are omitted.
    """
    fractions = np.asarray(fractions, dtype=float)
    totals = np.asarray(totals, dtype=float)
    out: list[tuple[str, str, float]] = []
    for donor in sorted(plan.donors()):
        di = community.pos[donor]
        pool = float(fractions[di] * totals[di])
        if pool <= 0.0:
            continue
        for recipient in sorted(plan.row(donor)):
            amount = plan.row(donor)[recipient] * pool
            if amount > 0.0:
                out.append((donor, recipient, amount))
    return out


@dataclass(frozen=True)
class TwoPhaseOutcome:
    """Both halves of a publish-then-revise round."""

    interim: FixedPointResult
    phase2_plan: AllocationPlan
    final: FixedPointResult


def two_phase_round(
    phase1_plan: AllocationPlan,
    revise: Callable[[np.ndarray], AllocationPlan],
    fractions: np.ndarray,
    base: np.ndarray,
    community: Community,
    tolerance: float = 1e-9,
    max_iter: int = 100_000,
) -> TwoPhaseOutcome:
    """Run a first donation round to stationarity, publish its totals to the
    `revise` callback, then run the revised plan to stationarity.

    `revise` receives the interim totals (aligned to community order) and must
    return the phase-2 plan; returning the same plan reproduces the interim
    result exactly.
    """
    interim = run_fixed_point(phase1_plan, fractions, base, community, tolerance, max_iter)
    if not interim.converged:
        raise ConvergenceError(
            f"phase 1 failed to converge within {max_iter} iterations "
            f"(residual {interim.final_residual:.3e})"
        )
    phase2_plan = revise(interim.totals)
    final = run_fixed_point(phase2_plan, fractions, base, community, tolerance, max_iter)
    if not final.converged:
        raise ConvergenceError(
            f"phase 2 failed to converge within {max_iter} iterations "
            f"(residual {final.final_residual:.3e})"
        )
    return TwoPhaseOutcome(interim=interim, phase2_plan=phase2_plan, final=final)
