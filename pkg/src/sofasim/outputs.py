"""Deterministic result serialization and run provenance.

All numeric CSV fields use fixed 9-decimal formatting; files are UTF-8 with
LF line endings and stable row order (round ascending, then id ascending),
so re-running an identical scenario reproduces the data files byte for byte.
The manifest records wall-clock timestamps, which are the one intentionally
non-reproducible field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock, Timeout

from . import __version__
from .errors import OutputLockError, ValidationError
from .integrity import DonationLedger, IntegrityReport
from .simulation import ScenarioResult, SweepResult

FUNDING_CSV = "funding_per_round.csv"
TRANSFERS_CSV = "transfers.csv"
METRICS_JSON = "metrics.json"
INTEGRITY_JSON = "integrity_report.json"
MANIFEST_JSON = "manifest.json"
LOCK_FILE = ".sofasim.lock"

FUNDING_HEADER = "round,agent_id,incoming_total,retained,donated"
TRANSFERS_HEADER = "round,donor_id,recipient_id,amount"


def format_amount(x: float) -> str:
    return f"{x:.9f}"


def _check_id(value: str) -> str:
    if any(c in value for c in ',"\n\r'):
        raise ValidationError(f"id {value!r} contains characters unsafe for CSV output")
    return value


def _json_text(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _write(path: Path, text: str) -> tuple[str, int]:
    data = text.encode("utf-8")
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest(), len(data)


@dataclass(frozen=True)
class RunManifest:
    """Provenance for one run: config identity, seed and output checksums."""

    config_hash: str
    seed: int
    tool_version: str
    started_at: str
    finished_at: str
    outputs: dict[str, dict]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "tool": {"name": "sofasim", "version": self.tool_version},
            "config_hash": self.config_hash,
            "seed": self.seed,
            "timing": {"started_at": self.started_at, "finished_at": self.finished_at},
            "outputs": self.outputs,
        }


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def funding_csv_text(result: ScenarioResult) -> str:
    lines = [FUNDING_HEADER]
    ids = [(_check_id(aid), i) for i, aid in enumerate(result.community.ids)]
    ids.sort()
    for state in result.history:
        for aid, i in ids:
            lines.append(
                f"{state.round_index},{aid},"
                f"{format_amount(state.incoming_total[i])},"
                f"{format_amount(state.retained[i])},"
                f"{format_amount(state.donated_pool[i])}"
            )
    return "\n".join(lines) + "\n"


def transfers_csv_text(ledger: DonationLedger) -> str:
    lines = [TRANSFERS_HEADER]
    records = sorted(ledger.records, key=lambda r: (r.round, r.donor_id, r.recipient_id))
    for r in records:
        lines.append(
            f"{r.round},{_check_id(r.donor_id)},{_check_id(r.recipient_id)},{format_amount(r.amount)}"
        )
    return "\n".join(lines) + "\n"


def integrity_json_dict(report: IntegrityReport) -> dict:
    return {
        "schema_version": 1,
        "conflicted_transfers": [
            {
                "round": r.round,
                "donor_id": r.donor_id,
                "recipient_id": r.recipient_id,
                "amount": r.amount,
            }
            for r in report.conflicted_transfers
        ],
        "cartel_flags": [
            {
                "members": sorted(f.members),
                "kind": f.kind,
                "score": f.score,
                "threshold": f.threshold,
                "rounds_observed": f.rounds_observed,
                "evidence": [
                    {
                        "round": e.round,
                        "donor_id": e.donor_id,
                        "recipient_id": e.recipient_id,
                        "amount": e.amount,
                    }
                    for e in f.evidence
                ],
            }
            for f in report.cartel_flags
        ],
        "cartel_scan": report.cartel_scan,
        "totals": dict(report.totals),
    }


def write_outputs(
    result: ScenarioResult,
    out_dir: str | Path,
    config_hash: str = "",
    started_at: str | None = None,
) -> RunManifest:
    """Emit the standard file set for a scenario result and return its manifest.

    The directory is guarded by a lock file; a second concurrent writer on the
    same directory raises OutputLockError.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(out / LOCK_FILE)
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise OutputLockError(f"output directory {out} is locked by another writer") from None
    try:
        started = started_at or _utcnow()
        checksums: dict[str, dict] = {}
        digest, size = _write(out / FUNDING_CSV, funding_csv_text(result))
        checksums[FUNDING_CSV] = {"sha256": digest, "bytes": size}
        digest, size = _write(out / TRANSFERS_CSV, transfers_csv_text(result.ledger))
        checksums[TRANSFERS_CSV] = {"sha256": digest, "bytes": size}
        metrics_doc = result.metrics.to_json_dict() if result.metrics is not None else {}
        digest, size = _write(out / METRICS_JSON, _json_text(metrics_doc))
        checksums[METRICS_JSON] = {"sha256": digest, "bytes": size}
        integrity_doc = (
            integrity_json_dict(result.integrity) if result.integrity is not None else {}
        )
        digest, size = _write(out / INTEGRITY_JSON, _json_text(integrity_doc))
        checksums[INTEGRITY_JSON] = {"sha256": digest, "bytes": size}

        manifest = RunManifest(
            config_hash=config_hash,
            seed=result.config.seed,
            tool_version=__version__,
            started_at=started,
            finished_at=_utcnow(),
            outputs=checksums,
        )
        _write(out / MANIFEST_JSON, _json_text(manifest.to_json_dict()))
        return manifest
    finally:
        lock.release()


def write_sweep_outputs(sweep: SweepResult, out_dir: str | Path) -> None:
    """Emit sweep.csv (fraction, gini) plus sweep.json with full per-point metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["fraction,gini"]
    points_doc = []
    for point in sweep.points:
        if point.metrics is not None:
            lines.append(f"{format_amount(point.fraction)},{format_amount(point.metrics.gini)}")
            points_doc.append(
                {"fraction": point.fraction, "metrics": point.metrics.to_json_dict()}
            )
        else:
            points_doc.append({"fraction": point.fraction, "error": point.error})
    _write(out / "sweep.csv", "\n".join(lines) + "\n")
    _write(out / "sweep.json", _json_text({"schema_version": 1, "points": points_doc}))


# -- readers for the audit / report surfaces -----------------------------------


def read_transfers_csv(path: str | Path) -> DonationLedger:
    """Parse a transfers.csv back into a ledger."""
    ledger = DonationLedger()
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRANSFERS_HEADER:
        raise ValidationError(f"{path}: expected header {TRANSFERS_HEADER!r}")
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValidationError(f"{path}:{ln}: expected 4 fields, got {len(parts)}")
        ledger.append(int(parts[0]), parts[1], parts[2], float(parts[3]))
    return ledger


def read_funding_csv(path: str | Path) -> dict[int, dict[str, tuple[float, float, float]]]:
    """Parse funding_per_round.csv into {round: {agent: (incoming, retained, donated)}}."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != FUNDING_HEADER:
        raise ValidationError(f"{path}: expected header {FUNDING_HEADER!r}")
    rounds: dict[int, dict[str, tuple[float, float, float]]] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValidationError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
        rounds.setdefault(int(parts[0]), {})[parts[1]] = (
            float(parts[2]),
            float(parts[3]),
            float(parts[4]),
        )
    return rounds
