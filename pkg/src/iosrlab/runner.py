"""Execute manifests and write results.

Outputs are line-delimited records (stream-appendable during long runs)
plus a flat CSV summary regenerable byte-for-byte from the record stream.
Every file embeds the manifest hash. The ablation runner repeats one
manifest across named toggle rows, varying nothing else.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import protocol
from .manifest import RunManifest
from .metrics import MetricReport

# Toggle rows mirroring the component ablation: the all-prototype softmax
# baseline, then cumulative additions, then rectification-only variants.
ABLATION_MATRIX: tuple[tuple[str, dict], ...] = (
    ("softmax_all", {"use_softmax_all": True}),
    ("with_distill", {"use_distill": True}),
    ("with_virtual_ce", {"use_distill": True, "use_virtual_ce": True}),
    ("vii_without_pnbr", {"use_distill": True, "use_virtual_ce": True, "use_vii": True}),
    ("vii_with_pnbr", {"use_distill": True, "use_virtual_ce": True, "use_vii": True, "use_pnbr": True}),
    ("with_onbr", {"use_distill": True, "use_onbr": True}),
    (
        "full",
        {
            "use_distill": True,
            "use_virtual_ce": True,
            "use_vii": True,
            "use_pnbr": True,
            "use_onbr": True,
        },
    ),
)

_ALL_TOGGLES = ("use_softmax_all", "use_virtual_ce", "use_vii", "use_pnbr", "use_onbr", "use_distill")

METRIC_COLUMNS = ("acc", "auroc", "oscr")


@dataclass
class RunResult:
    manifest: RunManifest
    report: MetricReport
    state: protocol.RunState
    out_dir: Path | None = None
    records: list[dict] = field(default_factory=list)


def _fmt(value) -> str:
    return "" if value is None else f"{value:.10g}"


def summary_from_records(records: list[dict], manifest_hash: str) -> str:
    """Flat CSV: one row per metric with per-task values, Avg and Last."""
    tasks = sorted({r["task"] for r in records})
    lines = [f"# manifest_hash={manifest_hash}"]
    lines.append("metric," + ",".join(f"task{t}" for t in tasks) + ",avg,last")
    by_task = {r["task"]: r for r in records}
    for metric in METRIC_COLUMNS:
        values = [by_task[t].get(metric) for t in tasks]
        present = [v for v in values if v is not None]
        avg = sum(present) / len(present) if present else None
        last = present[-1] if present else None
        lines.append(metric + "," + ",".join(_fmt(v) for v in values) + f",{_fmt(avg)},{_fmt(last)}")
    return "\n".join(lines) + "\n"


def _feature_dump_csv(dump: dict) -> str:
    d = dump["features"].shape[1]
    header = "id,label,known," + ",".join(f"f{i}" for i in range(d))
    lines = [header]
    for i, (label, known, row) in enumerate(zip(dump["labels"], dump["known"], dump["features"])):
        lines.append(f"{i},{int(label)},{int(known)}," + ",".join(f"{v:.10g}" for v in row))
    return "\n".join(lines) + "\n"


def execute(manifest: RunManifest, out_dir: str | Path | None = None) -> RunResult:
    """Run the full task sequence of a manifest; write results when a
    directory is given. Mid-run failures flush partial records with a
    failure marker before re-raising."""
    out = Path(out_dir) if out_dir else (Path(manifest.output_dir) if manifest.output_dir else None)
    mhash = manifest.hash()
    dataset = manifest.build_dataset()
    state = protocol.make_run_state(
        dataset,
        manifest.stream,
        manifest.backbone_for(dataset),
        manifest.optimizer,
        manifest.loss,
        memory_cap=manifest.memory_cap,
        bank_seed=manifest.bank_seed,
        prototype_count=manifest.prototype_count,
        train_seed=manifest.train_seed,
        score_rule=manifest.score_rule,
    )
    result = RunResult(manifest=manifest, report=state.report, state=state, out_dir=out)

    records_fh = losses_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest.raw, indent=2, sort_keys=True) + "\n")
        records_fh = open(out / "records.jsonl", "w")
        losses_fh = open(out / "losses.jsonl", "w")

    flushed_steps = 0
    try:
        for t in range(1, state.stream.length + 1):
            protocol.train_task(state, t)
            row = protocol.evaluate_task(state, t, dump_features=manifest.dump_features)
            dump = row.pop("feature_dump", None)
            record = {"manifest_hash": mhash, **row}
            result.records.append(record)
            if records_fh:
                records_fh.write(json.dumps(record, sort_keys=True) + "\n")
                records_fh.flush()
                for step_record in state.loss_records[flushed_steps:]:
                    losses_fh.write(json.dumps({"manifest_hash": mhash, **step_record}) + "\n")
                flushed_steps = len(state.loss_records)
                losses_fh.flush()
                if dump is not None:
                    (out / f"features_task{t}.csv").write_text(_feature_dump_csv(dump))
    except Exception as exc:
        if out is not None:
            (out / "run.json").write_text(
                json.dumps({"manifest_hash": mhash, "status": "failed", "error": str(exc)}, indent=2) + "\n"
            )
        raise
    finally:
        if records_fh:
            records_fh.close()
            losses_fh.close()

    if out is not None:
        (out / "summary.csv").write_text(summary_from_records(result.records, mhash))
        (out / "run.json").write_text(
            json.dumps({"manifest_hash": mhash, "status": "ok", "tasks": state.stream.length}, indent=2) + "\n"
        )
    return result


def load_matrix(path) -> tuple[tuple[str, dict], ...]:
    rows = json.loads(Path(path).read_text())
    out = []
    for entry in rows:
        name, toggles = entry["name"], entry["toggles"]
        unknown = set(toggles) - set(_ALL_TOGGLES)
        if unknown:
            raise ValueError(f"matrix row {name!r} sets unknown toggles {sorted(unknown)}")
        out.append((name, toggles))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ValueError("matrix row names must be unique")
    return tuple(out)


def comparison_from_results(results: dict[str, RunResult], manifest_hash: str) -> str:
    """Rows x per-task OSCR plus the mean over tasks, one line per row."""
    any_result = next(iter(results.values()))
    tasks = [r["task"] for r in any_result.records]
    lines = [f"# manifest_hash={manifest_hash}"]
    lines.append("row," + ",".join(f"task{t}" for t in tasks) + ",average")
    for name, result in results.items():
        values = [r.get("oscr") for r in result.records]
        present = [v for v in values if v is not None]
        avg = sum(present) / len(present) if present else None
        lines.append(name + "," + ",".join(_fmt(v) for v in values) + f",{_fmt(avg)}")
    return "\n".join(lines) + "\n"


def ablate(manifest: RunManifest, matrix=ABLATION_MATRIX, out_dir: str | Path | None = None) -> dict[str, RunResult]:
    """One run per toggle row; everything but the named toggles is shared."""
    results: dict[str, RunResult] = {}
    base_hash = manifest.hash()
    out = Path(out_dir) if out_dir else (Path(manifest.output_dir) if manifest.output_dir else None)
    for name, toggles in matrix:
        row_manifest = manifest.with_loss(**{t: toggles.get(t, False) for t in _ALL_TOGGLES})
        row_out = out / "rows" / name if out is not None else None
        results[name] = execute(row_manifest, row_out)
    if out is not None:
        (out / "comparison.csv").write_text(comparison_from_results(results, base_hash))
    return results
