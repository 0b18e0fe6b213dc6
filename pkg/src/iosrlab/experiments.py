"""Reference synthetic benchmarks and the experiments built on them.

Two fixed benchmark definitions: a 6-class / 2-task stream with held-out
unknowns for the open-space separability experiment, and a 4-task stream
for the component-ablation and forgetting experiments. Every sub-seed is
derived from one master seed so a single integer pins the whole run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifest import RunManifest, parse_manifest
from .runner import ABLATION_MATRIX, RunResult, ablate, execute

OPEN_SPACE_SEEDS = (0, 1, 2, 3, 4)
REFERENCE_SEEDS = (0, 1, 2, 3, 4)


def open_space_manifest(seed: int, softmax_all: bool = False) -> RunManifest:
    """6 Gaussian-sphere classes, two 2-class tasks, 2 reserved unknowns,
    8-dimensional angular space."""
    raw = {
        "dataset": {
            "kind": "gaussian_sphere",
            "classes": 6,
            "per_class": 100,
            "dim": 12,
            "spread": 0.4,
            "seed": seed,
            "min_angle_deg": 35.0,
        },
        "stream": {
            "base_classes": 2,
            "steps": 2,
            "seed": seed + 100,
            "test_fraction": 0.25,
            "reserve_unknowns": 2,
        },
        "backbone": {"hidden": [24], "feature_dim": 8, "activation": "relu", "seed": seed + 200},
        "optimizer": {
            "learning_rate": 0.05,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "epochs": 25,
            "milestones": [15, 21],
            "batch_size": 32,
        },
        "loss": {"use_softmax_all": softmax_all},
        "memory_cap": 20,
        "bank_seed": seed + 400,
        "train_seed": seed + 300,
    }
    return parse_manifest(raw)


def reference_stream_manifest(seed: int) -> RunManifest:
    """The 4-task ablation stream: 12 trained classes over [3,3,3,3] with 2
    reserved unknown classes so every task reports open-set metrics."""
    raw = {
        "dataset": {
            "kind": "gaussian_sphere",
            "classes": 14,
            "per_class": 120,
            "dim": 16,
            "spread": 0.45,
            "seed": seed,
            "min_angle_deg": 28.0,
        },
        "stream": {
            "base_classes": 3,
            "steps": 4,
            "seed": seed + 100,
            "test_fraction": 0.25,
            "reserve_unknowns": 2,
        },
        "backbone": {"hidden": [32], "feature_dim": 16, "activation": "relu", "seed": seed + 200},
        "optimizer": {
            "learning_rate": 0.05,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "epochs": 30,
            "milestones": [18, 25],
            "batch_size": 32,
        },
        "loss": {},
        "memory_cap": 20,
        "bank_seed": seed + 400,
        "train_seed": seed + 300,
    }
    return parse_manifest(raw)


@dataclass
class OpenSpaceOutcome:
    seeds: tuple[int, ...]
    task1_oscr_active: list[float] = field(default_factory=list)
    task1_oscr_all: list[float] = field(default_factory=list)
    unknown_score_active: list[float] = field(default_factory=list)
    unknown_score_all: list[float] = field(default_factory=list)

    def active_wins(self) -> int:
        return sum(a > b for a, b in zip(self.task1_oscr_active, self.task1_oscr_all))

    def mean_unknown_gap(self) -> float:
        return float(np.mean(self.unknown_score_all) - np.mean(self.unknown_score_active))


def open_space_experiment(seeds=OPEN_SPACE_SEEDS) -> OpenSpaceOutcome:
    """Train active-only vs all-prototype softmax on the same streams and
    compare unknown knownness and task-1 OSCR."""
    outcome = OpenSpaceOutcome(seeds=tuple(seeds))
    for seed in seeds:
        active = execute(open_space_manifest(seed, softmax_all=False))
        everything = execute(open_space_manifest(seed, softmax_all=True))
        outcome.task1_oscr_active.append(active.records[0]["oscr"])
        outcome.task1_oscr_all.append(everything.records[0]["oscr"])
        outcome.unknown_score_active.append(active.records[-1]["mean_unknown_score"])
        outcome.unknown_score_all.append(everything.records[-1]["mean_unknown_score"])
    return outcome


@dataclass
class AblationOutcome:
    seeds: tuple[int, ...]
    rows: tuple[str, ...]
    # row -> per-seed list of per-task OSCR values
    oscr: dict[str, list[list[float]]] = field(default_factory=dict)
    final_acc: dict[str, list[float]] = field(default_factory=dict)

    def mean_oscr(self, row: str) -> float:
        return float(np.mean([np.mean(per_task) for per_task in self.oscr[row]]))

    def onbr_final_acc_wins(self, with_row: str = "with_onbr", without_row: str = "with_distill") -> int:
        pairs = zip(self.final_acc[with_row], self.final_acc[without_row])
        return sum(a > b for a, b in pairs)


def ablation_experiment(seeds=REFERENCE_SEEDS, rows=None) -> AblationOutcome:
    """Run ablation rows over the reference stream for each seed."""
    matrix = ABLATION_MATRIX if rows is None else tuple((n, t) for n, t in ABLATION_MATRIX if n in rows)
    outcome = AblationOutcome(seeds=tuple(seeds), rows=tuple(n for n, _ in matrix))
    for name, _ in matrix:
        outcome.oscr[name] = []
        outcome.final_acc[name] = []
    for seed in seeds:
        results: dict[str, RunResult] = ablate(reference_stream_manifest(seed), matrix=matrix, out_dir=None)
        for name, result in results.items():
            outcome.oscr[name].append([r["oscr"] for r in result.records])
            outcome.final_acc[name].append(result.records[-1]["acc"])
    return outcome
