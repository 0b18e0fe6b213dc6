"""Run manifests: a single JSON file that fully determines a run.

Every knob that can change a result lives here, so the manifest hash is the
reproducibility key embedded in every results file. Unknown keys are
rejected with their dotted path rather than ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig, OptimizerConfig
from .data import Dataset, gen_gaussian_sphere, load_idx
from .losses import LossWeights
from .metrics import SCORE_RULES
from .protocol import StreamConfig


class ManifestError(ValueError):
    """Schema violation; message carries the offending field path."""


_GAUSSIAN_KEYS = {
    "kind": None,
    "classes": None,
    "per_class": None,
    "dim": None,
    "spread": None,
    "seed": None,
    "min_angle_deg": 25.0,
}
_IDX_KEYS = {"kind": None, "images": None, "labels": None}

_TOP_DEFAULTS = {
    "memory_cap": 20,
    "prototype_count": None,
    "bank_seed": 0,
    "train_seed": 0,
    "score_rule": "max_cosine",
    "dump_features": False,
    "output_dir": None,
}


def _check_keys(section: dict, allowed, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ManifestError(f"{path}.{key}: unknown key")


def _require(section: dict, spec: dict, path: str) -> dict:
    _check_keys(section, spec, path)
    out = {}
    for key, default in spec.items():
        if key in section:
            out[key] = section[key]
        elif default is None:
            raise ManifestError(f"{path}.{key}: required key missing")
        else:
            out[key] = default
    return out


def _build_config(cls, section: dict, path: str, **extra):
    fields = {f.name for f in dataclasses.fields(cls)} - set(extra)
    _check_keys(section, fields, path)
    try:
        return cls(**{**section, **extra})
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: {exc}") from exc


@dataclass
class RunManifest:
    raw: dict
    dataset_spec: dict
    stream: StreamConfig
    backbone: BackboneConfig
    optimizer: OptimizerConfig
    loss: LossWeights
    memory_cap: int
    prototype_count: int | None
    bank_seed: int
    train_seed: int
    score_rule: str
    dump_features: bool
    output_dir: str | None

    def hash(self) -> str:
        content = {k: v for k, v in self.raw.items() if k != "output_dir"}
        blob = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def build_dataset(self) -> Dataset:
        spec = self.dataset_spec
        if spec["kind"] == "gaussian_sphere":
            return gen_gaussian_sphere(
                classes=spec["classes"],
                per_class=spec["per_class"],
                dim=spec["dim"],
                spread=spec["spread"],
                seed=spec["seed"],
                min_angle_deg=spec["min_angle_deg"],
            )
        return load_idx(spec["images"], spec["labels"])

    def backbone_for(self, dataset: Dataset) -> BackboneConfig:
        return dataclasses.replace(self.backbone, input_dim=dataset.dim)

    def with_loss(self, **toggles) -> "RunManifest":
        raw = json.loads(json.dumps(self.raw))
        raw["loss"] = {**raw.get("loss", {}), **toggles}
        return parse_manifest(raw)


def parse_manifest(raw: dict) -> RunManifest:
    if not isinstance(raw, dict):
        raise ManifestError("manifest root must be an object")
    allowed_top = {"dataset", "stream", "backbone", "optimizer", "loss", *_TOP_DEFAULTS}
    _check_keys(raw, allowed_top, "manifest")
    for required in ("dataset", "stream", "backbone", "optimizer"):
        if required not in raw:
            raise ManifestError(f"manifest.{required}: required section missing")

    dataset_section = raw["dataset"]
    kind = dataset_section.get("kind")
    if kind == "gaussian_sphere":
        dataset_spec = _require(dataset_section, _GAUSSIAN_KEYS, "dataset")
    elif kind == "idx":
        dataset_spec = _require(dataset_section, _IDX_KEYS, "dataset")
    else:
        raise ManifestError(f"dataset.kind: expected 'gaussian_sphere' or 'idx', got {kind!r}")

    stream = _build_config(StreamConfig, raw["stream"], "stream")
    if kind == "gaussian_sphere":
        input_dim = dataset_spec["dim"]
    else:
        input_dim = None  # resolved after loading
    backbone_section = dict(raw["backbone"])
    if "input_dim" in backbone_section:
        raise ManifestError("backbone.input_dim: derived from the dataset, not settable")
    backbone = _build_config(
        BackboneConfig, backbone_section, "backbone", input_dim=input_dim if input_dim else 1
    )
    optimizer = _build_config(OptimizerConfig, raw.get("optimizer", {}), "optimizer")
    loss = _build_config(LossWeights, raw.get("loss", {}), "loss")

    top = {key: raw.get(key, default) for key, default in _TOP_DEFAULTS.items()}
    if top["score_rule"] not in SCORE_RULES:
        raise ManifestError(f"score_rule: expected one of {SCORE_RULES}, got {top['score_rule']!r}")

    return RunManifest(
        raw=raw,
        dataset_spec=dataset_spec,
        stream=stream,
        backbone=backbone,
        optimizer=optimizer,
        loss=loss,
        memory_cap=int(top["memory_cap"]),
        prototype_count=top["prototype_count"],
        bank_seed=int(top["bank_seed"]),
        train_seed=int(top["train_seed"]),
        score_rule=top["score_rule"],
        dump_features=bool(top["dump_features"]),
        output_dir=top["output_dir"],
    )


def load_manifest(path) -> RunManifest:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_manifest(raw)
