"""Incremental open-set protocol: disjoint tasks, rehearsal, train/eval loop.

Tasks partition the class set; each task trains on its own classes plus the
exemplar memory, then snapshots the model. The unknown test pool of task t
is exactly the test data of task t+1's classes, so today's unknowns become
tomorrow's training classes. The final task has no successor; an optional
reserved class set stands in as its unknown pool.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import losses as ls
from . import metrics as mx
from .data import Dataset, split
from .etf import CapacityError, PrototypeBank, activate, build_bank, init_virtual_prototypes

log = logging.getLogger(__name__)


def derived_seed(*parts: int) -> int:
    """Stable child seed for a purpose-tagged part of a run."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


class StreamConstructionError(ValueError):
    pass


@dataclass
class StreamConfig:
    base_classes: int
    steps: int
    seed: int = 0
    test_fraction: float = 0.2
    task_sizes: tuple[int, ...] | None = None
    strict_split: bool = False
    reserve_unknowns: int = 0

    def __post_init__(self):
        if self.task_sizes is not None:
            self.task_sizes = tuple(int(s) for s in self.task_sizes)
        if self.steps < 1:
            raise ValueError("need at least one task")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must sit inside (0, 1)")


def plan_task_sizes(class_count: int, config: StreamConfig) -> list[int]:
    """Class count per task: the base task plus equal increments.

    A remainder that does not divide evenly is spread one class at a time
    over the later tasks (largest-remainder rule with ties to the tail);
    strict mode insists on exact divisibility instead.
    """
    usable = class_count - config.reserve_unknowns
    if config.task_sizes is not None:
        sizes = list(config.task_sizes)
        if len(sizes) != config.steps:
            raise StreamConstructionError(f"{len(sizes)} explicit sizes for {config.steps} steps")
        if sum(sizes) != usable:
            raise StreamConstructionError(
                f"explicit task sizes sum to {sum(sizes)}, but {usable} classes are available"
            )
        if any(s < 1 for s in sizes):
            raise StreamConstructionError("every task needs at least one class")
        return sizes
    remaining = usable - config.base_classes
    increments = config.steps - 1
    if remaining < 0:
        raise StreamConstructionError(f"base {config.base_classes} exceeds {usable} usable classes")
    if increments == 0:
        if remaining:
            raise StreamConstructionError(f"single task leaves {remaining} classes unassigned")
        return [config.base_classes]
    if remaining % increments and config.strict_split:
        raise StreamConstructionError(
            f"{remaining} classes do not split evenly over {increments} increments; "
            "pass explicit task sizes or disable strict mode"
        )
    floor, leftover = divmod(remaining, increments)
    if floor == 0:
        raise StreamConstructionError(f"{remaining} classes over {increments} increments leaves empty tasks")
    sizes = [config.base_classes] + [floor] * increments
    for k in range(leftover):
        sizes[-1 - k] += 1
    return sizes


@dataclass
class Task:
    index: int
    labels: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    config: StreamConfig
    reserved_labels: tuple[int, ...] = ()
    reserved_test_x: np.ndarray | None = None
    reserved_test_y: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.tasks)

    def known_labels(self, upto: int) -> list[int]:
        out: list[int] = []
        for task in self.tasks[:upto]:
            out.extend(task.labels)
        return out

    def known_pool(self, upto: int) -> tuple[np.ndarray, np.ndarray]:
        xs = [t.test_x for t in self.tasks[:upto]]
        ys = [t.test_y for t in self.tasks[:upto]]
        return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)

    def unknown_pool(self, task_index: int) -> tuple[np.ndarray, np.ndarray] | None:
        if task_index < self.length:
            nxt = self.tasks[task_index]
            return nxt.test_x, nxt.test_y
        if self.reserved_test_x is not None:
            return self.reserved_test_x, self.reserved_test_y
        return None


def build_task_stream(dataset: Dataset, config: StreamConfig) -> TaskStream:
    """Seeded class-to-task assignment plus per-class train/test splits."""
    classes = dataset.class_count
    if config.reserve_unknowns >= classes:
        raise StreamConstructionError("cannot reserve every class as unknown")
    sizes = plan_task_sizes(classes, config)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(classes)
    usable = order[: classes - config.reserve_unknowns]
    reserved = tuple(int(c) for c in order[classes - config.reserve_unknowns :])

    train_part, test_part = split(dataset, (1.0 - config.test_fraction, config.test_fraction), seed=config.seed)

    tasks = []
    cursor = 0
    for i, size in enumerate(sizes, start=1):
        labels = tuple(int(c) for c in usable[cursor : cursor + size])
        cursor += size
        tx, ty = train_part.of_classes(labels)
        ex, ey = test_part.of_classes(labels)
        tasks.append(Task(index=i, labels=labels, train_x=tx, train_y=ty, test_x=ex, test_y=ey))
    stream = TaskStream(tasks=tasks, config=config, reserved_labels=reserved)
    if reserved:
        rx, ry = test_part.of_classes(reserved)
        stream.reserved_test_x, stream.reserved_test_y = rx, ry
    return stream


class ExemplarMemory:
    """Per-class rehearsal store, capped and append-only once selected."""

    def __init__(self, cap: int = 20):
        self.cap = int(cap)
        self.store: dict[int, np.ndarray] = {}
        self.shortfalls: list[tuple[int, int]] = []

    def update(self, instances: np.ndarray, labels: np.ndarray, new_labels, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for lbl in new_labels:
            lbl = int(lbl)
            if lbl in self.store:
                raise ValueError(f"memory for class {lbl} was already selected")
            rows = instances[labels == lbl]
            if rows.shape[0] <= self.cap:
                if rows.shape[0] < self.cap:
                    self.shortfalls.append((lbl, int(rows.shape[0])))
                self.store[lbl] = rows.copy()
            else:
                pick = rng.choice(rows.shape[0], size=self.cap, replace=False)
                self.store[lbl] = rows[np.sort(pick)].copy()

    def pool(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.store:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        xs, ys = [], []
        for lbl in sorted(self.store):
            xs.append(self.store[lbl])
            ys.append(np.full(self.store[lbl].shape[0], lbl, dtype=np.int64))
        return np.concatenate(xs, axis=0), np.concatenate(ys)

    def total_stored(self) -> int:
        return sum(v.shape[0] for v in self.store.values())

    def max_per_class(self) -> int:
        return max((v.shape[0] for v in self.store.values()), default=0)


@dataclass
class RunState:
    model: bb.Model
    bank: PrototypeBank
    memory: ExemplarMemory
    stream: TaskStream
    weights: ls.LossWeights
    optimizer: bb.SgdOptimizer
    score_rule: str = "max_cosine"
    train_seed: int = 0
    snapshot: bb.ModelSnapshot | None = None
    completed: int = 0
    report: mx.MetricReport = field(default_factory=mx.MetricReport)
    loss_records: list[dict] = field(default_factory=list)
    _shuffle_rng: np.random.Generator = None

    def __post_init__(self):
        if self._shuffle_rng is None:
            self._shuffle_rng = np.random.default_rng(np.random.SeedSequence([self.train_seed, 0]))


def make_run_state(
    dataset: Dataset,
    stream_config: StreamConfig,
    backbone_config: bb.BackboneConfig,
    optimizer_config: bb.OptimizerConfig,
    weights: ls.LossWeights,
    memory_cap: int = 20,
    bank_seed: int = 0,
    prototype_count: int | None = None,
    train_seed: int = 0,
    score_rule: str = "max_cosine",
) -> RunState:
    if backbone_config.input_dim != dataset.dim:
        raise ValueError(f"backbone input dim {backbone_config.input_dim} != dataset dim {dataset.dim}")
    stream = build_task_stream(dataset, stream_config)
    K = prototype_count if prototype_count is not None else backbone_config.feature_dim
    bank = build_bank(backbone_config.feature_dim, K, seed=bank_seed)
    model = bb.Model(backbone_config)
    return RunState(
        model=model,
        bank=bank,
        memory=ExemplarMemory(cap=memory_cap),
        stream=stream,
        weights=weights,
        optimizer=bb.SgdOptimizer(optimizer_config),
        score_rule=score_rule,
        train_seed=train_seed,
    )


def _wrap_step_parameters(state: RunState, tape: ad.Tape, batch_labels) -> tuple[dict, dict]:
    """Wrap model params and in-batch virtual prototypes as tape parameters.

    Virtual prototypes of classes absent from the batch still shape the
    losses but enter as constants: they stay put until their class streams
    by again.
    """
    params = {k: tape.parameter(v) for k, v in state.model.params.items()}
    vprotos: dict[int, ad.Tensor] = {}
    if state.weights.needs_virtual_prototypes():
        present = {int(l) for l in batch_labels}
        for lbl, vec in state.bank.virtual.items():
            vprotos[lbl] = tape.parameter(vec) if lbl in present else ad.constant(vec)
    return params, vprotos


def _train_step(
    state: RunState,
    task: Task,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    old_labels: set[int],
    epoch: int,
) -> ls.LossBreakdown:
    weights = state.weights
    tape = ad.Tape()
    params, vprotos = _wrap_step_parameters(state, tape, batch_y)
    eta = params[bb.ETA_KEY]
    eta_vii = params.get(bb.ETA_VII_KEY, eta)

    feats = bb.forward_features(params, state.model.config, batch_x)

    old_rows = np.flatnonzero(np.isin(batch_y, sorted(old_labels))) if old_labels else np.zeros(0, dtype=np.intp)
    l_ce = ls.active_cross_entropy(
        feats,
        batch_y,
        state.bank,
        eta,
        mode="all" if weights.use_softmax_all else "active_only",
        onbr_shift=weights.onbr_shift if (weights.use_onbr and old_rows.size) else 0.0,
        old_rows=old_rows,
        onbr_mode=weights.onbr_mode,
    )

    l_v = l_vii = None
    saturations = 0
    virtual_skipped = False
    if weights.needs_virtual_prototypes():
        synthesized = ls.synthesize_virtual(batch_x, batch_y, weights.mix)
        if synthesized is None:
            virtual_skipped = True
            log.debug("single-class batch: virtual synthesis skipped for one step")
        else:
            virtual_x, virtual_y = synthesized
            virtual_feats = bb.forward_features(params, state.model.config, virtual_x)
            if weights.use_virtual_ce:
                l_v = ls.virtual_cross_entropy(virtual_feats, virtual_y, vprotos, eta_vii)
            if weights.use_vii:
                bound = ls.pnbr_bound(params[bb.PNBR_RAW_KEY]) if weights.use_pnbr else None
                l_vii, saturations = ls.interaction_loss(
                    feats, batch_y, virtual_feats, virtual_y, vprotos, eta_vii, bound
                )

    l_dis = None
    if weights.use_distill and state.snapshot is not None:
        l_dis = ls.alignment_distillation(feats, state.snapshot.features(batch_x))

    total, breakdown = ls.combine(
        weights,
        task_index=task.index,
        new_class_count=len(task.labels),
        old_class_count=len(old_labels),
        l_ce=l_ce,
        l_v=l_v,
        l_vii=l_vii,
        l_dis=l_dis,
        eta_value=float(state.model.params[bb.ETA_KEY]),
        bound_value=float(1.0 / (1.0 + np.exp(-state.model.params[bb.PNBR_RAW_KEY]))),
        saturations=saturations,
        virtual_skipped=virtual_skipped,
    )
    tape.backward(total)

    arrays = dict(state.model.params)
    grads = {k: params[k].grad for k in state.model.params}
    for lbl, tensor in vprotos.items():
        if tensor.requires_grad:
            arrays[f"virtual_{lbl}"] = state.bank.virtual[lbl]
            grads[f"virtual_{lbl}"] = tensor.grad
    state.optimizer.step(arrays, grads, epoch, decay_keys=state.model.backbone_keys)
    return breakdown


def train_task(state: RunState, task_index: int) -> None:
    """Run all epochs of one task: activate, train, snapshot, memorize."""
    if task_index != state.completed + 1:
        raise RuntimeError(f"task {task_index} cannot start; {state.completed} tasks are complete")
    task = state.stream.tasks[task_index - 1]
    old_labels = set(state.stream.known_labels(task_index - 1))
    try:
        activate(state.bank, task.labels)
    except CapacityError as exc:
        raise CapacityError(f"task {task_index}: {exc}") from exc
    if state.weights.needs_virtual_prototypes():
        init_virtual_prototypes(state.bank, task.labels, seed=derived_seed(state.train_seed, 2, task_index))

    mem_x, mem_y = state.memory.pool()
    if mem_x.size:
        pool_x = np.concatenate([task.train_x, mem_x], axis=0)
        pool_y = np.concatenate([task.train_y, mem_y])
    else:
        pool_x, pool_y = task.train_x, task.train_y

    cfg = state.optimizer.config
    for epoch in range(cfg.epochs):
        perm = state._shuffle_rng.permutation(pool_x.shape[0])
        for step, start in enumerate(range(0, perm.size, cfg.batch_size)):
            rows = perm[start : start + cfg.batch_size]
            breakdown = _train_step(state, task, pool_x[rows], pool_y[rows], old_labels, epoch)
            record = {"task": task_index, "epoch": epoch, "step": step, **breakdown.as_record()}
            state.loss_records.append(record)

    state.snapshot = bb.snapshot(state.model)
    state.memory.update(task.train_x, task.train_y, task.labels, seed=derived_seed(state.train_seed, 1, task_index))
    state.completed = task_index


def evaluate_task(state: RunState, task_index: int, dump_features: bool = False) -> dict:
    """Closed-set accuracy over all seen classes plus open-set metrics
    against the task's unknown pool, when one exists."""
    if task_index > state.completed:
        raise RuntimeError(f"task {task_index} is not trained yet")
    known_x, known_y = state.stream.known_pool(task_index)
    feats = bb.extract_arrays(state.model, known_x)
    preds = mx.predict(feats, state.bank)
    acc = mx.accuracy(preds, known_y)

    eta_value = float(state.model.params[bb.ETA_KEY])
    unknown = state.stream.unknown_pool(task_index)
    auroc_value = oscr_value = None
    scores_unknown = None
    unknown_count = 0
    dump = None
    if unknown is None:
        if task_index < state.stream.length:
            raise StreamConstructionError(f"task {task_index} has an empty unknown pool")
    else:
        ux, uy = unknown
        if ux.shape[0] == 0:
            raise StreamConstructionError(f"task {task_index} has an empty unknown pool")
        ufeats = bb.extract_arrays(state.model, ux)
        scores_known = mx.knownness_score(feats, state.bank, rule=state.score_rule, eta=eta_value)
        scores_unknown = mx.knownness_score(ufeats, state.bank, rule=state.score_rule, eta=eta_value)
        auroc_value = mx.auroc(scores_known, scores_unknown)
        oscr_value = mx.oscr(preds == known_y, scores_known, scores_unknown)
        unknown_count = int(ux.shape[0])
        if dump_features:
            dump = {
                "labels": np.concatenate([known_y, uy]),
                "known": np.concatenate([np.ones(known_y.size, bool), np.zeros(uy.size, bool)]),
                "features": np.concatenate([feats, ufeats], axis=0),
            }
    if dump_features and dump is None:
        dump = {"labels": known_y, "known": np.ones(known_y.size, bool), "features": feats}

    row = state.report.add(
        task_index,
        acc=acc,
        auroc_value=auroc_value,
        oscr_value=oscr_value,
        n_known=int(known_x.shape[0]),
        n_unknown=unknown_count,
        active_classes=state.bank.active_count,
        mean_unknown_score=None if scores_unknown is None else float(np.mean(scores_unknown)),
    )
    if dump is not None:
        row["feature_dump"] = dump
    return row


def run_protocol(state: RunState, dump_features: bool = False) -> mx.MetricReport:
    """Train and evaluate every task in order."""
    for t in range(1, state.stream.length + 1):
        train_task(state, t)
        evaluate_task(state, t, dump_features=dump_features)
    return state.report


def leakage_hashes(stream: TaskStream, memory: ExemplarMemory) -> tuple[set, set]:
    """Byte-hashes of all unknown-pool rows vs all train+memory rows."""
    unknown_rows: set[bytes] = set()
    for t in range(1, stream.length + 1):
        pool = stream.unknown_pool(t)
        if pool is None:
            continue
        ux, _ = pool
        unknown_rows.update(row.tobytes() for row in ux)
    train_rows: set[bytes] = set()
    for task in stream.tasks:
        train_rows.update(row.tobytes() for row in task.train_x)
    for rows in memory.store.values():
        train_rows.update(row.tobytes() for row in rows)
    return unknown_rows, train_rows
