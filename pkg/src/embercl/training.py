"""Training orchestration: joint supervised training, per-task training,
continual training over a task permutation with experience replay, the
full (order x policy) sweep, and the RUN1 run checkpoint.

Randomness discipline: every stream is derived from the run seed plus a
tag path (see rng.py), so buffer updates, replay draws, dropout, and
shuffling never share state. Phase streams are derived per curriculum
position, which makes checkpoint resumption at task boundaries bit-exact.
The first epoch of each phase consumes records in stream (dataset) order
and offers each one to the episodic memory exactly once; later epochs
shuffle.
"""
from __future__ import annotations

import enum
import itertools
import json
import struct
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import EmbeddingDataset, EmbeddingRecord
from .errors import (
    BAD_MAGIC,
    BAD_VERSION,
    TRUNCATED,
    DataFormatError,
    ModeMismatchError,
    NumericFailureError,
)
from .memory import BufferPolicy, EpisodicMemory, MemorySlot, sample_replay
from .mlp import (
    AdamState,
    LayerParams,
    MlpModel,
    TrainConfig,
    adam_step,
    backward,
    deserialize_checkpoint,
    forward,
    init_adam,
    init_model,
    loss_softmax_xent,
    serialize_checkpoint,
)
from .reporting import RunReport, average_accuracy, forgetting, overall_accuracy
from .rng import CH_DROPOUT, CH_REPLAY, CH_SHUFFLE, TAG_MEMORY, TAG_PHASE, child_seed, derive_rng
from .vectors import FusionMode, fuse_matrix, fused_dim

RUN1_MAGIC = b"RUN1"
RUN1_VERSION = 1

# Default hyperparameters: first curriculum position vs the rest.
FIRST_TASK_LR = 1e-4
FIRST_TASK_WD = 1e-5
LATER_TASK_LR = 5e-6
LATER_TASK_WD = 2e-5
DEFAULT_HIDDEN_DIM = 1024
DEFAULT_HIDDEN_LAYERS = 3
DEFAULT_PER_CLASS_CAPACITY = 25
DEFAULT_REPLAY_BATCH = 64


class TrainMode(enum.Enum):
    JOINT_SUPERVISED = "joint"
    TASKWISE = "taskwise"
    CONTINUAL = "continual"
    CONTINUAL_NOREPLAY = "continual-noreplay"


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    label_ids: frozenset[int]
    record_filter: object | None = None  # optional predicate; default matches task_id

    def matches(self, record: EmbeddingRecord) -> bool:
        if self.record_filter is not None:
            return bool(self.record_filter(record))
        return record.task_id == self.task_id


@dataclass
class Curriculum:
    tasks: list[TaskSpec]
    configs: list[TrainConfig]

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("curriculum must contain at least one task")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"a task may appear only once per curriculum, got order {ids}")
        if len(self.configs) != len(self.tasks):
            raise ValueError(
                f"{len(self.configs)} configs for {len(self.tasks)} curriculum positions"
            )

    @property
    def order(self) -> list[int]:
        return [t.task_id for t in self.tasks]


@dataclass
class RunConfig:
    fusion_mode: FusionMode
    curriculum: Curriculum
    mode: TrainMode
    policy: BufferPolicy = BufferPolicy.RESERVOIR
    per_class_capacity: int = DEFAULT_PER_CLASS_CAPACITY
    replay_batch: int = DEFAULT_REPLAY_BATCH
    seed: int = 0
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    num_hidden_layers: int = DEFAULT_HIDDEN_LAYERS
    stratified_reservoir: bool = True

    def __post_init__(self):
        if self.per_class_capacity < 0:
            raise ValueError("per_class_capacity must be >= 0")
        if self.replay_batch < 0:
            raise ValueError("replay_batch must be >= 0")


@dataclass
class StreamState:
    current_task_index: int
    model: MlpModel
    memory: EpisodicMemory | None
    accuracy_rows: list[list[float]]


def default_position_config(position: int, epochs: int = 25, batch_size: int = 256,
                            dropout_rate: float = 0.2, seed: int = 0) -> TrainConfig:
    """First curriculum position trains with the higher learning rate and
    lower weight decay; later positions switch to the fine-tuning values."""
    if position == 0:
        return TrainConfig(FIRST_TASK_LR, FIRST_TASK_WD, dropout_rate, batch_size, epochs, seed)
    return TrainConfig(LATER_TASK_LR, LATER_TASK_WD, dropout_rate, batch_size, epochs, seed)


def build_curriculum(
    dataset: EmbeddingDataset,
    order: list[int] | None = None,
    epochs: int = 25,
    batch_size: int = 256,
    dropout_rate: float = 0.2,
    seed: int = 0,
    first_config: TrainConfig | None = None,
    later_config: TrainConfig | None = None,
) -> Curriculum:
    manifest = dataset.manifest
    if order is None:
        order = [t.task_id for t in manifest.tasks]
    try:
        tasks = [
            TaskSpec(t.task_id, t.name, frozenset(t.label_ids))
            for tid in order
            for t in [manifest.task(tid)]
        ]
    except KeyError as e:
        raise ValueError(f"order names a task the dataset does not have: {e.args[0]}") from e
    configs = []
    for position in range(len(tasks)):
        if position == 0 and first_config is not None:
            configs.append(first_config)
        elif position > 0 and later_config is not None:
            configs.append(later_config)
        else:
            configs.append(default_position_config(position, epochs, batch_size, dropout_rate, seed))
    return Curriculum(tasks, configs)


def _features(records: list[EmbeddingRecord], mode: FusionMode) -> tuple[np.ndarray, np.ndarray]:
    imgs = np.stack([r.image_embedding for r in records])
    txts = np.stack([r.text_embedding for r in records])
    return fuse_matrix(imgs, txts, mode), np.array([r.label_id for r in records], dtype=np.int64)


def _accuracy(model: MlpModel, feats: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = forward(model, feats, training=False)
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: MlpModel, dataset: EmbeddingDataset, fusion_mode: FusionMode,
             task_filter: int | None = None) -> float:
    """Percentage of correct predictions over the (optionally task-filtered)
    test split."""
    records = dataset.test_records()
    if task_filter is not None:
        spec = TaskSpec(task_filter, "", frozenset())
        records = [r for r in records if spec.matches(r)]
    if not records:
        raise ValueError(f"empty test split for task filter {task_filter!r}")
    feats, labels = _features(records, fusion_mode)
    return _accuracy(model, feats, labels)


@dataclass
class _PhaseResult:
    access_counts: dict[int, int]
    warnings: list[str]


def _train_phase(
    model: MlpModel,
    adam: AdamState,
    feats: np.ndarray,
    labels: np.ndarray,
    record_task_ids: np.ndarray,
    cfg: TrainConfig,
    run_seed: int,
    phase_index: int,
    memory: EpisodicMemory | None = None,
    offer_to_memory: bool = False,
    use_replay: bool = False,
    replay_batch: int = 0,
) -> _PhaseResult:
    """Fit one curriculum position. Epoch 0 runs in stream order and, when
    requested, offers each sample to the memory once; later epochs shuffle.
    Raises NumericFailureError the moment the loss goes non-finite."""
    n = feats.shape[0]
    if n == 0:
        raise ValueError("cannot train a phase on zero records")
    shuffle_rng = derive_rng(run_seed, TAG_PHASE, phase_index, CH_SHUFFLE)
    dropout_rng = derive_rng(run_seed, TAG_PHASE, phase_index, CH_DROPOUT)
    replay_rng = derive_rng(run_seed, TAG_PHASE, phase_index, CH_REPLAY)

    warnings_out = []
    if len(np.unique(labels)) < 2:
        warnings_out.append(
            f"phase {phase_index}: single-class training set; accuracy is degenerate"
        )

    access: dict[int, int] = {}
    for task_id, count in zip(*np.unique(record_task_ids, return_counts=True)):
        access[int(task_id)] = 0

    for epoch in range(cfg.epochs):
        order = np.arange(n) if epoch == 0 else shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = feats[idx]
            yb = labels[idx]
            if use_replay and memory is not None and len(memory) > 0 and replay_batch > 0:
                slots = sample_replay(memory, replay_batch, replay_rng)
                xb = np.concatenate([xb, np.stack([s.feature for s in slots]).astype(xb.dtype)])
                yb = np.concatenate([yb, np.array([s.label_id for s in slots], dtype=yb.dtype)])
            logits, cache = forward(model, xb, cfg.dropout_rate, training=True, rng=dropout_rng)
            loss, dlogits = loss_softmax_xent(logits, yb)
            if not np.isfinite(loss):
                raise NumericFailureError(
                    f"non-finite loss at phase {phase_index}, epoch {epoch}, batch start {start}"
                )
            grads = backward(model, cache, dlogits)
            adam_step(model, adam, grads, cfg.learning_rate, cfg.weight_decay)
            if offer_to_memory and memory is not None and epoch == 0:
                for i in idx:
                    memory.insert(
                        MemorySlot(
                            feature=feats[i].copy(),
                            label_id=int(labels[i]),
                            source_task=int(record_task_ids[i]),
                        )
                    )
        for task_id in access:
            access[task_id] += int(np.sum(record_task_ids == task_id))
    return _PhaseResult(access_counts=access, warnings=warnings_out)


def _select_task_records(records: list[EmbeddingRecord], spec: TaskSpec) -> list[EmbeddingRecord]:
    return [r for r in records if spec.matches(r)]


def _hyper_trace_entry(task_id: int | None, cfg: TrainConfig) -> dict:
    return {
        "task_id": task_id,  # None for a joint phase spanning every task
        "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay,
        "dropout_rate": cfg.dropout_rate,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
    }


def _config_echo(config: RunConfig) -> dict:
    return {
        "fusion_mode": config.fusion_mode.value,
        "mode": config.mode.value,
        "policy": config.policy.value,
        "per_class_capacity": config.per_class_capacity,
        "replay_batch": config.replay_batch,
        "seed": config.seed,
        "hidden_dim": config.hidden_dim,
        "num_hidden_layers": config.num_hidden_layers,
        "stratified_reservoir": config.stratified_reservoir,
        "order": config.curriculum.order,
        "position_configs": [
            {
                "learning_rate": c.learning_rate,
                "weight_decay": c.weight_decay,
                "dropout_rate": c.dropout_rate,
                "batch_size": c.batch_size,
                "epochs": c.epochs,
            }
            for c in config.curriculum.configs
        ],
    }


def _test_features(dataset: EmbeddingDataset, config: RunConfig):
    """Per-task test arrays in curriculum-task order."""
    out = []
    for task in config.curriculum.tasks:
        recs = _select_task_records(dataset.test_records(), task)
        if not recs:
            raise ValueError(f"task {task.task_id} ({task.name}) has an empty test split")
        out.append(_features(recs, config.fusion_mode))
    return out


def _init_run_model(dataset: EmbeddingDataset, config: RunConfig) -> MlpModel:
    d = fused_dim(dataset.manifest.d_img, dataset.manifest.d_txt, config.fusion_mode)
    return init_model(
        d,
        config.hidden_dim,
        config.num_hidden_layers,
        dataset.manifest.num_labels,
        config.seed,
    )


def _finish_report(
    config: RunConfig,
    dataset: EmbeddingDataset,
    matrix: list[list[float]] | None,
    per_task_final: list[float],
    test_counts: list[int],
    hyper_trace: list[dict],
    dataset_access: list[dict],
    warnings_out: list[str],
    started: float,
) -> RunReport:
    tasks = config.curriculum.tasks
    avg = None
    forget_per_task = None
    forget_mean = None
    if matrix is not None and len(matrix) == len(tasks) and len(tasks) >= 1:
        avg = average_accuracy(matrix)
        if len(tasks) >= 2:
            forget_per_task, forget_mean = forgetting(matrix)
    return RunReport(
        mode=config.mode.value,
        seed=config.seed,
        config=_config_echo(config),
        task_ids=[t.task_id for t in tasks],
        task_names=[t.name for t in tasks],
        test_counts=test_counts,
        per_task_final=per_task_final,
        overall=overall_accuracy(per_task_final, test_counts),
        accuracy_matrix=matrix,
        average_accuracy=avg,
        forgetting_per_task=forget_per_task,
        mean_forgetting=forget_mean,
        hyper_trace=hyper_trace,
        dataset_access=dataset_access,
        warnings=warnings_out,
        wall_clock_seconds=time.perf_counter() - started,
    )


def train_supervised(dataset: EmbeddingDataset, config: RunConfig) -> tuple[MlpModel, RunReport]:
    """One model fit jointly on every task's training records."""
    if config.mode is not TrainMode.JOINT_SUPERVISED:
        raise ModeMismatchError(f"train_supervised requires joint mode, got {config.mode.value}")
    started = time.perf_counter()
    train_recs = [
        r for r in dataset.train_records()
        if any(t.matches(r) for t in config.curriculum.tasks)
    ]
    if not train_recs:
        raise ValueError("dataset has no training records for the curriculum tasks")
    feats, labels = _features(train_recs, config.fusion_mode)
    task_ids = np.array([r.task_id for r in train_recs], dtype=np.int64)

    model = _init_run_model(dataset, config)
    adam = init_adam(model)
    cfg = config.curriculum.configs[0]
    phase = _train_phase(model, adam, feats, labels, task_ids, cfg, config.seed, 0)

    tests = _test_features(dataset, config)
    per_task = [_accuracy(model, fx, fy) for fx, fy in tests]
    counts = [len(fy) for _, fy in tests]
    report = _finish_report(
        config, dataset, [per_task], per_task, counts,
        [_hyper_trace_entry(None, cfg)],
        [{str(k): v for k, v in sorted(phase.access_counts.items())}],
        phase.warnings, started,
    )
    return model, report


def train_taskwise(dataset: EmbeddingDataset, config: RunConfig) -> tuple[list[MlpModel], RunReport]:
    """One independent model per task, trained and evaluated on that task
    only; overall accuracy is question-count-weighted."""
    if config.mode is not TrainMode.TASKWISE:
        raise ModeMismatchError(f"train_taskwise requires taskwise mode, got {config.mode.value}")
    started = time.perf_counter()
    models = []
    per_task = []
    counts = []
    trace = []
    access = []
    warnings_out = []
    cfg = config.curriculum.configs[0]
    for task in config.curriculum.tasks:
        recs = _select_task_records(dataset.train_records(), task)
        if not recs:
            raise ValueError(f"task {task.task_id} ({task.name}) has no training records")
        feats, labels = _features(recs, config.fusion_mode)
        task_ids = np.array([r.task_id for r in recs], dtype=np.int64)
        model = _init_run_model(dataset, config)
        adam = init_adam(model)
        phase = _train_phase(model, adam, feats, labels, task_ids, cfg, config.seed, 0)
        models.append(model)
        per_task.append(evaluate(model, dataset, config.fusion_mode, task.task_id))
        counts.append(len(_select_task_records(dataset.test_records(), task)))
        trace.append(_hyper_trace_entry(task.task_id, cfg))
        access.append({str(k): v for k, v in sorted(phase.access_counts.items())})
        warnings_out.extend(phase.warnings)
    report = _finish_report(
        config, dataset, None, per_task, counts, trace, access, warnings_out, started
    )
    return models, report


def train_continual(
    dataset: EmbeddingDataset,
    config: RunConfig,
    checkpoint_path=None,
    stop_after_tasks: int | None = None,
    _resume: "RunCheckpoint | None" = None,
) -> tuple[MlpModel, RunReport]:
    """Train tasks strictly in curriculum order, optionally replaying
    episodic-memory samples into every batch of the later tasks. After each
    task the model is evaluated on every task's test split, producing one
    accuracy-matrix row; a RUN1 checkpoint (resumable at task boundaries)
    is written after each task when a path is given. `stop_after_tasks`
    bounds how many curriculum positions are completed in total, so a run
    can be staged across calls and resumed from its checkpoint."""
    if config.mode not in (TrainMode.CONTINUAL, TrainMode.CONTINUAL_NOREPLAY):
        raise ModeMismatchError(f"train_continual requires a continual mode, got {config.mode.value}")
    started = time.perf_counter()
    use_replay = config.mode is TrainMode.CONTINUAL
    tasks = config.curriculum.tasks

    if _resume is None:
        model = _init_run_model(dataset, config)
        adam = init_adam(model)
        memory = EpisodicMemory(
            config.policy,
            config.per_class_capacity,
            rng=derive_rng(config.seed, TAG_MEMORY),
            stratified=config.stratified_reservoir,
        )
        state = StreamState(0, model, memory, [])
        trace: list[dict] = []
        access: list[dict] = []
        warnings_out: list[str] = []
    else:
        adam = _resume.adam
        state = StreamState(
            _resume.completed_tasks,
            _resume.model,
            _resume.memory,
            [list(row) for row in _resume.accuracy_rows],
        )
        trace = list(_resume.hyper_trace)
        access = list(_resume.dataset_access)
        warnings_out = list(_resume.warnings)

    if stop_after_tasks is not None and stop_after_tasks < 1:
        raise ValueError(f"stop_after_tasks must be >= 1, got {stop_after_tasks}")
    stop = len(tasks) if stop_after_tasks is None else min(stop_after_tasks, len(tasks))
    tests = _test_features(dataset, config)
    while state.current_task_index < stop:
        position = state.current_task_index
        task = tasks[position]
        cfg = config.curriculum.configs[position]
        recs = _select_task_records(dataset.train_records(), task)
        if not recs:
            raise ValueError(f"task {task.task_id} ({task.name}) has no training records")
        feats, labels = _features(recs, config.fusion_mode)
        task_ids = np.array([r.task_id for r in recs], dtype=np.int64)
        phase = _train_phase(
            state.model, adam, feats, labels, task_ids, cfg, config.seed, position,
            memory=state.memory,
            offer_to_memory=True,
            use_replay=use_replay and position > 0,
            replay_batch=config.replay_batch,
        )
        state.accuracy_rows.append([_accuracy(state.model, fx, fy) for fx, fy in tests])
        state.current_task_index = position + 1
        trace.append(_hyper_trace_entry(task.task_id, cfg))
        access.append({str(k): v for k, v in sorted(phase.access_counts.items())})
        warnings_out.extend(phase.warnings)
        if checkpoint_path is not None:
            save_run_checkpoint(
                checkpoint_path,
                RunCheckpoint(
                    config=config,
                    model=state.model,
                    adam=adam,
                    memory=state.memory,
                    completed_tasks=state.current_task_index,
                    accuracy_rows=[list(r) for r in state.accuracy_rows],
                    hyper_trace=list(trace),
                    dataset_access=list(access),
                    warnings=list(warnings_out),
                ),
            )

    per_task_final = list(state.accuracy_rows[-1])
    counts = [len(fy) for _, fy in tests]
    report = _finish_report(
        config, dataset, [list(r) for r in state.accuracy_rows], per_task_final, counts,
        trace, access, warnings_out, started,
    )
    return state.model, report


def resume_continual(checkpoint_path, dataset: EmbeddingDataset) -> tuple[MlpModel, RunReport]:
    """Continue a checkpointed continual run from its last task boundary."""
    ckpt = load_run_checkpoint(checkpoint_path)
    return train_continual(dataset, ckpt.config, checkpoint_path=checkpoint_path, _resume=ckpt)


@dataclass
class SweepEntry:
    order: list[int]
    policy: BufferPolicy
    seed: int
    report: RunReport


@dataclass
class SweepResult:
    entries: list[SweepEntry]
    aggregate: list[dict]  # ranked by final average accuracy, descending

    @property
    def reports(self) -> list[RunReport]:
        return [e.report for e in self.entries]


def permutation_sweep(
    dataset: EmbeddingDataset,
    base_config: RunConfig,
    policies: list[BufferPolicy] | None = None,
    parallel: bool = False,
    max_workers: int | None = None,
    allow_any_task_count: bool = False,
) -> SweepResult:
    """Run every task-order permutation under every memory policy. Each run
    is independent and seeded by a child of base_config.seed, so serial and
    parallel execution produce identical results."""
    tasks = base_config.curriculum.tasks
    if len(tasks) != 3 and not allow_any_task_count:
        raise ValueError(
            f"the sweep is defined for exactly 3 tasks, got {len(tasks)} "
            "(pass allow_any_task_count=True to generalize)"
        )
    if policies is None:
        policies = [BufferPolicy.RESERVOIR, BufferPolicy.RING, BufferPolicy.MEAN_OF_FEATURES]

    by_id = {t.task_id: t for t in tasks}
    jobs = []
    run_index = 0
    for order in itertools.permutations(sorted(by_id)):
        for policy in policies:
            curriculum = Curriculum(
                tasks=[by_id[tid] for tid in order],
                configs=list(base_config.curriculum.configs),
            )
            cfg = replace(
                base_config,
                curriculum=curriculum,
                policy=policy,
                mode=TrainMode.CONTINUAL,
                seed=child_seed(base_config.seed, run_index),
            )
            jobs.append((list(order), policy, cfg))
            run_index += 1

    def run_one(job):
        order, policy, cfg = job
        _, report = train_continual(dataset, cfg)
        return SweepEntry(order=order, policy=policy, seed=cfg.seed, report=report)

    if parallel:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            entries = list(pool.map(run_one, jobs))
    else:
        entries = [run_one(job) for job in jobs]

    aggregate = [
        {
            "order": "-".join(str(t) for t in e.order),
            "policy": e.policy.value,
            "average_accuracy": e.report.average_accuracy,
            "mean_forgetting": e.report.mean_forgetting,
            "overall": e.report.overall,
        }
        for e in entries
    ]
    aggregate.sort(key=lambda row: (-row["average_accuracy"], row["order"], row["policy"]))
    return SweepResult(entries=entries, aggregate=aggregate)


def policy_ranking(result: SweepResult) -> list[tuple[str, float]]:
    """Mean final average accuracy per policy, best first."""
    sums: dict[str, list[float]] = {}
    for entry in result.entries:
        sums.setdefault(entry.policy.value, []).append(entry.report.average_accuracy)
    ranking = [(policy, sum(vals) / len(vals)) for policy, vals in sums.items()]
    ranking.sort(key=lambda kv: (-kv[1], kv[0]))
    return ranking


# ---------------------------------------------------------------------------
# RUN1 checkpoint format
# ---------------------------------------------------------------------------


@dataclass
class RunCheckpoint:
    config: RunConfig
    model: MlpModel
    adam: AdamState
    memory: EpisodicMemory
    completed_tasks: int
    accuracy_rows: list[list[float]]
    hyper_trace: list[dict] = field(default_factory=list)
    dataset_access: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _config_to_doc(config: RunConfig) -> dict:
    for task in config.curriculum.tasks:
        if task.record_filter is not None:
            raise ValueError("curricula with custom record filters cannot be checkpointed")
    return {
        "fusion_mode": config.fusion_mode.value,
        "mode": config.mode.value,
        "policy": config.policy.value,
        "per_class_capacity": config.per_class_capacity,
        "replay_batch": config.replay_batch,
        "seed": config.seed,
        "hidden_dim": config.hidden_dim,
        "num_hidden_layers": config.num_hidden_layers,
        "stratified_reservoir": config.stratified_reservoir,
        "tasks": [
            {"task_id": t.task_id, "name": t.name, "label_ids": sorted(t.label_ids)}
            for t in config.curriculum.tasks
        ],
        "configs": [
            {
                "learning_rate": c.learning_rate,
                "weight_decay": c.weight_decay,
                "dropout_rate": c.dropout_rate,
                "batch_size": c.batch_size,
                "epochs": c.epochs,
                "seed": c.seed,
            }
            for c in config.curriculum.configs
        ],
    }


def _config_from_doc(doc: dict) -> RunConfig:
    curriculum = Curriculum(
        tasks=[
            TaskSpec(t["task_id"], t["name"], frozenset(t["label_ids"]))
            for t in doc["tasks"]
        ],
        configs=[TrainConfig(**c) for c in doc["configs"]],
    )
    return RunConfig(
        fusion_mode=FusionMode(doc["fusion_mode"]),
        curriculum=curriculum,
        mode=TrainMode(doc["mode"]),
        policy=BufferPolicy(doc["policy"]),
        per_class_capacity=doc["per_class_capacity"],
        replay_batch=doc["replay_batch"],
        seed=doc["seed"],
        hidden_dim=doc["hidden_dim"],
        num_hidden_layers=doc["num_hidden_layers"],
        stratified_reservoir=doc["stratified_reservoir"],
    )


def _memory_to_doc(memory: EpisodicMemory) -> tuple[dict, np.ndarray]:
    classes = []
    features = []
    for class_id in sorted(memory.slots):
        slots = list(memory.slots[class_id])
        classes.append(
            {
                "class_id": class_id,
                "slots": [
                    {
                        "label_id": s.label_id,
                        "source_task": s.source_task,
                        "weight": s.weight,
                        "dim": int(np.asarray(s.feature).shape[0]),
                    }
                    for s in slots
                ],
            }
        )
        features.extend(np.asarray(s.feature, dtype=np.float64) for s in slots)
    doc = {
        "policy": memory.policy.value,
        "per_class_capacity": memory.per_class_capacity,
        "stratified": memory.stratified,
        "seen_counts": {str(k): v for k, v in sorted(memory.seen_counts.items())},
        "labels_observed": sorted(memory.labels_observed),
        "rng_state": memory.rng.bit_generator.state,
        "classes": classes,
    }
    flat = np.concatenate(features) if features else np.zeros(0, dtype=np.float64)
    return doc, flat


def _memory_from_doc(doc: dict, flat: np.ndarray) -> EpisodicMemory:
    memory = EpisodicMemory(
        BufferPolicy(doc["policy"]),
        doc["per_class_capacity"],
        stratified=doc["stratified"],
    )
    memory.rng.bit_generator.state = doc["rng_state"]
    memory.seen_counts = {int(k): v for k, v in doc["seen_counts"].items()}
    memory.labels_observed = set(doc["labels_observed"])
    offset = 0
    for cls in doc["classes"]:
        slots = []
        for s in cls["slots"]:
            dim = s["dim"]
            feature = flat[offset : offset + dim].copy()
            offset += dim
            if memory.policy is not BufferPolicy.MEAN_OF_FEATURES:
                feature = feature.astype(np.float32)
            slots.append(MemorySlot(feature, s["label_id"], s["source_task"], s["weight"]))
        if memory.policy is BufferPolicy.RING:
            memory.slots[cls["class_id"]] = deque(slots, maxlen=memory.per_class_capacity)
        else:
            memory.slots[cls["class_id"]] = slots
    return memory


def _adam_blobs(adam: AdamState) -> tuple[bytes, bytes]:
    first = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for lp in adam.first_moment
        for arr in (lp.weights, lp.biases)
    )
    second = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for lp in adam.second_moment
        for arr in (lp.weights, lp.biases)
    )
    return first, second


def _adam_from_blobs(model: MlpModel, doc: dict, first: bytes, second: bytes) -> AdamState:
    def read(blob: bytes) -> list[LayerParams]:
        out = []
        offset = 0
        arr = np.frombuffer(blob, dtype="<f8")
        for layer in model.layers:
            w = arr[offset : offset + layer.weights.size].reshape(layer.weights.shape).copy()
            offset += layer.weights.size
            b = arr[offset : offset + layer.biases.size].copy()
            offset += layer.biases.size
            out.append(LayerParams(w, b))
        if offset != arr.size:
            raise DataFormatError(TRUNCATED, "optimizer moment blob size mismatch")
        return out

    return AdamState(
        first_moment=read(first),
        second_moment=read(second),
        step_count=doc["step_count"],
        beta1=doc["beta1"],
        beta2=doc["beta2"],
        epsilon=doc["epsilon"],
    )


def _write_section(parts: list[bytes], blob: bytes) -> None:
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)


def save_run_checkpoint(path, ckpt: RunCheckpoint) -> None:
    """RUN1 layout: magic, version u32, then four u64-length-prefixed
    sections: JSON header, MLP1 model block, Adam first/second moments as
    float64. Memory features ride at the end, also length-prefixed."""
    memory_doc, memory_feats = _memory_to_doc(ckpt.memory)
    header = {
        "config": _config_to_doc(ckpt.config),
        "completed_tasks": ckpt.completed_tasks,
        "accuracy_rows": ckpt.accuracy_rows,
        "hyper_trace": ckpt.hyper_trace,
        "dataset_access": ckpt.dataset_access,
        "warnings": ckpt.warnings,
        "adam": {
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "epsilon": ckpt.adam.epsilon,
            "step_count": ckpt.adam.step_count,
        },
        "memory": memory_doc,
    }
    first, second = _adam_blobs(ckpt.adam)
    parts = [RUN1_MAGIC, struct.pack("<I", RUN1_VERSION)]
    _write_section(parts, json.dumps(header, sort_keys=True).encode("utf-8"))
    _write_section(parts, serialize_checkpoint(ckpt.model))
    _write_section(parts, first)
    _write_section(parts, second)
    _write_section(parts, np.ascontiguousarray(memory_feats, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_run_checkpoint(path) -> RunCheckpoint:
    blob = Path(path).read_bytes()
    mv = memoryview(blob)
    if len(mv) < 8:
        raise DataFormatError(TRUNCATED, "run checkpoint shorter than its header")
    if bytes(mv[:4]) != RUN1_MAGIC:
        raise DataFormatError(BAD_MAGIC, f"expected magic {RUN1_MAGIC!r}, got {bytes(mv[:4])!r}")
    (version,) = struct.unpack("<I", mv[4:8])
    if version != RUN1_VERSION:
        raise DataFormatError(BAD_VERSION, f"unsupported run checkpoint version {version}")
    offset = 8
    sections = []
    for _ in range(5):
        if len(mv) < offset + 8:
            raise DataFormatError(TRUNCATED, "run checkpoint truncated in section header")
        (length,) = struct.unpack("<Q", mv[offset : offset + 8])
        offset += 8
        if len(mv) < offset + length:
            raise DataFormatError(TRUNCATED, "run checkpoint truncated in section payload")
        sections.append(bytes(mv[offset : offset + length]))
        offset += length
    if offset != len(mv):
        raise DataFormatError(TRUNCATED, f"{len(mv) - offset} unexpected trailing bytes")

    header = json.loads(sections[0].decode("utf-8"))
    model = deserialize_checkpoint(sections[1])
    adam = _adam_from_blobs(model, header["adam"], sections[2], sections[3])
    memory = _memory_from_doc(header["memory"], np.frombuffer(sections[4], dtype="<f8"))
    return RunCheckpoint(
        config=_config_from_doc(header["config"]),
        model=model,
        adam=adam,
        memory=memory,
        completed_tasks=header["completed_tasks"],
        accuracy_rows=header["accuracy_rows"],
        hyper_trace=header["hyper_trace"],
        dataset_access=header["dataset_access"],
        warnings=header["warnings"],
    )
