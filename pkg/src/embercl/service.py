"""HTTP service wrapping the training engine.

Each endpoint is a thin route over a plain handler function that maps a
request schema to a response schema; the CLI calls the same handlers
in-process when no server is configured. File paths in requests are
resolved on the service host, which is assumed to share a filesystem with
its clients. Output files are written from timing-stripped reports so the
same seed always produces the same bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .data import (
    EmbeddingDataset,
    SyntheticSpec,
    build_prompt_sets,
    dataset_counts,
    floodnet_expected_counts,
    gen_synthetic,
    load_dataset,
    manifest_path_for,
    read_emb1_raw,
    synthetic_prompt_records,
    validate_counts,
    write_emb1,
    write_prompt_table,
)
from .errors import DataFormatError, EngineError, ModeMismatchError, NumericFailureError
from .memory import BufferPolicy
from .mlp import TrainConfig, save_checkpoint
from .reporting import (
    RunReport,
    emit_report,
    overall_accuracy,
    render_accuracy_table,
    report_to_dict,
)
from .schemas import (
    ErrorResponse,
    HealthResponse,
    SweepRequest,
    SweepResponse,
    SyntheticRequest,
    SyntheticResponse,
    TrainRequest,
    TrainResponse,
    ValidateRequest,
    ValidateResponse,
    ZeroShotRequest,
    ZeroShotResponse,
    ZeroShotTaskResult,
)
from .training import (
    RunConfig,
    TrainMode,
    build_curriculum,
    permutation_sweep,
    policy_ranking,
    train_continual,
    train_supervised,
    train_taskwise,
)
from .vectors import FusionMode, zero_shot_predict

_POLICIES = {p.value: p for p in BufferPolicy}
_FUSIONS = {f.value: f for f in FusionMode}
_MODES = {m.value: m for m in TrainMode}


def handle_health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


def handle_synthetic(req: SyntheticRequest) -> SyntheticResponse:
    spec = SyntheticSpec(
        tasks=req.tasks,
        classes_per_task=req.classes_per_task,
        dim_img=req.dim_img,
        dim_txt=req.dim_txt,
        cluster_separation=req.cluster_separation,
        within_class_drift=req.within_class_drift,
        train_per_class=req.train_per_class,
        test_per_class=req.test_per_class,
        seed=req.seed,
    )
    records, manifest = gen_synthetic(spec)
    out_path = Path(req.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    prompt_path = None
    if req.write_prompts:
        prompt_path = out_path.with_suffix(".prompts.emb1")
        write_prompt_table(synthetic_prompt_records(spec), prompt_path, dim=spec.dim_img)
        manifest.prompt_table = prompt_path.name
    write_emb1(records, manifest, out_path)
    counts, _ = dataset_counts(EmbeddingDataset(records, manifest))
    return SyntheticResponse(
        dataset_path=str(out_path),
        manifest_path=str(manifest_path_for(out_path)),
        prompt_table_path=str(prompt_path) if prompt_path else None,
        n_records=counts["n_total"],
        n_train=counts["n_train"],
        n_test=counts["n_test"],
    )


def handle_validate(req: ValidateRequest) -> ValidateResponse:
    dataset = load_dataset(req.dataset_path)
    expected = req.expected
    if expected is None and req.use_floodnet_expected:
        expected = floodnet_expected_counts()
    if expected is None:
        expected = {}
    report = validate_counts(dataset, expected)
    return ValidateResponse(
        ok=report.ok,
        mismatches=report.mismatches,
        counts=report.counts,
        per_task={str(k): v for k, v in sorted(report.per_task.items())},
    )


def _run_config_from_request(dataset: EmbeddingDataset, req: TrainRequest | SweepRequest,
                             mode: TrainMode, policy: BufferPolicy) -> RunConfig:
    if isinstance(req, TrainRequest) and req.order is not None:
        order = req.order
    else:
        order = None
    first = TrainConfig(req.first_lr, req.first_wd, req.dropout_rate, req.batch_size, req.epochs, req.seed)
    later = TrainConfig(req.later_lr, req.later_wd, req.dropout_rate, req.batch_size, req.epochs, req.seed)
    curriculum = build_curriculum(dataset, order=order, first_config=first, later_config=later, seed=req.seed)
    return RunConfig(
        fusion_mode=_FUSIONS[req.fusion],
        curriculum=curriculum,
        mode=mode,
        policy=policy,
        per_class_capacity=req.per_class_capacity,
        replay_batch=req.replay_batch,
        seed=req.seed,
        hidden_dim=req.hidden_dim,
        num_hidden_layers=req.num_hidden_layers,
    )


def _lookup(table: dict, key: str, what: str):
    if key not in table:
        raise ModeMismatchError(f"unknown {what} {key!r}; choose from {sorted(table)}")
    return table[key]


def _emit_run_files(report: RunReport, out_dir: str, run_name: str) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stripped = report.without_timing()
    files = {}
    json_path = out / f"{run_name}.report.json"
    emit_report(stripped, "json", json_path)
    files["report_json"] = str(json_path)
    if report.accuracy_matrix is not None:
        csv_path = out / f"{run_name}.matrix.csv"
        emit_report(stripped, "csv", csv_path)
        files["matrix_csv"] = str(csv_path)
        svg_path = out / f"{run_name}.curves.svg"
        emit_report(stripped, "svg", svg_path)
        files["curves_svg"] = str(svg_path)
    return files


def handle_train(req: TrainRequest) -> TrainResponse:
    dataset = load_dataset(req.dataset_path)
    mode = _lookup(_MODES, req.mode, "mode")
    policy = _lookup(_POLICIES, req.policy, "policy")
    config = _run_config_from_request(dataset, req, mode, policy)

    files: dict[str, str] = {}
    checkpoint_path = None
    if req.out_dir is not None:
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out / f"{req.run_name}.run1"

    if mode is TrainMode.JOINT_SUPERVISED:
        model, report = train_supervised(dataset, config)
        models = [model]
    elif mode is TrainMode.TASKWISE:
        models, report = train_taskwise(dataset, config)
        model = models[-1]
    else:
        model, report = train_continual(dataset, config, checkpoint_path=checkpoint_path)
        models = [model]
        if checkpoint_path is not None:
            files["checkpoint_run1"] = str(checkpoint_path)

    if req.out_dir is not None:
        if mode is TrainMode.TASKWISE:
            for task_id, m in zip(report.task_ids, models):
                path = Path(req.out_dir) / f"{req.run_name}.task{task_id}.mlp1"
                save_checkpoint(m, path)
                files[f"model_task{task_id}_mlp1"] = str(path)
        else:
            path = Path(req.out_dir) / f"{req.run_name}.mlp1"
            save_checkpoint(model, path)
            files["model_mlp1"] = str(path)
        files.update(_emit_run_files(report, req.out_dir, req.run_name))

    label = f"{req.fusion}-{req.mode}"
    table = render_accuracy_table(
        [(label, report.overall, report.per_task_final)], report.task_names
    )
    return TrainResponse(report=report_to_dict(report), files=files, table=table)


def _resolve_prompt_path(dataset_path: str, req: ZeroShotRequest) -> Path:
    if req.prompts_path is not None:
        return Path(req.prompts_path)
    dataset = Path(dataset_path)
    manifest = load_dataset(dataset_path).manifest
    if manifest.prompt_table:
        return dataset.parent / manifest.prompt_table
    raise DataFormatError(
        "missing_prompt_table",
        f"no prompt table given and the manifest of {dataset_path} references none",
    )


def handle_zeroshot(req: ZeroShotRequest) -> ZeroShotResponse:
    dataset = load_dataset(req.dataset_path)
    prompt_path = _resolve_prompt_path(req.dataset_path, req)
    if not prompt_path.exists():
        raise DataFormatError("missing_prompt_table", f"prompt table {prompt_path} does not exist")
    prompt_sets = build_prompt_sets(read_emb1_raw(prompt_path))

    if req.split == "test":
        records = dataset.test_records()
    elif req.split == "train":
        records = dataset.train_records()
    elif req.split == "all":
        records = dataset.records
    else:
        raise ModeMismatchError(f"unknown split {req.split!r}; choose test, train or all")

    per_task: list[ZeroShotTaskResult] = []
    for task in dataset.manifest.tasks:
        task_records = [r for r in records if r.task_id == task.task_id]
        if not task_records:
            continue
        prompts = prompt_sets.get(task.task_id)
        if prompts is None:
            raise DataFormatError(
                "missing_prompt_table", f"prompt table has no entries for task {task.task_id}"
            )
        correct = 0
        for record in task_records:
            label, _ = zero_shot_predict(record.image_embedding, prompts, req.temperature)
            if label == record.label_id:
                correct += 1
        per_task.append(
            ZeroShotTaskResult(
                task_id=task.task_id,
                task_name=task.name,
                accuracy=100.0 * correct / len(task_records),
                count=len(task_records),
            )
        )
    if not per_task:
        raise DataFormatError("missing_prompt_table", "no scorable records in the requested split")
    overall = overall_accuracy([t.accuracy for t in per_task], [t.count for t in per_task])
    table = render_accuracy_table(
        [("zero-shot", overall, [t.accuracy for t in per_task])],
        [t.task_name for t in per_task],
    )
    return ZeroShotResponse(overall=overall, per_task=per_task, table=table)


def handle_sweep(req: SweepRequest) -> SweepResponse:
    dataset = load_dataset(req.dataset_path)
    base = _run_config_from_request(dataset, req, TrainMode.CONTINUAL, BufferPolicy.RESERVOIR)
    policies = None
    if req.policies is not None:
        policies = [_lookup(_POLICIES, p, "policy") for p in req.policies]
    result = permutation_sweep(
        dataset,
        base,
        policies=policies,
        parallel=req.parallel,
        allow_any_task_count=req.allow_any_task_count,
    )
    ranking = [{"policy": p, "mean_average_accuracy": v} for p, v in policy_ranking(result)]

    files: dict[str, str] = {}
    if req.out_dir is not None:
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        aggregate_path = out / "sweep.aggregate.json"
        aggregate_path.write_text(
            json.dumps({"aggregate": result.aggregate, "policy_ranking": ranking},
                       indent=2, sort_keys=True) + "\n"
        )
        files["aggregate_json"] = str(aggregate_path)
        for entry in result.entries:
            name = f"sweep.order-{'-'.join(map(str, entry.order))}.{entry.policy.value}"
            files[name] = str(out / f"{name}.report.json")
            emit_report(entry.report.without_timing(), "json", out / f"{name}.report.json")

    table_rows = [
        (f"{row['order']} / {row['policy']}", row["overall"],
         [row["average_accuracy"], row["mean_forgetting"]])
        for row in result.aggregate
    ]
    table = render_accuracy_table(table_rows, ["Avg accuracy", "Mean forgetting"])
    return SweepResponse(
        aggregate=result.aggregate,
        policy_ranking=ranking,
        reports=[report_to_dict(e.report) for e in result.entries],
        files=files,
        table=table,
    )


app = FastAPI(title="embercl", version=__version__)


@app.exception_handler(EngineError)
async def engine_error_handler(request: Request, exc: EngineError):
    if isinstance(exc, DataFormatError):
        status, code = 422, exc.code
    elif isinstance(exc, NumericFailureError):
        status, code = 500, "numeric_failure"
    else:
        status, code = 400, "usage"
    payload = ErrorResponse(code=code, message=str(exc))
    return JSONResponse(status_code=status, content=payload.model_dump())


@app.exception_handler(FileNotFoundError)
async def missing_file_handler(request: Request, exc: FileNotFoundError):
    payload = ErrorResponse(code="missing_file", message=str(exc))
    return JSONResponse(status_code=422, content=payload.model_dump())


@app.exception_handler(ValueError)
async def value_error_handler(request: Request, exc: ValueError):
    payload = ErrorResponse(code="usage", message=str(exc))
    return JSONResponse(status_code=400, content=payload.model_dump())


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return handle_health()


@app.post("/datasets/synthetic", response_model=SyntheticResponse)
def datasets_synthetic(req: SyntheticRequest) -> SyntheticResponse:
    return handle_synthetic(req)


@app.post("/datasets/validate", response_model=ValidateResponse)
def datasets_validate(req: ValidateRequest) -> ValidateResponse:
    return handle_validate(req)


@app.post("/runs/train", response_model=TrainResponse)
def runs_train(req: TrainRequest) -> TrainResponse:
    return handle_train(req)


@app.post("/runs/zeroshot", response_model=ZeroShotResponse)
def runs_zeroshot(req: ZeroShotRequest) -> ZeroShotResponse:
    return handle_zeroshot(req)


@app.post("/runs/sweep", response_model=SweepResponse)
def runs_sweep(req: SweepRequest) -> SweepResponse:
    return handle_sweep(req)
