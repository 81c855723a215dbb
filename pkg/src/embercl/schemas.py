"""Request/response models shared by the HTTP service and the CLI client.

The CLI builds these models from flags and either calls the service
handlers in-process or posts them to a running server; both paths validate
through the same schemas.
"""
from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class SyntheticRequest(BaseModel):
    out_path: str
    tasks: int = 3
    classes_per_task: int = 2
    dim_img: int = 32
    dim_txt: int = 32
    cluster_separation: float = 8.0
    within_class_drift: float = 0.0
    train_per_class: int = 200
    test_per_class: int = 100
    seed: int = 0
    write_prompts: bool = True


class SyntheticResponse(BaseModel):
    dataset_path: str
    manifest_path: str
    prompt_table_path: str | None
    n_records: int
    n_train: int
    n_test: int


class ValidateRequest(BaseModel):
    dataset_path: str
    expected: dict | None = None
    use_floodnet_expected: bool = False


class ValidateResponse(BaseModel):
    ok: bool
    mismatches: list[str]
    counts: dict[str, int]
    per_task: dict[str, dict[str, int]]


class TrainRequest(BaseModel):
    dataset_path: str
    mode: str = "joint"  # joint | taskwise | continual | continual-noreplay
    fusion: str = "mul"  # add | mul | cat
    policy: str = "reservoir"  # reservoir | ring | mof
    order: list[int] | None = None
    per_class_capacity: int = 25
    replay_batch: int = 64
    seed: int = 0
    hidden_dim: int = 1024
    num_hidden_layers: int = 3
    epochs: int = 25
    batch_size: int = 256
    dropout_rate: float = 0.2
    first_lr: float = 1e-4
    first_wd: float = 1e-5
    later_lr: float = 5e-6
    later_wd: float = 2e-5
    out_dir: str | None = None
    run_name: str = "run"


class TrainResponse(BaseModel):
    report: dict
    files: dict[str, str] = Field(default_factory=dict)
    table: str


class ZeroShotRequest(BaseModel):
    dataset_path: str
    prompts_path: str | None = None  # defaults to the manifest's prompt table
    temperature: float = 100.0
    split: str = "test"  # test | train | all


class ZeroShotTaskResult(BaseModel):
    task_id: int
    task_name: str
    accuracy: float
    count: int


class ZeroShotResponse(BaseModel):
    overall: float
    per_task: list[ZeroShotTaskResult]
    table: str


class SweepRequest(BaseModel):
    dataset_path: str
    seed: int = 0
    parallel: bool = False
    policies: list[str] | None = None
    allow_any_task_count: bool = False
    fusion: str = "mul"
    per_class_capacity: int = 25
    replay_batch: int = 64
    hidden_dim: int = 1024
    num_hidden_layers: int = 3
    epochs: int = 25
    batch_size: int = 256
    dropout_rate: float = 0.2
    first_lr: float = 1e-4
    first_wd: float = 1e-5
    later_lr: float = 5e-6
    later_wd: float = 2e-5
    out_dir: str | None = None


class SweepResponse(BaseModel):
    aggregate: list[dict]
    policy_ranking: list[dict]
    reports: list[dict] = Field(default_factory=list)
    files: dict[str, str] = Field(default_factory=dict)
    table: str


class ErrorResponse(BaseModel):
    code: str
    message: str
