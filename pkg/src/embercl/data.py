"""Embedding dataset storage and generation.

On-disk layout (all integers little-endian):

  EMB1 file: magic "EMB1", version u32 = 1, n_records u64, d_img u32,
  d_txt u32, then per record: record_id u64, task_id u16, label_id u16,
  padding u32 = 0, d_img float32 image components, d_txt float32 text
  components.

  Manifest: JSON sidecar with the same basename and a ".manifest"
  extension; carries task descriptors, label vocabulary, dims, the
  train/test assignment, provenance notes, and an optional reference to an
  auxiliary EMB1 prompt table for zero-shot scoring.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np

from .errors import (
    BAD_MAGIC,
    BAD_MANIFEST,
    BAD_VERSION,
    DIM_MISMATCH,
    LABEL_TASK_MISMATCH,
    NAN_PAYLOAD,
    TRAILING_DATA,
    TRUNCATED,
    DataFormatError,
)
from .vectors import PromptSet

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1
_HEADER = struct.Struct("<4sIQII")
_RECORD_HEAD = struct.Struct("<QHHI")


class SyntheticSpecError(ValueError):
    """The synthetic-dataset spec cannot be realized."""


@dataclass
class EmbeddingRecord:
    record_id: int
    task_id: int
    label_id: int
    image_embedding: np.ndarray
    text_embedding: np.ndarray


@dataclass
class TaskDescriptor:
    task_id: int
    name: str
    labels: dict[str, int]  # label name -> global label id
    prompt_template: str = "{label}"

    @property
    def label_ids(self) -> set[int]:
        return set(self.labels.values())


@dataclass
class Manifest:
    name: str
    d_img: int
    d_txt: int
    tasks: list[TaskDescriptor]
    split: dict[int, str] = field(default_factory=dict)  # record_id -> "train"|"test"
    provenance: dict[str, str] = field(default_factory=dict)
    prompt_table: str | None = None

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError("task names must be unique")
        ids = sorted({gid for t in self.tasks for gid in t.labels.values()})
        if ids != list(range(len(ids))):
            raise ValueError(f"global label ids must be dense 0..C-1, got {ids}")
        bad = {s for s in self.split.values()} - {"train", "test"}
        if bad:
            raise ValueError(f"split values must be train/test, got {sorted(bad)}")

    @property
    def num_labels(self) -> int:
        return len({gid for t in self.tasks for gid in t.labels.values()})

    def task(self, task_id: int) -> TaskDescriptor:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"no task with id {task_id}")

    def label_name(self, global_id: int) -> str:
        for t in self.tasks:
            for name, gid in t.labels.items():
                if gid == global_id:
                    return name
        raise KeyError(f"no label with global id {global_id}")

    def to_json(self) -> str:
        doc = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "name": self.name,
            "dims": {"image": self.d_img, "text": self.d_txt},
            "tasks": [
                {
                    "task_id": t.task_id,
                    "name": t.name,
                    "labels": t.labels,
                    "prompt_template": t.prompt_template,
                }
                for t in self.tasks
            ],
            "split": {str(rid): where for rid, where in sorted(self.split.items())},
            "provenance": self.provenance,
            "prompt_table": self.prompt_table,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataFormatError(BAD_MANIFEST, f"manifest is not valid JSON: {e}") from e
        try:
            if doc["schema_version"] != MANIFEST_SCHEMA_VERSION:
                raise DataFormatError(
                    BAD_VERSION, f"unsupported manifest schema {doc['schema_version']}"
                )
            tasks = [
                TaskDescriptor(
                    task_id=int(t["task_id"]),
                    name=t["name"],
                    labels={k: int(v) for k, v in t["labels"].items()},
                    prompt_template=t.get("prompt_template", "{label}"),
                )
                for t in doc["tasks"]
            ]
            return cls(
                name=doc["name"],
                d_img=int(doc["dims"]["image"]),
                d_txt=int(doc["dims"]["text"]),
                tasks=tasks,
                split={int(k): v for k, v in doc.get("split", {}).items()},
                provenance=doc.get("provenance", {}),
                prompt_table=doc.get("prompt_table"),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, DataFormatError):
                raise
            raise DataFormatError(BAD_MANIFEST, f"manifest missing or malformed field: {e}") from e


@dataclass
class EmbeddingDataset:
    records: list[EmbeddingRecord]
    manifest: Manifest

    def train_records(self) -> list[EmbeddingRecord]:
        return [r for r in self.records if self.manifest.split.get(r.record_id) == "train"]

    def test_records(self) -> list[EmbeddingRecord]:
        return [r for r in self.records if self.manifest.split.get(r.record_id) == "test"]

    def task_ids(self) -> list[int]:
        return [t.task_id for t in self.manifest.tasks]


def manifest_path_for(dataset_path) -> Path:
    return Path(dataset_path).with_suffix(".manifest")


def write_emb1(records: list[EmbeddingRecord], manifest: Manifest, path) -> None:
    """Write records + sidecar manifest, validating against manifest dims."""
    path = Path(path)
    payload = [_HEADER.pack(EMB1_MAGIC, EMB1_VERSION, len(records), manifest.d_img, manifest.d_txt)]
    for rec in records:
        img = np.ascontiguousarray(rec.image_embedding, dtype="<f4")
        txt = np.ascontiguousarray(rec.text_embedding, dtype="<f4")
        if img.shape != (manifest.d_img,) or txt.shape != (manifest.d_txt,):
            raise DataFormatError(
                DIM_MISMATCH,
                f"record {rec.record_id} dims {img.shape}/{txt.shape} do not match "
                f"manifest dims ({manifest.d_img},)/({manifest.d_txt},)",
            )
        if not (np.all(np.isfinite(img)) and np.all(np.isfinite(txt))):
            raise DataFormatError(NAN_PAYLOAD, f"record {rec.record_id} has non-finite components")
        payload.append(_RECORD_HEAD.pack(rec.record_id, rec.task_id, rec.label_id, 0))
        payload.append(img.tobytes())
        payload.append(txt.tobytes())
    path.write_bytes(b"".join(payload))
    manifest_path_for(path).write_text(manifest.to_json())


def read_emb1(path) -> tuple[list[EmbeddingRecord], Manifest]:
    """Read records + sidecar manifest, failing closed on any corruption."""
    path = Path(path)
    blob = path.read_bytes()
    records = _parse_emb1(memoryview(blob), str(path))
    mpath = manifest_path_for(path)
    if not mpath.exists():
        raise DataFormatError(BAD_MANIFEST, f"missing manifest sidecar {mpath}")
    manifest = Manifest.from_json(mpath.read_text())
    return records, manifest


def read_emb1_raw(path) -> list[EmbeddingRecord]:
    """Read an EMB1 file that has no manifest sidecar (e.g. a prompt table)."""
    blob = Path(path).read_bytes()
    return _parse_emb1(memoryview(blob), str(path))


def _parse_emb1(mv: memoryview, where: str) -> list[EmbeddingRecord]:
    if len(mv) < _HEADER.size:
        raise DataFormatError(TRUNCATED, f"{where}: shorter than the EMB1 header")
    magic, version, n_records, d_img, d_txt = _HEADER.unpack(mv[: _HEADER.size])
    if magic != EMB1_MAGIC:
        raise DataFormatError(BAD_MAGIC, f"{where}: expected magic {EMB1_MAGIC!r}, got {magic!r}")
    if version != EMB1_VERSION:
        raise DataFormatError(BAD_VERSION, f"{where}: unsupported version {version}")
    record_bytes = _RECORD_HEAD.size + 4 * (d_img + d_txt)
    expected = _HEADER.size + n_records * record_bytes
    if len(mv) < expected:
        raise DataFormatError(
            TRUNCATED, f"{where}: need {expected} bytes for {n_records} records, have {len(mv)}"
        )
    if len(mv) > expected:
        raise DataFormatError(TRAILING_DATA, f"{where}: {len(mv) - expected} trailing bytes")
    records = []
    offset = _HEADER.size
    for _ in range(n_records):
        record_id, task_id, label_id, _pad = _RECORD_HEAD.unpack(mv[offset : offset + _RECORD_HEAD.size])
        offset += _RECORD_HEAD.size
        img = np.frombuffer(mv, dtype="<f4", count=d_img, offset=offset).copy()
        offset += 4 * d_img
        txt = np.frombuffer(mv, dtype="<f4", count=d_txt, offset=offset).copy()
        offset += 4 * d_txt
        if not (np.all(np.isfinite(img)) and np.all(np.isfinite(txt))):
            raise DataFormatError(NAN_PAYLOAD, f"{where}: record {record_id} has non-finite components")
        records.append(EmbeddingRecord(record_id, task_id, label_id, img, txt))
    return records


def load_dataset(path) -> EmbeddingDataset:
    """Read and cross-validate an EMB1 file against its manifest."""
    records, manifest = read_emb1(path)
    if records:
        d_img = records[0].image_embedding.shape[0]
        d_txt = records[0].text_embedding.shape[0]
        if (d_img, d_txt) != (manifest.d_img, manifest.d_txt):
            raise DataFormatError(
                DIM_MISMATCH,
                f"file dims {d_img}/{d_txt} do not match manifest dims "
                f"{manifest.d_img}/{manifest.d_txt}",
            )
    task_labels = {t.task_id: t.label_ids for t in manifest.tasks}
    for rec in records:
        allowed = task_labels.get(rec.task_id)
        if allowed is None:
            raise DataFormatError(
                LABEL_TASK_MISMATCH, f"record {rec.record_id} names unknown task {rec.task_id}"
            )
        if rec.label_id not in allowed:
            raise DataFormatError(
                LABEL_TASK_MISMATCH,
                f"record {rec.record_id} label {rec.label_id} is outside task {rec.task_id}'s label set",
            )
    return EmbeddingDataset(records, manifest)


@dataclass
class CountReport:
    counts: dict[str, int]
    per_task: dict[int, dict[str, int]]
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def dataset_counts(dataset: EmbeddingDataset) -> tuple[dict[str, int], dict[int, dict[str, int]]]:
    counts = {"n_total": len(dataset.records), "n_train": 0, "n_test": 0}
    per_task: dict[int, dict[str, int]] = {
        t.task_id: {"n_total": 0, "n_train": 0, "n_test": 0} for t in dataset.manifest.tasks
    }
    for rec in dataset.records:
        where = dataset.manifest.split.get(rec.record_id)
        bucket = per_task.setdefault(rec.task_id, {"n_total": 0, "n_train": 0, "n_test": 0})
        bucket["n_total"] += 1
        if where == "train":
            counts["n_train"] += 1
            bucket["n_train"] += 1
        elif where == "test":
            counts["n_test"] += 1
            bucket["n_test"] += 1
    return counts, per_task


def validate_counts(dataset: EmbeddingDataset, expected: dict) -> CountReport:
    """Compare dataset record counts (overall, per split, per task) against
    an expectation bundle; only keys present in the bundle are checked."""
    counts, per_task = dataset_counts(dataset)
    mismatches = []
    for key in ("n_total", "n_train", "n_test"):
        if key in expected and expected[key] != counts[key]:
            mismatches.append(f"{key}: expected {expected[key]}, found {counts[key]}")
    for task_key, sub in expected.get("per_task", {}).items():
        task_id = int(task_key)
        found = per_task.get(task_id)
        if found is None:
            mismatches.append(f"task {task_id}: expected but absent")
            continue
        for key, want in sub.items():
            if found.get(key) != want:
                mismatches.append(f"task {task_id} {key}: expected {want}, found {found.get(key)}")
    return CountReport(counts=counts, per_task=per_task, mismatches=mismatches)


def floodnet_expected_counts() -> dict:
    """Published record counts for the aerial-VQA export this engine targets."""
    text = importlib_resources.files("embercl.resources").joinpath("floodnet_expected.json").read_text()
    return json.loads(text)


def floodnet_manifest_template() -> Manifest:
    """Default task/label manifest for the aerial-VQA export: yes/no answers
    plus a condition vocabulary shared by the image- and road-condition
    tasks. Real exports override the label names from the answer column."""
    text = importlib_resources.files("embercl.resources").joinpath(
        "floodnet_manifest_template.json"
    ).read_text()
    return Manifest.from_json(text)


def split_train_test(
    records: list[EmbeddingRecord],
    test_fraction: float,
    seed: int,
    presplit: dict[int, str] | None = None,
) -> tuple[list[EmbeddingRecord], list[EmbeddingRecord]]:
    """Class-stratified split per task. A pre-assigned split (from a
    manifest) is honored verbatim when provided. Classes with fewer than
    two records go entirely to train, with a warning."""
    if presplit:
        train = [r for r in records if presplit.get(r.record_id) == "train"]
        test = [r for r in records if presplit.get(r.record_id) == "test"]
        return train, test
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    by_class: dict[tuple[int, int], list[EmbeddingRecord]] = {}
    for rec in records:
        by_class.setdefault((rec.task_id, rec.label_id), []).append(rec)
    test_ids = set()
    for key in sorted(by_class):
        group = by_class[key]
        if len(group) < 2:
            warnings.warn(
                f"task {key[0]} label {key[1]} has {len(group)} record(s); kept in train",
                UserWarning,
            )
            continue
        n_test = min(int(round(len(group) * test_fraction)), len(group) - 1)
        chosen = rng.choice(len(group), size=n_test, replace=False)
        test_ids.update(group[i].record_id for i in chosen)
    train = [r for r in records if r.record_id not in test_ids]
    test = [r for r in records if r.record_id in test_ids]
    return train, test


@dataclass
class SyntheticSpec:
    """Desk-scale clustered dataset: per-class Gaussian image embeddings
    around well-separated means, per-task text embeddings around a task
    mean. `within_class_drift` displaces each class's samples along a
    random direction across the stream order (total displacement in units
    of the cluster sigma), giving replay policies distinct coverage."""

    tasks: int = 3
    classes_per_task: int = 2
    dim_img: int = 32
    dim_txt: int = 32
    cluster_separation: float = 8.0
    train_per_class: int = 200
    test_per_class: int = 100
    seed: int = 0
    within_class_drift: float = 0.0
    text_jitter: float = 0.1

    def __post_init__(self):
        if self.tasks < 1 or self.classes_per_task < 1:
            raise SyntheticSpecError("tasks and classes_per_task must be >= 1")
        if self.dim_img < 1 or self.dim_txt < 1:
            raise SyntheticSpecError("dims must be >= 1")
        if self.cluster_separation <= 0:
            raise SyntheticSpecError("cluster_separation must be positive")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise SyntheticSpecError("per-class counts must be >= 1 train / >= 0 test")
        if self.within_class_drift < 0:
            raise SyntheticSpecError("within_class_drift must be >= 0")


def _place_means(rng: np.random.Generator, count: int, dim: int, min_distance: float) -> np.ndarray:
    """Sample `count` points whose minimum pairwise distance is exactly
    min_distance: random Gaussian directions rescaled so the closest pair
    sits at the requested separation."""
    if count == 1:
        return rng.normal(0.0, 1.0, size=(1, dim))
    for _ in range(100):
        means = rng.normal(0.0, 1.0, size=(count, dim))
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs**2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        closest = dist.min()
        if closest > 0:
            return means * (min_distance / closest)
    raise SyntheticSpecError(
        f"could not place {count} means at separation {min_distance} in dim {dim}"
    )


def gen_synthetic(spec: SyntheticSpec) -> tuple[list[EmbeddingRecord], Manifest]:
    """Generate records + manifest; fully deterministic under spec.seed.
    Labels are disjoint across tasks; record order is the stream order."""
    rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), 0)))
    n_classes = spec.tasks * spec.classes_per_task
    class_means = _place_means(rng, n_classes, spec.dim_img, spec.cluster_separation)
    # Text means stay at unit scale: they encode task identity (the nearly
    # constant question phrasing), not class geometry, and moderate
    # magnitudes keep multiplicative fusion well conditioned.
    task_means = _place_means(rng, spec.tasks, spec.dim_txt, min(2.0, spec.cluster_separation))

    records: list[EmbeddingRecord] = []
    split: dict[int, str] = {}
    tasks: list[TaskDescriptor] = []
    record_id = 0
    per_class = spec.train_per_class + spec.test_per_class
    for task_id in range(spec.tasks):
        labels = {}
        for c in range(spec.classes_per_task):
            gid = task_id * spec.classes_per_task + c
            labels[f"class_{gid}"] = gid
            mean = class_means[gid]
            drift_dir = rng.normal(size=spec.dim_img)
            drift_dir /= np.linalg.norm(drift_dir)
            imgs = mean + rng.normal(size=(per_class, spec.dim_img))
            if spec.within_class_drift > 0 and per_class > 1:
                ramp = np.linspace(0.0, spec.within_class_drift, per_class)
                imgs = imgs + ramp[:, None] * drift_dir[None, :]
            txts = task_means[task_id] + spec.text_jitter * rng.normal(size=(per_class, spec.dim_txt))
            test_positions = set(
                rng.choice(per_class, size=spec.test_per_class, replace=False).tolist()
            ) if spec.test_per_class else set()
            for i in range(per_class):
                records.append(
                    EmbeddingRecord(
                        record_id=record_id,
                        task_id=task_id,
                        label_id=gid,
                        image_embedding=imgs[i].astype(np.float32),
                        text_embedding=txts[i].astype(np.float32),
                    )
                )
                split[record_id] = "test" if i in test_positions else "train"
                record_id += 1
        tasks.append(TaskDescriptor(task_id=task_id, name=f"task-{task_id}", labels=labels))

    manifest = Manifest(
        name=f"synthetic-{spec.tasks}task",
        d_img=spec.dim_img,
        d_txt=spec.dim_txt,
        tasks=tasks,
        split=split,
        provenance={
            "generator": "embercl.gen_synthetic",
            "seed": str(spec.seed),
            "cluster_separation": str(spec.cluster_separation),
            "within_class_drift": str(spec.within_class_drift),
        },
    )
    return records, manifest


def synthetic_prompt_records(spec: SyntheticSpec) -> list[EmbeddingRecord]:
    """Prompt table for a synthetic dataset: one record per class whose
    text slot holds the class mean (the ideal prompt in image space)."""
    rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), 0)))
    n_classes = spec.tasks * spec.classes_per_task
    class_means = _place_means(rng, n_classes, spec.dim_img, spec.cluster_separation)
    prompts = []
    for task_id in range(spec.tasks):
        for c in range(spec.classes_per_task):
            gid = task_id * spec.classes_per_task + c
            prompts.append(
                EmbeddingRecord(
                    record_id=gid,
                    task_id=task_id,
                    label_id=gid,
                    image_embedding=np.zeros(0, dtype=np.float32),
                    text_embedding=class_means[gid].astype(np.float32),
                )
            )
    return prompts


def write_prompt_table(prompts: list[EmbeddingRecord], path, dim: int) -> None:
    """Prompt tables reuse the EMB1 layout with d_img = 0; the prompt
    vector rides in the text slot."""
    payload = [_HEADER.pack(EMB1_MAGIC, EMB1_VERSION, len(prompts), 0, dim)]
    for rec in prompts:
        vec = np.ascontiguousarray(rec.text_embedding, dtype="<f4")
        if vec.shape != (dim,):
            raise DataFormatError(
                DIM_MISMATCH, f"prompt {rec.record_id} has dim {vec.shape[0]}, expected {dim}"
            )
        payload.append(_RECORD_HEAD.pack(rec.record_id, rec.task_id, rec.label_id, 0))
        payload.append(vec.tobytes())
    Path(path).write_bytes(b"".join(payload))


def build_prompt_sets(prompts: list[EmbeddingRecord]) -> dict[int, PromptSet]:
    """Group prompt records into one PromptSet per task."""
    by_task: dict[int, list[EmbeddingRecord]] = {}
    for rec in prompts:
        by_task.setdefault(rec.task_id, []).append(rec)
    out = {}
    for task_id, recs in sorted(by_task.items()):
        recs = sorted(recs, key=lambda r: r.label_id)
        out[task_id] = PromptSet(
            task_id=task_id,
            label_ids=tuple(r.label_id for r in recs),
            embeddings=np.stack([r.text_embedding for r in recs]),
        )
    return out
