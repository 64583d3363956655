"""Incremental-task protocols, per-task evaluation, and the relative
accuracy dropping rate.

Protocols are built from manifests only; evaluation takes a prediction
callable so this module stays independent of the model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import LabeledInstance
from .errors import ConfigError, InputError, ParseError, ProtocolError
from .generator import ManifestRow


@dataclass
class FscilProtocol:
    tasks: list[list[int]]  # class ids per task; task 0 is the base task
    shots_per_class: int = 5
    exemplars_per_class: int = 1
    mode: str = "within"  # "within" | "cross" | "dfsl" | "single"
    shot_seed: int = 0
    exemplar_seed: int = 0
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[int] = set()
        for task in self.tasks:
            overlap = seen.intersection(task)
            if overlap:
                raise ProtocolError(f"task class sets overlap: {sorted(overlap)}")
            seen.update(task)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def classes_through(self, task_index: int) -> list[int]:
        out: list[int] = []
        for task in self.tasks[:task_index + 1]:
            out.extend(task)
        return out


def _classes_by_train_frequency(manifest: list[ManifestRow]) -> list[int]:
    counts: dict[int, int] = {}
    names: dict[int, str] = {}
    for row in manifest:
        names[row.class_id] = row.class_name
        if row.split == "train":
            counts[row.class_id] = counts.get(row.class_id, 0) + 1
    # descending frequency, ties by name: stable under manifest reordering
    return sorted(counts, key=lambda cid: (-counts[cid], names[cid]))


def _partition(class_ids: list[int], per_task: int) -> list[list[int]]:
    return [class_ids[i:i + per_task] for i in range(0, len(class_ids), per_task)]


def build_within_protocol(manifest: list[ManifestRow], novel_tasks: int,
                          seed: int = 0, base_count: int | None = None,
                          shots_per_class: int = 5) -> FscilProtocol:
    """Frequency-sorted split: most frequent half is the base task, the
    rest is cut in sorted order into `novel_tasks` near-equal tasks.
    """
    ordered = _classes_by_train_frequency(manifest)
    if len(ordered) < 4:
        raise ConfigError("need at least 4 classes with training data")
    if base_count is None:
        base_count = len(ordered) // 2
    novel = ordered[base_count:]
    if novel_tasks < 1 or novel_tasks > len(novel):
        raise ConfigError(
            f"cannot split {len(novel)} novel classes into {novel_tasks} tasks")
    per_task = -(-len(novel) // novel_tasks)  # ceil; last task absorbs remainder
    tasks = [ordered[:base_count], *_partition(novel, per_task)]
    names = {row.class_id: row.class_name for row in manifest}
    return FscilProtocol(tasks=tasks, mode="within", shot_seed=seed,
                         exemplar_seed=seed + 1, shots_per_class=shots_per_class,
                         class_names=names)


def build_cross_protocol(synthetic_manifest: list[ManifestRow],
                         real_manifest: list[ManifestRow], novel_per_task: int,
                         seed: int = 0, shots_per_class: int = 5) -> FscilProtocol:
    """Synthetic classes form the base task; real classes arrive in tasks of
    `novel_per_task`.  Class names present on both sides are dropped from
    the base and kept as novel.
    """
    if not real_manifest:
        raise ConfigError("empty real manifest")
    real_names = {row.class_name for row in real_manifest}
    base = sorted({row.class_id for row in synthetic_manifest
                   if row.class_name not in real_names})
    if not base:
        raise ConfigError("no non-overlapping synthetic base classes")
    novel = sorted({row.class_id for row in real_manifest})
    if novel_per_task < 1:
        raise ConfigError("novel_per_task must be >= 1")
    names = {row.class_id: row.class_name
             for row in [*synthetic_manifest, *real_manifest]}
    return FscilProtocol(tasks=[base, *_partition(novel, novel_per_task)],
                         mode="cross", shot_seed=seed, exemplar_seed=seed + 1,
                         shots_per_class=shots_per_class, class_names=names)


def make_dfsl_protocol(base_manifest: list[ManifestRow],
                       novel_manifest: list[ManifestRow], k: int = 5,
                       seed: int = 0) -> FscilProtocol:
    """Two-task degenerate protocol: base task plus one k-shot novel task."""
    proto = build_cross_protocol(base_manifest, novel_manifest,
                                 novel_per_task=10**9, seed=seed,
                                 shots_per_class=k)
    proto.mode = "dfsl"
    return proto


def sample_shots(protocol: FscilProtocol, train_instances: list[LabeledInstance],
                 task_index: int, seed: int | None = None
                 ) -> list[LabeledInstance]:
    """Exactly k seeded-random training instances per class of the task."""
    if task_index < 1 or task_index >= protocol.n_tasks:
        raise ProtocolError(f"task_index {task_index} is not an incremental task")
    seed = protocol.shot_seed if seed is None else seed
    k = protocol.shots_per_class
    shots: list[LabeledInstance] = []
    for class_id in protocol.tasks[task_index]:
        pool = [inst for inst in train_instances
                if inst.class_id == class_id and inst.split == "train"]
        if not pool:
            raise ProtocolError(f"class {class_id} has no training instances")
        if len(pool) < k:
            warnings.warn(
                f"class {class_id}: only {len(pool)} training instances "
                f"for {k}-shot sampling")
            shots.extend(pool)
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, task_index, class_id]))
        picks = rng.choice(len(pool), size=k, replace=False)
        shots.extend(pool[i] for i in picks)
    return shots


def evaluate(predict_fn, test_instances: list[LabeledInstance],
             protocol: FscilProtocol, through_task: int) -> float:
    """Accuracy over the test instances of every class seen so far.

    predict_fn maps a list of instances to an array of predicted class ids.
    """
    seen = set(protocol.classes_through(through_task))
    pool = [inst for inst in test_instances
            if inst.split == "test" and inst.class_id in seen]
    if not pool:
        raise ProtocolError("no test instances for the seen classes")
    predictions = np.asarray(predict_fn(pool))
    truth = np.array([inst.class_id for inst in pool])
    return float(np.mean(predictions == truth))


def delta_metric(accuracies: list[float]) -> float:
    """Relative accuracy dropping rate between first and last task."""
    if len(accuracies) < 2:
        raise InputError("need at least 2 accuracy entries")
    first, last = accuracies[0], accuracies[-1]
    if first <= 0.0:
        raise InputError("undefined metric: first accuracy is 0")
    return abs(last - first) / first * 100.0


@dataclass
class EvalReport:
    per_task: list[tuple[int, int, float]]  # (task_index, classes_seen, accuracy)

    @property
    def accuracies(self) -> list[float]:
        return [acc for _, _, acc in self.per_task]

    @property
    def delta(self) -> float:
        return delta_metric(self.accuracies)

    def to_csv(self) -> str:
        lines = ["task_index,classes_seen,accuracy"]
        for task_index, seen, acc in self.per_task:
            lines.append(f"{task_index},{seen},{acc:.6f}")
        if len(self.per_task) > 1:  # delta is undefined for one task
            lines.append(f"delta,{self.delta:.4f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = f"{'task':>6} {'classes':>8} {'accuracy':>9}"
        rows = [header, "-" * len(header)]
        for task_index, seen, acc in self.per_task:
            rows.append(f"{task_index:>6} {seen:>8} {acc:>9.4f}")
        if len(self.per_task) > 1:
            rows.append(f"delta: {self.delta:.2f}%")
        return "\n".join(rows)


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(report.to_csv())


def load_report(path) -> EvalReport:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "task_index,classes_seen,accuracy":
        raise ParseError(f"{path}: bad report header")
    per_task = []
    for line in lines[1:]:
        if line.startswith("delta,") or not line.strip():
            continue
        t, seen, acc = line.split(",")
        per_task.append((int(t), int(seen), float(acc)))
    return EvalReport(per_task=per_task)


def save_protocol(protocol: FscilProtocol, path) -> None:
    lines = [
        f"mode = {protocol.mode}",
        f"shots = {protocol.shots_per_class}",
        f"exemplars = {protocol.exemplars_per_class}",
        f"shot_seed = {protocol.shot_seed}",
        f"exemplar_seed = {protocol.exemplar_seed}",
    ]
    for i, task in enumerate(protocol.tasks, start=1):
        lines.append(f"[task {i}]")
        for class_id in task:
            name = protocol.class_names.get(class_id, str(class_id))
            lines.append(f"{class_id} {name}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_protocol(path) -> FscilProtocol:
    header: dict[str, str] = {}
    tasks: list[list[int]] = []
    names: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("[task"):
            tasks.append([])
            continue
        if "=" in line and not tasks:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
            continue
        if not tasks:
            raise ParseError(f"{path}: line {lineno}: class before any [task]")
        parts = line.split(maxsplit=1)
        try:
            class_id = int(parts[0])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: bad class id") from None
        tasks[-1].append(class_id)
        if len(parts) > 1:
            names[class_id] = parts[1]
    if not tasks:
        raise ParseError(f"{path}: no tasks found")
    return FscilProtocol(
        tasks=tasks,
        shots_per_class=int(header.get("shots", 5)),
        exemplars_per_class=int(header.get("exemplars", 1)),
        mode=header.get("mode", "within"),
        shot_seed=int(header.get("shot_seed", 0)),
        exemplar_seed=int(header.get("exemplar_seed", 0)),
        class_names=names)
