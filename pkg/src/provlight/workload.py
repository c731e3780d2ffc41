"""Synthetic workload generation.

A workload is a chain of tasks split across a fixed number of transformation
stages: every task depends on its predecessor and its input data derives from
the predecessor's output, which yields derivation chains through the graph.
Attribute values come from a seeded generator mixing small integers, booleans,
vocabulary strings, and canonical floats, mimicking hyperparameter/metric
payloads; the same seed always yields the same script.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from provlight.wire import DataPayload, Scalar

_VOCAB = (
    "adam", "sgd", "rmsprop", "relu", "tanh", "sigmoid", "dense", "conv",
    "dropout", "norm", "train", "eval", "local", "global", "edge", "cloud",
)

_FLOAT_POOL = (1e-05, 0.0001, 0.001, 0.01, 0.1, 0.5, 0.9, 0.99)

BANDWIDTH_PRESETS: dict[str, tuple[Optional[int], int]] = {
    # name -> (bits per second, base one-way delay ms)
    "unlimited": (None, 0),
    "1gbit": (1_000_000_000, 1),
    "25kbit": (25_000, 100),
}


@dataclass(frozen=True)
class WorkloadConfig:
    transformations: int = 5
    tasks: int = 100
    attrs_per_task: int = 10
    task_duration_s: float = 0.5
    group_size: int = 0
    bandwidth: str = "unlimited"
    clients: int = 1
    seed: int = 42
    sleep_mode: str = "virtual"  # "virtual" | "real"
    compress: bool = True

    def __post_init__(self):
        if self.transformations < 1 or self.tasks < 1 or self.attrs_per_task < 1:
            raise ValueError("counts must be >= 1")
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if self.group_size < 0:
            raise ValueError("group_size must be >= 0")
        if self.task_duration_s <= 0:
            raise ValueError("task_duration_s must be positive")
        if self.bandwidth not in BANDWIDTH_PRESETS:
            raise ValueError(f"unknown bandwidth preset {self.bandwidth!r}")
        if self.sleep_mode not in ("virtual", "real"):
            raise ValueError("sleep_mode must be 'virtual' or 'real'")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    stage: int
    dependencies: tuple[str, ...]
    input_data: DataPayload
    output_data: DataPayload
    duration_s: float


@dataclass(frozen=True)
class WorkloadScript:
    tasks: tuple[TaskSpec, ...]
    stage_sizes: tuple[int, ...]
    seed: int

    def stage_of(self, index: int) -> int:
        return self.tasks[index].stage


STABLE_COLUMN_RATIO = 0.8


def _draw_value(rng: random.Random) -> Scalar:
    """Categorical hyperparameters and quantized metrics: small integer
    counters, flags, names and canonical rates from finite pools."""
    pick = rng.random()
    if pick < 0.45:
        return rng.randrange(64)
    if pick < 0.65:
        return bool(rng.getrandbits(1))
    if pick < 0.85:
        return _VOCAB[rng.randrange(len(_VOCAB))]
    return _FLOAT_POOL[rng.randrange(len(_FLOAT_POOL))]


class _ColumnPlan:
    """Attribute columns for one record family.

    Most fields of an epoch-style record echo run configuration (names,
    shapes, flags) and repeat verbatim from task to task; a minority are
    actual per-task measurements. Stable columns get one value for the whole
    workload, dynamic ones a fresh draw per task.
    """

    def __init__(self, rng: random.Random, prefix: str, count: int):
        self.prefix = prefix
        self.stable: dict[int, Scalar] = {}
        self.dynamic: set[int] = set()
        for j in range(count):
            if rng.random() < STABLE_COLUMN_RATIO:
                self.stable[j] = _draw_value(rng)
            else:
                self.dynamic.add(j)
        self.count = count

    def draw(self, rng: random.Random) -> tuple[tuple[str, Scalar], ...]:
        return tuple(
            (f"{self.prefix}{j}",
             self.stable[j] if j in self.stable else _draw_value(rng))
            for j in range(self.count))


def stage_sizes(tasks: int, transformations: int) -> tuple[int, ...]:
    """Equal split; the remainder lands in the last stage."""
    per = tasks // transformations
    if per == 0:
        sizes = [1] * tasks + [0] * (transformations - tasks)
        return tuple(sizes[:transformations])
    sizes = [per] * (transformations - 1)
    sizes.append(tasks - per * (transformations - 1))
    return tuple(sizes)


def gen_workload(cfg: WorkloadConfig) -> WorkloadScript:
    """Deterministic script: same config (incl. seed) -> identical script."""
    rng = random.Random(cfg.seed)
    sizes = stage_sizes(cfg.tasks, cfg.transformations)
    per = max(1, cfg.tasks // cfg.transformations)
    params = _ColumnPlan(rng, "p", cfg.attrs_per_task)
    metrics = _ColumnPlan(rng, "m", cfg.attrs_per_task)
    specs = []
    prev_task: Optional[str] = None
    prev_out: Optional[str] = None
    for i in range(cfg.tasks):
        stage = min(i // per, cfg.transformations - 1)
        task_id = f"t{i:03d}"
        in_id = f"{task_id}.in"
        out_id = f"{task_id}.out"
        input_data = DataPayload(
            id=in_id,
            derivations=(prev_out,) if prev_out else (),
            attributes=params.draw(rng),
        )
        output_data = DataPayload(
            id=out_id,
            attributes=metrics.draw(rng),
        )
        specs.append(TaskSpec(
            task_id=task_id,
            stage=stage,
            dependencies=(prev_task,) if prev_task else (),
            input_data=input_data,
            output_data=output_data,
            duration_s=cfg.task_duration_s,
        ))
        prev_task, prev_out = task_id, out_id
    return WorkloadScript(tasks=tuple(specs), stage_sizes=sizes, seed=cfg.seed)
