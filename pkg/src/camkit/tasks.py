"""Benchmark task definitions and score weights."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

REFERENCE_TRAIN = "reference-train"
LEAVE_ONE_OUT = "leave-one-out"


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    dataset: str
    eval_mode: str = REFERENCE_TRAIN
    group_key: str | None = None
    cps_weight: float = 0.0

    def matches(self, dataset: str) -> bool:
        return dataset_family(dataset) == self.dataset


def dataset_family(name: str) -> str:
    """``SYNTH-HPA`` -> ``HPA``; real dataset names map to themselves."""
    return name[6:] if name.startswith("SYNTH-") else name


CPS_WEIGHTS = {
    "W2": Fraction(1, 3),
    "H2": Fraction(1, 6),
    "H3": Fraction(1, 6),
    "C2": Fraction(1, 9),
    "C3": Fraction(1, 9),
    "C4": Fraction(1, 9),
}

CHAMMI_TASKS: tuple[TaskSpec, ...] = (
    TaskSpec("W1", "WTC"),
    TaskSpec("W2", "WTC", cps_weight=1 / 3),
    TaskSpec("H1", "HPA"),
    TaskSpec("H2", "HPA", cps_weight=1 / 6),
    TaskSpec("H3", "HPA", LEAVE_ONE_OUT, "cell_line", 1 / 6),
    TaskSpec("C1", "CP"),
    TaskSpec("C2", "CP", cps_weight=1 / 9),
    TaskSpec("C3", "CP", cps_weight=1 / 9),
    TaskSpec("C4", "CP", LEAVE_ONE_OUT, "plate", 1 / 9),
)

TASKS_BY_ID = {t.task_id: t for t in CHAMMI_TASKS}
VALIDATION_TASKS = ("W1", "H1", "C1")
GENERALIZATION_TASKS = tuple(CPS_WEIGHTS)


def task_set(name: str) -> tuple[TaskSpec, ...]:
    # the synthetic corpus mirrors the same nine-task layout
    if name in ("chammi", "synth"):
        return CHAMMI_TASKS
    raise ValueError(f"unknown task set {name!r}")
