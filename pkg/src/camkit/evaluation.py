"""Cosine 1-NN scoring, leave-one-out grouping, macro-F1 and the weighted
performance score, plus the embedding/report file formats."""

from __future__ import annotations

import csv
import json
import math
import struct
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tasks import CPS_WEIGHTS, LEAVE_ONE_OUT, TaskSpec

QUERY_CHUNK = 256
CEMB_MAGIC = b"CEMB"
CEMB_VERSION = 1


class NormalizationError(ValueError):
    def __init__(self, ids):
        self.ids = list(ids)
        shown = ", ".join(map(str, self.ids[:10]))
        more = f" (+{len(self.ids) - 10} more)" if len(self.ids) > 10 else ""
        super().__init__(f"zero-norm embedding rows: {shown}{more}")


class ContractError(ValueError):
    pass


class GroupingError(ContractError):
    pass


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    data: np.ndarray
    row_ids: list[str]
    labels: list[str] | None = None
    _unit: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ContractError(f"embedding matrix must be 2-D, got shape {self.data.shape}")
        self.row_ids = [str(r) for r in self.row_ids]
        if len(self.row_ids) != self.data.shape[0]:
            raise ContractError(f"{len(self.row_ids)} row ids for {self.data.shape[0]} rows")
        if len(set(self.row_ids)) != len(self.row_ids):
            raise ContractError("row ids must be unique")
        if self.labels is not None:
            self.labels = list(self.labels)
            if len(self.labels) != len(self.row_ids):
                raise ContractError("labels must align with rows")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(np.einsum("ij,ij->i", self.data.astype(np.float64), self.data.astype(np.float64)))

    def unit(self) -> np.ndarray:
        if self._unit is None:
            n = self.norms
            bad = np.flatnonzero(~(n > 0) | ~np.isfinite(n))
            if bad.size:
                raise NormalizationError([self.row_ids[i] for i in bad])
            self._unit = self.data.astype(np.float64) / n[:, None]
        return self._unit

    def subset(self, index: Sequence[int]) -> "EmbeddingMatrix":
        index = list(index)
        return EmbeddingMatrix(
            self.data[index],
            [self.row_ids[i] for i in index],
            None if self.labels is None else [self.labels[i] for i in index],
        )


def _nearest(ref_unit: np.ndarray, q_unit: np.ndarray, workers: int) -> np.ndarray:
    """Row index of the most similar reference row for every query.

    Chunks are fixed-size so the arithmetic per query does not depend on the
    worker count; argmax returns the first (lowest) index on ties.
    """
    starts = range(0, q_unit.shape[0], QUERY_CHUNK)

    def job(s):
        return np.argmax(q_unit[s : s + QUERY_CHUNK] @ ref_unit.T, axis=1)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def knn_predict(reference: EmbeddingMatrix, queries: EmbeddingMatrix, workers: int = 1) -> list:
    if reference.labels is None:
        raise ContractError("reference matrix needs labels")
    if reference.rows == 0:
        raise ContractError("reference set is empty")
    if reference.dim != queries.dim:
        raise ContractError(f"dimension mismatch: reference {reference.dim} vs query {queries.dim}")
    if queries.rows == 0:
        return []
    idx = _nearest(reference.unit(), queries.unit(), workers)
    return [reference.labels[i] for i in idx]


def knn_predict_arrays(ref: np.ndarray, ref_labels: Sequence, queries: np.ndarray, workers: int = 1) -> list:
    r = EmbeddingMatrix(ref, [str(i) for i in range(len(ref))], list(ref_labels))
    q = EmbeddingMatrix(queries, [str(i) for i in range(len(queries))])
    return knn_predict(r, q, workers)


@dataclass
class LeakAudit:
    """Per-group record of which rows formed the reference set."""

    entries: list[dict] = field(default_factory=list)

    @property
    def collisions(self) -> int:
        return sum(e["collisions"] for e in self.entries)

    @property
    def queries(self) -> int:
        return sum(e["queries"] for e in self.entries)


def leave_one_out_predict(
    train: EmbeddingMatrix,
    test: EmbeddingMatrix,
    groups: Mapping[str, str] | Sequence[str],
    workers: int = 1,
    audit: LeakAudit | None = None,
) -> list:
    """Score each test group against train plus every other test group."""
    if test.labels is None or train.labels is None:
        raise ContractError("leave-one-out needs labelled train and test matrices")
    if isinstance(groups, Mapping):
        missing = [r for r in test.row_ids if not groups.get(r)]
        if missing:
            raise GroupingError(f"rows without a group key: {', '.join(missing[:10])}")
        g = [groups[r] for r in test.row_ids]
    else:
        g = list(groups)
        if len(g) != test.rows or any(x is None or x == "" for x in g):
            raise GroupingError("every test row needs a group key")
    if test.rows == 0:
        return []
    g = np.array(g, dtype=object)
    order = sorted(set(g.tolist()))
    pred: list = [None] * test.rows
    for name in order:
        inside = np.flatnonzero(g == name)
        outside = np.flatnonzero(g != name)
        ref_data = np.concatenate([train.data, test.data[outside]], axis=0)
        ref_ids = train.row_ids + [test.row_ids[i] for i in outside]
        ref_labels = train.labels + [test.labels[i] for i in outside]
        ref = EmbeddingMatrix(ref_data, ref_ids, ref_labels)
        if audit is not None:
            held = {test.row_ids[i] for i in inside}
            audit.entries.append(
                {
                    "group": name,
                    "queries": int(inside.size),
                    "reference": len(ref_ids),
                    "collisions": sum(1 for r in ref_ids if r in held)
                    + sum(1 for i in outside if g[i] == name),
                }
            )
        labels = knn_predict(ref, test.subset(inside), workers)
        for i, lab in zip(inside, labels):
            pred[i] = lab
    return pred


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _class_f1(pred: Sequence, truth: Sequence, classes: Iterable | None) -> dict:
    pred = list(pred)
    truth = list(truth)
    if len(pred) != len(truth):
        raise ContractError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if not truth:
        raise ContractError("truth is empty")
    universe = sorted(set(truth)) if classes is None else sorted(set(classes))
    out = {}
    for c in universe:
        tp = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, truth) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, truth) if p != c and t == c)
        out[c] = Fraction(0) if tp == 0 else Fraction(2 * tp, 2 * tp + fp + fn)
    return out


def per_class_f1(pred: Sequence, truth: Sequence, classes: Iterable | None = None) -> dict:
    return {c: float(v) for c, v in _class_f1(pred, truth, classes).items()}


def macro_f1(pred: Sequence, truth: Sequence, classes: Iterable | None = None) -> float:
    """Unweighted mean F1 over the classes present in ``truth`` (or ``classes``)."""
    # exact rational mean, rounded once, so the result is independent of class order
    f = _class_f1(pred, truth, classes)
    return float(sum(f.values(), Fraction(0)) / len(f))


def cps(scores: Mapping[str, float]) -> float:
    total = 0.0
    for task, w in CPS_WEIGHTS.items():
        if task not in scores:
            raise ContractError(f"score for task {task} is missing")
        v = scores[task]
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"score for {task} outside [0, 1]: {v}")
        total += float(w) * v
    return total


@dataclass
class MetricsReport:
    task_f1: dict[str, float]
    class_f1: dict[str, dict[str, float]]
    counts: dict[str, dict[str, int]]
    cps: float | None

    def to_dict(self) -> dict:
        return {"task_f1": self.task_f1, "class_f1": self.class_f1, "counts": self.counts, "cps": self.cps}


def evaluate_all(
    embeddings: EmbeddingMatrix,
    records: Sequence,
    task_specs: Sequence[TaskSpec],
    all_classes: bool = False,
    workers: int = 1,
    audit: LeakAudit | None = None,
    skip_missing: bool = False,
) -> MetricsReport:
    """Score every task. ``records`` supply split, dataset, label and annotations
    per row id; reference sets are the training rows of the task's dataset."""
    pos = {r: i for i, r in enumerate(embeddings.row_ids)}
    meta = [r for r in records if r.image_id in pos]
    task_f1: dict[str, float] = {}
    class_f1: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    for spec in task_specs:
        test = [r for r in meta if r.split == spec.task_id and spec.matches(r.dataset)]
        train = [r for r in meta if r.split == "train" and spec.matches(r.dataset)]
        if not test or not train:
            if skip_missing:
                continue
            missing = spec.task_id if not test else f"train ({spec.dataset})"
            raise ContractError(f"no embeddings for split {missing}")
        ref = _matrix(embeddings, pos, train)
        qry = _matrix(embeddings, pos, test)
        if spec.eval_mode == LEAVE_ONE_OUT:
            groups = {r.image_id: r.annotations.get(spec.group_key, "") for r in test}
            pred = leave_one_out_predict(ref, qry, groups, workers, audit)
        else:
            pred = knn_predict(ref, qry, workers)
        universe = None
        if all_classes:
            universe = set(qry.labels) | (set(ref.labels) if spec.eval_mode != LEAVE_ONE_OUT else set())
        pcf = per_class_f1(pred, qry.labels, universe)
        class_f1[spec.task_id] = pcf
        task_f1[spec.task_id] = macro_f1(pred, qry.labels, universe)
        cnt: dict[str, int] = {}
        for lab in qry.labels:
            cnt[lab] = cnt.get(lab, 0) + 1
        counts[spec.task_id] = dict(sorted(cnt.items()))
    score = cps(task_f1) if all(t in task_f1 for t in CPS_WEIGHTS) else None
    return MetricsReport(task_f1, class_f1, counts, score)


def _matrix(emb: EmbeddingMatrix, pos: dict, recs: list) -> EmbeddingMatrix:
    idx = [pos[r.image_id] for r in recs]
    return EmbeddingMatrix(emb.data[idx], [r.image_id for r in recs], [r.label for r in recs])


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def cemb_rows_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".rows.csv")


def write_cemb(path, matrix: EmbeddingMatrix) -> None:
    """Little-endian header (magic, version, N, d) then N*d float32 values;
    row ids go to a sibling CSV."""
    data = np.ascontiguousarray(matrix.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CEMB_MAGIC + struct.pack("<III", CEMB_VERSION, *data.shape))
        fh.write(data.tobytes())
    with open(cemb_rows_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "image_id"])
        for i, r in enumerate(matrix.row_ids):
            w.writerow([i, r])


def read_cemb(path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != CEMB_MAGIC or len(raw) < 16:
        raise EmbeddingFormatError(f"{path}: not a CEMB file")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != CEMB_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if len(raw) != 16 + 4 * n * d:
        raise EmbeddingFormatError(f"{path}: expected {n}x{d} floats, file size is {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, d).astype(np.float32)
    with open(cemb_rows_path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n:
        raise EmbeddingFormatError(f"{path}: {len(rows)} row ids for {n} rows")
    ids = [r["image_id"] for r in sorted(rows, key=lambda r: int(r["row"]))]
    return EmbeddingMatrix(data, ids)


def git_describe(cwd=None) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=cwd or Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_report(path, report: MetricsReport, config: dict | None = None, code_version: str | None = None) -> dict:
    doc = report.to_dict()
    doc["config"] = config or {}
    doc["code_version"] = code_version if code_version is not None else git_describe()
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc


def radar_svg(task_f1: Mapping[str, float], size: int = 360, title: str = "") -> str:
    """Hand-rolled radar chart of per-task F1 (one axis per task)."""
    tasks = list(task_f1)
    if not tasks:
        raise ContractError("nothing to plot")
    cx = cy = size / 2
    rad = size * 0.36
    n = len(tasks)

    def pt(i, r):
        a = -math.pi / 2 + 2 * math.pi * i / n
        return cx + r * math.cos(a), cy + r * math.sin(a)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for ring in (0.25, 0.5, 0.75, 1.0):
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (pt(i, rad * ring) for i in range(n)))
        parts.append(f'<polygon points="{pts}" fill="none" stroke="#ccc"/>')
    for i, t in enumerate(tasks):
        x, y = pt(i, rad)
        lx, ly = pt(i, rad + 18)
        parts.append(f'<line x1="{cx:.2f}" y1="{cy:.2f}" x2="{x:.2f}" y2="{y:.2f}" stroke="#ccc"/>')
        parts.append(
            f'<text x="{lx:.2f}" y="{ly:.2f}" font-size="12" text-anchor="middle" '
            f'dominant-baseline="middle">{t}</text>'
        )
    pts = " ".join(
        f"{x:.2f},{y:.2f}" for x, y in (pt(i, rad * max(0.0, min(1.0, task_f1[t]))) for i, t in enumerate(tasks))
    )
    parts.append(f'<polygon points="{pts}" fill="#4a7ebb" fill-opacity="0.35" stroke="#1f4e89" stroke-width="2"/>')
    if title:
        parts.append(f'<text x="{cx:.2f}" y="16" font-size="14" text-anchor="middle">{title}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
