"""Unfolded-strip image ingestion, metadata bookkeeping, split checks and a
synthetic varying-channel corpus."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .registry import ChannelRegistry
from .tasks import CHAMMI_TASKS, LEAVE_ONE_OUT, TaskSpec, dataset_family

log = logging.getLogger(__name__)

META_COLUMNS = ["image_id", "path", "dataset", "channel_count", "label", "split", "cell_line", "plate", "source"]
ANNOTATION_KEYS = ("cell_line", "plate", "source")


class ImageFormatError(ValueError):
    pass


class RecordError(ValueError):
    def __init__(self, image_id: str, reason: str):
        super().__init__(f"{image_id}: {reason}")
        self.image_id = image_id
        self.reason = reason


class SynthSpecError(ValueError):
    pass


@dataclass
class MultiChannelImage:
    data: np.ndarray  # [C,H,W] in [0,1]
    channel_set: str
    image_id: str = ""

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def validate(self, registry: ChannelRegistry | None = None) -> None:
        if self.data.ndim != 3:
            raise ImageFormatError(f"{self.image_id}: expected [C,H,W], got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ImageFormatError(f"{self.image_id}: non-finite pixel values")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ImageFormatError(f"{self.image_id}: pixel values outside [0, 1]")
        if registry is not None and registry.channel_count(self.channel_set) != self.data.shape[0]:
            raise ImageFormatError(
                f"{self.image_id}: {self.data.shape[0]} channels but {self.channel_set} "
                f"registers {registry.channel_count(self.channel_set)}"
            )


@dataclass
class MetadataRecord:
    image_id: str
    path: str
    dataset: str
    label: str
    split: str
    channel_count: int = 0
    annotations: dict[str, str] = field(default_factory=dict)

    def to_row(self) -> dict[str, str]:
        row = {
            "image_id": self.image_id,
            "path": self.path,
            "dataset": self.dataset,
            "channel_count": str(self.channel_count),
            "label": self.label,
            "split": self.split,
        }
        for k in ANNOTATION_KEYS:
            row[k] = self.annotations.get(k, "")
        return row


def read_metadata(path) -> list[MetadataRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "path", "dataset", "label", "split"} - set(reader.fieldnames or [])
        if reader.fieldnames is not None and missing:
            raise ImageFormatError(f"metadata {path} lacks columns {sorted(missing)}")
        out = []
        for row in reader:
            ann = {k: row[k] for k in ANNOTATION_KEYS if row.get(k)}
            out.append(
                MetadataRecord(
                    image_id=row["image_id"],
                    path=row["path"],
                    dataset=row["dataset"],
                    label=row["label"],
                    split=row["split"],
                    channel_count=int(row["channel_count"]) if row.get("channel_count") else 0,
                    annotations=ann,
                )
            )
    return out


def write_metadata(path, records: Iterable[MetadataRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=META_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.to_row())


# ---------------------------------------------------------------------------
# strips
# ---------------------------------------------------------------------------

def fold_channels(strip: np.ndarray, channels: int, axis: int = 0) -> np.ndarray:
    """Split a 2-D strip into ``channels`` equal blocks along ``axis`` -> [C,h,w]."""
    strip = np.asarray(strip)
    if strip.ndim != 2:
        raise ImageFormatError(f"strip must be 2-D, got shape {strip.shape}")
    total = strip.shape[axis]
    if channels < 1 or total % channels:
        raise ImageFormatError(f"strip extent {total} along axis {axis} is not divisible by C={channels}")
    return np.stack(np.split(strip, channels, axis=axis), axis=0)


def unfold_channels(img: np.ndarray, axis: int = 0) -> np.ndarray:
    return np.concatenate(list(img), axis=axis)


_MAX = {"L": 255.0, "I;16": 65535.0, "I;16L": 65535.0, "I;16B": 65535.0, "I": 65535.0}


def read_strip(path) -> np.ndarray:
    """Decode an 8/16-bit grayscale PNG or single-page TIFF to floats in [0,1]."""
    with Image.open(path) as im:
        if getattr(im, "n_frames", 1) > 1:
            raise ImageFormatError(f"{path}: multi-page images are not supported")
        mode = im.mode
        if mode not in _MAX:
            raise ImageFormatError(f"{path}: unsupported mode {mode!r} (need 8- or 16-bit grayscale)")
        arr = np.array(im)
    if mode == "I" and (arr.min() < 0 or arr.max() > 65535):
        raise ImageFormatError(f"{path}: pixel values exceed 16-bit range")
    return arr.astype(np.float64) / _MAX[mode]


def write_strip(path, strip: np.ndarray, bits: int = 8) -> None:
    strip = np.clip(np.asarray(strip, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.round(strip * 255).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(np.round(strip * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


class ImageCache:
    """Decoded-image cache keyed by image id; counts decodes."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}
        self.decodes = 0

    def get(self, key: str, decode) -> np.ndarray:
        if key not in self._store:
            self._store[key] = decode()
            self.decodes += 1
        return self._store[key]


def load_dataset(
    root_dir,
    metadata_csv,
    registry: ChannelRegistry,
    axis: int = 0,
    fail_fast: bool = True,
    deterministic: bool = False,
    cache: ImageCache | None = None,
    workers: int = 1,
) -> Iterator[tuple[MultiChannelImage, MetadataRecord]]:
    """Yield (image, record) pairs for every metadata row.

    Broken records raise RecordError when ``fail_fast`` is set; otherwise they
    are logged and skipped.
    """
    root = Path(root_dir)
    records = read_metadata(metadata_csv)
    if deterministic:
        records = sorted(records, key=lambda r: r.image_id)

    def decode(rec: MetadataRecord):
        try:
            if rec.dataset not in registry:
                raise RecordError(rec.image_id, f"dataset {rec.dataset!r} is not registered")
            c = registry.channel_count(rec.dataset)
            if rec.channel_count and rec.channel_count != c:
                raise RecordError(rec.image_id, f"channel_count {rec.channel_count} != registered {c}")
            p = root / rec.path
            if not p.exists():
                raise RecordError(rec.image_id, f"missing file {p}")
            strip = cache.get(rec.image_id, lambda: read_strip(p)) if cache else read_strip(p)
            img = MultiChannelImage(fold_channels(strip, c, axis=axis), rec.dataset, rec.image_id)
            img.validate(registry)
            return img, rec
        except RecordError as exc:
            return exc
        except (ImageFormatError, OSError) as exc:
            return RecordError(rec.image_id, str(exc))

    if workers > 1 and not deterministic:
        with ThreadPoolExecutor(workers) as pool:
            results: Iterable = pool.map(decode, records)
    else:
        results = map(decode, records)
    for res in results:
        if isinstance(res, RecordError):
            if fail_fast:
                raise res
            log.warning("skipping record: %s", res)
            continue
        yield res


# ---------------------------------------------------------------------------
# split integrity
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    kind: str
    image_id: str
    message: str

    def __str__(self) -> str:
        return f"[{self.kind}] {self.image_id}: {self.message}"


def split_integrity_check(records: Iterable[MetadataRecord], tasks: Iterable[TaskSpec] = CHAMMI_TASKS) -> list[Violation]:
    """Return every violation found; an empty list means the splits are clean."""
    by_task = {t.task_id: t for t in tasks}
    seen: dict[str, str] = {}
    out: list[Violation] = []
    flagged: set[str] = set()
    for r in records:
        if r.image_id in seen:
            if r.image_id not in flagged:
                out.append(
                    Violation("duplicate-id", r.image_id, f"appears in splits {seen[r.image_id]!r} and {r.split!r}")
                )
                flagged.add(r.image_id)
        else:
            seen[r.image_id] = r.split
        if not r.label:
            out.append(Violation("empty-label", r.image_id, "label is empty"))
        if r.split == "train":
            continue
        spec = by_task.get(r.split)
        if spec is None:
            out.append(Violation("unknown-split", r.image_id, f"split {r.split!r} is not a known task"))
            continue
        if not spec.matches(r.dataset):
            out.append(
                Violation("dataset-mismatch", r.image_id, f"task {spec.task_id} expects {spec.dataset}, got {r.dataset}")
            )
        if spec.eval_mode == LEAVE_ONE_OUT and not r.annotations.get(spec.group_key or ""):
            out.append(
                Violation("missing-group-key", r.image_id, f"task {spec.task_id} needs annotation {spec.group_key!r}")
            )
    return out


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthDataset:
    name: str
    channels: int


@dataclass
class SynthSpec:
    datasets: list[SynthDataset] = field(
        default_factory=lambda: [SynthDataset("SYNTH-WTC", 3), SynthDataset("SYNTH-HPA", 4), SynthDataset("SYNTH-CP", 5)]
    )
    classes: int = 3
    novel_classes: int = 2
    image_size: int = 32
    train_per_class: int = 167
    test_per_class: int = 40
    groups: int = 4

    def validate(self) -> None:
        if len(self.datasets) < 2:
            raise SynthSpecError("need at least two datasets")
        counts = [d.channels for d in self.datasets]
        if len(set(counts)) != len(counts):
            raise SynthSpecError(f"datasets must have distinct channel counts, got {counts}")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise SynthSpecError("dataset names must be unique")
        if self.classes < 3:
            raise SynthSpecError("need at least three classes")
        if self.classes + self.novel_classes > len(SHAPES):
            raise SynthSpecError(f"at most {len(SHAPES)} distinct morphologies are available")
        if self.image_size < 8:
            raise SynthSpecError("image_size must be >= 8")


def _shape_round(x, y, rng):
    return np.exp(-(x**2 + y**2) / (2 * 0.28**2))


def _shape_ring(x, y, rng):
    r = np.sqrt(x**2 + y**2)
    return np.exp(-((r - 0.55) ** 2) / (2 * 0.09**2))


def _shape_pair(x, y, rng):
    th = rng.uniform(0, np.pi)
    dx, dy = 0.45 * np.cos(th), 0.45 * np.sin(th)
    s = 2 * 0.16**2
    return np.exp(-((x - dx) ** 2 + (y - dy) ** 2) / s) + np.exp(-((x + dx) ** 2 + (y + dy) ** 2) / s)


def _shape_bar(x, y, rng):
    th = rng.uniform(0, np.pi)
    u = x * np.cos(th) + y * np.sin(th)
    v = -x * np.sin(th) + y * np.cos(th)
    return np.exp(-(u**2) / (2 * 0.6**2) - v**2 / (2 * 0.1**2))


def _shape_speckle(x, y, rng):
    th = rng.uniform(0, 2 * np.pi)
    out = np.zeros_like(x)
    for k in range(5):
        a = th + 2 * np.pi * k / 5
        out += np.exp(-((x - 0.55 * np.cos(a)) ** 2 + (y - 0.55 * np.sin(a)) ** 2) / (2 * 0.09**2))
    return out


def _shape_cross(x, y, rng):
    th = rng.uniform(0, np.pi / 2)
    u = x * np.cos(th) + y * np.sin(th)
    v = -x * np.sin(th) + y * np.cos(th)
    return np.maximum(np.exp(-(u**2) / 0.5 - v**2 / 0.015), np.exp(-(v**2) / 0.5 - u**2 / 0.015))


SHAPES = (
    ("round", _shape_round),
    ("ring", _shape_ring),
    ("pair", _shape_pair),
    ("bar", _shape_bar),
    ("speckle", _shape_speckle),
    ("cross", _shape_cross),
)


@dataclass
class _Nuisance:
    scale: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    blur: bool = False
    noise: float = 0.03
    last_channel_texture: bool = False


def _render(cls: int, channels: int, size: int, nz: _Nuisance, rng: np.random.Generator) -> np.ndarray:
    t = np.linspace(-1, 1, size)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    cx, cy = rng.uniform(-0.1, 0.1, 2)
    s = nz.scale * rng.uniform(0.9, 1.1)
    x, y = (xx - cx) / s, (yy - cy) / s
    shape = SHAPES[cls][1](x, y, rng)
    shape = shape / max(shape.max(), 1e-6)
    out = np.empty((channels, size, size))
    for c in range(channels):
        gamma = (1.0, 0.7, 1.4, 0.85, 1.2, 1.0)[c % 6]
        gain = (0.95, 0.8, 0.9, 0.75, 0.85, 0.7)[c % 6] * nz.gain
        img = gain * shape**gamma + nz.offset
        if nz.last_channel_texture and c == channels - 1:
            img = img + 0.15 * (0.5 + 0.5 * np.sin(9 * xx + 4 * yy))
        out[c] = img
    if nz.blur:
        k = np.array([0.25, 0.5, 0.25])
        out = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 1, out)
        out = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 2, out)
    out += rng.normal(0.0, nz.noise, out.shape)
    return np.clip(out, 0.0, 1.0)


def _family_plan(family: str, spec: SynthSpec):
    """(split, classes, nuisance, annotations) tuples per split for one dataset family."""
    g = spec.groups
    train_cls = list(range(spec.classes))
    novel = list(range(spec.classes, spec.classes + spec.novel_classes))
    if family == "WTC":
        return [
            ("train", train_cls, lambda i: (_Nuisance(), {})),
            ("W1", train_cls, lambda i: (_Nuisance(), {})),
            ("W2", train_cls, lambda i: (_Nuisance(last_channel_texture=True), {})),
        ]
    if family == "HPA":
        lines = [0.95, 1.0, 1.05, 1.1][:g] + [1.0] * max(0, g - 4)

        def line(i):
            return _Nuisance(scale=lines[i % g]), {"cell_line": f"L{i % g}"}

        return [
            ("train", train_cls, line),
            ("H1", train_cls, line),
            ("H2", train_cls, lambda i: (_Nuisance(scale=1.2, gain=0.9), {"cell_line": "HEK"})),
            ("H3", novel, line),
        ]
    if family == "CP":
        def plate(i, base=0, n=g + 2, source="S1"):
            p = base + i % n
            gain = 0.85 + 0.05 * (p % 4)
            return _Nuisance(gain=gain, offset=0.02 * (p % 3)), {"plate": f"P{p}", "source": source}

        return [
            ("train", train_cls, plate),
            ("C1", train_cls, plate),
            ("C2", train_cls, lambda i: plate(i, base=g + 2, n=3)),
            ("C3", train_cls, lambda i: (
                _Nuisance(gain=0.9, blur=True, noise=0.05), {"plate": f"Q{i % 4}", "source": "S3"})),
            ("C4", novel, lambda i: plate(i, n=g)),
        ]
    return [("train", train_cls, lambda i: (_Nuisance(), {}))]


def synth_generate(spec: SynthSpec, seed: int, out_dir) -> dict:
    """Write a synthetic corpus (PNG strips, metadata.csv, channels.csv).

    Returns a summary with per-split counts and the raw-pixel 1-NN macro-F1 on
    each IID task.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    registry = ChannelRegistry()
    records: list[MetadataRecord] = []
    pixels: dict[str, list] = {}
    for di, ds in enumerate(spec.datasets):
        registry.add_dataset(ds.name, [f"ch{c}" for c in range(ds.channels)])
        (out / "images" / ds.name).mkdir(exist_ok=True)
        family = dataset_family(ds.name)
        for si, (split, classes, nuisance) in enumerate(_family_plan(family, spec)):
            per_class = spec.train_per_class if split == "train" else spec.test_per_class
            rng = np.random.default_rng([seed, di, si])
            n = 0
            for ci in classes:
                for j in range(per_class):
                    nz, ann = nuisance(j)
                    img = _render(ci, ds.channels, spec.image_size, nz, rng)
                    image_id = f"{ds.name}-{split}-{n:05d}"
                    rel = f"images/{ds.name}/{image_id}.png"
                    write_strip(out / rel, unfold_channels(img))
                    label = f"{family.lower()}_{SHAPES[ci][0]}"
                    records.append(
                        MetadataRecord(image_id, rel, ds.name, label, split, ds.channels, dict(ann))
                    )
                    pixels.setdefault(f"{ds.name}|{split}", []).append((img, label))
                    n += 1
    write_metadata(out / "metadata.csv", records)
    registry.to_csv(out / "channels.csv")

    summary = {"seed": seed, "counts": {}, "raw_pixel_iid_f1": {}}
    for r in records:
        key = f"{r.dataset}|{r.split}"
        summary["counts"][key] = summary["counts"].get(key, 0) + 1
    summary["raw_pixel_iid_f1"] = _raw_pixel_check(spec, pixels)
    (out / "synth_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _downsample(img: np.ndarray, f: int = 4) -> np.ndarray:
    c, h, w = img.shape
    return img[:, : h - h % f, : w - w % f].reshape(c, h // f, f, w // f, f).mean(axis=(2, 4)).ravel()


def _raw_pixel_check(spec: SynthSpec, pixels: dict) -> dict:
    from .evaluation import knn_predict_arrays, macro_f1

    iid = {"WTC": "W1", "HPA": "H1", "CP": "C1"}
    out = {}
    for ds in spec.datasets:
        task = iid.get(dataset_family(ds.name))
        if task is None:
            continue
        train = pixels[f"{ds.name}|train"]
        test = pixels[f"{ds.name}|{task}"]
        ref = np.stack([_downsample(i) for i, _ in train])
        qry = np.stack([_downsample(i) for i, _ in test])
        pred = knn_predict_arrays(ref, [l for _, l in train], qry)
        out[f"{ds.name}|{task}"] = macro_f1(pred, [l for _, l in test])
    return out
