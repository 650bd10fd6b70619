"""Optimizer, schedule, mixed-dataset batching, the training loop, embedding
export and the end-to-end pipeline."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .augment import AugmentConfig, augment_view, derive_seed, make_view_pair, resize
from .config import ConfigError, parse_value, worker_count
from .evaluation import EmbeddingMatrix, MetricsReport, evaluate_all
from .frontends import STRATEGIES
from .losses import LossConfig, ProxyBank, combined_loss, ntxent_loss, proxynca_loss
from .model import ModelConfig, build_model, load_state_dict, state_dict, unique_parameters
from .registry import ChannelRegistry
from .tasks import TaskSpec

log = logging.getLogger(__name__)


class SamplerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint_path: str | None):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {checkpoint_path}")
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    strategy: str = "depthwise"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    min_lr: float = 1e-7
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    image_size: int = 128
    seed: int = 0
    augment_enabled: bool = True
    deterministic: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}; got {self.strategy!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        # zero is allowed: it freezes the parameters, which is useful as a control run
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be a finite value >= 0, got {self.lr}")
        if self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigError("min_lr and weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")

    @classmethod
    def paper_recipe(cls, **kw) -> "TrainConfig":
        kw.setdefault("epochs", 15)
        kw.setdefault("batch_size", 128)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("model", "loss", "augment")}
        d["model"] = self.model.to_dict()
        d["loss"] = asdict(self.loss)
        aug = asdict(self.augment)
        if aug["out_size"] is not None:
            aug["out_size"] = list(aug["out_size"])
        d["augment"] = aug
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        loss = LossConfig(**d.pop("loss", {}))
        aug = dict(d.pop("augment", {}))
        if aug.get("out_size") is not None:
            aug["out_size"] = tuple(aug["out_size"])
        return cls(model=model, loss=loss, augment=AugmentConfig(**aug), **d)

    @classmethod
    def from_flat(cls, flat: Mapping[str, object], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from dotted keys (``model.embed_dim``), overriding ``base``."""
        nested = (base or cls()).to_dict()
        for key, val in flat.items():
            parts = key.replace("-", "_").split(".")
            target = nested
            for p in parts[:-1]:
                if not isinstance(target.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[parts[-1]] = _coerce(target[parts[-1]], val, key)
        try:
            return cls.from_dict(nested)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _coerce(current, val, key):
    if isinstance(val, str) and not isinstance(current, str):
        val = parse_value(val)
    if isinstance(current, bool):
        if isinstance(val, bool):
            return val
        raise ConfigError(f"{key} expects true/false, got {val!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(val, int) and not isinstance(val, bool):
            return val
        if isinstance(val, float) and val.is_integer():
            return int(val)
        raise ConfigError(f"{key} expects an integer, got {val!r}")
    if isinstance(current, float):
        if isinstance(val, (int, float)) and not isinstance(val, bool):
            return float(val)
        raise ConfigError(f"{key} expects a number, got {val!r}")
    if isinstance(current, list) or (current is None and isinstance(val, tuple)):
        vals = val if isinstance(val, tuple) else (val,)
        return [int(v) for v in vals]
    return val


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 1e-7) -> float:
    """Cosine decay from ``base_lr`` at step 0 to ``min_lr`` at the last step."""
    if base_lr == 0.0:
        return 0.0
    if total_steps <= 1:
        return base_lr
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adaptive moments with weight decay applied directly to the weights."""

    def __init__(self, params: Sequence[T.Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 5e-4):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        if lr == 0.0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"optim/t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"optim/m/{i}"] = m
            out[f"optim/v/{i}"] = v
        return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def mixed_batch_sampler(records: Sequence, batch_size: int, seed: int, datasets: Iterable[str] | None = None) -> list[list[int]]:
    """Shuffled batches of record indices where every full batch holds at
    least one record from each dataset.

    Each dataset's records are spread evenly over the epoch by giving record i
    of dataset d the key (i + u_d) / n_d and sorting; any full batch still
    missing a dataset borrows a record from a batch holding two or more.
    """
    if batch_size < 1:
        raise SamplerError("batch_size must be >= 1")
    by_ds: dict[str, list[int]] = {d: [] for d in (datasets or [])}
    for i, r in enumerate(records):
        by_ds.setdefault(r.dataset, []).append(i)
    if not by_ds:
        raise SamplerError("no training records")
    empty = [d for d, v in by_ds.items() if not v]
    if empty:
        raise SamplerError(f"datasets without training records: {', '.join(empty)}")
    n = len(records)
    full = n // batch_size
    names = sorted(by_ds)
    if full and batch_size < len(names):
        raise SamplerError(f"batch_size {batch_size} cannot hold all {len(names)} datasets")
    short = [d for d in names if len(by_ds[d]) < full]
    if short:
        raise SamplerError(f"datasets with fewer records than full batches ({full}): {', '.join(short)}")

    rng = np.random.default_rng(seed)
    keys, order = [], []
    for d in names:
        idx = np.array(by_ds[d])[rng.permutation(len(by_ds[d]))]
        u = rng.random()
        keys.append((np.arange(len(idx)) + u) / len(idx))
        order.append(idx)
    keys = np.concatenate(keys)
    order = np.concatenate(order)
    tiebreak = rng.random(len(keys))
    flat = order[np.lexsort((tiebreak, keys))].tolist()
    batches = [flat[i : i + batch_size] for i in range(0, n, batch_size)]

    ds_of = [r.dataset for r in records]
    for b in range(full):
        for d in names:
            if any(ds_of[i] == d for i in batches[b]):
                continue
            _repair(batches, b, d, ds_of, full)
    return batches


def _repair(batches, b, d, ds_of, full):
    counts = {}
    for i in batches[b]:
        counts[ds_of[i]] = counts.get(ds_of[i], 0) + 1
    # donors: the partial tail first, then any full batch with a spare record of d
    donors = list(range(full, len(batches))) + [k for k in range(full) if k != b]
    for k in donors:
        have = [j for j, i in enumerate(batches[k]) if ds_of[i] == d]
        if not have or (k < full and len(have) < 2):
            continue
        spare = next(j for j, i in enumerate(batches[b]) if counts[ds_of[i]] >= 2)
        batches[b][spare], batches[k][have[0]] = batches[k][have[0]], batches[b][spare]
        return
    raise SamplerError(f"cannot place dataset {d} into batch {b}")  # unreachable given the size checks


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    seed: int
    start_time: float = 0.0
    end_time: float = 0.0
    checkpoints: list[str] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainResult:
    model: object
    proxies: ProxyBank
    manifest: RunManifest
    optimizer: AdamW


def _view(img, cfg: TrainConfig, epoch: int) -> np.ndarray:
    size = (cfg.image_size, cfg.image_size)
    if not cfg.augment_enabled:
        return resize(np.asarray(img.data, dtype=np.float64), size)
    aug = replace(cfg.augment, out_size=size)
    rng = np.random.default_rng(derive_seed(cfg.seed, img.image_id, epoch))
    return augment_view(img, aug, rng).data


def _view_pair(img, cfg: TrainConfig, epoch: int):
    aug = replace(cfg.augment, out_size=(cfg.image_size, cfg.image_size))
    a, b = make_view_pair(img, aug, derive_seed(cfg.seed, img.image_id, epoch))
    return a.data, b.data


def _prepare(batch: list[int], records, images, cfg: TrainConfig, epoch: int):
    """Group a batch by dataset into arrays of views."""
    groups: dict[str, list[int]] = {}
    for i in batch:
        groups.setdefault(records[i].dataset, []).append(i)
    out = []
    for ds in sorted(groups):
        idx = groups[ds]
        if cfg.loss.alpha > 0:
            pairs = [_view_pair(images[records[i].image_id], cfg, epoch) for i in idx]
            va = np.stack([p[0] for p in pairs])
            vb = np.stack([p[1] for p in pairs])
        else:
            va = np.stack([_view(images[records[i].image_id], cfg, epoch) for i in idx])
            vb = None
        out.append((ds, idx, va, vb))
    return out


def _prefetch(fn: Callable, items: list, workers: int, depth: int = 4):
    """Ordered map with a bounded look-ahead queue."""
    if workers <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(workers) as pool:
        pending: deque = deque()
        for it in items:
            pending.append(pool.submit(fn, it))
            if len(pending) >= depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def train(
    cfg: TrainConfig,
    records: Sequence,
    images: Mapping[str, object],
    registry: ChannelRegistry,
    out_dir=None,
    epoch_callback: Callable[[int, TrainResult], None] | None = None,
) -> TrainResult:
    """Train on ``records`` (split == "train"); ``images`` maps image id to a
    MultiChannelImage."""
    train_recs = [r for r in records if r.split == "train"]
    if not train_recs:
        raise SamplerError("no training records")
    missing = [r.image_id for r in train_recs if r.image_id not in images]
    if missing:
        raise KeyError(f"images missing for {len(missing)} records, e.g. {missing[:3]}")
    model = build_model(cfg.strategy, registry, cfg.model)
    classes = sorted({r.label for r in train_recs})
    dtype = np.dtype(cfg.model.dtype)
    bank = ProxyBank(classes, model.embed_dim, cfg.loss.proxy_temperature, seed=cfg.seed, dtype=dtype)
    params = unique_parameters(model) + [bank.proxies]
    opt = AdamW(params, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    workers = worker_count(cfg.deterministic)

    datasets = sorted({r.dataset for r in train_recs})
    steps_per_epoch = math.ceil(len(train_recs) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    manifest = RunManifest(config=cfg.to_dict(), seed=cfg.seed, start_time=time.time(), classes=classes)
    result = TrainResult(model, bank, manifest, opt)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_good = _snapshot(model, bank)
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        batches = mixed_batch_sampler(train_recs, cfg.batch_size, seed=cfg.seed * 100003 + epoch, datasets=datasets)
        losses = []
        prep = _prefetch(lambda b: _prepare(b, train_recs, images, cfg, epoch), batches, workers)
        for groups in prep:
            lr = cosine_lr(step, total, cfg.lr, cfg.min_lr)
            try:
                loss = _batch_loss(model, bank, cfg, train_recs, groups, dtype)
                if not math.isfinite(float(loss.item())):
                    raise FloatingPointError(f"loss is {loss.item()}")
                opt.zero_grad()
                T.backward(loss)
            except (FloatingPointError, ZeroDivisionError) as exc:
                log.error("divergence at step %d: %s", step, exc)
                path = None
                _restore(model, bank, last_good)
                if out is not None:
                    path = str(out / "last_good.camk")
                    save_checkpoint(path, model, bank)
                    manifest.checkpoints.append(path)
                    manifest.end_time = time.time()
                    manifest.save(out / "manifest.json")
                raise TrainingDiverged(step, path) from exc
            opt.step(lr)
            value = float(loss.item())
            losses.append(value)
            manifest.step_losses.append(value)
            manifest.lr_history.append(lr)
            step += 1
        manifest.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, manifest.epoch_losses[-1])
        last_good = _snapshot(model, bank)
        if epoch_callback is not None:
            epoch_callback(epoch, result)
    model.eval()
    manifest.end_time = time.time()
    if out is not None:
        path = str(out / "model.camk")
        save_checkpoint(path, model, bank)
        manifest.checkpoints.append(path)
        manifest.save(out / "manifest.json")
    return result


def _batch_loss(model, bank: ProxyBank, cfg: TrainConfig, records, groups, dtype) -> T.Tensor:
    embs, views_b, labels = [], [], []
    for ds, idx, va, vb in groups:
        embs.append(model.forward(T.Tensor(va, dtype=dtype), ds))
        if vb is not None:
            views_b.append(model.forward(T.Tensor(vb, dtype=dtype), ds))
        labels.extend(records[i].label for i in idx)
    emb = embs[0] if len(embs) == 1 else T.concat(embs, axis=0)
    proxy = None
    if cfg.loss.alpha < 1.0:
        proxy = proxynca_loss(emb, bank.encode(labels), bank)
    ssl = None
    if cfg.loss.alpha > 0.0:
        other = views_b[0] if len(views_b) == 1 else T.concat(views_b, axis=0)
        ssl = ntxent_loss(emb, other, cfg.loss.ssl_temperature)
    return combined_loss(cfg.loss, proxy, ssl)


def _snapshot(model, bank: ProxyBank) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in _tensors(model, bank).items()}


def _restore(model, bank: ProxyBank, snap: dict[str, np.ndarray]) -> None:
    load_state_dict(model, snap, strict=False)
    bank.proxies.data = snap["loss/proxies"].copy()


def _tensors(model, bank: ProxyBank) -> dict[str, np.ndarray]:
    out = state_dict(model)
    out["loss/proxies"] = bank.proxies.data
    return out


def save_checkpoint(path, model, bank: ProxyBank) -> None:
    checkpoint.save(path, _tensors(model, bank))


def load_run(run_dir, registry: ChannelRegistry):
    """Rebuild (model, config, manifest) from a training output directory."""
    run = Path(run_dir)
    manifest = RunManifest.load(run / "manifest.json")
    cfg = TrainConfig.from_dict(manifest.config)
    model = build_model(cfg.strategy, registry, cfg.model)
    tensors = checkpoint.load(run / "model.camk")
    load_state_dict(model, tensors)
    model.eval()
    return model, cfg, manifest


# ---------------------------------------------------------------------------
# embedding, evaluation, sweeps
# ---------------------------------------------------------------------------

def embed_records(model, records: Sequence, images: Mapping[str, object], image_size: int, batch: int = 64) -> EmbeddingMatrix:
    """Embed every record (eval mode), in record order.

    Channel-replication widths differ per dataset; narrower rows are
    zero-padded to the widest so one matrix holds the whole corpus.
    """
    model.eval()
    size = (image_size, image_size)
    by_ds: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_ds.setdefault(r.dataset, []).append(i)
    width = max((model.embedding_width(d) for d in by_ds), default=model.embed_dim)
    out = np.zeros((len(records), width), dtype=np.float32)
    for ds in sorted(by_ds):
        idx = by_ds[ds]
        for s in range(0, len(idx), batch):
            chunk = idx[s : s + batch]
            arr = np.stack([resize(np.asarray(images[records[i].image_id].data, dtype=np.float64), size) for i in chunk])
            e = model.embed_batch(arr, ds)
            out[chunk, : e.shape[1]] = e
    return EmbeddingMatrix(out, [r.image_id for r in records])


def run_pipeline(
    cfg: TrainConfig,
    records: Sequence,
    images: Mapping[str, object],
    registry: ChannelRegistry,
    tasks: Sequence[TaskSpec],
    out_dir=None,
    audit=None,
) -> tuple[TrainResult, MetricsReport]:
    result = train(cfg, records, images, registry, out_dir)
    emb = embed_records(result.model, records, images, cfg.image_size)
    report = evaluate_all(
        emb, records, tasks, workers=worker_count(cfg.deterministic), audit=audit, skip_missing=True
    )
    result.manifest.metrics = report.to_dict()
    return result, report


def sweep_lr(
    cfg: TrainConfig,
    records: Sequence,
    images: Mapping[str, object],
    registry: ChannelRegistry,
    tasks: Sequence[TaskSpec],
    trials: int,
    low: float = 1e-6,
    high: float = 1e-3,
) -> dict:
    """Train ``trials`` models at log-spaced learning rates; rank by CPS (or
    mean validation F1 when CPS is unavailable)."""
    if trials < 1:
        raise ConfigError("--sweep-lr needs at least one trial")
    lrs = [high] if trials == 1 else list(np.logspace(math.log10(low), math.log10(high), trials))
    rows = []
    for lr in lrs:
        _, report = run_pipeline(replace(cfg, lr=float(lr)), records, images, registry, tasks)
        score = report.cps if report.cps is not None else float(np.mean(list(report.task_f1.values())))
        rows.append({"lr": float(lr), "score": score, "task_f1": report.task_f1})
    best = max(rows, key=lambda r: r["score"])
    return {"trials": rows, "best_lr": best["lr"], "best_score": best["score"]}
