"""Shared mini backbone, embedding models and the two non-adaptive baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .frontends import ADAPTIVE, Frontend, ReplicationFrontend, build_frontend
from .registry import ChannelRegistry
from .tensor import Tensor


@dataclass
class ModelConfig:
    out_channels: int = 96
    kernel: int = 4
    stride: int = 4
    padding: int = 0
    widths: tuple[int, ...] = (96, 192, 384)
    block_kernel: int = 3
    embed_dim: int = 128
    templates: int = 16
    hyper_embed: int = 64
    hyper_hidden: int = 16
    seed: int = 0
    dtype: str = "float32"

    def frontend_kwargs(self, strategy: str) -> dict:
        kw = dict(
            out_channels=self.out_channels,
            kernel=self.kernel,
            stride=self.stride,
            padding=self.padding,
            seed=self.seed,
            dtype=np.dtype(self.dtype),
        )
        if strategy == "template_mixing":
            kw["templates"] = self.templates
        elif strategy == "hypernet":
            kw.update(embed_dim=self.hyper_embed, hidden=self.hyper_hidden)
        return kw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(int(w) for w in d["widths"])
        return cls(**d)


class Backbone:
    """conv -> batch norm -> GELU blocks, stride 2 from the second block on,
    then global average pooling and an affine map to ``embed_dim``."""

    def __init__(
        self,
        in_channels: int,
        widths=(96, 192, 384),
        embed_dim: int = 128,
        kernel: int = 3,
        seed: int = 0,
        dtype=np.float32,
    ):
        rng = np.random.default_rng(seed + 7919)
        self.dtype = np.dtype(dtype)
        self.kernel = kernel
        self.training = True
        self.blocks: list[dict] = []
        c = in_channels
        for i, w in enumerate(widths):
            bound = 1.0 / np.sqrt(c * kernel * kernel)
            self.blocks.append(
                dict(
                    weight=Tensor(rng.uniform(-bound, bound, (w, c, kernel, kernel)).astype(dtype), requires_grad=True),
                    bias=Tensor(np.zeros(w, dtype=dtype), requires_grad=True),
                    gamma=Tensor(np.ones(w, dtype=dtype), requires_grad=True),
                    beta=Tensor(np.zeros(w, dtype=dtype), requires_grad=True),
                    running_mean=np.zeros(w, dtype=np.float64),
                    running_var=np.ones(w, dtype=np.float64),
                    stride=1 if i == 0 else 2,
                )
            )
            c = w
        bound = 1.0 / np.sqrt(c)
        self.head_w = Tensor(rng.uniform(-bound, bound, (c, embed_dim)).astype(dtype), requires_grad=True)
        self.head_b = Tensor(np.zeros(embed_dim, dtype=dtype), requires_grad=True)
        self.embed_dim = embed_dim

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.blocks):
            for k in ("weight", "bias", "gamma", "beta"):
                out[f"backbone/block{i}/{k}"] = b[k]
        out["backbone/head/weight"] = self.head_w
        out["backbone/head/bias"] = self.head_b
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            out[f"backbone/block{i}/running_mean"] = b["running_mean"]
            out[f"backbone/block{i}/running_var"] = b["running_var"]
        return out

    def forward(self, x: Tensor) -> Tensor:
        pad = self.kernel // 2
        for b in self.blocks:
            x = T.conv2d(x, b["weight"], b["bias"], stride=b["stride"], padding=pad)
            x = T.batch_norm(x, b["gamma"], b["beta"], b["running_mean"], b["running_var"], training=self.training)
            x = T.gelu(x)
        x = T.adaptive_avg_pool(x, (1, 1))
        x = T.reshape(x, x.shape[:2])
        return x @ self.head_w + self.head_b

    __call__ = forward


class EmbeddingModel:
    """A frontend followed by a backbone; maps images to ``embed_dim`` vectors."""

    def __init__(self, frontend: Frontend, backbone: Backbone):
        self.frontend = frontend
        self.backbone = backbone

    @property
    def embed_dim(self) -> int:
        return self.backbone.embed_dim

    @property
    def dtype(self):
        return self.backbone.dtype

    def train(self, mode: bool = True) -> "EmbeddingModel":
        self.backbone.training = mode
        return self

    def eval(self) -> "EmbeddingModel":
        return self.train(False)

    def route(self, dataset: str) -> "EmbeddingModel":
        return self

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.frontend.named_parameters())
        out.update(self.backbone.named_parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return self.backbone.buffers()

    def forward(self, x, dataset: str) -> Tensor:
        """[B,N,H,W] batch of one channel set -> [B, embed_dim]."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        return self.backbone(self.frontend.forward(x, dataset))

    def embed(self, img) -> np.ndarray:
        """Eval-mode embedding of one MultiChannelImage."""
        prev = self.backbone.training
        self.backbone.training = False
        try:
            out = self.forward(np.asarray(img.data, dtype=self.dtype)[None], img.channel_set)
        finally:
            self.backbone.training = prev
        return out.data[0].copy()

    def embed_batch(self, batch: np.ndarray, dataset: str) -> np.ndarray:
        prev = self.backbone.training
        self.backbone.training = False
        try:
            return self.forward(np.asarray(batch, dtype=self.dtype), dataset).data.copy()
        finally:
            self.backbone.training = prev

    def embedding_width(self, dataset: str) -> int:
        return self.embed_dim


class FixedChannelsModel:
    """One independent EmbeddingModel per dataset."""

    strategy = "fixed_channels"

    def __init__(self, models: dict[str, EmbeddingModel]):
        self.models = models

    @property
    def embed_dim(self) -> int:
        return next(iter(self.models.values())).embed_dim

    @property
    def dtype(self):
        return next(iter(self.models.values())).dtype

    def route(self, dataset: str) -> EmbeddingModel:
        try:
            return self.models[dataset]
        except KeyError:
            from .registry import UnknownChannelSetError

            raise UnknownChannelSetError(f"no fixed-channel model for {dataset!r}") from None

    def train(self, mode: bool = True):
        for m in self.models.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for ds, m in self.models.items():
            for k, v in m.named_parameters().items():
                out[f"model/{ds}/{k}"] = v
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"model/{ds}/{k}": v for ds, m in self.models.items() for k, v in m.buffers().items()}

    def forward(self, x, dataset):
        return self.route(dataset).forward(x, dataset)

    def embed(self, img) -> np.ndarray:
        return self.route(img.channel_set).embed(img)

    def embed_batch(self, batch, dataset):
        return self.route(dataset).embed_batch(batch, dataset)

    def embedding_width(self, dataset: str) -> int:
        return self.embed_dim


class ChannelReplicationModel:
    """Embeds each channel as a replicated 3-channel image and concatenates."""

    strategy = "channel_replication"

    def __init__(self, inner: EmbeddingModel, registry: ChannelRegistry):
        self.inner = inner
        self.registry = registry
        self.forward_passes = 0

    @property
    def embed_dim(self) -> int:
        return self.inner.embed_dim

    @property
    def dtype(self):
        return self.inner.dtype

    def route(self, dataset: str) -> EmbeddingModel:
        return self.inner

    def train(self, mode: bool = True):
        self.inner.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def named_parameters(self):
        return self.inner.named_parameters()

    def buffers(self):
        return self.inner.buffers()

    def forward(self, x, dataset):
        """Training path: each channel replicated to 3, embedded, then averaged
        over channels so every image yields one ``embed_dim`` vector."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        b, c, h, w = x.shape
        flat = T.reshape(x, (b * c, 1, h, w))
        rep = T.concat([flat, flat, flat], axis=1)
        emb = self.inner.forward(rep, dataset)
        return T.tmean(T.reshape(emb, (b, c, emb.shape[-1])), axis=1)

    def embed(self, img) -> np.ndarray:
        out = channel_replication_embed(self.inner, img)
        self.forward_passes += img.data.shape[0]
        return out

    def embed_batch(self, batch, dataset):
        batch = np.asarray(batch, dtype=self.dtype)
        parts = []
        for c in range(batch.shape[1]):
            rep = np.repeat(batch[:, c : c + 1], 3, axis=1)
            parts.append(self.inner.embed_batch(rep, dataset))
            self.forward_passes += batch.shape[0]
        return np.concatenate(parts, axis=1)

    def embedding_width(self, dataset: str) -> int:
        return self.embed_dim * self.registry.channel_count(dataset)


@dataclass
class _Replica:
    data: np.ndarray
    channel_set: str
    image_id: str = ""


def channel_replication_embed(backbone3: EmbeddingModel, img) -> np.ndarray:
    """Concatenate the embeddings of each channel replicated to 3 channels.

    Runs one forward pass per channel.
    """
    data = np.asarray(img.data)
    if data.ndim != 3 or data.shape[0] < 1:
        raise T.DimensionError(f"expected a [C,H,W] image with C >= 1, got {data.shape}")
    vecs = []
    for c in range(data.shape[0]):
        rep = _Replica(np.repeat(data[c : c + 1], 3, axis=0), img.channel_set)
        vecs.append(backbone3.embed(rep))
    return np.concatenate(vecs)


def build_model(strategy: str, registry: ChannelRegistry, cfg: ModelConfig | None = None):
    cfg = cfg or ModelConfig()
    dtype = np.dtype(cfg.dtype)

    def backbone():
        return Backbone(cfg.out_channels, cfg.widths, cfg.embed_dim, cfg.block_kernel, seed=cfg.seed, dtype=dtype)

    if strategy == "fixed_channels":
        models = {}
        for i, ds in enumerate(registry.datasets):
            kw = cfg.frontend_kwargs(strategy)
            kw["seed"] = cfg.seed + 101 * (i + 1)
            fe = build_frontend(strategy, registry, dataset=ds, **kw)
            bb = Backbone(cfg.out_channels, cfg.widths, cfg.embed_dim, cfg.block_kernel, seed=cfg.seed + i, dtype=dtype)
            models[ds] = EmbeddingModel(fe, bb)
        return FixedChannelsModel(models)
    if strategy == "channel_replication":
        inner = EmbeddingModel(ReplicationFrontend(registry, **cfg.frontend_kwargs(strategy)), backbone())
        return ChannelReplicationModel(inner, registry)
    if strategy not in ADAPTIVE:
        raise ValueError(f"unknown strategy {strategy!r}")
    m = EmbeddingModel(build_frontend(strategy, registry, **cfg.frontend_kwargs(strategy)), backbone())
    m.strategy = strategy
    return m


def unique_parameters(model) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    for p in model.named_parameters().values():
        seen.setdefault(id(p), p)
    return list(seen.values())


def total_parameters(model) -> int:
    return int(sum(p.size for p in unique_parameters(model)))


def inference_cost(strategy: str, manifest: Iterable) -> float:
    """Average forward passes per image.

    ``manifest`` yields channel counts (ints) or objects with ``channel_count``.
    """
    counts = [int(getattr(m, "channel_count", m)) for m in manifest]
    if not counts:
        raise ValueError("empty manifest")
    if strategy == "channel_replication":
        return float(np.mean(counts))
    return 1.0


def state_dict(model) -> dict[str, np.ndarray]:
    out = {k: v.data for k, v in model.named_parameters().items()}
    out.update({k: v for k, v in model.buffers().items()})
    return out


def load_state_dict(model, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
    params = model.named_parameters()
    bufs = model.buffers()
    missing = [k for k in list(params) + list(bufs) if k not in tensors]
    if strict and missing:
        raise KeyError(f"checkpoint lacks {len(missing)} entries, e.g. {missing[:3]}")
    for k, p in params.items():
        if k in tensors:
            arr = tensors[k]
            if arr.shape != p.shape:
                raise T.DimensionError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
    for k, b in bufs.items():
        if k in tensors:
            b[...] = tensors[k]
