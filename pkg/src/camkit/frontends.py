"""First-layer strategies that turn any registered channel set into a
fixed-width feature map for a shared backbone.

Seven strategies are available through :func:`build_frontend`:

``fixed_channels`` / ``channel_replication``
    an ordinary convolution bound to one channel count (3 for replication).
``depthwise``
    one filter bank per channel, responses averaged across channels.
``slice_param``
    one filter bank per channel; the banks of an image's channels are
    concatenated into a single convolution.
``target_param``
    one full convolution per dataset (channel set).
``template_mixing``
    per-channel filters are linear combinations of shared templates.
``hypernet``
    per-channel filters are produced by an MLP from a channel embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .registry import ChannelId, ChannelRegistry, UnknownChannelError, UnknownChannelSetError
from .tensor import DimensionError, Tensor

STRATEGIES = (
    "channel_replication",
    "fixed_channels",
    "depthwise",
    "slice_param",
    "target_param",
    "template_mixing",
    "hypernet",
)
ADAPTIVE = ("depthwise", "slice_param", "target_param", "template_mixing", "hypernet")


class StrategyMismatchError(ValueError):
    pass


def _uniform(rng, bound, shape, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# weight materialisation
# ---------------------------------------------------------------------------

def slice_filters(bank: Mapping[ChannelId, Tensor], channel_set: Sequence[ChannelId]) -> Tensor:
    """Concatenate per-channel [O,1,k,k] filters along the input axis."""
    try:
        parts = [bank[cid] for cid in channel_set]
    except KeyError as exc:
        raise UnknownChannelError(f"no filters for channel {exc.args[0]}") from None
    if len(parts) == 1:
        return parts[0]
    return T.concat(parts, axis=1)


@dataclass
class TemplateBank:
    templates: Tensor  # [T, O, k, k]
    coefficients: dict[ChannelId, Tensor]  # each [T]

    @property
    def count(self) -> int:
        return self.templates.shape[0]


def mix_templates(bank: TemplateBank, channel_set: Sequence[ChannelId]) -> Tensor:
    """filter_c = sum_t coeff[c][t] * template[t], stacked along the input axis."""
    n_t, o, k, _ = bank.templates.shape
    try:
        coeffs = [bank.coefficients[cid] for cid in channel_set]
    except KeyError as exc:
        raise UnknownChannelError(f"no coefficients for channel {exc.args[0]}") from None
    for cid, c in zip(channel_set, coeffs):
        if c.shape != (n_t,):
            raise DimensionError(f"coefficients of {cid} have shape {c.shape}, expected ({n_t},)")
    mixed = T.stack(coeffs, axis=0) @ T.reshape(bank.templates, (n_t, o * k * k))
    return T.transpose(T.reshape(mixed, (len(coeffs), o, k, k)), (1, 0, 2, 3))


@dataclass
class HyperGenerator:
    embeddings: dict[ChannelId, Tensor]  # each [e]
    w1: Tensor  # [e, h]
    b1: Tensor  # [h]
    w2: Tensor  # [h, O*k*k]
    b2: Tensor  # [O*k*k]
    out_channels: int
    kernel: int

    def mlp(self, emb: Tensor) -> Tensor:
        return T.gelu(emb @ self.w1 + self.b1) @ self.w2 + self.b2


def generate_weights(g: HyperGenerator, channel_set: Sequence[ChannelId]) -> Tensor:
    """Run the generator on each channel's embedding and concatenate the filters."""
    try:
        embs = [g.embeddings[cid] for cid in channel_set]
    except KeyError as exc:
        raise UnknownChannelError(f"no embedding for channel {exc.args[0]}") from None
    o, k = g.out_channels, g.kernel
    flat = g.mlp(T.stack(embs, axis=0))  # rows are independent
    return T.transpose(T.reshape(flat, (len(embs), o, k, k)), (1, 0, 2, 3))


def replicate_first_layer(src, target_channels: int):
    """Cycle the 3 input-channel slices of ``src`` to cover ``target_channels``."""
    if src.shape[1] != 3:
        raise DimensionError(f"source weights must have 3 input channels, got shape {src.shape}")
    if target_channels < 1:
        raise DimensionError("target_channels must be >= 1")
    idx = np.arange(target_channels) % 3
    if isinstance(src, Tensor):
        return T.getitem(src, (slice(None), idx))
    return np.asarray(src)[:, idx].copy()


# ---------------------------------------------------------------------------
# frontends
# ---------------------------------------------------------------------------

class Frontend:
    strategy = ""

    def __init__(
        self,
        registry: ChannelRegistry,
        out_channels: int = 96,
        kernel: int = 4,
        stride: int = 4,
        padding: int = 0,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.registry = registry
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.bias = Tensor(np.zeros(out_channels, dtype=self.dtype), requires_grad=True)

    def _prefix(self, *parts: str) -> str:
        return "/".join(("frontend", self.strategy) + parts)

    def _channel_bank(self, fan_in: int) -> dict[ChannelId, Tensor]:
        o, k = self.out_channels, self.kernel
        by_key: dict[str, Tensor] = {}
        bank: dict[ChannelId, Tensor] = {}
        for cid in self.registry.entries:
            key = self.registry.param_key(cid)
            if key not in by_key:
                by_key[key] = _uniform(self.rng, 1.0 / np.sqrt(fan_in), (o, 1, k, k), self.dtype)
            bank[cid] = by_key[key]
        return bank

    def channel_set(self, dataset: str) -> list[ChannelId]:
        return self.registry.channel_set(dataset)

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def weights_for(self, dataset: str) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def _check_input(self, x: Tensor, dataset: str) -> None:
        n = len(self.channel_set(dataset))
        if x.shape[-3] != n:
            raise DimensionError(f"image with {x.shape[-3]} channels given for channel set {dataset!r} of {n}")

    def forward(self, x: Tensor, dataset: str) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        self._check_input(x, dataset)
        w, b = self.weights_for(dataset)
        return T.conv2d(x, w, b, stride=self.stride, padding=self.padding)

    __call__ = forward

    def _bank_params(self, bank: Mapping[ChannelId, Tensor], leaf: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for cid in self.registry.entries:
            name = self._prefix(self.registry.param_key(cid), leaf)
            out.setdefault(name, bank[cid])
        return out


class FixedFrontend(Frontend):
    """Plain convolution for one channel count."""

    strategy = "fixed_channels"

    def __init__(self, registry, in_channels: int, dataset: str | None = None, **kw):
        super().__init__(registry, **kw)
        self.in_channels = in_channels
        self.dataset = dataset
        o, k = self.out_channels, self.kernel
        self.weight = _uniform(self.rng, 1.0 / np.sqrt(in_channels * k * k), (o, in_channels, k, k), self.dtype)

    def _check_input(self, x: Tensor, dataset: str) -> None:
        if x.shape[-3] != self.in_channels:
            raise StrategyMismatchError(
                f"{self.strategy} frontend expects {self.in_channels} channels, image has {x.shape[-3]}"
            )

    def weights_for(self, dataset):
        return self.weight, self.bias

    def named_parameters(self):
        tag = self.dataset or f"c{self.in_channels}"
        return {self._prefix(tag, "weight"): self.weight, self._prefix(tag, "bias"): self.bias}


class ReplicationFrontend(FixedFrontend):
    strategy = "channel_replication"

    def __init__(self, registry, **kw):
        super().__init__(registry, in_channels=3, **kw)


class DepthwiseFrontend(Frontend):
    strategy = "depthwise"

    def __init__(self, registry, **kw):
        super().__init__(registry, **kw)
        self.bank = self._channel_bank(self.kernel * self.kernel)

    def named_parameters(self):
        out = self._bank_params(self.bank, "weight")
        out[self._prefix("shared", "bias")] = self.bias
        return out

    def forward(self, x, dataset):
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        self._check_input(x, dataset)
        cs = self.channel_set(dataset)
        filters = T.concat([self.bank[c] for c in cs], axis=0)  # [N*O,1,k,k]
        y = T.depthwise_conv2d(x, filters, stride=self.stride, padding=self.padding)
        n, o = len(cs), self.out_channels
        if y.ndim == 3:
            y = T.reshape(y, (n, o) + y.shape[-2:])
            y = T.channel_mean(y, axis=0, keepdims=False)
            return y + T.reshape(self.bias, (o, 1, 1))
        y = T.reshape(y, (y.shape[0], n, o) + y.shape[-2:])
        y = T.channel_mean(y, axis=1, keepdims=False)
        return y + T.reshape(self.bias, (1, o, 1, 1))

    __call__ = forward


class SliceParamFrontend(Frontend):
    strategy = "slice_param"

    def __init__(self, registry, **kw):
        super().__init__(registry, **kw)
        self.bank = self._channel_bank(self.kernel * self.kernel)

    def named_parameters(self):
        out = self._bank_params(self.bank, "weight")
        out[self._prefix("shared", "bias")] = self.bias
        return out

    def weights_for(self, dataset):
        return slice_filters(self.bank, self.channel_set(dataset)), self.bias


class TargetParamFrontend(Frontend):
    strategy = "target_param"

    def __init__(self, registry, **kw):
        super().__init__(registry, **kw)
        o, k = self.out_channels, self.kernel
        self.heads: dict[str, tuple[Tensor, Tensor]] = {}
        for ds, cs in registry.datasets.items():
            n = len(cs)
            w = _uniform(self.rng, 1.0 / np.sqrt(n * k * k), (o, n, k, k), self.dtype)
            b = Tensor(np.zeros(o, dtype=self.dtype), requires_grad=True)
            self.heads[ds] = (w, b)

    def named_parameters(self):
        out = {}
        for ds, (w, b) in self.heads.items():
            out[self._prefix(ds, "weight")] = w
            out[self._prefix(ds, "bias")] = b
        return out

    def weights_for(self, dataset):
        if dataset not in self.heads:
            raise UnknownChannelSetError(f"channel set {dataset!r} is not registered")
        return self.heads[dataset]


class TemplateMixingFrontend(Frontend):
    strategy = "template_mixing"

    def __init__(self, registry, templates: int = 16, **kw):
        super().__init__(registry, **kw)
        o, k = self.out_channels, self.kernel
        tmpl = _uniform(self.rng, 1.0 / np.sqrt(k * k), (templates, o, 1, k, k), self.dtype)
        tmpl = Tensor(tmpl.data.reshape(templates, o, k, k), requires_grad=True)
        by_key: dict[str, Tensor] = {}
        coeffs: dict[ChannelId, Tensor] = {}
        for cid in registry.entries:
            key = registry.param_key(cid)
            if key not in by_key:
                by_key[key] = Tensor(
                    self.rng.normal(0.0, np.sqrt(1.0 / templates), templates).astype(self.dtype),
                    requires_grad=True,
                )
            coeffs[cid] = by_key[key]
        self.templates = TemplateBank(tmpl, coeffs)

    def named_parameters(self):
        out = {self._prefix("templates", "weight"): self.templates.templates}
        out.update(self._bank_params(self.templates.coefficients, "coeff"))
        out[self._prefix("shared", "bias")] = self.bias
        return out

    def weights_for(self, dataset):
        return mix_templates(self.templates, self.channel_set(dataset)), self.bias


class HyperNetFrontend(Frontend):
    strategy = "hypernet"

    def __init__(self, registry, embed_dim: int = 64, hidden: int = 16, **kw):
        super().__init__(registry, **kw)
        o, k = self.out_channels, self.kernel
        by_key: dict[str, Tensor] = {}
        embs: dict[ChannelId, Tensor] = {}
        for cid in registry.entries:
            key = registry.param_key(cid)
            if key not in by_key:
                by_key[key] = Tensor(
                    self.rng.normal(0.0, np.sqrt(1.0 / embed_dim), embed_dim).astype(self.dtype),
                    requires_grad=True,
                )
            embs[cid] = by_key[key]
        self.generator = HyperGenerator(
            embeddings=embs,
            w1=_uniform(self.rng, 1.0 / np.sqrt(embed_dim), (embed_dim, hidden), self.dtype),
            b1=_uniform(self.rng, 1.0 / np.sqrt(embed_dim), (hidden,), self.dtype),
            w2=_uniform(self.rng, 1.0 / np.sqrt(hidden), (hidden, o * k * k), self.dtype),
            b2=_uniform(self.rng, 1.0 / np.sqrt(hidden), (o * k * k,), self.dtype),
            out_channels=o,
            kernel=k,
        )

    def named_parameters(self):
        g = self.generator
        out = self._bank_params(g.embeddings, "embedding")
        out.update(
            {
                self._prefix("mlp", "w1"): g.w1,
                self._prefix("mlp", "b1"): g.b1,
                self._prefix("mlp", "w2"): g.w2,
                self._prefix("mlp", "b2"): g.b2,
                self._prefix("shared", "bias"): self.bias,
            }
        )
        return out

    def weights_for(self, dataset):
        return generate_weights(self.generator, self.channel_set(dataset)), self.bias


_CLASSES = {
    "channel_replication": ReplicationFrontend,
    "depthwise": DepthwiseFrontend,
    "slice_param": SliceParamFrontend,
    "target_param": TargetParamFrontend,
    "template_mixing": TemplateMixingFrontend,
    "hypernet": HyperNetFrontend,
}


def build_frontend(strategy: str, registry: ChannelRegistry, dataset: str | None = None, **kw) -> Frontend:
    """Construct a frontend. ``fixed_channels`` needs ``dataset`` to fix its width."""
    if strategy == "fixed_channels":
        if dataset is None:
            raise ValueError("fixed_channels frontend needs a dataset")
        return FixedFrontend(registry, in_channels=registry.channel_count(dataset), dataset=dataset, **kw)
    try:
        cls = _CLASSES[strategy]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}") from None
    return cls(registry, **kw)


def frontend_forward(f: Frontend, img) -> Tensor:
    """Apply ``f`` to a MultiChannelImage (or anything with .data/.channel_set)."""
    if img.channel_set not in f.registry and not isinstance(f, FixedFrontend):
        raise UnknownChannelSetError(f"channel set {img.channel_set!r} is not registered")
    return f.forward(Tensor(np.asarray(img.data), dtype=f.dtype), img.channel_set)


def count_parameters(f: Frontend) -> int:
    seen: dict[int, Tensor] = {}
    for p in f.named_parameters().values():
        seen.setdefault(id(p), p)
    return int(sum(p.size for p in seen.values()))
