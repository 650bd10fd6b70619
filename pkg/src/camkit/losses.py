"""ProxyNCA++, NT-Xent and their convex combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossConfig:
    alpha: float = 0.0
    proxy_temperature: float = 0.2
    ssl_temperature: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"loss.alpha must lie in [0, 1], got {self.alpha}")
        if not 0.05 <= self.proxy_temperature <= 1.0:
            raise ValueError(f"loss.proxy_temperature must lie in [0.05, 1], got {self.proxy_temperature}")
        if self.ssl_temperature <= 0:
            raise ValueError("loss.ssl_temperature must be positive")


class ProxyBank:
    """One trainable proxy row per training class."""

    def __init__(self, classes, dim: int, temperature: float = 0.2, seed: int = 0, dtype=np.float32):
        self.classes = list(classes)
        if not self.classes:
            raise ValueError("a proxy bank needs at least one class")
        self.index = {c: i for i, c in enumerate(self.classes)}
        rng = np.random.default_rng(seed + 31337)
        self.proxies = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / dim), (len(self.classes), dim)).astype(dtype),
            requires_grad=True,
        )
        self.temperature = temperature

    def __len__(self) -> int:
        return len(self.classes)

    def encode(self, labels) -> np.ndarray:
        try:
            return np.array([self.index[l] for l in labels], dtype=np.int64)
        except KeyError as exc:
            raise IndexError(f"label {exc.args[0]!r} has no proxy") from None


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    # rows of a and b are unit-norm: |a-b|^2 = 2 - 2 a.b
    return 2.0 - 2.0 * (a @ T.transpose(b, (1, 0)))


def proxynca_loss(emb: Tensor, labels, bank: ProxyBank | Tensor, temperature: float | None = None) -> Tensor:
    """Mean over samples of the softmax-over-proxies negative log-likelihood.

    Embeddings and proxies are L2-normalised; logits are
    -||x^ - p^||^2 / T.
    """
    proxies = bank.proxies if isinstance(bank, ProxyBank) else bank
    temp = temperature if temperature is not None else getattr(bank, "temperature", None)
    if temp is None:
        raise ValueError("temperature required")
    labels = np.asarray(labels, dtype=np.int64)
    n = emb.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    k = proxies.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {n}")
    if (labels < 0).any() or (labels >= k).any():
        raise IndexError(f"label out of range for {k} proxies")
    x = T.l2_normalize(emb, axis=1, label="embedding")
    p = T.l2_normalize(proxies, axis=1, label="proxy")
    logits = _sq_dists(x, p) * (-1.0 / temp)
    pos = logits[np.arange(n), labels]
    return T.tmean(T.logsumexp(logits, axis=1) - pos)


def ntxent_loss(view_a: Tensor, view_b: Tensor, temperature: float = 0.5) -> Tensor:
    """SimCLR contrastive loss over 2N stacked views, self-similarity excluded."""
    n = view_a.shape[0]
    if view_b.shape != view_a.shape:
        raise ValueError(f"views differ in shape: {view_a.shape} vs {view_b.shape}")
    z = T.l2_normalize(T.concat([view_a, view_b], axis=0), axis=1, label="view")
    sim = (z @ T.transpose(z, (1, 0))) * (1.0 / temperature)
    # push the diagonal far below every other logit so it drops out of the log-sum-exp
    mask = np.zeros((2 * n, 2 * n), dtype=z.dtype)
    np.fill_diagonal(mask, -1e4 / temperature)
    logits = sim + Tensor(mask)
    pos_idx = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    pos = logits[np.arange(2 * n), pos_idx]
    return T.tmean(T.logsumexp(logits, axis=1) - pos)


def combined_loss(cfg: LossConfig, proxy_term, ssl_term):
    if cfg.alpha == 0.0:
        return proxy_term
    if cfg.alpha == 1.0:
        return ssl_term
    return cfg.alpha * ssl_term + (1.0 - cfg.alpha) * proxy_term
