"""Small transformer building blocks shared by the three models.

Everything is pre-norm, learned absolute positions, GELU feed-forward.
Sequences are batched as (B, T, d) with boolean masks for padding and
causality; padded rows are excluded from attention keys and from every
loss, so whatever they compute is inert.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_NEG = -1e30


class Module:
    """Minimal parameter container: children discovered by attribute walk."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_params(f"{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{key}.{i}."))
        return out

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={missing} extra={extra}")
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise KeyError(
                    f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}"
                )
            p.data = np.array(arrays[name], dtype=np.float64)

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.w = ad.parameter(glorot(rng, d_in, d_out))
        self.b = ad.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, vocab: int, d: int, scale: float = 0.02):
        self.table = ad.parameter(rng.normal(0.0, scale, size=(vocab, d)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.table, ids)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = ad.parameter(np.ones(d))
        self.bias = ad.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    head = d // n_heads
    return ad.transpose(ad.reshape(x, (b, t, n_heads, head)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, head = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * head))


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        if d % n_heads:
            raise ValueError(f"d_model {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def __call__(self, q_in: Tensor, kv_in: Tensor, blocked: np.ndarray | None) -> Tensor:
        """Attention with an optional boolean mask of blocked (q, k) pairs.

        ``blocked`` broadcasts against (B, H, Tq, Tk); true entries are
        removed from the softmax.
        """
        n_heads = self.n_heads
        q = split_heads(self.wq(q_in), n_heads)
        k = split_heads(self.wk(kv_in), n_heads)
        v = split_heads(self.wv(kv_in), n_heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale
        if blocked is not None:
            scores = ad.masked_fill(scores, blocked, MASK_NEG)
        attn = ad.softmax_temp(scores, 1.0)
        ctx = ad.matmul(attn, v)
        return self.wo(merge_heads(ctx))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int):
        self.up = Linear(rng, d, hidden)
        self.down = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


class EncoderBlock(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, ffn: int):
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn)

    def __call__(self, x: Tensor, blocked: np.ndarray | None) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, blocked)
        x = x + self.ffn(self.norm_ffn(x))
        return x


class DecoderBlock(Module):
    """Pre-norm block with causal self-attention plus cross-attention."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, ffn: int):
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, n_heads)
        self.norm_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, n_heads)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn)

    def __call__(
        self,
        x: Tensor,
        memory: Tensor,
        self_blocked: np.ndarray | None,
        cross_blocked: np.ndarray | None,
    ) -> Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, self_blocked)
        x = x + self.cross_attn(self.norm_cross(x), memory, cross_blocked)
        x = x + self.ffn(self.norm_ffn(x))
        return x


def causal_blocked(t: int) -> np.ndarray:
    """(1, 1, t, t) mask blocking attention to strictly later positions."""
    return np.triu(np.ones((t, t), dtype=bool), k=1)[None, None]


def padding_blocked(lengths: np.ndarray, t: int) -> np.ndarray:
    """(B, 1, 1, t) mask blocking attention *to* padded key positions."""
    cols = np.arange(t)[None, :] >= np.asarray(lengths)[:, None]
    return cols[:, None, None, :]


def length_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """(B, t) boolean validity mask from per-sequence lengths."""
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]
