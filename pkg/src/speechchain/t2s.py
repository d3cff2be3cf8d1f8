"""Autoregressive text-to-semantic model.

A causal transformer LM over the concatenation [text prefix | semantic
prompt | semantic targets]. Text and semantic ids live in one embedding
table with separated id ranges; segment embeddings mark the three spans.
Cross-entropy is computed on semantic target rows only (an explicit 0/1
row mask), and the targets end with the semantic eos so generation learns
to stop.

The text prefix may be hard ids or soft rows over the text vocabulary; a
soft row embeds as the probability-weighted mixture of text embedding
vectors, which is the differentiable inlet the recognition model feeds
during chain training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .corpus import Vocabulary
from .errors import InputError, ParameterError

SEG_TEXT, SEG_PROMPT, SEG_TARGET = 0, 1, 2


@dataclass(frozen=True)
class T2sConfig:
    text_size: int
    semantic_size: int
    d_model: int = 64
    n_heads: int = 2
    blocks: int = 3
    ffn: int = 128
    max_len: int = 192


@dataclass
class PrefixBatch:
    """One training example for the prefix LM.

    ``P`` is either an id array or soft rows (LP, C). ``s_tgt`` is the
    semantic continuation after the prompt, with the semantic eos
    appended. ``m`` and ``targets`` align with the model's output rows:
    row i predicts the next input token, and ``m[i] = 1`` exactly where
    that next token is a semantic target.
    """

    P: np.ndarray | Tensor
    s_p: np.ndarray
    s_tgt: np.ndarray
    m: np.ndarray
    targets: np.ndarray

    @property
    def text_len(self) -> int:
        return self.P.shape[0]

    @property
    def total_len(self) -> int:
        return self.text_len + len(self.s_p) + len(self.s_tgt)


def make_prefix_batch(text_p, s, prompt_len: int, vocab: Vocabulary) -> PrefixBatch:
    """Assemble a PrefixBatch from a ground-truth pair.

    ``text_p`` is the full text prefix (typically y plus the text eos),
    either hard ids or soft rows over the text vocabulary; the prompt is
    the first ``prompt_len`` semantic tokens and the targets are the
    remainder plus the semantic eos.
    """
    if not isinstance(text_p, Tensor):
        text_p = np.asarray(text_p, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    if not 0 <= prompt_len < len(s) + 1:
        raise InputError(f"prompt length {prompt_len} outside [0, {len(s)}]")
    s_p = s[:prompt_len]
    s_tgt = np.concatenate([s[prompt_len:], [vocab.sem_eos]])
    lp, lq, lt = text_p.shape[0], len(s_p), len(s_tgt)
    n = lp + lq + lt
    m = np.zeros(n, dtype=np.int64)
    targets = np.zeros(n, dtype=np.int64)
    m[lp + lq - 1 : n - 1] = 1
    targets[lp + lq - 1 : n - 1] = s_tgt
    return PrefixBatch(P=text_p, s_p=s_p, s_tgt=s_tgt, m=m, targets=targets)


def sample_prompt(s, frac_range: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Contiguous prefix whose length is uniform over the fraction range.

    The admissible lengths are round(lo*T)..round(hi*T), clamped to
    [0, T-1]; one is drawn uniformly.
    """
    lo, hi = frac_range
    if not 0.0 <= lo <= hi < 1.0:
        raise ParameterError(f"fraction range must satisfy 0 <= lo <= hi < 1, got {frac_range}")
    s = np.asarray(s, dtype=np.int64)
    t = len(s)
    lo_len = min(max(int(round(lo * t)), 0), t - 1)
    hi_len = min(max(int(round(hi * t)), 0), t - 1)
    length = int(rng.integers(lo_len, hi_len + 1))
    return s[:length]


class T2sModel(nn.Module):
    def __init__(self, cfg: T2sConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Embedding(rng, cfg.text_size + cfg.semantic_size, d)
        self.seg_embed = nn.Embedding(rng, 3, d)
        self.pos_embed = nn.Embedding(rng, cfg.max_len, d)
        self.blocks = [nn.EncoderBlock(rng, d, cfg.n_heads, cfg.ffn) for _ in range(cfg.blocks)]
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(rng, d, cfg.semantic_size)

    def text_rows(self) -> Tensor:
        return self.embed.table[: self.cfg.text_size]

    def forward_packed(self, packed: "PackedPrefix") -> Tensor:
        """Causal logits over the packed block layout [text | semantic]."""
        cfg = self.cfg
        if packed.pos_ids.max(initial=0) >= cfg.max_len:
            raise InputError(f"sequence exceeds position capacity {cfg.max_len}")
        if packed.soft is not None:
            text_emb = ad.matmul(packed.soft, self.text_rows())
        else:
            text_emb = self.embed(packed.text_ids)
        sem_emb = self.embed(cfg.text_size + packed.sem_ids)
        x = ad.concat([text_emb, sem_emb], axis=1)
        x = x + self.seg_embed(packed.seg_ids) + self.pos_embed(packed.pos_ids)
        blocked = nn.causal_blocked(x.shape[1]) | ~packed.valid[:, None, None, :]
        for block in self.blocks:
            x = block(x, blocked)
        return self.head(self.norm(x))


@dataclass
class PackedPrefix:
    """Padded block layout for a list of PrefixBatch items.

    Text spans occupy block columns [0, lp_max); semantic spans (prompt
    then targets) occupy [lp_max, lp_max + sem_max). Position ids restore
    each utterance's true absolute positions across the gap.
    """

    soft: Tensor | None
    text_ids: np.ndarray | None
    sem_ids: np.ndarray
    seg_ids: np.ndarray
    pos_ids: np.ndarray
    valid: np.ndarray
    m: np.ndarray
    targets: np.ndarray
    row_counts: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.sem_ids.shape[0]

    @property
    def text_width(self) -> int:
        if self.text_ids is not None:
            return self.text_ids.shape[1]
        return self.soft.shape[1]


def pack_prefix_batches(items: list[PrefixBatch]) -> PackedPrefix:
    b = len(items)
    soft_mode = isinstance(items[0].P, Tensor)
    lp = np.array([it.text_len for it in items])
    sem_lens = np.array([len(it.s_p) + len(it.s_tgt) for it in items])
    lp_max, sem_max = int(lp.max()), int(sem_lens.max())
    n = lp_max + sem_max
    sem_ids = np.zeros((b, sem_max), dtype=np.int64)
    seg_ids = np.zeros((b, n), dtype=np.int64)
    pos_ids = np.zeros((b, n), dtype=np.int64)
    valid = np.zeros((b, n), dtype=bool)
    m = np.zeros((b, n), dtype=np.float64)
    targets = np.zeros((b, n), dtype=np.int64)
    if soft_mode:
        c = items[0].P.shape[1]
        parts = []
        for i, it in enumerate(items):
            pad = np.zeros((lp_max - it.text_len, c))
            padded = ad.concat([it.P, ad.Tensor(pad)], axis=0) if pad.shape[0] else it.P
            parts.append(ad.reshape(padded, (1, lp_max, c)))
        soft = ad.concat(parts, axis=0)
        text_ids = None
    else:
        soft = None
        text_ids = np.zeros((b, lp_max), dtype=np.int64)
        for i, it in enumerate(items):
            text_ids[i, : it.text_len] = it.P
    for i, it in enumerate(items):
        lq, lt = len(it.s_p), len(it.s_tgt)
        sem_ids[i, : lq + lt] = np.concatenate([it.s_p, it.s_tgt])
        valid[i, : it.text_len] = True
        valid[i, lp_max : lp_max + lq + lt] = True
        seg_ids[i, lp_max : lp_max + lq] = SEG_PROMPT
        seg_ids[i, lp_max + lq : lp_max + lq + lt] = SEG_TARGET
        pos_ids[i, : it.text_len] = np.arange(it.text_len)
        pos_ids[i, lp_max : lp_max + lq + lt] = it.text_len + np.arange(lq + lt)
        # row predicting s_tgt[j] carries input token x[text+lq-1+j]
        for j in range(lt):
            k = lq - 1 + j
            row = it.text_len - 1 if k < 0 else lp_max + k
            m[i, row] = 1.0
            targets[i, row] = it.s_tgt[j]
    return PackedPrefix(
        soft=soft,
        text_ids=text_ids,
        sem_ids=sem_ids,
        seg_ids=seg_ids,
        pos_ids=pos_ids,
        valid=valid,
        m=m,
        targets=targets,
        row_counts=lp + sem_lens,
    )


def t2s_forward(model: T2sModel, batch: PrefixBatch) -> Tensor:
    """Single-example teacher-forced logits, one row per input position."""
    if batch.m.sum() == 0:
        raise InputError("label mask selects no positions")
    packed = pack_prefix_batches([batch])
    logits = model.forward_packed(packed)
    return logits[0]


def loss_t2s_packed(logits: Tensor, packed: PackedPrefix) -> Tensor:
    logp = ad.log_softmax_temp(logits, 1.0)
    picked = ad.gather_last(logp, packed.targets)
    counts = packed.m.sum(axis=1)
    weights = packed.m / counts[:, None] / packed.batch_size
    return -ad.sum_(picked * weights)


def loss_t2s(logits: Tensor, batch: PrefixBatch) -> Tensor:
    """Masked mean cross-entropy over semantic target rows."""
    if logits.shape[0] != batch.total_len:
        raise InputError(
            f"logit rows {logits.shape[0]} != batch length {batch.total_len}"
        )
    total = batch.m.sum()
    if total == 0:
        raise InputError("label mask selects no positions")
    logp = ad.log_softmax_temp(logits, 1.0)
    picked = ad.gather_last(logp, batch.targets)
    return -ad.sum_(picked * (batch.m / total))


def generate_batch(
    model: T2sModel,
    prefixes: list[tuple[np.ndarray, np.ndarray]],
    max_len: int,
    vocab: Vocabulary,
    strategy: str = "greedy",
    rng: np.random.Generator | None = None,
    top_k: int = 1,
) -> list[list[int]]:
    """Autoregressive continuation for (text, prompt) pairs.

    Greedy takes the argmax; top-k renormalizes the k most likely ids and
    samples. Generation stops at the semantic eos or after ``max_len``
    tokens.
    """
    if max_len < 1:
        raise ParameterError("max_len must be >= 1")
    if strategy not in ("greedy", "top_k"):
        raise ParameterError(f"unknown strategy {strategy!r}")
    if strategy == "top_k" and (rng is None or top_k < 1):
        raise ParameterError("top_k strategy needs an rng and top_k >= 1")
    b = len(prefixes)
    done = np.zeros(b, dtype=bool)
    generated: list[list[int]] = [[] for _ in range(b)]
    with ad.no_grad():
        for _ in range(max_len):
            items = []
            for (text_p, s_p), gen in zip(prefixes, generated):
                # generated tokens keep the target segment; the trailing eos
                # is a placeholder whose own output row is never read
                s_tgt = np.concatenate([gen, [vocab.sem_eos]]).astype(np.int64)
                n = len(text_p) + len(s_p) + len(s_tgt)
                items.append(
                    PrefixBatch(
                        P=np.asarray(text_p, dtype=np.int64),
                        s_p=np.asarray(s_p, dtype=np.int64),
                        s_tgt=s_tgt,
                        m=np.zeros(n, dtype=np.int64),
                        targets=np.zeros(n, dtype=np.int64),
                    )
                )
            packed = pack_prefix_batches(items)
            logits = model.forward_packed(packed).data
            for i, it in enumerate(items):
                if done[i]:
                    continue
                # row whose input token precedes the next generated position
                k = len(it.s_p) - 1 + len(generated[i])
                row = it.text_len - 1 if k < 0 else packed.text_width + k
                scores = logits[i, row]
                if strategy == "greedy":
                    nxt = int(scores.argmax())
                else:
                    top = np.argsort(-scores, kind="stable")[:top_k]
                    p = np.exp(scores[top] - scores[top].max())
                    p /= p.sum()
                    nxt = int(top[np.searchsorted(np.cumsum(p), rng.random())])
                if nxt == vocab.sem_eos:
                    done[i] = True
                else:
                    generated[i].append(nxt)
            if done.all():
                break
    return generated


def generate(
    model: T2sModel,
    P,
    s_p,
    max_len: int,
    vocab: Vocabulary,
    strategy: str = "greedy",
    rng: np.random.Generator | None = None,
    top_k: int = 1,
) -> list[int]:
    return generate_batch(
        model,
        [(np.asarray(P, dtype=np.int64), np.asarray(s_p, dtype=np.int64))],
        max_len,
        vocab,
        strategy=strategy,
        rng=rng,
        top_k=top_k,
    )[0]
