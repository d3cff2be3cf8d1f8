"""Masked generative semantic-to-acoustic transformer.

Positions are time-aligned with the semantic stream. For a training step
one target layer is sampled from a coarse-to-fine schedule, a binary mask
hides part of it (never the prompt), and the model predicts the hidden
tokens from: the aligned semantic embedding, the sum of all lower acoustic
layers, the visible part of the target layer, a layer-index embedding,
and positions. Layers above the target never enter the input. Decoding
fills layers bottom-up with confidence-ranked progressive unmasking.

Conditioning dropout supports classifier-free guidance: with probability
p_drop the semantic embedding of an utterance is swapped for a learned
null row; decode can blend conditional and unconditional logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .corpus import Utterance, Vocabulary
from .errors import InputError, ParameterError


@dataclass(frozen=True)
class S2aConfig:
    semantic_size: int
    acoustic_size: int
    num_layers: int  # acoustic layers 2..Q, i.e. Q-1 rows
    d_model: int = 64
    n_heads: int = 2
    blocks: int = 2
    ffn: int = 128
    max_len: int = 128
    cfg_drop: float = 0.15


@dataclass
class MaskPlan:
    """Target layer choice plus the binary mask over its positions."""

    layer: int  # absolute layer index in 2..Q
    mask: np.ndarray  # bool over T; True = hidden, prompt always False
    prompt_len: int
    mask_fraction: float

    def validate(self, t: int) -> None:
        if self.mask.shape != (t,):
            raise InputError(f"mask length {self.mask.shape} != sequence length {t}")
        if self.mask[: self.prompt_len].any():
            raise InputError("prompt positions must never be masked")
        if not self.mask.any():
            raise InputError("at least one position must be masked")


def layer_weights(q: int, progress: float) -> np.ndarray:
    """Sampling weights for layers 2..Q.

    Linear interpolation between coarse-heavy (layer j proportional to
    Q - j + 1) at progress 0 and uniform at progress 1.
    """
    js = np.arange(2, q + 1, dtype=np.float64)
    w = (1.0 - progress) * (q - js + 1.0) + progress
    return w / w.sum()


def sample_mask_plan(
    t: int,
    q: int,
    prompt_len: int,
    progress: float,
    rng: np.random.Generator,
) -> MaskPlan:
    """Draw a target layer and a cosine-law mask over non-prompt positions."""
    if t <= prompt_len:
        raise InputError(f"sequence length {t} leaves no maskable positions after prompt {prompt_len}")
    if not 0.0 <= progress <= 1.0:
        raise ParameterError(f"progress must lie in [0, 1], got {progress}")
    w = layer_weights(q, progress)
    layer = 2 + int(np.searchsorted(np.cumsum(w), rng.random()))
    layer = min(layer, q)
    u = rng.random()
    frac = np.cos(np.pi * u / 2.0) ** 2
    free = t - prompt_len
    n_mask = max(1, int(round(frac * free)))
    chosen = rng.choice(free, size=min(n_mask, free), replace=False)
    mask = np.zeros(t, dtype=bool)
    mask[prompt_len + chosen] = True
    plan = MaskPlan(layer=layer, mask=mask, prompt_len=prompt_len, mask_fraction=float(frac))
    plan.validate(t)
    return plan


def cfg_dropout(conditioning, p_drop: float, rng: np.random.Generator, null_id: int) -> np.ndarray:
    """With probability p_drop, replace the whole conditioning with the null id."""
    if not 0.0 <= p_drop < 1.0:
        raise ParameterError(f"p_drop must lie in [0, 1), got {p_drop}")
    conditioning = np.asarray(conditioning, dtype=np.int64)
    if p_drop > 0.0 and rng.random() < p_drop:
        return np.full_like(conditioning, null_id)
    return conditioning


class S2aModel(nn.Module):
    def __init__(self, cfg: S2aConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        # extra semantic row: learned null embedding for conditioning dropout
        self.sem_embed = nn.Embedding(rng, cfg.semantic_size + 1, d)
        self.layer_tables = [
            nn.Embedding(rng, cfg.acoustic_size, d) for _ in range(cfg.num_layers)
        ]
        self.mask_vec = ad.parameter(rng.normal(0.0, 0.02, size=(d,)))
        self.layer_embed = nn.Embedding(rng, cfg.num_layers, d)
        self.pos_embed = nn.Embedding(rng, cfg.max_len, d)
        self.blocks = [nn.EncoderBlock(rng, d, cfg.n_heads, cfg.ffn) for _ in range(cfg.blocks)]
        self.norm = nn.LayerNorm(d)
        self.heads = [nn.Linear(rng, d, cfg.acoustic_size) for _ in range(cfg.num_layers)]

    @property
    def null_id(self) -> int:
        return self.cfg.semantic_size

    def forward_batch(
        self,
        s_pad: np.ndarray,
        a_pad: np.ndarray,
        lengths: np.ndarray,
        layers: np.ndarray,
        masks: np.ndarray,
    ) -> Tensor:
        """Logits of each utterance's target layer at every position.

        ``a_pad`` is (B, num_layers, T); ``layers`` holds absolute target
        layers (2..Q); ``masks`` is (B, T) with True where the target
        layer is hidden. Input never includes layers above the target.
        """
        cfg = self.cfg
        b, t = s_pad.shape
        if t > cfg.max_len:
            raise InputError(f"sequence length {t} exceeds capacity {cfg.max_len}")
        layer_idx = np.asarray(layers) - 2
        x = self.sem_embed(s_pad)
        for li, table in enumerate(self.layer_tables):
            is_lower = (li < layer_idx)[:, None]
            is_visible_target = (li == layer_idx)[:, None] & ~masks
            coeff = (is_lower | is_visible_target).astype(np.float64)
            x = x + table(a_pad[:, li]) * coeff[:, :, None]
        x = x + ad.reshape(self.mask_vec, (1, 1, cfg.d_model)) * masks[:, :, None].astype(np.float64)
        x = x + self.layer_embed(np.broadcast_to(layer_idx[:, None], (b, t)))
        x = x + self.pos_embed(np.broadcast_to(np.arange(t), (b, t)))
        blocked = nn.padding_blocked(lengths, t)
        for block in self.blocks:
            x = block(x, blocked)
        h = self.norm(x)
        logits = None
        for li, head in enumerate(self.heads):
            sel = (li == layer_idx).astype(np.float64)[:, None, None]
            part = head(h) * sel
            logits = part if logits is None else logits + part
        return logits


def pack_s2a_batch(utts, plans, cond_ids=None):
    lengths = np.array([len(u.s) for u in utts], dtype=np.int64)
    t_max = int(lengths.max())
    b = len(utts)
    num_layers = utts[0].a.shape[0]
    s_pad = np.zeros((b, t_max), dtype=np.int64)
    a_pad = np.zeros((b, num_layers, t_max), dtype=np.int64)
    masks = np.zeros((b, t_max), dtype=bool)
    layers = np.zeros(b, dtype=np.int64)
    for i, (u, plan) in enumerate(zip(utts, plans)):
        t = len(u.s)
        plan.validate(t)
        s_pad[i, :t] = u.s if cond_ids is None else cond_ids[i]
        a_pad[i, :, :t] = u.a
        masks[i, :t] = plan.mask
        layers[i] = plan.layer
    return s_pad, a_pad, lengths, layers, masks


def s2a_loss_batch(model: S2aModel, utts, plans, cond_ids=None) -> Tensor:
    """Mean over utterances of the masked-position cross-entropy."""
    s_pad, a_pad, lengths, layers, masks = pack_s2a_batch(utts, plans, cond_ids)
    logits = model.forward_batch(s_pad, a_pad, lengths, layers, masks)
    logp = ad.log_softmax_temp(logits, 1.0)
    rows = np.arange(len(utts))
    targets = a_pad[rows, layers - 2]
    picked = ad.gather_last(logp, targets)
    weights = masks / masks.sum(axis=1)[:, None] / len(utts)
    return -ad.sum_(picked * weights)


def s2a_loss(model: S2aModel, utt: Utterance, plan: MaskPlan) -> Tensor:
    """Single-utterance masked cross-entropy on the plan's target layer."""
    return s2a_loss_batch(model, [utt], [plan])


def masked_accuracy(model: S2aModel, utts, plans) -> tuple[int, int]:
    """(correct, total) argmax predictions over masked slots."""
    with ad.no_grad():
        s_pad, a_pad, lengths, layers, masks = pack_s2a_batch(utts, plans)
        logits = model.forward_batch(s_pad, a_pad, lengths, layers, masks).data
    rows = np.arange(len(utts))
    targets = a_pad[rows, layers - 2]
    pred = logits.argmax(axis=-1)
    correct = int((pred[masks] == targets[masks]).sum())
    return correct, int(masks.sum())


def decode_iterative_batch(
    model: S2aModel,
    s_list,
    prompts,
    steps_per_layer: int,
    rng: np.random.Generator,
    guidance_w: float = 1.0,
) -> list[np.ndarray]:
    """Fill the acoustic stack layer by layer with parallel unmasking.

    Per layer, every non-prompt slot starts hidden; each round predicts
    all hidden slots, samples a token per slot, keeps the most confident
    fraction on a cosine schedule (ties broken by position), and re-masks
    the rest. Lower layers freeze once decoded. Prompt regions are copied
    verbatim and never rewritten.
    """
    if steps_per_layer < 1:
        raise ParameterError("steps_per_layer must be >= 1")
    cfg = model.cfg
    b = len(s_list)
    lengths = np.array([len(s) for s in s_list], dtype=np.int64)
    t_max = int(lengths.max())
    s_pad = np.zeros((b, t_max), dtype=np.int64)
    out = [np.zeros((cfg.num_layers, len(s)), dtype=np.int64) for s in s_list]
    prompt_lens = np.array([p.shape[1] for p in prompts], dtype=np.int64)
    for i, (s, p) in enumerate(zip(s_list, prompts)):
        if p.shape[0] != cfg.num_layers or p.shape[1] >= len(s):
            raise InputError("prompt must cover all layers and be shorter than the sequence")
        s_pad[i, : len(s)] = s
        out[i][:, : p.shape[1]] = p
    a_pad = np.zeros((b, cfg.num_layers, t_max), dtype=np.int64)
    for i, p in enumerate(prompts):
        a_pad[i, :, : p.shape[1]] = p

    valid = nn.length_mask(lengths, t_max)
    with ad.no_grad():
        for li in range(cfg.num_layers):
            layers = np.full(b, li + 2, dtype=np.int64)
            hidden = valid & (np.arange(t_max)[None, :] >= prompt_lens[:, None])
            free_counts = hidden.sum(axis=1)
            for step in range(1, steps_per_layer + 1):
                logits = model.forward_batch(s_pad, a_pad, lengths, layers, hidden).data
                if guidance_w != 1.0:
                    null_pad = np.where(valid, model.null_id, 0)
                    uncond = model.forward_batch(null_pad, a_pad, lengths, layers, hidden).data
                    logits = guidance_w * logits + (1.0 - guidance_w) * uncond
                z = logits - logits.max(axis=-1, keepdims=True)
                probs = np.exp(z)
                probs /= probs.sum(axis=-1, keepdims=True)
                remain_frac = np.cos(np.pi / 2.0 * step / steps_per_layer) ** 2
                for i in range(b):
                    slots = np.flatnonzero(hidden[i])
                    if slots.size == 0:
                        continue
                    p = probs[i, slots]
                    cum = p.cumsum(axis=1)
                    draws = rng.random(slots.size)
                    toks = (cum < draws[:, None]).sum(axis=1).clip(max=p.shape[1] - 1)
                    conf = p[np.arange(slots.size), toks]
                    n_remain = int(round(remain_frac * free_counts[i]))
                    n_keep = slots.size - n_remain
                    if step == steps_per_layer:
                        n_keep = slots.size
                    if n_keep <= 0:
                        continue
                    order = np.argsort(-conf, kind="stable")[:n_keep]
                    keep_slots = slots[order]
                    a_pad[i, li, keep_slots] = toks[order]
                    hidden[i, keep_slots] = False
            for i in range(b):
                out[i][li] = a_pad[i, li, : lengths[i]]
                out[i][li, : prompt_lens[i]] = prompts[i][li]
    return out


def decode_iterative(
    model: S2aModel,
    s,
    a_prompt: np.ndarray,
    steps_per_layer: int,
    rng: np.random.Generator,
    guidance_w: float = 1.0,
) -> np.ndarray:
    return decode_iterative_batch(
        model, [np.asarray(s, dtype=np.int64)], [np.asarray(a_prompt, dtype=np.int64)],
        steps_per_layer, rng, guidance_w,
    )[0]
