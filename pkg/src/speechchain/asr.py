"""Semantic-tokens-to-text encoder-decoder with hybrid objective.

A plain pre-norm transformer encoder reads the semantic stream; a causal
transformer decoder with cross-attention emits text logits under teacher
forcing. Training interpolates per-token attention cross-entropy with a
sequence-level alignment-marginalizing loss computed on the encoder
states ((1 - eta) * ce + eta * ctc). Decoding is autoregressive argmax or
a length-normalized attention-only beam.

The per-position decoder posteriors are the surface the feedback loop
consumes; ``forward_batch`` therefore returns raw logits so callers pick
their own temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .corpus import Vocabulary
from .errors import InfeasibleAlignmentError, InputError, ParameterError

NEG_INF = -np.inf


@dataclass(frozen=True)
class AsrConfig:
    text_size: int
    semantic_size: int
    d_model: int = 64
    n_heads: int = 2
    enc_blocks: int = 2
    dec_blocks: int = 2
    ffn: int = 128
    max_src: int = 96

    @property
    def max_tgt(self) -> int:
        # decode cap is 3x the source length, plus bos and eos
        return 3 * self.max_src + 2


@dataclass(frozen=True)
class AsrLossCfg:
    """Loss weights: eta interpolates ce/ctc, tau tempers chain posteriors."""

    eta: float = 0.3
    label_smoothing: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ParameterError(f"eta must lie in [0, 1], got {self.eta}")
        if self.tau <= 0.0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ParameterError("label smoothing must lie in [0, 1)")


class AsrModel(nn.Module):
    def __init__(self, cfg: AsrConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.sem_embed = nn.Embedding(rng, cfg.semantic_size, d)
        self.enc_pos = nn.Embedding(rng, cfg.max_src, d)
        self.enc_blocks = [nn.EncoderBlock(rng, d, cfg.n_heads, cfg.ffn) for _ in range(cfg.enc_blocks)]
        self.enc_norm = nn.LayerNorm(d)
        self.text_embed = nn.Embedding(rng, cfg.text_size, d)
        self.dec_pos = nn.Embedding(rng, cfg.max_tgt, d)
        self.dec_blocks = [nn.DecoderBlock(rng, d, cfg.n_heads, cfg.ffn) for _ in range(cfg.dec_blocks)]
        self.dec_norm = nn.LayerNorm(d)
        self.head_dec = nn.Linear(rng, d, cfg.text_size)
        self.head_ctc = nn.Linear(rng, d, cfg.text_size + 1)  # extra class: blank

    def encode(self, s_pad: np.ndarray, s_len: np.ndarray) -> Tensor:
        b, t = s_pad.shape
        if t > self.cfg.max_src:
            raise InputError(f"semantic length {t} exceeds encoder capacity {self.cfg.max_src}")
        if s_pad.size and s_pad.max() >= self.cfg.semantic_size:
            raise IndexError("semantic id outside vocabulary")
        x = self.sem_embed(s_pad) + self.enc_pos(np.broadcast_to(np.arange(t), (b, t)))
        blocked = nn.padding_blocked(s_len, t)
        for block in self.enc_blocks:
            x = block(x, blocked)
        return self.enc_norm(x)

    def decode_states(
        self,
        enc: Tensor,
        s_len: np.ndarray,
        y_in: np.ndarray,
        y_len: np.ndarray | None = None,
    ) -> Tensor:
        b, ld = y_in.shape
        if ld > self.cfg.max_tgt:
            raise InputError(f"target length {ld} exceeds decoder capacity {self.cfg.max_tgt}")
        if y_in.size and y_in.max() >= self.cfg.text_size:
            raise IndexError("text id outside vocabulary")
        x = self.text_embed(y_in) + self.dec_pos(np.broadcast_to(np.arange(ld), (b, ld)))
        self_blocked = nn.causal_blocked(ld)
        if y_len is not None:
            self_blocked = self_blocked | nn.padding_blocked(y_len, ld)
        cross_blocked = nn.padding_blocked(s_len, enc.shape[1])
        for block in self.dec_blocks:
            x = block(x, enc, self_blocked, cross_blocked)
        return self.dec_norm(x)

    def forward_batch(
        self,
        s_pad: np.ndarray,
        s_len: np.ndarray,
        y_in: np.ndarray,
        y_len: np.ndarray | None = None,
    ) -> dict[str, Tensor]:
        """Teacher-forced pass: decoder logits, encoder states, ctc logits."""
        enc = self.encode(s_pad, s_len)
        dec = self.decode_states(enc, s_len, y_in, y_len)
        return {
            "dec_logits": self.head_dec(dec),
            "enc_states": enc,
            "ctc_logits": self.head_ctc(enc),
        }


def pad_sequences(seqs, pad_value: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length id sequences into (B, L) plus lengths."""
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(1, int(lens.max(initial=0)))), pad_value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = np.asarray(s, dtype=np.int64)
    return out, lens


def make_decoder_batch(utts, vocab: Vocabulary):
    """Teacher-forcing arrays: inputs [bos, y], targets [y, eos]."""
    y_in, y_out = [], []
    for u in utts:
        y = np.asarray(u.y, dtype=np.int64)
        y_in.append(np.concatenate(([vocab.bos], y)))
        y_out.append(np.concatenate((y, [vocab.eos])))
    y_in_pad, y_len = pad_sequences(y_in, vocab.pad)
    y_out_pad, _ = pad_sequences(y_out, vocab.pad)
    return y_in_pad, y_out_pad, y_len


def asr_forward(model: AsrModel, s, y_in) -> dict[str, Tensor]:
    """Single-utterance teacher-forced pass (batch of one, squeezed)."""
    s = np.asarray(s, dtype=np.int64)
    y_in = np.asarray(y_in, dtype=np.int64)
    if s.size == 0:
        raise InputError("semantic sequence must be nonempty")
    out = model.forward_batch(
        s[None, :], np.array([len(s)]), y_in[None, :], np.array([len(y_in)])
    )
    return {key: val[0] for key, val in out.items()}


# -- attention cross-entropy -------------------------------------------------


def loss_ce_batch(
    dec_logits: Tensor,
    targets: np.ndarray,
    lengths: np.ndarray,
    tau: float = 1.0,
    label_smoothing: float = 0.0,
) -> Tensor:
    """Per-utterance mean token cross-entropy, averaged over the batch.

    Posteriors are the temperature softmax of the logits; smoothing mixes
    an eps/C floor into the target distribution.
    """
    b, ld, c = dec_logits.shape
    logp = ad.log_softmax_temp(dec_logits, tau)
    picked = ad.gather_last(logp, targets)
    valid = nn.length_mask(lengths, ld)
    weights = valid / np.maximum(lengths, 1)[:, None] / b
    nll = -ad.sum_(picked * weights)
    if label_smoothing > 0.0:
        uniform = -ad.sum_(logp * weights[..., None]) * (1.0 / c)
        nll = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    return nll


def loss_ce(dec_logits: Tensor, y, tau: float = 1.0, label_smoothing: float = 0.0) -> Tensor:
    """Single-utterance attention cross-entropy at temperature tau."""
    y = np.asarray(y, dtype=np.int64)
    if dec_logits.shape[0] != len(y):
        raise InputError(f"logit rows {dec_logits.shape[0]} != target length {len(y)}")
    logits3 = ad.reshape(dec_logits, (1,) + dec_logits.shape)
    return loss_ce_batch(logits3, y[None, :], np.array([len(y)]), tau, label_smoothing)


# -- ctc loss -----------------------------------------------------------------


def _extend_labels(y: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(y) + 1, blank, dtype=np.int64)
    ext[1::2] = y
    return ext


def ctc_min_frames(y: np.ndarray) -> int:
    """Fewest frames that can realize y: length plus forced blank gaps."""
    y = np.asarray(y, dtype=np.int64)
    return len(y) + int(np.sum(y[1:] == y[:-1]))


def _shift_right(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, NEG_INF)
    out[:, k:] = x[:, :-k]
    return out


def ctc_nll_batch(log_probs: Tensor, targets, input_lens, blank: int) -> Tensor:
    """Negative log likelihood of each target under the alignment lattice.

    ``log_probs`` holds log posteriors over C+1 classes per frame; the
    node marginalizes all blank-interleaved monotone alignments with the
    forward recursion and backpropagates the full posterior over lattice
    states. Returns a (B,) tensor of per-sequence losses.
    """
    lp = log_probs.data
    b, t_max, _ = lp.shape
    input_lens = np.asarray(input_lens, dtype=np.int64)
    targets = [np.asarray(y, dtype=np.int64) for y in targets]
    for y, t_b in zip(targets, input_lens):
        if len(y) == 0:
            raise InputError("ctc target must be nonempty")
        if ctc_min_frames(y) > t_b:
            raise InfeasibleAlignmentError(
                f"target of length {len(y)} cannot align to {t_b} frames"
            )
    ext = [_extend_labels(y, blank) for y in targets]
    s_lens = np.array([len(e) for e in ext])
    s_max = int(s_lens.max())
    labels = np.full((b, s_max), blank, dtype=np.int64)
    for i, e in enumerate(ext):
        labels[i, : len(e)] = e
    state_valid = np.arange(s_max)[None, :] < s_lens[:, None]
    # skip transition s-2 -> s allowed when the state is a label differing
    # from the label two states back
    skip_ok = np.zeros((b, s_max), dtype=bool)
    skip_ok[:, 2:] = (labels[:, 2:] != blank) & (labels[:, 2:] != labels[:, :-2])
    emit = np.take_along_axis(lp, labels[:, None, :], axis=2)  # (B, T, S)

    alpha = np.full((b, t_max, s_max), NEG_INF)
    first = np.full((b, s_max), NEG_INF)
    first[:, 0] = emit[:, 0, 0]
    if s_max > 1:
        has2 = s_lens > 1
        first[has2, 1] = emit[has2, 0, 1]
    alpha[:, 0] = np.where(state_valid, first, NEG_INF)
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        cand = np.logaddexp(prev, _shift_right(prev, 1))
        with np.errstate(invalid="ignore"):
            cand = np.logaddexp(cand, np.where(skip_ok, _shift_right(prev, 2), NEG_INF))
        new = np.where(state_valid, cand + emit[:, t], NEG_INF)
        active = (t < input_lens)[:, None]
        alpha[:, t] = np.where(active, new, prev)

    rows = np.arange(b)
    last = alpha[rows, input_lens - 1]
    final = last[rows, s_lens - 1]
    if s_max > 1:
        with np.errstate(invalid="ignore"):
            final = np.logaddexp(final, np.where(s_lens > 1, last[rows, s_lens - 2], NEG_INF))
    log_z = final
    nll = -log_z

    def backward(g):
        # exclusive suffix scores: beta[t, s] sums paths leaving state s
        # after frame t (emissions t+1..T-1)
        beta = np.full((b, t_max, s_max), NEG_INF)
        at_end = np.zeros((b, s_max), dtype=bool)
        at_end[rows, s_lens - 1] = True
        at_end[rows, np.maximum(s_lens - 2, 0)] = True
        for i in range(b):
            beta[i, input_lens[i] - 1, :] = np.where(at_end[i], 0.0, NEG_INF)
        for t in range(t_max - 2, -1, -1):
            nxt = beta[:, t + 1] + emit[:, t + 1]
            cand = np.logaddexp(nxt, _shift_left(nxt, 1))
            with np.errstate(invalid="ignore"):
                skip_from = np.zeros((b, s_max), dtype=bool)
                skip_from[:, :-2] = skip_ok[:, 2:]
                cand = np.logaddexp(cand, np.where(skip_from, _shift_left(nxt, 2), NEG_INF))
            cand = np.where(state_valid, cand, NEG_INF)
            active = (t + 1 < input_lens)[:, None]
            beta[:, t] = np.where(active, cand, beta[:, t])
            ended = (t == input_lens - 1)[:, None]
            if ended.any():
                beta[:, t] = np.where(
                    ended, np.where(at_end, 0.0, NEG_INF), beta[:, t]
                )
        with np.errstate(invalid="ignore"):
            gamma = np.exp(alpha + beta - log_z[:, None, None])
        gamma = np.where(np.isfinite(alpha + beta), gamma, 0.0)
        frame_valid = np.arange(t_max)[None, :] < input_lens[:, None]
        gamma *= frame_valid[:, :, None]
        grad = np.zeros_like(lp)
        flat = grad.reshape(b * t_max, -1)
        row_idx = np.repeat(np.arange(b * t_max), s_max)
        col_idx = np.broadcast_to(labels[:, None, :], (b, t_max, s_max)).reshape(-1)
        np.add.at(flat, (row_idx, col_idx), (-gamma * g[:, None, None]).reshape(-1))
        ad._accumulate(log_probs, grad)

    return ad._node(nll, (log_probs,), backward)


def _shift_left(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, NEG_INF)
    out[:, :-k] = x[:, k:]
    return out


def ctc_loss_batch(ctc_logits: Tensor, targets, input_lens, blank: int) -> Tensor:
    """Mean per-sequence alignment loss from raw encoder-head logits."""
    log_probs = ad.log_softmax_temp(ctc_logits, 1.0)
    return ad.mean(ctc_nll_batch(log_probs, targets, input_lens, blank))


def loss_ctc(ctc_logits: Tensor, y, blank: int | None = None) -> Tensor:
    """Single-utterance CTC loss; blank defaults to the extra last class."""
    y = np.asarray(y, dtype=np.int64)
    if blank is None:
        blank = ctc_logits.shape[-1] - 1
    logits3 = ad.reshape(ctc_logits, (1,) + ctc_logits.shape)
    log_probs = ad.log_softmax_temp(logits3, 1.0)
    nll = ctc_nll_batch(log_probs, [y], np.array([ctc_logits.shape[0]]), blank)
    return ad.sum_(nll)


def loss_asr(ce: Tensor, ctc: Tensor, eta: float) -> Tensor:
    """Hybrid objective: convex combination of the two losses."""
    if not 0.0 <= eta <= 1.0:
        raise ParameterError(f"eta must lie in [0, 1], got {eta}")
    return (1.0 - eta) * ce + eta * ctc


# -- decoding -----------------------------------------------------------------


def decode_greedy_batch(model: AsrModel, s_list, vocab: Vocabulary) -> list[list[int]]:
    """Batched autoregressive argmax; every hypothesis stops at eos or 3T."""
    if not s_list:
        return []
    with ad.no_grad():
        s_pad, s_len = pad_sequences(s_list, vocab.pad)
        enc = model.encode(s_pad, s_len)
        b = len(s_list)
        caps = 3 * s_len
        hyp = np.full((b, 1), vocab.bos, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for step in range(int(caps.max()) + 1):
            dec = model.decode_states(enc, s_len, hyp)
            logits = model.head_dec(dec).data[:, -1, :]
            nxt = logits.argmax(axis=1)
            nxt[step >= caps] = vocab.eos  # force termination at the cap
            nxt[done] = vocab.eos
            hyp = np.concatenate([hyp, nxt[:, None]], axis=1)
            done |= nxt == vocab.eos
            if done.all():
                break
    out = []
    for i in range(b):
        toks = []
        for tok in hyp[i, 1:]:
            if tok == vocab.eos:
                break
            toks.append(int(tok))
        out.append(toks)
    return out


def decode_greedy(model: AsrModel, s, vocab: Vocabulary) -> list[int]:
    s = np.asarray(s, dtype=np.int64)
    if s.size == 0:
        raise InputError("cannot decode an empty semantic sequence")
    return decode_greedy_batch(model, [s], vocab)[0]


def decode_beam(model: AsrModel, s, vocab: Vocabulary, beam: int = 4) -> list[int]:
    """Length-normalized attention-only beam search over text tokens.

    Candidate expansions are ordered by (score desc, token id asc), so
    beam=1 reproduces greedy decoding exactly, ties included.
    """
    if beam < 1:
        raise ParameterError(f"beam width must be >= 1, got {beam}")
    s = np.asarray(s, dtype=np.int64)
    if s.size == 0:
        raise InputError("cannot decode an empty semantic sequence")
    with ad.no_grad():
        enc = model.encode(s[None, :], np.array([len(s)]))
        cap = 3 * len(s)
        live: list[tuple[list[int], float]] = [([vocab.bos], 0.0)]
        finished: list[tuple[list[int], float]] = []
        for step in range(cap):
            prefixes = np.array([h for h, _ in live], dtype=np.int64)
            enc_rep = Tensor(np.repeat(enc.data, len(live), axis=0))
            dec = model.decode_states(enc_rep, np.full(len(live), len(s)), prefixes)
            logp = ad.log_softmax_temp(model.head_dec(dec), 1.0).data[:, -1, :]
            candidates: list[tuple[float, int, list[int], int]] = []
            for i, (hyp, score) in enumerate(live):
                order = np.argsort(-logp[i], kind="stable")[:beam]
                for tok in order:
                    candidates.append((score + logp[i, tok], int(tok), hyp, i))
            candidates.sort(key=lambda c: (-c[0], c[1], c[3]))
            live = []
            for total, tok, hyp, _ in candidates[:beam]:
                if tok == vocab.eos:
                    finished.append((hyp[1:], total))
                else:
                    live.append((hyp + [tok], total))
            if not live:
                break
        for hyp, score in live:  # cap reached: force eos
            finished.append((hyp[1:], score))
    if not finished:
        return []
    best = max(finished, key=lambda f: f[1] / max(1, len(f[0]) + 1))
    return [int(t) for t in best[0]]
