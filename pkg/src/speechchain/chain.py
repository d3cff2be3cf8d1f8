"""Closing the recognition-to-synthesis loop with discrete pass-through.

The recognizer's teacher-forced posteriors are snapped to hard one-hot
text rows whose forward value is discrete while gradients flow through a
soft surrogate: the tempered posteriors for argmax pass-through, or the
noisy tempered softmax for Gumbel pass-through. The synthesis model
reconstructs the ground-truth semantic stream from those rows, and its
loss joins the supervised recognition loss as

    loss_final = loss_asr + alpha_e * loss_t2s

with alpha_e scheduled per epoch: two fixed warm-up values, then a
loss-descent-ratio softmax (dynamic weight averaging) capped during a
ramp window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import t2s as t2s_mod
from .asr import AsrLossCfg, AsrModel, ctc_loss_batch, loss_asr, loss_ce_batch, make_decoder_batch, pad_sequences
from .autodiff import Tensor
from .corpus import Vocabulary
from .errors import ConfigError, DegenerateRatioError, ParameterError
from .t2s import T2sModel

_GUMBEL_EPS = 1e-12


@dataclass(frozen=True)
class TauSchedule:
    """Chain-interface temperature: a constant, or a linear anneal."""

    kind: str = "fixed"
    value: float = 1.0
    start: float = 2.0
    end: float = 0.1
    epochs: int = 10

    def __post_init__(self):
        if self.kind not in ("fixed", "anneal"):
            raise ConfigError(f"unknown tau schedule kind {self.kind!r}")
        if self.kind == "fixed" and self.value <= 0.0:
            raise ParameterError("fixed tau must be positive")
        if self.kind == "anneal":
            if self.start <= 0.0 or self.end <= 0.0:
                raise ParameterError("anneal endpoints must be positive")
            if self.end > self.start:
                raise ParameterError("anneal must be non-increasing")
            if self.epochs < 2:
                raise ParameterError("anneal needs at least 2 epochs")


def tau_at(schedule: TauSchedule, epoch: int) -> float:
    """Temperature for a given 1-based epoch; anneals clamp at the end."""
    if epoch < 1:
        raise ParameterError(f"epoch must be >= 1, got {epoch}")
    if schedule.kind == "fixed":
        return schedule.value
    if epoch >= schedule.epochs:
        return schedule.end
    frac = (epoch - 1) / (schedule.epochs - 1)
    return schedule.start + (schedule.end - schedule.start) * frac


@dataclass(frozen=True)
class EstimatorMode:
    kind: str = "st_gumbel"
    tau_schedule: TauSchedule = field(default_factory=TauSchedule)

    def __post_init__(self):
        if self.kind not in ("st_argmax", "st_gumbel"):
            raise ConfigError(f"unknown estimator kind {self.kind!r}")


@dataclass(frozen=True)
class DwaConfig:
    alpha_w0: float = 1e-3
    alpha_w1: float = 0.05
    alpha_max: float = 0.5
    e_ramp: int = 6
    t_dwa: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha_w0 <= self.alpha_w1 <= self.alpha_max <= 1.0:
            raise ConfigError(
                "dwa warm-ups must satisfy 0 < alpha_w0 <= alpha_w1 <= alpha_max <= 1"
            )
        if self.e_ramp < 3:
            raise ConfigError("ramp must cover at least epoch 3")
        if self.t_dwa <= 0.0:
            raise ConfigError("dwa temperature must be positive")


@dataclass
class DwaState:
    """Epoch-mean loss history per task plus the weight chosen last."""

    asr_hist: list[float] = field(default_factory=list)
    t2s_hist: list[float] = field(default_factory=list)
    epoch: int = 1
    alpha: float = 0.0

    def record(self, asr_mean: float, t2s_mean: float) -> None:
        self.asr_hist.append(asr_mean)
        self.t2s_hist.append(t2s_mean)


def dwa_alpha(state: DwaState, cfg: DwaConfig) -> float:
    """Chain weight for the epoch about to run.

    Epochs 1 and 2 use the fixed warm-ups. From epoch 3 on, each task's
    descent ratio is the mean loss of the previous epoch over the one
    before it, and the weight is the softmax preference for the synthesis
    task at temperature t_dwa, capped at alpha_max through the ramp.
    """
    e = state.epoch
    if e < 1:
        raise ParameterError(f"epoch must be >= 1, got {e}")
    if e == 1:
        return cfg.alpha_w0
    if e == 2:
        return cfg.alpha_w1
    if len(state.asr_hist) < e - 1 or len(state.t2s_hist) < e - 1:
        raise ConfigError(
            f"dwa needs loss means for epochs {e - 2} and {e - 1}; "
            f"history has {len(state.asr_hist)} entries"
        )
    ratios = {}
    for task, hist in (("asr", state.asr_hist), ("t2s", state.t2s_hist)):
        prev, prev2 = hist[e - 2], hist[e - 3]
        if prev2 == 0.0:
            raise DegenerateRatioError(f"{task} loss mean for epoch {e - 2} is zero")
        ratios[task] = prev / prev2
    z = np.array([ratios["asr"], ratios["t2s"]]) / cfg.t_dwa
    z -= z.max()
    expz = np.exp(z)
    alpha_star = float(expz[1] / expz.sum())
    if 3 <= e <= cfg.e_ramp:
        return min(alpha_star, cfg.alpha_max)
    return alpha_star


# -- straight-through estimators -----------------------------------------------


def _hard_rows(scores: np.ndarray) -> np.ndarray:
    """One-hot of the row argmax; ties resolve to the lowest index."""
    idx = scores.argmax(axis=-1)
    hard = np.zeros_like(scores)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return hard


def st_argmax(p: Tensor) -> Tensor:
    """Hard one-hot forward; identity Jacobian onto the posteriors."""
    return ad.st_passthrough(p, _hard_rows(p.data))


def st_gumbel_with_noise(h: Tensor, tau: float, g: np.ndarray) -> Tensor:
    """Gumbel pass-through with fixed noise (the differentiable core).

    Forward is the one-hot argmax of h + g (the temperature cannot change
    the argmax); backward flows through softmax((h + g)/tau).
    """
    if tau <= 0.0:
        raise ParameterError(f"tau must be positive, got {tau}")
    soft = ad.softmax_temp(h + ad.Tensor(g), tau)
    return ad.st_passthrough(soft, _hard_rows(h.data + g))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), _GUMBEL_EPS, 1.0 - _GUMBEL_EPS)
    return -np.log(-np.log(u))


def st_gumbel(h: Tensor, tau: float, rng: np.random.Generator) -> Tensor:
    return st_gumbel_with_noise(h, tau, gumbel_noise(h.data.shape, rng))


# -- one optimization step of the closed loop ---------------------------------


@dataclass
class ChainStepResult:
    loss_final: Tensor
    loss_asr: float
    loss_ce: float
    loss_ctc: float
    loss_t2s: float
    alpha: float
    tau: float
    st_token_accuracy: float


def chain_step(
    asr_model: AsrModel,
    t2s_model: T2sModel,
    utts,
    vocab: Vocabulary,
    mode: EstimatorMode,
    tau: float,
    loss_cfg: AsrLossCfg,
    alpha_e: float,
    prompt_frac: tuple[float, float],
    rng: np.random.Generator,
    ce_tau: float = 1.0,
) -> ChainStepResult:
    """Build the joint objective for one batch; no parameters are touched.

    The supervised branch teacher-forces the recognizer on ground-truth
    text. The feedback branch snaps the same decoder logits (rows aligned
    to y plus the end marker) to hard text rows via the chosen estimator
    and asks the synthesis model to reconstruct the ground-truth semantic
    stream from them. Gradients reach recognizer parameters through both
    branches whenever alpha_e > 0.
    """
    if asr_model.cfg.text_size != t2s_model.cfg.text_size or \
            asr_model.cfg.semantic_size != t2s_model.cfg.semantic_size:
        raise ConfigError("recognizer and synthesizer vocabularies differ")
    s_pad, s_len = pad_sequences([u.s for u in utts], vocab.sem_pad)
    y_in, y_out, y_len = make_decoder_batch(utts, vocab)
    fwd = asr_model.forward_batch(s_pad, s_len, y_in, y_len)

    ce = loss_ce_batch(fwd["dec_logits"], y_out, y_len, ce_tau, loss_cfg.label_smoothing)
    ctc = ctc_loss_batch(fwd["ctc_logits"], [u.y for u in utts], s_len, vocab.blank)
    l_asr = loss_asr(ce, ctc, loss_cfg.eta)

    items = []
    st_hits = 0
    st_total = 0
    for b, utt in enumerate(utts):
        rows = fwd["dec_logits"][(b, slice(0, int(y_len[b])))]
        if mode.kind == "st_argmax":
            hard_p = st_argmax(ad.softmax_temp(rows, tau))
        else:
            hard_p = st_gumbel(rows, tau, rng)
        st_hits += int((hard_p.data.argmax(axis=-1) == y_out[b, : int(y_len[b])]).sum())
        st_total += int(y_len[b])
        s_prompt = t2s_mod.sample_prompt(utt.s, prompt_frac, rng)
        items.append(
            t2s_mod.make_prefix_batch(hard_p, utt.s, len(s_prompt), vocab)
        )
    packed = t2s_mod.pack_prefix_batches(items)
    l_t2s = t2s_mod.loss_t2s_packed(t2s_model.forward_packed(packed), packed)

    loss_final = l_asr + float(alpha_e) * l_t2s
    return ChainStepResult(
        loss_final=loss_final,
        loss_asr=l_asr.item(),
        loss_ce=ce.item(),
        loss_ctc=ctc.item(),
        loss_t2s=l_t2s.item(),
        alpha=float(alpha_e),
        tau=float(tau),
        st_token_accuracy=st_hits / max(1, st_total),
    )
