"""Training orchestration: pretraining, baseline, chain, adaptation.

One ``run`` executes one regime from a ``TrainConfig`` and returns a
``RunReport`` with per-epoch curves and final split metrics. Everything
is deterministic given the config: parameter init, batch order, estimator
noise and prompt draws all come from generators seeded by ``seed``, and
checkpoints capture models, optimizer moments, the training generator
state and scheduling history, so a resumed run reproduces an unbroken one
bitwise.

The baseline regime runs the same closed-loop step as chain training with
the feedback weight pinned to zero and the synthesis model frozen, which
makes "chain minus feedback" an exact statement rather than a separate
code path.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics as met
from . import s2a as s2a_mod
from . import t2s as t2s_mod
from .asr import (
    AsrConfig,
    AsrLossCfg,
    AsrModel,
    ctc_loss_batch,
    decode_beam,
    decode_greedy_batch,
    loss_asr,
    loss_ce_batch,
    make_decoder_batch,
    pad_sequences,
)
from .autodiff import Tensor
from .chain import (
    DwaConfig,
    DwaState,
    EstimatorMode,
    TauSchedule,
    chain_step,
    dwa_alpha,
    tau_at,
)
from .corpus import Corpus, Vocabulary, channel_for, load_dataset
from .errors import ConfigError, DivergenceError, ResumeError
from .s2a import S2aConfig, S2aModel
from .t2s import T2sConfig, T2sModel

RUN_KINDS = ("pretrain_asr", "pretrain_t2s", "s2a", "baseline", "chain", "adapt")
CHAIN_KINDS = ("baseline", "chain", "adapt")


def lr_at(step: int, base_lr: float, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warm-up, peaking at ``warmup``."""
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    return base_lr * min(step / warmup, np.sqrt(warmup / step))


class AdamW:
    """Adaptive moments with decoupled weight decay and global-norm clipping."""

    def __init__(
        self,
        params: dict[str, Tensor],
        base_lr: float,
        warmup: int = 200,
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-9,
        weight_decay: float = 0.01,
        clip_norm: float = 1.0,
    ):
        self.params = dict(params)
        self.base_lr = base_lr
        self.warmup = warmup
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def current_lr(self) -> float:
        return lr_at(max(1, self.t), self.base_lr, self.warmup)

    def step(self) -> float:
        self.t += 1
        lr = lr_at(self.t, self.base_lr, self.warmup)
        b1, b2 = self.betas
        grads = {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self.params.items()
        }
        if self.clip_norm > 0.0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            mhat = self.m[k] / (1.0 - b1 ** self.t)
            vhat = self.v[k] / (1.0 - b2 ** self.t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
        return lr

    def export_state(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {}
        for k in self.params:
            arrays[f"m/{k}"] = self.m[k].copy()
            arrays[f"v/{k}"] = self.v[k].copy()
        return arrays, {"t": self.t, "base_lr": self.base_lr, "warmup": self.warmup}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        self.t = int(meta["t"])
        for k in self.params:
            self.m[k] = np.array(arrays[f"m/{k}"])
            self.v[k] = np.array(arrays[f"v/{k}"])


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.bad = 0

    def update(self, metric: float) -> bool:
        if metric < self.best:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "pretrain_asr"
    data_dir: str | None = None
    out_dir: str | None = None
    epochs: int = 12
    batch_size: int = 16
    seed: int = 0
    # model dimensions (shared d/ffn across the three models)
    d_model: int = 64
    n_heads: int = 2
    enc_blocks: int = 2
    dec_blocks: int = 2
    t2s_blocks: int = 3
    s2a_blocks: int = 2
    ffn: int = 128
    # optimization
    asr_lr: float = 1e-3
    t2s_lr: float = 2e-4
    s2a_lr: float = 1e-3
    chain_asr_lr: float = 5e-4
    warmup_steps: int = 200
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    patience: int = 3
    # losses
    eta: float = 0.3
    label_smoothing: float = 0.0
    ce_tau: float = 1.0
    # chain feedback
    estimator: str = "st_gumbel"
    tau: str = "anneal:2.0,0.1,10"
    dwa_w0: float = 1e-3
    dwa_w1: float = 0.05
    dwa_max: float = 0.5
    dwa_ramp: int = 6
    dwa_t: float = 2.0
    dwa_on: str = "train"
    prompt_lo: float = 0.1
    prompt_hi: float = 0.3
    # s2a
    s2a_prompt_frac: float = 0.15
    s2a_steps_per_layer: int = 4
    s2a_progress_epochs: int = 10
    cfg_drop: float = 0.15
    # control
    eval_at_start: bool = True
    eval_beam: int = 0
    t2s_eval_prompt_frac: float = 0.1
    resume_asr: str | None = None
    resume_t2s: str | None = None
    resume_run: str | None = None

    def __post_init__(self):
        if self.kind not in RUN_KINDS:
            raise ConfigError(f"unknown run kind {self.kind!r}; choose from {RUN_KINDS}")
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("epochs, patience and batch_size must be >= 1")
        if self.dwa_on not in ("train", "dev"):
            raise ConfigError("dwa_on must be 'train' or 'dev'")

    def dwa_config(self) -> DwaConfig:
        return DwaConfig(
            alpha_w0=self.dwa_w0,
            alpha_w1=self.dwa_w1,
            alpha_max=self.dwa_max,
            e_ramp=self.dwa_ramp,
            t_dwa=self.dwa_t,
        )

    def estimator_mode(self) -> EstimatorMode:
        return EstimatorMode(kind=self.estimator, tau_schedule=parse_tau_spec(self.tau))


def parse_tau_spec(spec: str) -> TauSchedule:
    """"1.5" for a constant; "anneal:2.0,0.1,10" for a linear anneal."""
    spec = spec.strip()
    if spec.startswith("anneal:"):
        parts = spec[len("anneal:"):].split(",")
        if len(parts) != 3:
            raise ConfigError(f"anneal spec needs start,end,epochs: {spec!r}")
        return TauSchedule(
            kind="anneal", start=float(parts[0]), end=float(parts[1]), epochs=int(parts[2])
        )
    try:
        return TauSchedule(kind="fixed", value=float(spec))
    except ValueError as exc:
        raise ConfigError(f"cannot parse tau spec {spec!r}") from exc


def config_hash(cfg: TrainConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# Fields a run may legitimately change when it resumes itself: the epoch
# budget and where artifacts go. Everything else must match.
_RESUME_FREE_FIELDS = ("epochs", "out_dir", "resume_run")


def resume_signature(cfg: TrainConfig) -> str:
    payload = {k: v for k, v in asdict(cfg).items() if k not in _RESUME_FREE_FIELDS}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def model_signature(model_cfg) -> str:
    payload = json.dumps(asdict(model_cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class EpochRow:
    epoch: int
    loss_asr: float = float("nan")
    loss_ce: float = float("nan")
    loss_ctc: float = float("nan")
    loss_t2s: float = float("nan")
    alpha: float = float("nan")
    tau: float = float("nan")
    lr: float = float("nan")
    dev_cer: float = float("nan")
    dev_wer: float = float("nan")
    dev_loss: float = float("nan")
    st_acc: float = float("nan")

    CSV_FIELDS = (
        "epoch", "loss_asr", "loss_ce", "loss_ctc", "loss_t2s", "alpha",
        "tau", "lr", "dev_cer", "dev_wer", "dev_loss", "st_acc",
    )


@dataclass
class RunReport:
    kind: str
    seed: int
    config_hash: str
    config: dict
    epochs: list[EpochRow] = field(default_factory=list)
    final: dict[str, dict[str, float]] = field(default_factory=dict)
    alpha_trace: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    stopped_early_at: int | None = None

    def to_json(self) -> str:
        payload = {
            "format_version": 1,
            "kind": self.kind,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "epochs": [asdict(r) for r in self.epochs],
            "final": self.final,
            "alpha_trace": self.alpha_trace,
            "wall_clock": self.wall_clock,
            "stopped_early_at": self.stopped_early_at,
        }
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "RunReport":
        payload = json.loads(text)
        report = RunReport(
            kind=payload["kind"],
            seed=payload["seed"],
            config_hash=payload["config_hash"],
            config=payload["config"],
            final=payload["final"],
            alpha_trace=payload.get("alpha_trace", []),
            wall_clock=payload.get("wall_clock", 0.0),
            stopped_early_at=payload.get("stopped_early_at"),
        )
        report.epochs = [EpochRow(**row) for row in payload["epochs"]]
        return report

    def to_csv(self) -> str:
        lines = [",".join(EpochRow.CSV_FIELDS)]
        for row in self.epochs:
            lines.append(",".join(repr(getattr(row, f)) if f != "epoch" else str(row.epoch)
                                  for f in EpochRow.CSV_FIELDS))
        return "\n".join(lines) + "\n"

    def dev_wer_by_epoch(self) -> dict[int, float]:
        return {r.epoch: r.dev_wer for r in self.epochs}


# -- checkpoints ---------------------------------------------------------------


def checkpoint_save(path, models: dict, optimizers: dict, meta: dict) -> None:
    """Write models, optimizer moments and trainer metadata to one file."""
    arrays: dict[str, np.ndarray] = {}
    meta = dict(meta)
    meta["models"] = {}
    for name, model in models.items():
        for pname, arr in model.export_arrays().items():
            arrays[f"model/{name}/{pname}"] = arr
        meta["models"][name] = {"signature": model_signature(model.cfg)}
    meta["optimizers"] = {}
    for name, opt in optimizers.items():
        opt_arrays, opt_meta = opt.export_state()
        for key, arr in opt_arrays.items():
            arrays[f"opt/{name}/{key}"] = arr
        meta["optimizers"][name] = opt_meta
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def checkpoint_load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ResumeError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: np.array(v) for k, v in data.items()}
    meta = json.loads(bytes(arrays.pop("__meta__")).decode("utf-8"))
    return meta, arrays


def restore_model(model, name: str, meta: dict, arrays: dict, path) -> None:
    if name not in meta.get("models", {}):
        raise ResumeError(f"checkpoint {path} holds no model {name!r}")
    expected = model_signature(model.cfg)
    stored = meta["models"][name]["signature"]
    if stored != expected:
        raise ResumeError(
            f"checkpoint {path} model {name!r} was built with a different configuration "
            f"(signature {stored} != {expected})"
        )
    prefix = f"model/{name}/"
    model.load_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})


def restore_optimizer(opt: AdamW, name: str, meta: dict, arrays: dict) -> None:
    prefix = f"opt/{name}/"
    opt_arrays = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    opt.load_state(opt_arrays, meta["optimizers"][name])


# -- evaluation ----------------------------------------------------------------


def evaluate_asr(model: AsrModel, corpus: Corpus, vocab: Vocabulary,
                 batch_size: int = 64, beam: int = 0) -> dict[str, float]:
    """Corpus-level token and word error rates under greedy or beam decode."""
    pairs = []
    utts = corpus.utterances
    for lo in range(0, len(utts), batch_size):
        chunk = utts[lo : lo + batch_size]
        if beam > 0:
            hyps = [decode_beam(model, u.s, vocab, beam) for u in chunk]
        else:
            hyps = decode_greedy_batch(model, [u.s for u in chunk], vocab)
        pairs.extend((list(u.y), hyp) for u, hyp in zip(chunk, hyps))
    return met.corpus_rates(pairs, vocab.sep)


def evaluate_t2s_content(
    model: T2sModel,
    corpus: Corpus,
    channel,
    vocab: Vocabulary,
    prompt_frac: float = 0.1,
    batch_size: int = 64,
) -> dict[str, float]:
    """Generate semantics from text and grade them through the channel inverse.

    Prompts are deterministic prefixes (a fixed fraction of the reference
    stream), so repeated evaluations agree exactly.
    """
    wer_d = wer_n = 0
    utts = corpus.utterances
    for lo in range(0, len(utts), batch_size):
        chunk = utts[lo : lo + batch_size]
        prefixes = []
        caps = []
        for u in chunk:
            text_p = np.concatenate([u.y, [vocab.eos]])
            plen = int(round(prompt_frac * len(u.s)))
            prefixes.append((text_p, u.s[:plen]))
            caps.append(4 * len(u.y) + 10)
        gen = t2s_mod.generate_batch(model, prefixes, max_len=int(max(caps)), vocab=vocab)
        for u, (_, s_p), g in zip(chunk, prefixes, gen):
            full = np.concatenate([s_p, np.asarray(g, dtype=np.int64)])
            report = met.t2s_content_wer(full, u.y, channel, vocab)
            wer_d += report.distance
            wer_n += max(1, report.ref_len)
    return {"t2s_wer": wer_d / max(1, wer_n)}


def evaluate_t2s_loss(
    model: T2sModel, corpus: Corpus, vocab: Vocabulary, rng: np.random.Generator,
    prompt_frac: tuple[float, float], batch_size: int = 64,
) -> float:
    total = 0.0
    count = 0
    with ad.no_grad():
        utts = corpus.utterances
        for lo in range(0, len(utts), batch_size):
            chunk = utts[lo : lo + batch_size]
            items = []
            for u in chunk:
                prompt = t2s_mod.sample_prompt(u.s, prompt_frac, rng)
                text_p = np.concatenate([u.y, [vocab.eos]])
                items.append(t2s_mod.make_prefix_batch(text_p, u.s, len(prompt), vocab))
            packed = t2s_mod.pack_prefix_batches(items)
            loss = t2s_mod.loss_t2s_packed(model.forward_packed(packed), packed)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / max(1, count)


def evaluate_s2a_loss(
    model: S2aModel, corpus: Corpus, vocab: Vocabulary, rng: np.random.Generator,
    prompt_frac: float, batch_size: int = 64,
) -> float:
    total = 0.0
    count = 0
    with ad.no_grad():
        utts = corpus.utterances
        for lo in range(0, len(utts), batch_size):
            chunk = utts[lo : lo + batch_size]
            plans = []
            for u in chunk:
                plen = max(1, int(round(prompt_frac * len(u.s))))
                plans.append(
                    s2a_mod.sample_mask_plan(len(u.s), 1 + vocab.num_acoustic_layers, plen, 1.0, rng)
                )
            loss = s2a_mod.s2a_loss_batch(model, chunk, plans)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / max(1, count)


def asr_supervised_loss(model: AsrModel, utts, vocab: Vocabulary, loss_cfg: AsrLossCfg,
                        ce_tau: float) -> tuple[Tensor, float, float]:
    s_pad, s_len = pad_sequences([u.s for u in utts], vocab.sem_pad)
    y_in, y_out, y_len = make_decoder_batch(utts, vocab)
    fwd = model.forward_batch(s_pad, s_len, y_in, y_len)
    ce = loss_ce_batch(fwd["dec_logits"], y_out, y_len, ce_tau, loss_cfg.label_smoothing)
    ctc = ctc_loss_batch(fwd["ctc_logits"], [u.y for u in utts], s_len, vocab.blank)
    return loss_asr(ce, ctc, loss_cfg.eta), ce.item(), ctc.item()


# -- the trainer ---------------------------------------------------------------


def build_model_configs(cfg: TrainConfig, vocab: Vocabulary, corpora: dict[str, Corpus]):
    max_t = max(len(u.s) for c in corpora.values() for u in c)
    max_l = max(len(u.y) for c in corpora.values() for u in c)
    asr_cfg = AsrConfig(
        text_size=vocab.text_size,
        semantic_size=vocab.semantic_size,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        enc_blocks=cfg.enc_blocks,
        dec_blocks=cfg.dec_blocks,
        ffn=cfg.ffn,
        max_src=max_t + 2,
    )
    t2s_cfg = T2sConfig(
        text_size=vocab.text_size,
        semantic_size=vocab.semantic_size,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        blocks=cfg.t2s_blocks,
        ffn=cfg.ffn,
        max_len=(max_l + 1) + max_t + max(max_t + 1, 4 * max_l + 10) + 4,
    )
    s2a_cfg = S2aConfig(
        semantic_size=vocab.semantic_size,
        acoustic_size=vocab.acoustic_size,
        num_layers=vocab.num_acoustic_layers,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        blocks=cfg.s2a_blocks,
        ffn=cfg.ffn,
        max_len=max_t + 2,
        cfg_drop=cfg.cfg_drop,
    )
    return asr_cfg, t2s_cfg, s2a_cfg


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset=None):
        self.cfg = cfg
        if dataset is None:
            if cfg.data_dir is None:
                raise ConfigError("either data_dir or an in-memory dataset is required")
            dataset = load_dataset(cfg.data_dir)
        self.corpus_cfg, self.vocab, self.channels, self.corpora = dataset
        if not self.corpora:
            raise ConfigError("dataset has no splits")
        self.asr_cfg, self.t2s_cfg, self.s2a_cfg = build_model_configs(cfg, self.vocab, self.corpora)
        self.loss_cfg = AsrLossCfg(eta=cfg.eta, label_smoothing=cfg.label_smoothing, tau=1.0)
        self.models: dict[str, object] = {}
        self.opts: dict[str, AdamW] = {}
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.dwa = DwaState()
        self.stopper = EarlyStopper(cfg.patience)
        self.rows: list[EpochRow] = []
        self.start_epoch = 1
        self.wall_accum = 0.0
        self._build_and_restore()

    # construction ------------------------------------------------------

    def _init_rng(self, tag: str) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, len(tag), sum(map(ord, tag))])

    def _needs(self) -> tuple[bool, bool, bool]:
        kind = self.cfg.kind
        need_asr = kind in ("pretrain_asr",) + CHAIN_KINDS
        need_t2s = kind in ("pretrain_t2s",) + CHAIN_KINDS
        need_s2a = kind == "s2a"
        return need_asr, need_t2s, need_s2a

    def _build_and_restore(self) -> None:
        cfg = self.cfg
        need_asr, need_t2s, need_s2a = self._needs()
        if need_asr:
            self.models["asr"] = AsrModel(self.asr_cfg, self._init_rng("asr-init"))
            lr = cfg.chain_asr_lr if cfg.kind in CHAIN_KINDS else cfg.asr_lr
            self.opts["asr"] = AdamW(
                self.models["asr"].named_params(), lr, cfg.warmup_steps,
                weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
            )
        if need_t2s:
            self.models["t2s"] = T2sModel(self.t2s_cfg, self._init_rng("t2s-init"))
            self.opts["t2s"] = AdamW(
                self.models["t2s"].named_params(), cfg.t2s_lr, cfg.warmup_steps,
                weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
            )
        if need_s2a:
            self.models["s2a"] = S2aModel(self.s2a_cfg, self._init_rng("s2a-init"))
            self.opts["s2a"] = AdamW(
                self.models["s2a"].named_params(), cfg.s2a_lr, cfg.warmup_steps,
                weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
            )
        if cfg.resume_run:
            self._restore_run(cfg.resume_run)
            return
        if cfg.kind in CHAIN_KINDS:
            if not cfg.resume_asr or not cfg.resume_t2s:
                raise ResumeError(
                    f"{cfg.kind} runs resume pretrained models; set resume_asr and resume_t2s"
                )
            self._restore_pretrained("asr", cfg.resume_asr)
            self._restore_pretrained("t2s", cfg.resume_t2s)
            # keep optimizer/scheduler state but override the recognizer lr
            self.opts["asr"].base_lr = cfg.chain_asr_lr
        elif cfg.resume_asr or cfg.resume_t2s:
            raise ConfigError("resume_asr/resume_t2s apply only to baseline/chain/adapt runs")

    def _restore_pretrained(self, name: str, path: str) -> None:
        meta, arrays = checkpoint_load(path)
        restore_model(self.models[name], name, meta, arrays, path)
        if name in meta.get("optimizers", {}):
            restore_optimizer(self.opts[name], name, meta, arrays)

    def _restore_run(self, path: str) -> None:
        meta, arrays = checkpoint_load(path)
        if meta.get("resume_signature") != resume_signature(self.cfg):
            raise ResumeError(
                f"checkpoint {path} belongs to a different configuration"
            )
        for name, model in self.models.items():
            restore_model(model, name, meta, arrays, path)
            restore_optimizer(self.opts[name], name, meta, arrays)
        state = meta["trainer"]
        self.rng.bit_generator.state = state["rng_state"]
        self.dwa = DwaState(
            asr_hist=list(state["dwa_asr"]), t2s_hist=list(state["dwa_t2s"])
        )
        self.stopper.best = np.inf if state["stopper_best"] is None else state["stopper_best"]
        self.stopper.bad = state["stopper_bad"]
        self.rows = [EpochRow(**row) for row in state["rows"]]
        self.start_epoch = state["epoch_completed"] + 1
        self.wall_accum = state.get("wall_accum", 0.0)

    # data ----------------------------------------------------------------

    def _train_split(self) -> Corpus:
        kind = self.cfg.kind
        name = {
            "pretrain_asr": "pretrain",
            "pretrain_t2s": "pretrain",
            "s2a": "pretrain",
            "baseline": "chain_train",
            "chain": "chain_train",
            "adapt": "shifted_train",
        }[kind]
        if name not in self.corpora:
            raise ConfigError(f"dataset lacks required split {name!r}")
        return self.corpora[name]

    def _dev_split(self) -> Corpus:
        name = "shifted_dev" if self.cfg.kind == "adapt" else "chain_dev"
        if name not in self.corpora:
            raise ConfigError(f"dataset lacks required split {name!r}")
        return self.corpora[name]

    def _batches(self, corpus: Corpus):
        order = self.rng.permutation(len(corpus))
        bs = self.cfg.batch_size
        for lo in range(0, len(order), bs):
            yield [corpus.utterances[i] for i in order[lo : lo + bs]]

    # epoch bodies ---------------------------------------------------------

    def _epoch_chain(self, epoch: int, corpus: Corpus, step_log: list) -> EpochRow:
        cfg = self.cfg
        mode = cfg.estimator_mode()
        tau = tau_at(mode.tau_schedule, epoch)
        if cfg.kind == "baseline":
            alpha = 0.0
        else:
            self.dwa.epoch = epoch
            alpha = dwa_alpha(self.dwa, cfg.dwa_config())
        sums = {"asr": 0.0, "ce": 0.0, "ctc": 0.0, "t2s": 0.0, "st": 0.0}
        steps = 0
        lr = self.opts["asr"].current_lr()
        for batch in self._batches(corpus):
            result = chain_step(
                self.models["asr"], self.models["t2s"], batch, self.vocab,
                mode, tau, self.loss_cfg, alpha, (cfg.prompt_lo, cfg.prompt_hi),
                self.rng, ce_tau=cfg.ce_tau,
            )
            if not np.isfinite(result.loss_final.data):
                raise DivergenceError("chain loss diverged", epoch=epoch, step=steps + 1)
            for opt in self.opts.values():
                opt.zero_grad()
            result.loss_final.backward()
            lr = self.opts["asr"].step()
            if cfg.kind != "baseline":
                self.opts["t2s"].step()
            sums["asr"] += result.loss_asr
            sums["ce"] += result.loss_ce
            sums["ctc"] += result.loss_ctc
            sums["t2s"] += result.loss_t2s
            sums["st"] += result.st_token_accuracy
            steps += 1
            step_log.append(
                (epoch, steps, result.loss_asr, result.loss_t2s, alpha, tau, mode.kind)
            )
        row = EpochRow(
            epoch=epoch,
            loss_asr=sums["asr"] / steps,
            loss_ce=sums["ce"] / steps,
            loss_ctc=sums["ctc"] / steps,
            loss_t2s=sums["t2s"] / steps,
            alpha=alpha,
            tau=tau,
            lr=lr,
            st_acc=sums["st"] / steps,
        )
        if cfg.dwa_on == "train":
            self.dwa.record(row.loss_asr, row.loss_t2s)
        else:
            dev_rng = np.random.default_rng([cfg.seed, epoch, 911])
            dev = self._dev_split()
            asr_mean, t2s_mean = self._dev_chain_losses(dev, mode, tau, dev_rng)
            self.dwa.record(asr_mean, t2s_mean)
        return row

    def _dev_chain_losses(self, corpus: Corpus, mode, tau, rng) -> tuple[float, float]:
        cfg = self.cfg
        tot_asr = tot_t2s = 0.0
        n = 0
        with ad.no_grad():
            for lo in range(0, len(corpus), cfg.batch_size):
                batch = corpus.utterances[lo : lo + cfg.batch_size]
                result = chain_step(
                    self.models["asr"], self.models["t2s"], batch, self.vocab,
                    mode, tau, self.loss_cfg, 0.0, (cfg.prompt_lo, cfg.prompt_hi),
                    rng, ce_tau=cfg.ce_tau,
                )
                tot_asr += result.loss_asr * len(batch)
                tot_t2s += result.loss_t2s * len(batch)
                n += len(batch)
        return tot_asr / n, tot_t2s / n

    def _epoch_pretrain_asr(self, epoch: int, corpus: Corpus) -> EpochRow:
        sums = {"asr": 0.0, "ce": 0.0, "ctc": 0.0}
        steps = 0
        lr = self.opts["asr"].current_lr()
        for batch in self._batches(corpus):
            loss, ce_val, ctc_val = asr_supervised_loss(
                self.models["asr"], batch, self.vocab, self.loss_cfg, self.cfg.ce_tau
            )
            if not np.isfinite(loss.data):
                raise DivergenceError("asr loss diverged", epoch=epoch, step=steps + 1)
            self.opts["asr"].zero_grad()
            loss.backward()
            lr = self.opts["asr"].step()
            sums["asr"] += loss.item()
            sums["ce"] += ce_val
            sums["ctc"] += ctc_val
            steps += 1
        return EpochRow(
            epoch=epoch,
            loss_asr=sums["asr"] / steps,
            loss_ce=sums["ce"] / steps,
            loss_ctc=sums["ctc"] / steps,
            lr=lr,
        )

    def _epoch_pretrain_t2s(self, epoch: int, corpus: Corpus) -> EpochRow:
        cfg = self.cfg
        total = 0.0
        steps = 0
        lr = self.opts["t2s"].current_lr()
        for batch in self._batches(corpus):
            items = []
            for u in batch:
                prompt = t2s_mod.sample_prompt(u.s, (cfg.prompt_lo, cfg.prompt_hi), self.rng)
                text_p = np.concatenate([u.y, [self.vocab.eos]])
                items.append(t2s_mod.make_prefix_batch(text_p, u.s, len(prompt), self.vocab))
            packed = t2s_mod.pack_prefix_batches(items)
            loss = t2s_mod.loss_t2s_packed(self.models["t2s"].forward_packed(packed), packed)
            if not np.isfinite(loss.data):
                raise DivergenceError("t2s loss diverged", epoch=epoch, step=steps + 1)
            self.opts["t2s"].zero_grad()
            loss.backward()
            lr = self.opts["t2s"].step()
            total += loss.item()
            steps += 1
        return EpochRow(epoch=epoch, loss_t2s=total / steps, lr=lr)

    def _epoch_s2a(self, epoch: int, corpus: Corpus) -> EpochRow:
        cfg = self.cfg
        model: S2aModel = self.models["s2a"]
        total = 0.0
        steps = 0
        # coarse-to-fine progress saturates after a fixed horizon so the
        # schedule is independent of the configured epoch budget
        progress = min(1.0, (epoch - 1) / max(1, cfg.s2a_progress_epochs - 1))
        lr = self.opts["s2a"].current_lr()
        q = 1 + self.vocab.num_acoustic_layers
        for batch in self._batches(corpus):
            plans = []
            conds = []
            for u in batch:
                plen = max(1, int(round(cfg.s2a_prompt_frac * len(u.s))))
                plans.append(s2a_mod.sample_mask_plan(len(u.s), q, plen, progress, self.rng))
                conds.append(s2a_mod.cfg_dropout(u.s, cfg.cfg_drop, self.rng, model.null_id))
            loss = s2a_mod.s2a_loss_batch(model, batch, plans, conds)
            if not np.isfinite(loss.data):
                raise DivergenceError("s2a loss diverged", epoch=epoch, step=steps + 1)
            self.opts["s2a"].zero_grad()
            loss.backward()
            lr = self.opts["s2a"].step()
            total += loss.item()
            steps += 1
        return EpochRow(epoch=epoch, lr=lr, loss_t2s=total / steps)

    # evaluation hooks -------------------------------------------------------

    def _dev_metrics(self, epoch: int, row: EpochRow) -> EpochRow:
        cfg = self.cfg
        kind = cfg.kind
        dev = self._dev_split()
        if kind in ("pretrain_asr",) + CHAIN_KINDS:
            rates = evaluate_asr(self.models["asr"], dev, self.vocab, beam=cfg.eval_beam)
            row.dev_cer = rates["cer"]
            row.dev_wer = rates["wer"]
        elif kind == "pretrain_t2s":
            rng = np.random.default_rng([cfg.seed, epoch, 913])
            row.dev_loss = evaluate_t2s_loss(
                self.models["t2s"], dev, self.vocab, rng, (cfg.prompt_lo, cfg.prompt_hi)
            )
        elif kind == "s2a":
            rng = np.random.default_rng([cfg.seed, epoch, 917])
            row.dev_loss = evaluate_s2a_loss(
                self.models["s2a"], dev, self.vocab, rng, cfg.s2a_prompt_frac
            )
        return row

    def _stop_metric(self, row: EpochRow) -> float:
        if self.cfg.kind in ("pretrain_asr",) + CHAIN_KINDS:
            return row.dev_wer
        return row.dev_loss

    def _final_metrics(self) -> dict[str, dict[str, float]]:
        cfg = self.cfg
        kind = cfg.kind
        out: dict[str, dict[str, float]] = {}
        splits: list[str] = []
        if kind in ("pretrain_asr", "baseline", "chain", "pretrain_t2s"):
            splits = ["chain_dev", "chain_test"]
        elif kind == "adapt":
            splits = ["shifted_dev", "shifted_test", "chain_dev", "chain_test"]
        elif kind == "s2a":
            splits = ["chain_dev"]
        for split in splits:
            if split not in self.corpora:
                continue
            corpus = self.corpora[split]
            entry: dict[str, float] = {}
            if "asr" in self.models:
                entry.update(evaluate_asr(self.models["asr"], corpus, self.vocab, beam=cfg.eval_beam))
            if "t2s" in self.models:
                channel = channel_for(corpus, self.channels)
                entry.update(
                    evaluate_t2s_content(
                        self.models["t2s"], corpus, channel, self.vocab,
                        prompt_frac=cfg.t2s_eval_prompt_frac,
                    )
                )
            if "s2a" in self.models:
                rng = np.random.default_rng([cfg.seed, 919])
                q = 1 + self.vocab.num_acoustic_layers
                plans = []
                for u in corpus:
                    plen = max(1, int(round(cfg.s2a_prompt_frac * len(u.s))))
                    plans.append(s2a_mod.sample_mask_plan(len(u.s), q, plen, 1.0, rng))
                correct, total = s2a_mod.masked_accuracy(self.models["s2a"], corpus.utterances, plans)
                entry["s2a_masked_acc"] = correct / max(1, total)
            out[split] = entry
        return out

    # main loop ---------------------------------------------------------------

    def run(self) -> RunReport:
        cfg = self.cfg
        started = time.monotonic()
        report = RunReport(
            kind=cfg.kind,
            seed=cfg.seed,
            config_hash=config_hash(cfg),
            config=asdict(cfg),
        )
        step_log: list[tuple] = []
        train = self._train_split()
        if cfg.eval_at_start and self.start_epoch == 1 and not self.rows:
            row0 = self._dev_metrics(0, EpochRow(epoch=0))
            self.rows.append(row0)
        stopped = None
        for epoch in range(self.start_epoch, cfg.epochs + 1):
            if cfg.kind in CHAIN_KINDS:
                row = self._epoch_chain(epoch, train, step_log)
            elif cfg.kind == "pretrain_asr":
                row = self._epoch_pretrain_asr(epoch, train)
            elif cfg.kind == "pretrain_t2s":
                row = self._epoch_pretrain_t2s(epoch, train)
            else:
                row = self._epoch_s2a(epoch, train)
            row = self._dev_metrics(epoch, row)
            self.rows.append(row)
            if self.stopper.update(self._stop_metric(row)):
                stopped = epoch
                break
        report.epochs = list(self.rows)
        report.alpha_trace = [r.alpha for r in self.rows if r.epoch >= 1]
        report.final = self._final_metrics()
        report.stopped_early_at = stopped
        report.wall_clock = self.wall_accum + (time.monotonic() - started)
        if cfg.out_dir:
            self._write_artifacts(report, step_log)
        return report

    def _write_artifacts(self, report: RunReport, step_log: list) -> None:
        out = Path(self.cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        if step_log:
            lines = ["epoch,step,loss_asr,loss_t2s,alpha,tau,estimator"]
            for rec in step_log:
                lines.append(",".join(str(x) for x in rec))
            (out / "steps.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta = {
            "format_version": 1,
            "kind": self.cfg.kind,
            "config": asdict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "resume_signature": resume_signature(self.cfg),
            "trainer": {
                "epoch_completed": self.rows[-1].epoch if self.rows else 0,
                "rng_state": self.rng.bit_generator.state,
                "dwa_asr": self.dwa.asr_hist,
                "dwa_t2s": self.dwa.t2s_hist,
                "stopper_best": float(self.stopper.best) if np.isfinite(self.stopper.best) else None,
                "stopper_bad": self.stopper.bad,
                "rows": [asdict(r) for r in self.rows],
                "wall_accum": report.wall_clock,
            },
        }
        checkpoint_save(out / "checkpoint.npz", self.models, self.opts, meta)


def run(cfg: TrainConfig, dataset=None) -> RunReport:
    """Execute one training regime and return its report."""
    return Trainer(cfg, dataset).run()
