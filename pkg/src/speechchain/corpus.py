"""Synthetic paired token corpus generated through a known noisy channel.

Text sequences are short "sentences": words drawn from a small inventory,
joined by a separator token. Each text symbol owns a private pair of
semantic ids; the channel expands every text token into a 1-3 token
template over its pair, optionally repeats tokens (duration jitter), and
substitutes tokens at a configurable rate. Because the id pairs are
disjoint and sentences never repeat a token in adjacent positions,
per-token maximum-likelihood inversion followed by run collapsing decodes
clean output exactly.

Acoustic layers are a keyed integer hash of (semantic id, layer, speaker),
so the acoustic stack is a deterministic function of its conditioning up
to substitution noise, and a short acoustic prompt is enough to identify
the speaker.

The shifted domain reuses the same text alphabet but applies a semantic-id
permutation (by default swapping the two ids inside each symbol's pair),
redistributes template probabilities, reweights the word inventory, adds a
few exclusive words, and raises the noise and jitter rates. That moves the
token distributions substantially while keeping the id-to-symbol
correspondence decodable, which is what lets adaptation help the new
domain without erasing the old one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ParseError

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xBF58476D1CE4E5B9)
_MIX3 = np.uint64(0x94D049BB133111EB)

# Seed offsets keeping the seven split streams and the channel build apart.
_SPLIT_STRIDE = 10_000_000
_CHANNEL_SEED_OFFSET = 777_000_001

SPLIT_NAMES = (
    "pretrain",
    "chain_train",
    "chain_dev",
    "chain_test",
    "shifted_train",
    "shifted_dev",
    "shifted_test",
)


@dataclass(frozen=True)
class Vocabulary:
    """Token id spaces and the special ids carved out of them.

    Text: pad/bos/eos/sep, content ids above them. Semantic: pad/eos,
    content ids above. ``blank`` is the extra class of the CTC head
    (index ``text_size`` in a ``text_size + 1`` output space);``mask`` is
    the extra embedding row of the acoustic model (index
    ``acoustic_size``).
    """

    text_size: int = 32
    semantic_size: int = 64
    acoustic_size: int = 32
    num_acoustic_layers: int = 3
    pad: int = 0
    bos: int = 1
    eos: int = 2
    sep: int = 3
    sem_pad: int = 0
    sem_eos: int = 1

    def __post_init__(self):
        if self.text_size < 8 or self.semantic_size < 16:
            raise ConfigError("vocabulary too small: need text >= 8, semantic >= 16")
        if self.acoustic_size < 2 or self.num_acoustic_layers < 1:
            raise ConfigError("need at least one acoustic layer over >= 2 ids")
        specials = (self.pad, self.bos, self.eos, self.sep)
        if len(set(specials)) != 4 or max(specials) >= self.text_size:
            raise ConfigError("text special ids must be distinct and < text_size")
        if self.sem_pad == self.sem_eos or max(self.sem_pad, self.sem_eos) >= self.semantic_size:
            raise ConfigError("semantic special ids must be distinct and < semantic_size")

    @property
    def blank(self) -> int:
        return self.text_size

    @property
    def mask(self) -> int:
        return self.acoustic_size

    @property
    def text_content(self) -> range:
        return range(self.sep + 1, self.text_size)

    @property
    def sem_content(self) -> range:
        return range(self.sem_eos + 1, self.semantic_size)

    def text_symbols(self) -> list[int]:
        """Ids the channel must expand: separator plus content."""
        return [self.sep] + list(self.text_content)


@dataclass(frozen=True)
class ChannelSpec:
    """Stochastic text-to-token channel for one domain.

    ``expansions`` maps each text symbol to (template, probability) pairs;
    templates are tuples of semantic ids. ``semantic_perm`` is the domain
    offset: a permutation of semantic ids already folded into the
    templates, kept for reference and serialization.
    """

    domain: str
    expansions: dict[int, tuple[tuple[tuple[int, ...], float], ...]]
    sub_rate: float
    jitter_rate: float
    speaker_styles: int
    acoustic_key: int
    acoustic_sub_rate: float
    semantic_perm: tuple[int, ...] | None = None

    def __post_init__(self):
        for sym, templates in self.expansions.items():
            total = sum(p for _, p in templates)
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"expansion probabilities for symbol {sym} sum to {total}")
            if not templates or any(not 1 <= len(t) <= 3 for t, _ in templates):
                raise ConfigError(f"symbol {sym} needs 1-3 token templates")
        for rate in (self.sub_rate, self.jitter_rate, self.acoustic_sub_rate):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"channel rate {rate} outside [0, 1)")
        if self.speaker_styles < 1:
            raise ConfigError("need at least one speaker style")

    def inversion_table(self, vocab: Vocabulary) -> np.ndarray:
        """Per-token maximum-likelihood map semantic id -> text symbol.

        Ids emitted only through substitution noise tie across symbols;
        the lowest symbol wins, deterministically. Semantic specials map
        to -1 (dropped by the decoder).
        """
        content_lo = vocab.sem_eos + 1
        table = np.full(vocab.semantic_size, -1, dtype=np.int64)
        best = np.zeros(vocab.semantic_size)
        # ids never emitted by a template tie across symbols; prefer the
        # lowest non-separator symbol so stray noise cannot split words
        fallback = min((s for s in self.expansions if s != vocab.sep), default=min(self.expansions))
        table[content_lo:] = fallback
        for sym in sorted(self.expansions):
            weight = np.zeros(vocab.semantic_size)
            for template, prob in self.expansions[sym]:
                for tok in template:
                    weight[tok] += prob / len(template)
            better = weight > best + 1e-12
            table[better] = sym
            best = np.maximum(best, weight)
        table[:content_lo] = -1
        return table

    def decode_text(self, s, vocab: Vocabulary) -> list[int]:
        """ML-invert a semantic sequence to text ids (collapsing runs)."""
        table = self.inversion_table(vocab)
        out: list[int] = []
        prev = -1
        for tok in np.asarray(s, dtype=np.int64):
            if not 0 <= tok < vocab.semantic_size:
                raise InputError(f"semantic id {tok} outside vocabulary")
            sym = int(table[tok])
            if sym < 0:
                prev = -1
                continue
            if sym != prev:
                out.append(sym)
            prev = sym
        return out


@dataclass
class Utterance:
    """One paired record: text, semantic tokens, acoustic stack, labels."""

    y: np.ndarray
    s: np.ndarray
    a: np.ndarray
    domain: str
    speaker: int

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)

    def validate(self, vocab: Vocabulary) -> None:
        L, T = len(self.y), len(self.s)
        if not 1 <= L <= T:
            raise InputError(f"lengths violate 1 <= L <= T: L={L}, T={T}")
        if T > 6 * L:
            raise InputError(f"semantic length {T} exceeds jitter slack for L={L}")
        if self.a.shape != (vocab.num_acoustic_layers, T):
            raise InputError(f"acoustic stack shape {self.a.shape} != ({vocab.num_acoustic_layers}, {T})")
        if self.y.min() < 1 or self.y.max() >= vocab.text_size:
            raise InputError("text id outside vocabulary")
        if self.s.min() < 0 or self.s.max() >= vocab.semantic_size:
            raise InputError("semantic id outside vocabulary")
        if self.a.min() < 0 or self.a.max() >= vocab.acoustic_size:
            raise InputError("acoustic id outside vocabulary")
        if not 0 <= self.speaker:
            raise InputError("negative speaker id")


@dataclass
class Corpus:
    name: str
    domain: str
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]


@dataclass(frozen=True)
class CorpusConfig:
    """Everything needed to regenerate the seven splits deterministically."""

    text_size: int = 32
    semantic_size: int = 64
    acoustic_size: int = 32
    num_acoustic_layers: int = 3
    speaker_styles: int = 4
    num_words: int = 14
    num_shifted_extra_words: int = 2
    min_words: int = 2
    max_words: int = 4
    source_sub_rate: float = 0.03
    source_jitter_rate: float = 0.08
    shifted_sub_rate: float = 0.08
    shifted_jitter_rate: float = 0.20
    acoustic_sub_rate: float = 0.02
    source_template_probs: tuple[float, float, float] = (0.55, 0.30, 0.15)
    shifted_template_probs: tuple[float, float, float] = (0.25, 0.45, 0.30)
    shift_mode: str = "swap"  # "swap" keeps the id-symbol map; "rotate" breaks it
    pretrain: int = 300
    chain_train: int = 600
    chain_dev: int = 120
    chain_test: int = 120
    shifted_train: int = 600
    shifted_dev: int = 120
    shifted_test: int = 120
    seed: int = 0

    def __post_init__(self):
        # JSON round-trips turn tuples into lists; normalize
        object.__setattr__(self, "source_template_probs", tuple(self.source_template_probs))
        object.__setattr__(self, "shifted_template_probs", tuple(self.shifted_template_probs))

    def split_sizes(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(
            text_size=self.text_size,
            semantic_size=self.semantic_size,
            acoustic_size=self.acoustic_size,
            num_acoustic_layers=self.num_acoustic_layers,
        )


def _splitmix(x: int) -> int:
    with np.errstate(over="ignore"):
        z = np.uint64(x & 0xFFFFFFFFFFFFFFFF) + _MIX1
        z = (z ^ (z >> np.uint64(30))) * _MIX2
        z = (z ^ (z >> np.uint64(27))) * _MIX3
        return int(z ^ (z >> np.uint64(31)))


def keyed_hash(s, layer, speaker, key: int, modulus: int) -> np.ndarray:
    """Vectorized integer mixer mapping (s, layer, speaker, key) -> id."""
    with np.errstate(over="ignore"):
        z = (
            np.asarray(s, dtype=np.uint64) * _MIX1
            + np.uint64(layer) * _MIX2
            + np.uint64(speaker) * _MIX3
            + np.uint64(key & 0xFFFFFFFFFFFFFFFF)
        )
        z = (z ^ (z >> np.uint64(30))) * _MIX2
        z = (z ^ (z >> np.uint64(27))) * _MIX3
        z = z ^ (z >> np.uint64(31))
    return (z % np.uint64(modulus)).astype(np.int64)


def semantic_blocks(vocab: Vocabulary) -> dict[int, tuple[int, int]]:
    """Assign each text symbol its private pair of semantic ids."""
    symbols = vocab.text_symbols()
    lo = vocab.sem_eos + 1
    needed = 2 * len(symbols)
    available = vocab.semantic_size - lo
    if needed > available:
        raise ConfigError(
            f"semantic vocabulary too small: {len(symbols)} symbols need {needed} ids, "
            f"only {available} content ids available"
        )
    return {sym: (lo + 2 * i, lo + 2 * i + 1) for i, sym in enumerate(symbols)}


def _templates_for(pair: tuple[int, int], probs: tuple[float, float, float]):
    u, v = pair
    templates = (((u,), probs[0]), ((u, v), probs[1]), ((u, v, v), probs[2]))
    return tuple((t, p) for t, p in templates if p > 0.0)


def build_channels(cfg: CorpusConfig) -> tuple[ChannelSpec, ChannelSpec]:
    """Source and shifted channel for one corpus configuration."""
    vocab = cfg.vocabulary()
    blocks = semantic_blocks(vocab)
    key = _splitmix(cfg.seed + _CHANNEL_SEED_OFFSET)
    source = ChannelSpec(
        domain="source",
        expansions={
            sym: _templates_for(pair, tuple(cfg.source_template_probs))
            for sym, pair in blocks.items()
        },
        sub_rate=cfg.source_sub_rate,
        jitter_rate=cfg.source_jitter_rate,
        speaker_styles=cfg.speaker_styles,
        acoustic_key=key,
        acoustic_sub_rate=cfg.acoustic_sub_rate,
    )
    perm = np.arange(vocab.semantic_size)
    if cfg.shift_mode == "swap":
        for u, v in blocks.values():
            perm[u], perm[v] = v, u
    elif cfg.shift_mode == "rotate":
        content = np.array(sorted({t for pair in blocks.values() for t in pair}))
        perm[content] = np.roll(content, len(content) // 2)
    else:
        raise ConfigError(f"unknown shift_mode {cfg.shift_mode!r}")
    shifted = ChannelSpec(
        domain="shifted",
        expansions={
            sym: tuple(
                (tuple(int(perm[t]) for t in template), p)
                for template, p in _templates_for(pair, tuple(cfg.shifted_template_probs))
            )
            for sym, pair in blocks.items()
        },
        sub_rate=cfg.shifted_sub_rate,
        jitter_rate=cfg.shifted_jitter_rate,
        speaker_styles=cfg.speaker_styles,
        acoustic_key=key,
        acoustic_sub_rate=cfg.acoustic_sub_rate,
        semantic_perm=tuple(int(p) for p in perm),
    )
    return source, shifted


def build_word_inventory(cfg: CorpusConfig) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Deterministic word lists: (source inventory, shifted-only extras)."""
    vocab = cfg.vocabulary()
    content = list(vocab.text_content)
    rng = np.random.default_rng(_splitmix(cfg.seed + 31))
    lengths = [1, 2, 2, 3] * ((cfg.num_words + cfg.num_shifted_extra_words) // 4 + 1)
    words: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    i = 0
    while len(words) < cfg.num_words + cfg.num_shifted_extra_words:
        n = lengths[i % len(lengths)]
        i += 1
        for _ in range(200):
            toks: list[int] = []
            while len(toks) < n:
                t = content[int(rng.integers(len(content)))]
                if not toks or toks[-1] != t:
                    toks.append(t)
            word = tuple(toks)
            if word not in seen:
                seen.add(word)
                words.append(word)
                break
        else:
            raise ConfigError("could not build a distinct word inventory; enlarge text vocabulary")
    return words[: cfg.num_words], words[cfg.num_words:]


def _word_weights(n: int, reverse: bool = False) -> np.ndarray:
    # mildly skewed (inverse square root of rank): enough asymmetry for the
    # domain shift to move unigram statistics, flat enough that a small
    # corpus covers all words well
    ranks = np.arange(1, n + 1, dtype=np.float64)
    if reverse:
        ranks = ranks[::-1]
    w = 1.0 / np.sqrt(ranks)
    return w / w.sum()


def sample_text(
    cfg: CorpusConfig,
    domain: str,
    rng: np.random.Generator,
    inventory: list[tuple[int, ...]],
    weights: np.ndarray,
) -> list[int]:
    """Sentence of distinct words joined by the separator.

    Words never repeat within a sentence: duplicate source regions make
    attention alignment ambiguous, which is noise no real short sentence
    would add.
    """
    vocab = cfg.vocabulary()
    cum = np.cumsum(weights)
    while True:
        k = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        picked: list[int] = []
        while len(picked) < k:
            w = int(np.searchsorted(cum, rng.random()))
            if w not in picked:
                picked.append(w)
        toks: list[int] = []
        for w_idx, w in enumerate(picked):
            if w_idx:
                toks.append(vocab.sep)
            toks.extend(inventory[w])
        if len(toks) >= 4 or (cfg.min_words == 1 and len(toks) >= 1):
            return toks


def synthesize_utterance(
    spec: ChannelSpec,
    vocab: Vocabulary,
    text,
    speaker: int,
    seed: int,
) -> Utterance:
    """Run one text sequence through the channel; pure function of seed."""
    text = np.asarray(text, dtype=np.int64)
    if text.size == 0:
        raise InputError("cannot synthesize an empty text sequence")
    for tok in text:
        if int(tok) not in spec.expansions:
            raise InputError(f"text id {int(tok)} has no channel expansion")
    if not 0 <= speaker < spec.speaker_styles:
        raise InputError(f"speaker {speaker} outside {spec.speaker_styles} styles")
    rng = np.random.default_rng(seed)

    cums = {sym: np.cumsum([p for _, p in tmpls]) for sym, tmpls in spec.expansions.items()}
    s: list[int] = []
    for tok in text:
        templates = spec.expansions[int(tok)]
        pick = int(np.searchsorted(cums[int(tok)], rng.random()))
        s.extend(templates[min(pick, len(templates) - 1)][0])
    if spec.jitter_rate > 0.0:
        jittered: list[int] = []
        repeats = rng.random(len(s)) < spec.jitter_rate
        for tok, rep in zip(s, repeats):
            jittered.append(tok)
            if rep:
                jittered.append(tok)
        s = jittered
    s_arr = np.asarray(s, dtype=np.int64)
    if spec.sub_rate > 0.0:
        hit = rng.random(len(s_arr)) < spec.sub_rate
        content_lo = vocab.sem_eos + 1
        span = vocab.semantic_size - content_lo - 1
        for i in np.flatnonzero(hit):
            # draw from content ids excluding the current one
            draw = content_lo + int(rng.integers(span))
            s_arr[i] = draw + 1 if draw >= s_arr[i] else draw

    layers = []
    for j in range(2, 2 + vocab.num_acoustic_layers):
        layers.append(keyed_hash(s_arr, j, speaker, spec.acoustic_key, vocab.acoustic_size))
    a = np.stack(layers, axis=0)
    if spec.acoustic_sub_rate > 0.0:
        hit = rng.random(a.shape) < spec.acoustic_sub_rate
        a[hit] = rng.integers(vocab.acoustic_size, size=int(hit.sum()))

    utt = Utterance(y=text, s=s_arr, a=a, domain=spec.domain, speaker=speaker)
    utt.validate(vocab)
    return utt


def build_corpora(cfg: CorpusConfig) -> dict[str, Corpus]:
    """Generate the seven disjoint splits of the synthetic corpus.

    Every utterance is a pure function of its split-local seed; split seed
    ranges are disjoint by a fixed stride, and text sequences are
    additionally deduplicated across splits so no sentence appears twice.
    """
    sizes = cfg.split_sizes()
    for name, n in sizes.items():
        if n <= 0:
            raise ConfigError(f"split {name} must be positive, got {n}")
        if n >= _SPLIT_STRIDE:
            raise ConfigError(f"split {name} too large; seed ranges would overlap")
    source, shifted = build_channels(cfg)
    vocab = cfg.vocabulary()
    inventory, extras = build_word_inventory(cfg)
    source_weights = _word_weights(len(inventory))
    shifted_inventory = inventory + extras
    shifted_weights = _word_weights(len(shifted_inventory), reverse=True)

    seen_texts: set[tuple[int, ...]] = set()
    corpora: dict[str, Corpus] = {}
    for split_idx, name in enumerate(SPLIT_NAMES):
        is_shifted = name.startswith("shifted")
        spec = shifted if is_shifted else source
        inv = shifted_inventory if is_shifted else inventory
        weights = shifted_weights if is_shifted else source_weights
        corpus = Corpus(name=name, domain=spec.domain)
        base = cfg.seed * 19_999_999 + split_idx * _SPLIT_STRIDE
        for i in range(sizes[name]):
            for attempt in range(200):
                utt_seed = base + i + attempt * 1_000_003
                rng = np.random.default_rng(utt_seed)
                text = sample_text(cfg, spec.domain, rng, inv, weights)
                if tuple(text) not in seen_texts:
                    break
            else:
                raise ConfigError(f"could not find a fresh sentence for {name}[{i}]")
            seen_texts.add(tuple(text))
            speaker = int(rng.integers(spec.speaker_styles))
            corpus.utterances.append(
                synthesize_utterance(spec, vocab, text, speaker, seed=utt_seed + 7)
            )
        corpora[name] = corpus
    return corpora


# -- persistence -------------------------------------------------------------


def save_corpus(corpus: Corpus, path) -> None:
    """One utterance per line: domain, speaker, y, s, acoustic rows."""
    lines = []
    for utt in corpus:
        a_rows = ";".join(",".join(str(x) for x in row) for row in utt.a)
        lines.append(
            "\t".join(
                (
                    utt.domain,
                    str(utt.speaker),
                    ",".join(str(x) for x in utt.y),
                    ",".join(str(x) for x in utt.s),
                    a_rows,
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_corpus(path, name: str | None = None) -> Corpus:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    corpus = Corpus(name=name or path.stem, domain="")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ParseError(f"expected 5 tab-separated fields, got {len(fields)}", lineno)
        domain, speaker_s, y_s, s_s, a_s = fields
        try:
            speaker = int(speaker_s)
            y = np.array([int(x) for x in y_s.split(",")], dtype=np.int64)
            s = np.array([int(x) for x in s_s.split(",")], dtype=np.int64)
            rows = [
                np.array([int(x) for x in row.split(",")], dtype=np.int64)
                for row in a_s.split(";")
            ]
        except ValueError as exc:
            raise ParseError(f"non-integer token ({exc})", lineno) from exc
        if any(len(r) != len(s) for r in rows):
            raise ParseError("acoustic row length differs from semantic length", lineno)
        corpus.utterances.append(
            Utterance(y=y, s=s, a=np.stack(rows), domain=domain, speaker=speaker)
        )
        if not corpus.domain:
            corpus.domain = domain
    return corpus


def save_dataset(out_dir, cfg: CorpusConfig, corpora: dict[str, Corpus]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, corpus in corpora.items():
        save_corpus(corpus, out / f"{name}.tsv")
    meta = {"format_version": 1, "corpus_config": asdict(cfg)}
    (out / "channel.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_dataset(data_dir):
    """Load (config, vocab, channels, corpora) written by ``save_dataset``."""
    data_dir = Path(data_dir)
    meta_path = data_dir / "channel.json"
    if not meta_path.exists():
        raise FileNotFoundError(str(meta_path))
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    cfg = CorpusConfig(**meta["corpus_config"])
    source, shifted = build_channels(cfg)
    corpora = {}
    for name in SPLIT_NAMES:
        path = data_dir / f"{name}.tsv"
        if path.exists():
            corpora[name] = load_corpus(path, name)
    return cfg, cfg.vocabulary(), {"source": source, "shifted": shifted}, corpora


def channel_for(corpus: Corpus, channels: dict[str, ChannelSpec]) -> ChannelSpec:
    return channels["shifted" if corpus.domain == "shifted" else "source"]
