"""Exact error-rate metrics over token sequences.

``edit_distance`` is plain Levenshtein with an operation breakdown;
token-level reports play the character-error-rate role, word-level
reports split sequences on the separator token first. Generated semantic
streams are graded by inverting them through the channel's ML decoder and
comparing words against the reference text.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import ChannelSpec, Vocabulary
from .errors import ParameterError


@dataclass(frozen=True)
class ErrorReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return self.distance / max(1, self.ref_len)


def edit_distance(ref: Sequence, hyp: Sequence) -> ErrorReport:
    """Minimal substitutions + deletions + insertions turning hyp into ref.

    Tied tracebacks prefer substitution over deletion over insertion, so
    the operation breakdown is deterministic. Elements only need ``==``;
    word-level callers pass sequences of tuples.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)  # remaining ref tokens are deletions
    dist[0, :] = np.arange(m + 1)  # leading hyp tokens are insertions
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i, j] = min(
                dist[i - 1, j - 1] + (0 if same else 1),
                dist[i - 1, j] + 1,
                dist[i, j - 1] + 1,
            )
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorReport(substitutions=subs, deletions=dels, insertions=ins, ref_len=n)


def split_words(tokens: Sequence[int], sep: int) -> list[tuple[int, ...]]:
    """Break a token sequence into words at the separator id."""
    words: list[tuple[int, ...]] = []
    current: list[int] = []
    for tok in tokens:
        if tok == sep:
            if current:
                words.append(tuple(current))
                current = []
        else:
            current.append(int(tok))
    if current:
        words.append(tuple(current))
    return words


def token_error(ref: Sequence[int], hyp: Sequence[int]) -> ErrorReport:
    """Token-level report; the character-error-rate analogue."""
    return edit_distance(ref, hyp)


def word_error(ref: Sequence[int], hyp: Sequence[int], sep: int) -> ErrorReport:
    """Word-level report after splitting both sequences on ``sep``."""
    return edit_distance(split_words(ref, sep), split_words(hyp, sep))


def corpus_rates(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], sep: int) -> dict[str, float]:
    """Corpus-level CER/WER: total edits over total reference length."""
    cer_d = cer_n = wer_d = wer_n = 0
    for ref, hyp in pairs:
        tok = token_error(ref, hyp)
        word = word_error(ref, hyp, sep)
        cer_d += tok.distance
        cer_n += max(1, tok.ref_len)
        wer_d += word.distance
        wer_n += max(1, word.ref_len)
    return {"cer": cer_d / max(1, cer_n), "wer": wer_d / max(1, wer_n)}


def relative_change(before: float, after: float) -> float:
    """Percent change of the correct rate (1 - error rate); positive is a gain."""
    if not (0.0 <= before <= 1.0 and 0.0 <= after <= 1.0):
        raise ParameterError(f"rates must lie in [0, 1], got before={before}, after={after}")
    correct_before = 1.0 - before
    correct_after = 1.0 - after
    if correct_before == 0.0:
        return 0.0 if correct_after == 0.0 else float("inf")
    return 100.0 * (correct_after - correct_before) / correct_before


def t2s_content_wer(
    generated_s: Sequence[int],
    ref_text: Sequence[int],
    channel: ChannelSpec,
    vocab: Vocabulary,
) -> ErrorReport:
    """Word error of a generated semantic stream against the source text.

    The stream is inverted to text through the channel's per-token ML
    decoder (the stand-in for an external recognizer), then compared word
    by word.
    """
    decoded = channel.decode_text(np.asarray(generated_s, dtype=np.int64), vocab)
    return word_error(list(ref_text), decoded, vocab.sep)
