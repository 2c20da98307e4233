"""CTC loss and decoding, ARPA n-gram models, and LM-fused prefix beam search.

All CTC arithmetic stays in the log domain at 64-bit. The fused decoding
objective is

    ln P_ctc(Y|X) + w1 * ln P_lm(Y) + w2 * |Y|

with |Y| counted in words by default (characters behind a flag). ARPA files
carry log10 probabilities; they are converted to natural log inside the
fused score so both terms share a base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LN10 = math.log(10.0)
BLANK = 0


class ArpaFormatError(ValueError):
    """Raised for malformed ARPA text; message carries the line number."""


def check_logprob_matrix(logp: np.ndarray) -> np.ndarray:
    """Validate a (T, C+1) log-probability matrix: rows must normalize to 1."""
    logp = np.asarray(logp, dtype=np.float64)
    if logp.ndim != 2 or logp.shape[1] < 2:
        raise ValueError(f"log-prob matrix must be (T, C+1), got {logp.shape}")
    row_lse = np.logaddexp.reduce(logp, axis=1)
    worst = float(np.max(np.abs(row_lse)))
    if worst > 1e-6:
        raise ValueError(f"log-prob rows not normalized (max |logsumexp| = {worst:.3g})")
    return logp


def _expand_target(target, n_classes):
    target = [int(c) for c in target]
    for c in target:
        if not 1 <= c < n_classes:
            raise ValueError(f"char id {c} outside [1, {n_classes})")
    ext = [BLANK]
    for c in target:
        ext.append(c)
        ext.append(BLANK)
    return target, np.array(ext, dtype=np.int64)


def _min_frames(target) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    allowed = np.zeros(ext.size, dtype=bool)
    allowed[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allowed


def ctc_loss(logp: np.ndarray, target) -> float:
    """Negative log-likelihood of `target` (char ids, no blanks) under `logp`."""
    logp = check_logprob_matrix(logp)
    n_frames = logp.shape[0]
    target, ext = _expand_target(target, logp.shape[1])
    if _min_frames(target) > n_frames:
        raise ValueError(
            f"target needs at least {_min_frames(target)} frames, only {n_frames} available"
        )
    alpha = np.full(ext.size, -np.inf)
    alpha[0] = logp[0, ext[0]]
    if ext.size > 1:
        alpha[1] = logp[0, ext[1]]
    skip = _skip_allowed(ext)
    for t in range(1, n_frames):
        prev = alpha
        stay = prev
        step = np.concatenate([[-np.inf], prev[:-1]])
        alpha = np.logaddexp(stay, step)
        jump = np.concatenate([[-np.inf, -np.inf], prev[:-2]])
        alpha[skip] = np.logaddexp(alpha[skip], jump[skip])
        alpha = alpha + logp[t, ext]
    tail = alpha[-1] if ext.size == 1 else np.logaddexp(alpha[-1], alpha[-2])
    return float(-tail)


def ctc_grad(logp: np.ndarray, target) -> np.ndarray:
    """Gradient of ctc_loss w.r.t. the log-probability entries (forward-backward)."""
    logp = check_logprob_matrix(logp)
    n_frames, n_classes = logp.shape
    target, ext = _expand_target(target, n_classes)
    if _min_frames(target) > n_frames:
        raise ValueError(
            f"target needs at least {_min_frames(target)} frames, only {n_frames} available"
        )
    s_count = ext.size
    skip = _skip_allowed(ext)

    alpha = np.full((n_frames, s_count), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if s_count > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        cur = np.logaddexp(prev, np.concatenate([[-np.inf], prev[:-1]]))
        jump = np.concatenate([[-np.inf, -np.inf], prev[:-2]])
        cur[skip] = np.logaddexp(cur[skip], jump[skip])
        alpha[t] = cur + logp[t, ext]

    # beta[t, s] excludes the emission at time t, so alpha + beta sums paths once
    beta = np.full((n_frames, s_count), -np.inf)
    beta[-1, -1] = 0.0
    if s_count > 1:
        beta[-1, -2] = 0.0
    # entering state s+2 from s requires the same skip condition, indexed by target state
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        cur = np.logaddexp(nxt, np.concatenate([nxt[1:], [-np.inf]]))
        jump = np.concatenate([nxt[2:], [-np.inf, -np.inf]])
        src_ok = np.concatenate([skip[2:], [False, False]])
        cur[src_ok] = np.logaddexp(cur[src_ok], jump[src_ok])
        beta[t] = cur

    log_z = alpha[-1, -1] if s_count == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    occupancy = np.exp(alpha + beta - log_z)  # (T, S)
    grad = np.zeros_like(logp)
    np.add.at(grad.T, ext, occupancy.T)
    return -grad


def greedy_decode(logp: np.ndarray, vocab: str | None = None):
    """Per-frame argmax, collapse repeats, drop blanks. Returns ids, or text if vocab given."""
    logp = np.asarray(logp, dtype=np.float64)
    best = np.argmax(logp, axis=1)
    out = []
    prev = BLANK
    for c in best:
        if c != prev and c != BLANK:
            out.append(int(c))
        prev = c
    if vocab is None:
        return out
    return "".join(vocab[c - 1] for c in out)


# ---------------------------------------------------------------------------
# ARPA n-gram language models
# ---------------------------------------------------------------------------

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"


@dataclass
class NGramLM:
    order: int
    probs: dict        # tuple of words -> log10 probability
    backoffs: dict     # tuple of words -> log10 backoff weight
    vocab: set

    def map_word(self, word: str) -> str:
        if word in self.vocab:
            return word
        if UNK in self.vocab:
            return UNK
        raise ValueError(f"word {word!r} not in vocabulary and model has no {UNK}")


def arpa_load(text: str) -> NGramLM:
    """Parse ARPA text into a queryable backoff model.

    Errors carry 1-based line numbers. Every listed n-gram's context must
    itself be listed at order n-1.
    """
    lines = text.splitlines()
    i = 0

    def skip_blank():
        nonlocal i
        while i < len(lines) and not lines[i].strip():
            i += 1

    skip_blank()
    if i >= len(lines) or lines[i].strip() != "\\data\\":
        raise ArpaFormatError(f"line {i + 1}: expected \\data\\ header")
    i += 1
    counts = {}
    while i < len(lines) and lines[i].strip():
        line = lines[i].strip()
        if not line.startswith("ngram "):
            raise ArpaFormatError(f"line {i + 1}: expected 'ngram N=count', got {line!r}")
        try:
            order_s, count_s = line[len("ngram "):].split("=")
            counts[int(order_s)] = int(count_s)
        except ValueError as e:
            raise ArpaFormatError(f"line {i + 1}: malformed count line ({e})") from e
        i += 1
    if not counts:
        raise ArpaFormatError(f"line {i + 1}: no ngram counts in \\data\\ section")
    order = max(counts)

    probs: dict[tuple, float] = {}
    backoffs: dict[tuple, float] = {}
    seen_sections = set()
    skip_blank()
    while i < len(lines) and lines[i].strip() != "\\end\\":
        header = lines[i].strip()
        if not (header.endswith("-grams:") and header.startswith("\\")):
            raise ArpaFormatError(f"line {i + 1}: expected \\N-grams: section, got {header!r}")
        try:
            n = int(header[1:].split("-")[0])
        except ValueError as e:
            raise ArpaFormatError(f"line {i + 1}: malformed section header ({e})") from e
        if n not in counts:
            raise ArpaFormatError(f"line {i + 1}: section order {n} not declared in \\data\\")
        seen_sections.add(n)
        header_line = i + 1
        i += 1
        n_entries = 0
        while i < len(lines) and lines[i].strip() and not lines[i].strip().startswith("\\"):
            fields = lines[i].split()
            if len(fields) not in (n + 1, n + 2):
                raise ArpaFormatError(
                    f"line {i + 1}: expected {n + 1} or {n + 2} fields for a {n}-gram"
                )
            try:
                lp = float(fields[0])
            except ValueError as e:
                raise ArpaFormatError(f"line {i + 1}: bad log-probability ({e})") from e
            if lp > 0:
                raise ArpaFormatError(f"line {i + 1}: log10 probability {lp} > 0")
            ngram = tuple(fields[1 : n + 1])
            if ngram in probs:
                raise ArpaFormatError(f"line {i + 1}: duplicate {n}-gram {' '.join(ngram)!r}")
            probs[ngram] = lp
            if len(fields) == n + 2:
                try:
                    backoffs[ngram] = float(fields[n + 1])
                except ValueError as e:
                    raise ArpaFormatError(f"line {i + 1}: bad backoff weight ({e})") from e
            n_entries += 1
            i += 1
        if n_entries != counts[n]:
            raise ArpaFormatError(
                f"line {header_line}: section declares {counts[n]} {n}-grams, found {n_entries}"
            )
        skip_blank()
    if i >= len(lines):
        raise ArpaFormatError(f"line {len(lines)}: missing \\end\\")
    for n in counts:
        if counts[n] and n not in seen_sections:
            raise ArpaFormatError(f"line {i + 1}: declared {n}-gram section missing")

    for ngram in probs:
        if len(ngram) >= 2 and ngram[:-1] not in probs:
            raise ArpaFormatError(
                f"n-gram {' '.join(ngram)!r} has no context entry {' '.join(ngram[:-1])!r}"
            )

    vocab = {ng[0] for ng in probs if len(ng) == 1}
    return NGramLM(order, probs, backoffs, vocab)


def load_arpa_file(path) -> NGramLM:
    with open(path, encoding="utf-8") as f:
        return arpa_load(f.read())


def _backoff_logprob(lm: NGramLM, context: tuple, word: str) -> float:
    ngram = context + (word,)
    if ngram in lm.probs:
        return lm.probs[ngram]
    if not context:
        return lm.probs[(word,)]  # words are pre-mapped into the vocabulary
    return lm.backoffs.get(context, 0.0) + _backoff_logprob(lm, context[1:], word)


def cond_logprob(lm: NGramLM, context, word: str) -> float:
    """log10 P(word | context) with Katz-style backoff; context is prior words."""
    word = lm.map_word(word)
    context = tuple(lm.map_word(w) if w not in (BOS, EOS) else w for w in context)
    if lm.order > 1:
        context = context[-(lm.order - 1):]
    else:
        context = ()
    return _backoff_logprob(lm, context, word)


def lm_logprob(lm: NGramLM, words, include_eos: bool = False) -> float:
    """log10 probability of a word sequence, context starting at <s>."""
    context = (BOS,)
    total = 0.0
    for w in words:
        total += cond_logprob(lm, context, w)
        context = context + (lm.map_word(w),)
    if include_eos:
        total += cond_logprob(lm, context, EOS)
    return total


# ---------------------------------------------------------------------------
# Fused beam search
# ---------------------------------------------------------------------------

@dataclass
class FusionWeights:
    lm_weight: float   # w1
    word_score: float  # w2


DECODE_PRESETS = {
    "1h": FusionWeights(3.09, -2.33),
    "10h": FusionWeights(2.12, -0.90),
    "100h": FusionWeights(2.15, -0.52),
}


def decode_preset(name: str) -> FusionWeights:
    try:
        return DECODE_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(DECODE_PRESETS)}") from None


@dataclass
class Hypothesis:
    text: str
    log_p_blank: float
    log_p_nonblank: float
    lm_log10: float      # accumulated over completed words
    n_words: int
    context: tuple       # LM context, starts at (<s>,)
    partial: str         # word in progress
    fused_score: float = 0.0


def _word_units(text: str) -> int:
    return sum(1 for w in text.split(" ") if w)


def beam_search_fused(logp: np.ndarray, lm: NGramLM | None, weights: FusionWeights,
                      beam_width: int, vocab: str, count_words: bool = True):
    """Character-level prefix beam search maximizing the fused objective.

    `vocab` maps class id c >= 1 to vocab[c-1]; blank is class 0. The LM and
    the word bonus apply when a word completes (space emitted, or at sequence
    end for a trailing partial word). With count_words=False the w2 term
    counts characters instead. Returns (text, fused score).
    """
    logp = check_logprob_matrix(logp)
    n_frames, n_classes = logp.shape
    if len(vocab) != n_classes - 1:
        raise ValueError(f"vocab of {len(vocab)} chars does not match {n_classes - 1} classes")
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    w1, w2 = weights.lm_weight, weights.word_score

    def word_lp(context, word):
        if lm is None:
            return 0.0, context
        lp = cond_logprob(lm, context, word)
        new_context = context + (lm.map_word(word),)
        if lm.order > 1:
            new_context = new_context[-(lm.order - 1):]
        return lp, new_context

    def finish_score(hyp: Hypothesis) -> float:
        ctc = np.logaddexp(hyp.log_p_blank, hyp.log_p_nonblank)
        lm_total = hyp.lm_log10
        units = hyp.n_words
        if hyp.partial:
            lm_total += word_lp(hyp.context, hyp.partial)[0]
            units += 1
        if not count_words:
            units = len(hyp.text)
        return float(ctc + w1 * LN10 * lm_total + w2 * units)

    beam = {(): Hypothesis("", 0.0, -np.inf, 0.0, 0, (BOS,), "")}
    for t in range(n_frames):
        new_beam: dict[tuple, Hypothesis] = {}

        def bump(prefix, hyp_template, blank_add=None, nonblank_add=None):
            h = new_beam.get(prefix)
            if h is None:
                h = Hypothesis(hyp_template.text, -np.inf, -np.inf,
                               hyp_template.lm_log10, hyp_template.n_words,
                               hyp_template.context, hyp_template.partial)
                new_beam[prefix] = h
            if blank_add is not None:
                h.log_p_blank = np.logaddexp(h.log_p_blank, blank_add)
            if nonblank_add is not None:
                h.log_p_nonblank = np.logaddexp(h.log_p_nonblank, nonblank_add)

        for prefix, hyp in beam.items():
            total = np.logaddexp(hyp.log_p_blank, hyp.log_p_nonblank)
            # blank keeps the prefix
            bump(prefix, hyp, blank_add=total + logp[t, BLANK])
            last = prefix[-1] if prefix else None
            for c in range(1, n_classes):
                char = vocab[c - 1]
                if c == last:
                    # repeat without blank merges into the same prefix
                    bump(prefix, hyp, nonblank_add=hyp.log_p_nonblank + logp[t, c])
                    src = hyp.log_p_blank
                else:
                    src = total
                if src == -np.inf:
                    continue
                ext = prefix + (c,)
                child = new_beam.get(ext)
                if child is None:
                    if char == " ":
                        if hyp.partial:
                            lp, ctx = word_lp(hyp.context, hyp.partial)
                            child = Hypothesis(hyp.text + char, -np.inf, -np.inf,
                                               hyp.lm_log10 + lp, hyp.n_words + 1, ctx, "")
                        else:
                            child = Hypothesis(hyp.text + char, -np.inf, -np.inf,
                                               hyp.lm_log10, hyp.n_words, hyp.context, "")
                    else:
                        child = Hypothesis(hyp.text + char, -np.inf, -np.inf,
                                           hyp.lm_log10, hyp.n_words, hyp.context,
                                           hyp.partial + char)
                    new_beam[ext] = child
                child.log_p_nonblank = np.logaddexp(child.log_p_nonblank, src + logp[t, c])

        for hyp in new_beam.values():
            hyp.fused_score = finish_score(hyp)
        ranked = sorted(new_beam.items(), key=lambda kv: (-kv[1].fused_score, kv[0]))
        beam = dict(ranked[:beam_width])

    best_prefix, best = max(beam.items(), key=lambda kv: (kv[1].fused_score, kv[0]))
    return best.text, best.fused_score
