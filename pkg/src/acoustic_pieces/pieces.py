"""Merge frequent code patterns into pieces and remap them to frame labels.

Training is greedy pair merging over the code streams: count all adjacent
pairs (overlapping occurrences included, so a run "x x x" contributes 2 to
the pair (x, x)), merge the most frequent pair, repeat. Codes keep their
frame repetitions; repeats carry duration, so no run-length collapsing
happens anywhere. Pairs never span utterance boundaries.

Encoding replays the learned merges in rank order on a fresh sequence, and
the frame remap gives every frame the id of the piece covering it, so label
sequences keep their original length.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .quantizer import CodeSequence

VOCAB_VERSION = 1


@dataclass
class ApConfig:
    vocab_size: int = 1000
    base_alphabet: int = 100
    min_pair_freq: int = 2
    seed: int = 0  # reserved; training is fully deterministic without it

    def __post_init__(self):
        if self.base_alphabet < 1:
            raise ValueError("base_alphabet must be >= 1")
        if self.vocab_size < self.base_alphabet:
            raise ValueError(
                f"vocab_size={self.vocab_size} must be >= base_alphabet={self.base_alphabet}"
            )
        if self.min_pair_freq < 1:
            raise ValueError("min_pair_freq must be >= 1")


@dataclass
class PieceVocab:
    """Piece inventory: singleton base codes first, then one piece per merge."""

    base_alphabet: int
    merges: list  # list of (left piece id, right piece id), rank = position

    def __post_init__(self):
        self.merges = [tuple(int(x) for x in m) for m in self.merges]
        expansions = [(i,) for i in range(self.base_alphabet)]
        seen = {exp: i for i, exp in enumerate(expansions)}
        for rank, (left, right) in enumerate(self.merges):
            pid = self.base_alphabet + rank
            if not (0 <= left < pid and 0 <= right < pid):
                raise ValueError(f"merge {rank} ({left},{right}) references piece >= {pid}")
            exp = expansions[left] + expansions[right]
            if exp in seen:
                raise ValueError(f"merge {rank} duplicates expansion of piece {seen[exp]}")
            seen[exp] = pid
            expansions.append(exp)
        self._expansions = expansions

    @property
    def size(self) -> int:
        return self.base_alphabet + len(self.merges)

    def expansion(self, piece_id: int) -> tuple:
        """Recursive expansion of a piece down to base codes."""
        return self._expansions[piece_id]


@dataclass
class Segmentation:
    utt_id: str
    spans: list  # (piece id, start frame, end frame exclusive), tiling [0, T)

    @property
    def num_frames(self) -> int:
        return self.spans[-1][2] if self.spans else 0


@dataclass
class FrameLabelSequence:
    utt_id: str
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError("labels must be 1-D")

    def __len__(self):
        return self.labels.size


def _check_codes(codes, base_alphabet):
    arr = np.asarray(codes, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= base_alphabet):
        bad = arr[(arr < 0) | (arr >= base_alphabet)][0]
        raise ValueError(f"code {bad} outside base alphabet [0, {base_alphabet})")
    return arr


def _merge_greedy(seq: list, pair: tuple, new_id: int) -> list:
    """Replace occurrences of pair greedily left-to-right; 'x x x' -> '[xx] x'."""
    out = []
    i = 0
    n = len(seq)
    left, right = pair
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_bpe(corpus, config: ApConfig) -> PieceVocab:
    """Learn a piece vocabulary by iterative pair merging.

    Pair counts are summed over all utterances (order-independent), the most
    frequent pair wins each round, and ties go to the lexicographically
    smallest (left id, right id). Stops at vocab_size or when the best pair
    count falls below min_pair_freq.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    seqs = []
    for cs in corpus:
        codes = _check_codes(cs.codes if isinstance(cs, CodeSequence) else cs,
                             config.base_alphabet)
        seqs.append([int(c) for c in codes])

    pair_counts = Counter()
    pair_seqs: dict[tuple, set] = {}
    seq_counts = []
    for i, seq in enumerate(seqs):
        c = Counter(zip(seq, seq[1:]))
        seq_counts.append(c)
        pair_counts.update(c)
        for p in c:
            pair_seqs.setdefault(p, set()).add(i)

    merges = []
    while config.base_alphabet + len(merges) < config.vocab_size and pair_counts:
        best_count = max(pair_counts.values())
        if best_count < config.min_pair_freq:
            break
        best_pair = min(p for p, c in pair_counts.items() if c == best_count)
        new_id = config.base_alphabet + len(merges)
        merges.append(best_pair)

        for i in sorted(pair_seqs.get(best_pair, ())):
            old = seq_counts[i]
            seqs[i] = _merge_greedy(seqs[i], best_pair, new_id)
            new = Counter(zip(seqs[i], seqs[i][1:]))
            seq_counts[i] = new
            for p in old.keys() | new.keys():
                delta = new.get(p, 0) - old.get(p, 0)
                if delta:
                    pair_counts[p] += delta
                    if pair_counts[p] <= 0:
                        del pair_counts[p]
                if new.get(p, 0):
                    pair_seqs.setdefault(p, set()).add(i)
                elif p in pair_seqs:
                    pair_seqs[p].discard(i)
        pair_seqs.pop(best_pair, None)

    return PieceVocab(config.base_alphabet, merges)


def encode(vocab: PieceVocab, codes) -> Segmentation:
    """Segment a code sequence by replaying merges in rank order, greedily left-to-right.

    Equivalent to applying every merge in rank order: each application only
    creates ids that participate in later-ranked merges, so repeatedly
    applying the lowest-ranked pair present gives the same result.
    """
    utt_id = getattr(codes, "utt_id", "")
    arr = _check_codes(getattr(codes, "codes", codes), vocab.base_alphabet)
    ids = [int(c) for c in arr]
    extents = [(t, t + 1) for t in range(len(ids))]
    rank_of = {pair: r for r, pair in enumerate(vocab.merges)}

    while len(ids) >= 2:
        best_rank = None
        for pair in zip(ids, ids[1:]):
            r = rank_of.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
        if best_rank is None:
            break
        left, right = vocab.merges[best_rank]
        new_id = vocab.base_alphabet + best_rank
        out_ids, out_ext = [], []
        i = 0
        while i < len(ids):
            if i + 1 < len(ids) and ids[i] == left and ids[i + 1] == right:
                out_ids.append(new_id)
                out_ext.append((extents[i][0], extents[i + 1][1]))
                i += 2
            else:
                out_ids.append(ids[i])
                out_ext.append(extents[i])
                i += 1
        ids, extents = out_ids, out_ext

    spans = [(pid, start, end) for pid, (start, end) in zip(ids, extents)]
    expanded = tuple(c for pid, _, _ in spans for c in vocab.expansion(pid))
    if expanded != tuple(int(c) for c in arr):
        raise RuntimeError("segmentation does not expand back to the input codes")
    return Segmentation(utt_id, spans)


def remap_frames(seg: Segmentation) -> FrameLabelSequence:
    """Frame-level piece labels: labels[t] = id of the span covering frame t."""
    labels = []
    pos = 0
    for pid, start, end in seg.spans:
        if start != pos or end <= start:
            raise ValueError(f"spans do not tile contiguously at frame {pos}")
        labels.extend([pid] * (end - start))
        pos = end
    return FrameLabelSequence(seg.utt_id, labels)


def save_vocab(path, vocab: PieceVocab) -> None:
    doc = {
        "version": VOCAB_VERSION,
        "base_alphabet": vocab.base_alphabet,
        "merges": [list(m) for m in vocab.merges],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def load_vocab(path) -> PieceVocab:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != VOCAB_VERSION:
        raise ValueError(f"{path}: unknown vocab version {doc.get('version')!r}")
    return PieceVocab(int(doc["base_alphabet"]), doc["merges"])
