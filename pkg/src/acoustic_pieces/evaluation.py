"""Segmentation quality against golden phone alignments, plus code-sharing stats.

Boundary matching is greedy one-to-one in ascending order within a frame
tolerance; with both sides sorted this greedy matching is maximum, so pooled
precision/recall/F1 are well defined. The "shared code" statistic treats a
code type as shared when it occurs in at least two occurrences of the same
phone; that definition is isolated in `_shared_code_types` so it can be
swapped out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AlignmentTier:
    """Golden phone intervals (label, start_frame, end_frame), tiling [0, T)."""

    utt_id: str
    intervals: list

    def __post_init__(self):
        ivs = [(str(p), int(s), int(e)) for p, s, e in self.intervals]
        pos = 0
        for p, s, e in ivs:
            if not p:
                raise ValueError(f"{self.utt_id}: empty phone label at frame {s}")
            if s != pos or e <= s:
                raise ValueError(f"{self.utt_id}: intervals do not tile at frame {pos}")
            pos = e
        if not ivs:
            raise ValueError(f"{self.utt_id}: no intervals")
        self.intervals = ivs

    @property
    def num_frames(self) -> int:
        return self.intervals[-1][2]

    def boundaries(self) -> list[int]:
        """Interior golden boundaries (interval starts except frame 0)."""
        return [s for _, s, _ in self.intervals[1:]]

    def frame_labels(self) -> list[str]:
        out = []
        for p, s, e in self.intervals:
            out.extend([p] * (e - s))
        return out


@dataclass
class BoundaryMetrics:
    precision: float
    recall: float
    f1: float
    tolerance_frames: int
    matches: int = 0
    predicted: int = 0
    golden: int = 0


@dataclass
class SharingReport:
    """Per-phone mean sharing percentage; phones with < 2 occurrences get score None."""

    records: list  # (phone, occurrence count, score in [0,1] or None), sorted by score desc
    mean_over_phones: float  # over phones with a defined score; nan if none


def label_boundaries(labels) -> list[int]:
    """Interior label-change points: t in [1, T) with labels[t] != labels[t-1]."""
    seq = list(getattr(labels, "labels", labels))
    if len(seq) == 0:
        raise ValueError("empty label sequence")
    return [t for t in range(1, len(seq)) if seq[t] != seq[t - 1]]


def _check_sorted(name, values):
    vals = list(values)
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"{name} boundaries must be sorted strictly ascending")
    return vals


def match_boundaries(predicted, golden, tolerance_frames: int) -> int:
    """Greedy ascending one-to-one matches within +/- tolerance_frames.

    Each predicted boundary takes the earliest unmatched golden boundary in
    range; for sorted inputs this greedy choice attains the maximum matching.
    """
    pred = _check_sorted("predicted", predicted)
    gold = _check_sorted("golden", golden)
    matches = 0
    j = 0
    for p in pred:
        while j < len(gold) and gold[j] < p - tolerance_frames:
            j += 1
        if j < len(gold) and gold[j] <= p + tolerance_frames:
            matches += 1
            j += 1
    return matches


def _prf(matches: int, n_pred: int, n_gold: int, tolerance_frames: int) -> BoundaryMetrics:
    precision = matches / n_pred if n_pred else 0.0
    recall = matches / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return BoundaryMetrics(precision, recall, f1, tolerance_frames,
                           matches=matches, predicted=n_pred, golden=n_gold)


def boundary_prf(predicted, golden, tolerance_frames: int) -> BoundaryMetrics:
    pred = list(predicted)
    gold = list(golden)
    m = match_boundaries(pred, gold, tolerance_frames)
    return _prf(m, len(pred), len(gold), tolerance_frames)


def corpus_boundary_prf(pairs, tolerance_frames: int) -> BoundaryMetrics:
    """Pool match/predicted/golden counts over (predicted, golden) pairs, then divide."""
    matches = n_pred = n_gold = 0
    for predicted, golden in pairs:
        pred = list(predicted)
        gold = list(golden)
        matches += match_boundaries(pred, gold, tolerance_frames)
        n_pred += len(pred)
        n_gold += len(gold)
    return _prf(matches, n_pred, n_gold, tolerance_frames)


def _shared_code_types(occurrence_codes) -> set:
    """Code types present in at least two distinct occurrences of a phone."""
    seen = {}
    for codes in occurrence_codes:
        for c in set(codes):
            seen[c] = seen.get(c, 0) + 1
    return {c for c, n in seen.items() if n >= 2}


def sharing_percentage(corpus, alignments) -> SharingReport:
    """Mean fraction of frames per phone occurrence whose code type recurs elsewhere.

    `corpus` is an iterable of CodeSequence, `alignments` of AlignmentTier,
    matched by utt_id. Alignments must fit inside their code sequences and
    share the frame rate.
    """
    codes_by_utt = {cs.utt_id: np.asarray(cs.codes) for cs in corpus}
    occurrences: dict[str, list] = {}
    for tier in alignments:
        if tier.utt_id not in codes_by_utt:
            raise ValueError(f"no code sequence for utterance {tier.utt_id!r}")
        codes = codes_by_utt[tier.utt_id]
        if tier.num_frames > codes.size:
            raise ValueError(
                f"{tier.utt_id}: alignment covers {tier.num_frames} frames "
                f"but codes have {codes.size}"
            )
        for phone, start, end in tier.intervals:
            occurrences.setdefault(phone, []).append([int(c) for c in codes[start:end]])

    records = []
    defined = []
    for phone in sorted(occurrences):
        occs = occurrences[phone]
        if len(occs) < 2:
            records.append((phone, len(occs), None))
            continue
        shared = _shared_code_types(occs)
        pcts = [sum(1 for c in occ if c in shared) / len(occ) for occ in occs]
        score = float(np.mean(pcts))
        records.append((phone, len(occs), score))
        defined.append(score)

    records.sort(key=lambda r: (-(r[2] if r[2] is not None else -1.0), r[0]))
    mean = float(np.mean(defined)) if defined else float("nan")
    return SharingReport(records, mean)


# ---------------------------------------------------------------------------
# Alignment TSV: utt_id<TAB>phone<TAB>start_frame<TAB>end_frame, sorted
# ---------------------------------------------------------------------------

def save_alignments(path, tiers) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tier in tiers:
            for phone, start, end in tier.intervals:
                f.write(f"{tier.utt_id}\t{phone}\t{start}\t{end}\n")


def load_alignments(path) -> list[AlignmentTier]:
    rows: dict[str, list] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            utt_id, phone, start, end = parts
            try:
                rows.setdefault(utt_id, []).append((phone, int(start), int(end)))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: bad frame index ({e})") from e
    return [AlignmentTier(utt_id, ivs) for utt_id, ivs in rows.items()]
