"""K-means codebooks over pooled feature frames and frame-to-code assignment.

Fitting is plain Lloyd with k-means++ seeding, squared Euclidean metric, no
whitening. Everything is deterministic given the seed; refitting with the
same seed and input order is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import binio

CODEBOOK_MAGIC = b"ACB1"
CODEBOOK_VERSION = 1


@dataclass
class KMeansConfig:
    k: int = 100
    max_iters: int = 100
    seed: int = 0
    rel_tol: float = 1e-6
    sample_cap: int = 500_000  # pooled frames beyond this are subsampled before fitting

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k={self.k} must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")


@dataclass
class Codebook:
    centroids: np.ndarray
    train_inertia: float
    inertia_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise ValueError("centroids must be 2-D")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids contain non-finite values")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class CodeSequence:
    utt_id: str
    codes: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 1:
            raise ValueError("codes must be 1-D")

    def __len__(self):
        return self.codes.size


def _pairwise_sq_dist(points: np.ndarray, centroids: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Exact squared distances (n, k), computed from explicit differences.

    The expanded ||x||^2 - 2x.c + ||c||^2 form rounds differently per centroid
    and can break exact distance ties, so we keep the direct form and chunk it.
    """
    n = points.shape[0]
    out = np.empty((n, centroids.shape[0]))
    for start in range(0, n, chunk):
        block = points[start : start + chunk]
        diff = block[:, None, :] - centroids[None, :, :]
        out[start : start + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp_init(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = frames.shape[0]
    centroids = np.empty((k, frames.shape[1]))
    centroids[0] = frames[rng.integers(n)]
    closest = _pairwise_sq_dist(frames, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:  # all remaining points coincide with chosen centroids
            idx = rng.integers(n)
        centroids[j] = frames[idx]
        d = _pairwise_sq_dist(frames, centroids[j : j + 1])[:, 0]
        np.minimum(closest, d, out=closest)
    return centroids


def kmeans_fit(frames: np.ndarray, config: KMeansConfig) -> Codebook:
    """Fit a k-means codebook with k-means++ init and Lloyd iterations.

    Stops at max_iters or when the relative inertia improvement drops below
    rel_tol. Inertia is checked to be non-increasing every iteration; an
    empty cluster is re-seeded to the point farthest from its own centroid.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("frames must be a 2-D matrix of pooled feature rows")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames contain non-finite values")
    if frames.shape[0] < config.k:
        raise ValueError(f"{frames.shape[0]} frames < k={config.k}")

    rng = np.random.default_rng(config.seed)
    if frames.shape[0] > config.sample_cap:
        keep = rng.choice(frames.shape[0], size=config.sample_cap, replace=False)
        keep.sort()
        frames = frames[keep]

    centroids = _kmeans_pp_init(frames, config.k, rng)
    trace = []
    prev = np.inf
    for _ in range(config.max_iters):
        d2 = _pairwise_sq_dist(frames, centroids)
        assign_idx = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        inertia = float(d2[np.arange(frames.shape[0]), assign_idx].sum())
        if trace and inertia > trace[-1] + 1e-9 * max(1.0, trace[-1]):
            raise RuntimeError(f"Lloyd inertia increased: {trace[-1]} -> {inertia}")
        trace.append(inertia)

        if np.isfinite(prev) and prev > 0 and (prev - inertia) / prev < config.rel_tol:
            break
        prev = inertia

        new_centroids = np.empty_like(centroids)
        counts = np.bincount(assign_idx, minlength=config.k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign_idx, frames)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            dist_to_own = d2[np.arange(frames.shape[0]), assign_idx].copy()
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(dist_to_own))
                new_centroids[j] = frames[far]
                dist_to_own[far] = -1.0  # each re-seed takes a distinct point
        centroids = new_centroids

    return Codebook(centroids, train_inertia=trace[-1], inertia_trace=trace)


def assign(codebook: Codebook, features) -> CodeSequence:
    """Map each frame to its nearest centroid (squared Euclidean, ties to lowest index)."""
    frames = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    utt_id = getattr(features, "utt_id", "")
    if frames.shape[1] != codebook.feature_dim:
        raise ValueError(
            f"feature dim {frames.shape[1]} does not match codebook dim {codebook.feature_dim}"
        )
    codes = np.argmin(_pairwise_sq_dist(frames, codebook.centroids), axis=1)
    return CodeSequence(utt_id, codes)


def save_codebook(path, codebook: Codebook) -> None:
    binio.write_arrays(
        path,
        CODEBOOK_MAGIC,
        CODEBOOK_VERSION,
        meta={"k": codebook.k, "feature_dim": codebook.feature_dim,
              "train_inertia": codebook.train_inertia},
        arrays={"centroids": codebook.centroids},
    )


def load_codebook(path) -> Codebook:
    meta, arrays = binio.read_arrays(path, CODEBOOK_MAGIC, CODEBOOK_VERSION)
    return Codebook(arrays["centroids"], train_inertia=meta["train_inertia"])


# ---------------------------------------------------------------------------
# Line-oriented text format shared by code sequences and frame labels:
#   utt_id<TAB>c1 c2 c3 ...
# ---------------------------------------------------------------------------

def save_code_sequences(path, sequences) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            f.write(seq.utt_id)
            f.write("\t")
            f.write(" ".join(str(int(c)) for c in seq.codes))
            f.write("\n")


def load_code_sequences(path) -> list[CodeSequence]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected utt_id<TAB>codes")
            utt_id, body = line.split("\t", 1)
            try:
                codes = [int(tok) for tok in body.split()]
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: non-integer code ({e})") from e
            out.append(CodeSequence(utt_id, codes))
    return out
