"""Toy transformer encoder trained by masked prediction on frame labels.

Two pre-norm blocks by default, 64-dim states, and a gated relative position
bias shared by all layers: each attention logit gets an additive per-head
bias indexed by a symmetric log-spaced bucket of the query/key offset,
scaled by sigmoid(q . u_head). Everything runs in float64 through the
autodiff engine so analytic gradients can be checked against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import binio, decode
from .autodiff import (Tensor, add, backward, gelu, log_softmax, matmul, mul,
                       powc, reshape, sigmoid, softmax, take, take_pairs,
                       tmean, transpose, tsum)

CHECKPOINT_MAGIC = b"APR1"
CHECKPOINT_VERSION = 1

PEAK_LR = 5e-4
WARMUP_FRAC = 0.08


@dataclass
class ProbeConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    rel_pos_buckets: int = 32
    max_rel_distance: int = 128
    label_vocab: int = 100
    feature_dim: int = 39
    mask_start_prob: float = 0.08
    mask_span: int = 10
    layerdrop: float = 0.05        # fine-tuning only
    channel_mask_prob: float = 0.05  # fine-tuning only; span is model_dim // 4
    ctc_vocab: int = 0             # characters excluding blank; 0 = no CTC head yet
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim={self.model_dim} not divisible by heads={self.heads}")
        for name in ("mask_start_prob", "layerdrop", "channel_mask_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.rel_pos_buckets < 2:
            raise ValueError("rel_pos_buckets must be >= 2")
        if self.max_rel_distance - 1 <= self.rel_pos_buckets // 2:
            raise ValueError("max_rel_distance must exceed rel_pos_buckets // 2 + 1")
        if self.label_vocab < 1 or self.feature_dim < 1:
            raise ValueError("label_vocab and feature_dim must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def channel_mask_span(self) -> int:
        return max(1, self.model_dim // 4)


@dataclass
class ProbeParams:
    config: ProbeConfig
    tensors: dict  # name -> Tensor(requires_grad=True)

    def named(self):
        return self.tensors.items()

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


@dataclass
class MaskSpec:
    utt_id: str
    masked: np.ndarray   # sorted frame indices
    span_starts: np.ndarray

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=np.int64)
        self.span_starts = np.asarray(self.span_starts, dtype=np.int64)

    def __len__(self):
        return self.masked.size


@dataclass
class TrainState:
    total_steps: int
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    peak_lr: float = PEAK_LR


def lr_schedule(step: float, total_steps: int, peak: float = PEAK_LR,
                warmup_frac: float = WARMUP_FRAC) -> float:
    """Linear warmup to `peak` over the first warmup_frac of steps, then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    w = warmup_frac * total_steps
    if step <= w:
        return peak * step / w
    return peak * (total_steps - step) / (total_steps - w)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _gauss(rng, shape, fan_in):
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def build_probe(config: ProbeConfig, seed: int) -> ProbeParams:
    """Deterministic init: gaussian weights scaled 1/sqrt(fan_in); biases and bias table zero."""
    rng = np.random.default_rng(seed)
    d, f, h = config.model_dim, config.ffn_dim, config.heads
    dh = config.head_dim
    t: dict[str, np.ndarray] = {
        "in_proj.w": _gauss(rng, (config.feature_dim, d), config.feature_dim),
        "in_proj.b": np.zeros(d),
        "mask_emb": _gauss(rng, (d,), d),
    }
    for i in range(config.layers):
        pre = f"layers.{i}."
        t[pre + "ln1.g"] = np.ones(d)
        t[pre + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            t[pre + "attn." + name] = _gauss(rng, (d, d), d)
        for name in ("bq", "bk", "bv", "bo"):
            t[pre + "attn." + name] = np.zeros(d)
        t[pre + "ln2.g"] = np.ones(d)
        t[pre + "ln2.b"] = np.zeros(d)
        t[pre + "ffn.w1"] = _gauss(rng, (d, f), d)
        t[pre + "ffn.b1"] = np.zeros(f)
        t[pre + "ffn.w2"] = _gauss(rng, (f, d), f)
        t[pre + "ffn.b2"] = np.zeros(d)
    t["rel.table"] = np.zeros((config.rel_pos_buckets, h))  # shared by all layers
    t["rel.gate"] = _gauss(rng, (h, dh), dh)
    t["head.w"] = _gauss(rng, (d, config.label_vocab), d)
    t["head.b"] = np.zeros(config.label_vocab)
    if config.ctc_vocab:
        t["ctc.w"] = _gauss(rng, (d, config.ctc_vocab + 1), d)
        t["ctc.b"] = np.zeros(config.ctc_vocab + 1)
    tensors = {k: Tensor(v, requires_grad=True) for k, v in t.items()}
    return ProbeParams(config, tensors)


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

def sample_spans(num_frames: int, config: ProbeConfig, rng) -> MaskSpec:
    """Each frame is independently a span start with mask_start_prob; spans may overlap."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    starts = np.flatnonzero(rng.random(num_frames) < config.mask_start_prob)
    masked = np.zeros(num_frames, dtype=bool)
    for s in starts:
        masked[s : s + config.mask_span] = True
    return MaskSpec("", np.flatnonzero(masked), starts)


def sample_channel_spans(config: ProbeConfig, rng) -> np.ndarray:
    """Channel indices to zero: starts chosen per channel, each covering the next span channels."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    starts = np.flatnonzero(rng.random(config.model_dim) < config.channel_mask_prob)
    zeroed = np.zeros(config.model_dim, dtype=bool)
    for s in starts:
        zeroed[s : s + config.channel_mask_span] = True
    return np.flatnonzero(zeroed)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def relative_buckets(num_frames: int, num_buckets: int, max_distance: int) -> np.ndarray:
    """Symmetric bucket(i - j) matrix: exact small offsets, log-spaced beyond."""
    delta = np.arange(num_frames)[:, None] - np.arange(num_frames)[None, :]
    ad = np.abs(delta)
    exact = num_buckets // 2
    large = np.minimum(ad, max_distance - 1)
    with np.errstate(divide="ignore"):
        scaled = exact + np.floor(
            np.log(np.maximum(large, 1) / exact)
            / np.log((max_distance - 1) / exact)
            * (num_buckets - exact)
        )
    buckets = np.where(ad < exact, ad, np.minimum(scaled, num_buckets - 1))
    return buckets.astype(np.int64)


def _layer_norm(x, gain, bias, eps=1e-5):
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = powc(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gain), bias)


def _heads(x, num_heads, head_dim):
    t_frames = x.shape[0]
    return transpose(reshape(x, (t_frames, num_heads, head_dim)), (1, 0, 2))


def _encode(params: ProbeParams, feats: np.ndarray, mask: MaskSpec | None = None,
            dropped_layers=(), channel_mask=None, gated: bool = True,
            attn_out: list | None = None, hidden_out: list | None = None) -> Tensor:
    cfg = params.config
    p = params.tensors
    t_frames = feats.shape[0]
    if feats.shape[1] != cfg.feature_dim:
        raise ValueError(f"feature dim {feats.shape[1]} != configured {cfg.feature_dim}")

    x = add(matmul(Tensor(feats), p["in_proj.w"]), p["in_proj.b"])
    if mask is not None and len(mask):
        ind = np.zeros((t_frames, 1))
        ind[mask.masked] = 1.0
        x = add(mul(x, 1.0 - ind), mul(reshape(p["mask_emb"], (1, cfg.model_dim)), ind))
    if channel_mask is not None and len(channel_mask):
        keep = np.ones((1, cfg.model_dim))
        keep[0, np.asarray(channel_mask)] = 0.0
        x = mul(x, keep)
    if hidden_out is not None:
        hidden_out.append(x)

    buckets = relative_buckets(t_frames, cfg.rel_pos_buckets, cfg.max_rel_distance)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    for i in range(cfg.layers):
        if i in dropped_layers:
            if hidden_out is not None:
                hidden_out.append(x)
            continue
        pre = f"layers.{i}."
        h = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = _heads(add(matmul(h, p[pre + "attn.wq"]), p[pre + "attn.bq"]), cfg.heads, cfg.head_dim)
        k = _heads(add(matmul(h, p[pre + "attn.wk"]), p[pre + "attn.bk"]), cfg.heads, cfg.head_dim)
        v = _heads(add(matmul(h, p[pre + "attn.wv"]), p[pre + "attn.bv"]), cfg.heads, cfg.head_dim)
        scores = mul(matmul(q, transpose(k, (0, 2, 1))), scale)

        bias = transpose(take(p["rel.table"], buckets), (2, 0, 1))  # (H, T, T)
        gate = sigmoid(matmul(q, reshape(p["rel.gate"], (cfg.heads, cfg.head_dim, 1))))
        scores = add(scores, mul(gate, bias) if gated else bias)

        attn = softmax(scores, axis=-1)
        if attn_out is not None:
            attn_out.append(attn.data)
        ctx = reshape(transpose(matmul(attn, v), (1, 0, 2)), (t_frames, cfg.model_dim))
        x = add(x, add(matmul(ctx, p[pre + "attn.wo"]), p[pre + "attn.bo"]))

        h2 = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = add(matmul(gelu(add(matmul(h2, p[pre + "ffn.w1"]), p[pre + "ffn.b1"])),
                       p[pre + "ffn.w2"]), p[pre + "ffn.b2"])
        x = add(x, f)
        if hidden_out is not None:
            hidden_out.append(x)
    return x


def forward(params: ProbeParams, features, mask: MaskSpec | None = None, *,
            head: str = "labels", dropped_layers=(), channel_mask=None,
            gated: bool = True, attn_out: list | None = None) -> Tensor:
    """Frame logits (T x label_vocab), or (T x ctc_vocab+1) with head="ctc"."""
    feats = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    x = _encode(params, feats, mask, dropped_layers, channel_mask, gated, attn_out)
    if head == "labels":
        return add(matmul(x, params.tensors["head.w"]), params.tensors["head.b"])
    if head == "ctc":
        if "ctc.w" not in params.tensors:
            raise ValueError("params have no CTC head; set ctc_vocab when building")
        return add(matmul(x, params.tensors["ctc.w"]), params.tensors["ctc.b"])
    raise ValueError(f"unknown head {head!r}")


def hidden_states(params: ProbeParams, features, layer: int) -> np.ndarray:
    """Layer output as a (T, model_dim) array; layer 0 is the post-projection input."""
    if not 0 <= layer <= params.config.layers:
        raise ValueError(f"layer {layer} out of range [0, {params.config.layers}]")
    feats = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    collected: list = []
    _encode(params, feats, hidden_out=collected)
    return collected[layer].data.copy()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_masked_ce(logits: Tensor, labels, mask: MaskSpec) -> Tensor:
    """Mean cross-entropy over masked frames only."""
    lab = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    if lab.shape[0] != logits.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels vs {logits.shape[0]} logit frames")
    if len(mask) == 0:
        raise ValueError("mask is empty; masked cross-entropy undefined")
    vocab = logits.shape[1]
    if lab.min() < 0 or lab.max() >= vocab:
        raise ValueError(f"label id outside [0, {vocab})")
    picked = take_pairs(log_softmax(logits, axis=-1), mask.masked, lab[mask.masked])
    return mul(tmean(picked), -1.0)


def ctc_loss_graph(logp: Tensor, target) -> Tensor:
    """CTC negative log-likelihood as a graph node (gradient via forward-backward)."""
    loss = decode.ctc_loss(logp.data, target)
    out = Tensor(loss, (logp,))

    def bw(g):
        from .autodiff import _accum
        _accum(logp, g * decode.ctc_grad(logp.data, target))

    out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _adam_step(params: ProbeParams, state: TrainState, lr: float,
               beta1=0.9, beta2=0.999, eps=1e-8):
    state.step += 1
    t = state.step
    for name, tensor in params.named():
        g = tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m += (1 - beta1) * (g - m)
        v += (1 - beta2) * (g * g - v)
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        tensor.data -= lr * mhat / (np.sqrt(vhat) + eps)


def pretrain(corpus, config: ProbeConfig, steps: int):
    """Masked-prediction training with Adam and the warmup/decay schedule.

    `corpus` is a list of (features, frame labels) pairs. Returns the trained
    params and a [(step, lr, loss)] trace; fully reproducible from config.seed.
    """
    pairs = [(np.asarray(getattr(f, "frames", f), dtype=np.float64),
              np.asarray(getattr(l, "labels", l), dtype=np.int64)) for f, l in corpus]
    if not pairs:
        raise ValueError("empty corpus")
    for _, lab in pairs:
        if lab.max() >= config.label_vocab:
            raise ValueError(f"label id {lab.max()} >= label_vocab {config.label_vocab}")
    params = build_probe(config, config.seed)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 11)))
    state = TrainState(total_steps=steps)
    trace = []
    for step in range(1, steps + 1):
        feats, labels = pairs[int(rng.integers(len(pairs)))]
        mask = sample_spans(feats.shape[0], config, rng)
        while len(mask) == 0:  # resample the rare empty draw
            mask = sample_spans(feats.shape[0], config, rng)
        logits = forward(params, feats, mask)
        loss = loss_masked_ce(logits, labels, mask)
        params.zero_grad()
        backward(loss)
        lr = lr_schedule(step, steps)
        trace.append((step, lr, float(loss.data)))
        _adam_step(params, state, lr)
    return params, trace


def finetune_ctc(params: ProbeParams, corpus, config: ProbeConfig, steps: int,
                 char_vocab: str):
    """CTC fine-tuning with span masking, channel masking, and LayerDrop.

    `corpus` is a list of (features, transcript string) pairs; characters are
    mapped to 1-based ids with 0 reserved for blank. Returns (params, trace).
    """
    char_to_id = {c: i + 1 for i, c in enumerate(char_vocab)}
    pairs = []
    for feats, text in corpus:
        arr = np.asarray(getattr(feats, "frames", feats), dtype=np.float64)
        try:
            target = [char_to_id[c] for c in text]
        except KeyError as e:
            raise ValueError(f"transcript char {e.args[0]!r} outside vocab {char_vocab!r}") from e
        pairs.append((arr, target))
    if not pairs:
        raise ValueError("empty corpus")

    if "ctc.w" not in params.tensors:
        rng0 = np.random.default_rng(np.random.SeedSequence((config.seed, 17)))
        d = config.model_dim
        params.tensors["ctc.w"] = Tensor(_gauss(rng0, (d, len(char_vocab) + 1), d),
                                         requires_grad=True)
        params.tensors["ctc.b"] = Tensor(np.zeros(len(char_vocab) + 1), requires_grad=True)

    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 23)))
    state = TrainState(total_steps=steps)
    trace = []
    for step in range(1, steps + 1):
        feats, target = pairs[int(rng.integers(len(pairs)))]
        mask = sample_spans(feats.shape[0], config, rng)
        channels = sample_channel_spans(config, rng)
        dropped = tuple(i for i in range(config.layers) if rng.random() < config.layerdrop)
        logits = forward(params, feats, mask if len(mask) else None,
                         head="ctc", dropped_layers=dropped,
                         channel_mask=channels if len(channels) else None)
        loss = ctc_loss_graph(log_softmax(logits, axis=-1), target)
        params.zero_grad()
        backward(loss)
        lr = lr_schedule(step, steps)
        trace.append((step, lr, float(loss.data)))
        _adam_step(params, state, lr)
    return params, trace


def masked_ce_over_corpus(params: ProbeParams, corpus, config: ProbeConfig,
                          mask_seed: int) -> float:
    """Average masked CE over a corpus with masks drawn from a fixed seed."""
    rng = np.random.default_rng(mask_seed)
    losses = []
    for feats, labels in corpus:
        arr = np.asarray(getattr(feats, "frames", feats), dtype=np.float64)
        mask = sample_spans(arr.shape[0], config, rng)
        while len(mask) == 0:
            mask = sample_spans(arr.shape[0], config, rng)
        logits = forward(params, arr, mask)
        losses.append(float(loss_masked_ce(logits, labels, mask).data))
    return float(np.mean(losses))


def save_trace_csv(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,lr,loss\n")
        for step, lr, loss in trace:
            f.write(f"{step},{lr:.10g},{loss:.10g}\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_probe(path, params: ProbeParams) -> None:
    cfg = params.config
    meta = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    binio.write_arrays(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta,
                       {name: t.data for name, t in params.named()})


def load_probe(path) -> ProbeParams:
    meta, arrays = binio.read_arrays(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config = ProbeConfig(**meta)
    tensors = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return ProbeParams(config, tensors)
