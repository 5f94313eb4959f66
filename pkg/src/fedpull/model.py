"""Tiny encoder-decoder transformer over named tensors, with hand-derived gradients.

Parameters live in float32 `NamedTensor`s so the exchange machinery sees every
weight; all forward/backward arithmetic runs in float64 for reproducibility and
so analytic gradients survive a strict finite-difference comparison.  Pre-norm
blocks, learned positional embeddings, GELU feed-forward, no dropout.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import BOS_ID, Corpus, EOS_ID, PAD_ID
from .tensors import NamedTensor, read_all_tensors, write_tensors

LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9

# Squareplus shape constant: act(x) = (x + sqrt(x^2 + b)) / 2, a smooth ReLU
# relaxation whose gradient is exact everywhere (finite-difference friendly).
_ACT_B = 1.0

Pair = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 44
    d_model: int = 32
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    d_ffn: int = 64
    max_len: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "enc_layers", "dec_layers", "d_ffn", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model not divisible by n_heads")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def header_fields(self) -> list[tuple[str, int]]:
        return [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
            ("seed", self.seed),
        ]


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The complete tensor name/shape inventory implied by a config."""
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "emb.tok": (v, d),
        "emb.pos": (cfg.max_len, d),
    }

    def block(prefix: str, cross: bool) -> None:
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{w}"] = (d, d)
        if cross:
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"{prefix}.xattn.{w}"] = (d, d)
        shapes[f"{prefix}.ffn.w1"] = (d, f)
        shapes[f"{prefix}.ffn.b1"] = (f,)
        shapes[f"{prefix}.ffn.w2"] = (f, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)
        n_ln = 3 if cross else 2
        for j in range(1, n_ln + 1):
            shapes[f"{prefix}.ln{j}.g"] = (d,)
            shapes[f"{prefix}.ln{j}.b"] = (d,)

    for i in range(cfg.enc_layers):
        block(f"enc.{i}", cross=False)
    for i in range(cfg.dec_layers):
        block(f"dec.{i}", cross=True)
    shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


@dataclass(frozen=True)
class ModelState:
    """Full set of named tensors of one model, keyed by name."""

    config: ModelConfig
    tensors: dict[str, NamedTensor]

    def __post_init__(self) -> None:
        expected = tensor_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, t in self.tensors.items():
            if t.name != name:
                raise ValueError(f"tensor keyed '{name}' carries name '{t.name}'")
            if t.shape != expected[name]:
                raise ValueError(
                    f"tensor '{name}': shape {t.shape}, expected {expected[name]}"
                )

    def names(self) -> list[str]:
        return sorted(self.tensors)

    @property
    def param_count(self) -> int:
        return sum(t.param_count for t in self.tensors.values())

    def arrays64(self) -> dict[str, np.ndarray]:
        return {name: self.tensors[name].as_float64() for name in self.names()}

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelState":
        tensors = {
            name: NamedTensor(name, tuple(a.shape), np.asarray(a, dtype=np.float32).reshape(-1))
            for name, a in arrays.items()
        }
        return cls(cfg, tensors)


def init_model(cfg: ModelConfig) -> ModelState:
    """Seeded initialization: Xavier-uniform matrices, zero offsets, unit gains.

    Draw order is lexicographic by tensor name, so identical configs yield
    bit-identical models.
    """
    rng = np.random.default_rng(cfg.seed)
    shapes = tensor_shapes(cfg)
    tensors = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            vals = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif name.endswith(".g"):
            vals = np.ones(shape, dtype=np.float32)
        else:
            vals = np.zeros(shape, dtype=np.float32)
        tensors[name] = NamedTensor(name, shape, vals.reshape(-1))
    return ModelState(cfg, tensors)


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    learning_rate: float
    step: int = 0
    m: dict[str, np.ndarray] | None = None
    v: dict[str, np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind '{self.kind}'")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.step < 0:
            raise ValueError("step must be non-negative")


def make_optimizer(kind: str = "adam", learning_rate: float = 1e-3) -> OptimizerState:
    return OptimizerState(kind=kind, learning_rate=learning_rate)


# ---------------------------------------------------------------------------
# Batch preparation
# ---------------------------------------------------------------------------


def _prep_batch(batch: Sequence[Pair], cfg: ModelConfig) -> dict:
    if len(batch) == 0:
        raise ValueError("empty batch")
    for pi, (src, tgt) in enumerate(batch):
        for side, seq, limit in (("source", src, cfg.max_len), ("target", tgt, cfg.max_len - 1)):
            if len(seq) > limit:
                raise ValueError(
                    f"pair {pi}: {side} length {len(seq)} exceeds limit {limit}"
                )
            for pos, tok in enumerate(seq):
                if not 0 <= tok < cfg.vocab_size:
                    raise ValueError(
                        f"token id {tok} out of range at pair {pi}, {side} position {pos}"
                    )
    B = len(batch)
    S = max(len(src) for src, _ in batch)
    T = max(len(tgt) for _, tgt in batch) + 1  # BOS prefix / EOS suffix
    src_ids = np.full((B, S), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((B, S), dtype=bool)
    dec_in = np.full((B, T), PAD_ID, dtype=np.int64)
    dec_mask = np.zeros((B, T), dtype=bool)
    labels = np.full((B, T), PAD_ID, dtype=np.int64)
    for b, (src, tgt) in enumerate(batch):
        src_ids[b, : len(src)] = src
        src_mask[b, : len(src)] = True
        dec_in[b, 0] = BOS_ID
        dec_in[b, 1 : len(tgt) + 1] = tgt
        dec_mask[b, : len(tgt) + 1] = True
        labels[b, : len(tgt)] = tgt
        labels[b, len(tgt)] = EOS_ID
    label_mask = labels != PAD_ID
    return {
        "src_ids": src_ids,
        "src_mask": src_mask,
        "dec_in": dec_in,
        "dec_mask": dec_mask,
        "labels": labels,
        "label_mask": label_mask,
    }


# ---------------------------------------------------------------------------
# Forward / backward primitives (float64 arrays)
# ---------------------------------------------------------------------------


def _additive_mask(keep: np.ndarray) -> np.ndarray:
    """Boolean keep-mask to additive form: 0 where kept, -inf where masked."""
    add = np.zeros(keep.shape, dtype=np.float64)
    add[~keep] = -np.inf
    return add


def _masked_softmax(scores: np.ndarray, add_mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; masked entries get weight 0, fully-masked rows all 0."""
    if scores.shape[-1] == 0:
        return np.zeros_like(scores)
    filled = scores + add_mask
    m = filled.max(axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    e = np.exp(filled - m)
    denom = e.sum(axis=-1, keepdims=True)
    denom[denom == 0.0] = 1.0
    return e / denom


def _ln_fwd(p, prefix, x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * p[prefix + ".g"] + p[prefix + ".b"], (prefix, xhat, inv)


def _norm_fwd(x):
    """Parameter-free standardization closing each pre-norm stack."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat, (xhat, inv)


def _norm_bwd(cache, d_out):
    xhat, inv = cache
    mean1 = d_out.mean(axis=-1, keepdims=True)
    mean2 = (d_out * xhat).mean(axis=-1, keepdims=True)
    return inv * (d_out - mean1 - xhat * mean2)


def _ln_bwd(p, grads, cache, d_out):
    prefix, xhat, inv = cache
    grads[prefix + ".g"] += (d_out * xhat).sum(axis=(0, 1))
    grads[prefix + ".b"] += d_out.sum(axis=(0, 1))
    d_xhat = d_out * p[prefix + ".g"]
    mean1 = d_xhat.mean(axis=-1, keepdims=True)
    mean2 = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (d_xhat - mean1 - xhat * mean2)


def _act(u):
    root = np.sqrt(u * u + _ACT_B)
    return 0.5 * (u + root), root


def _act_grad(u, root):
    return 0.5 * (1.0 + u / root)


def _attn_fwd(p, prefix, q_in, kv_in, add_mask, n_heads):
    B, Lq, d = q_in.shape
    Lk = kv_in.shape[1]
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    q = (q_in @ p[prefix + ".wq"]).reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    k = (kv_in @ p[prefix + ".wk"]).reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    v = (kv_in @ p[prefix + ".wv"]).reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    probs = _masked_softmax(scores, add_mask)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    out = ctx @ p[prefix + ".wo"]
    return out, (prefix, q_in, kv_in, q, k, v, probs, ctx, scale)


def _attn_bwd(p, grads, cache, d_out):
    prefix, q_in, kv_in, q, k, v, probs, ctx, scale = cache
    B, Lq, d = q_in.shape
    Lk = kv_in.shape[1]
    n_heads = q.shape[1]
    dh = d // n_heads

    grads[prefix + ".wo"] += ctx.reshape(-1, d).T @ d_out.reshape(-1, d)
    d_ctx = (d_out @ p[prefix + ".wo"].T).reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    d_probs = d_ctx @ v.transpose(0, 1, 3, 2)
    d_v = probs.transpose(0, 1, 3, 2) @ d_ctx
    d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
    d_scores *= scale
    d_q = (d_scores @ k).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    d_k = (d_scores.transpose(0, 1, 3, 2) @ q).transpose(0, 2, 1, 3).reshape(B, Lk, d)
    d_v = d_v.transpose(0, 2, 1, 3).reshape(B, Lk, d)

    grads[prefix + ".wq"] += q_in.reshape(-1, d).T @ d_q.reshape(-1, d)
    grads[prefix + ".wk"] += kv_in.reshape(-1, d).T @ d_k.reshape(-1, d)
    grads[prefix + ".wv"] += kv_in.reshape(-1, d).T @ d_v.reshape(-1, d)
    d_q_in = d_q @ p[prefix + ".wq"].T
    d_kv_in = d_k @ p[prefix + ".wk"].T + d_v @ p[prefix + ".wv"].T
    return d_q_in, d_kv_in


def _ffn_fwd(p, prefix, x):
    u = x @ p[prefix + ".w1"] + p[prefix + ".b1"]
    a, root = _act(u)
    out = a @ p[prefix + ".w2"] + p[prefix + ".b2"]
    return out, (prefix, x, u, root, a)


def _ffn_bwd(p, grads, cache, d_out):
    prefix, x, u, root, a = cache
    d = x.shape[-1]
    f = u.shape[-1]
    grads[prefix + ".w2"] += a.reshape(-1, f).T @ d_out.reshape(-1, d)
    grads[prefix + ".b2"] += d_out.sum(axis=(0, 1))
    d_a = d_out @ p[prefix + ".w2"].T
    d_u = d_a * _act_grad(u, root)
    grads[prefix + ".w1"] += x.reshape(-1, d).T @ d_u.reshape(-1, f)
    grads[prefix + ".b1"] += d_u.sum(axis=(0, 1))
    return d_u @ p[prefix + ".w1"].T


def _encoder_fwd(p, cfg, src_ids, src_mask):
    B, S = src_ids.shape
    x = p["emb.tok"][src_ids] + p["emb.pos"][:S]
    add = _additive_mask(src_mask)[:, None, None, :]
    caches = []
    for i in range(cfg.enc_layers):
        pre = f"enc.{i}"
        h, c1 = _ln_fwd(p, pre + ".ln1", x)
        a, ca = _attn_fwd(p, pre + ".attn", h, h, add, cfg.n_heads)
        x = x + a
        h, c2 = _ln_fwd(p, pre + ".ln2", x)
        f, cf = _ffn_fwd(p, pre + ".ffn", h)
        x = x + f
        caches.append((c1, ca, c2, cf))
    x, cn = _norm_fwd(x)
    caches.append(cn)
    return x, caches


def _decoder_fwd(p, cfg, dec_in, dec_mask, enc_out, src_mask):
    B, T = dec_in.shape
    y = p["emb.tok"][dec_in] + p["emb.pos"][:T]
    causal = np.tril(np.ones((T, T), dtype=bool))
    add_self = _additive_mask(dec_mask[:, None, None, :] & causal[None, None, :, :])
    add_cross = _additive_mask(src_mask)[:, None, None, :]
    caches = []
    for i in range(cfg.dec_layers):
        pre = f"dec.{i}"
        h, c1 = _ln_fwd(p, pre + ".ln1", y)
        a, ca = _attn_fwd(p, pre + ".attn", h, h, add_self, cfg.n_heads)
        y = y + a
        h, c2 = _ln_fwd(p, pre + ".ln2", y)
        a, cx = _attn_fwd(p, pre + ".xattn", h, enc_out, add_cross, cfg.n_heads)
        y = y + a
        h, c3 = _ln_fwd(p, pre + ".ln3", y)
        f, cf = _ffn_fwd(p, pre + ".ffn", h)
        y = y + f
        caches.append((c1, ca, c2, cx, c3, cf))
    y, cn = _norm_fwd(y)
    caches.append(cn)
    return y, caches


def _logits_fwd(p, cfg, arrays):
    enc_out, enc_caches = _encoder_fwd(p, cfg, arrays["src_ids"], arrays["src_mask"])
    dec_out, dec_caches = _decoder_fwd(
        p, cfg, arrays["dec_in"], arrays["dec_mask"], enc_out, arrays["src_mask"]
    )
    logits = dec_out @ p["out.w"] + p["out.b"]
    return logits, (enc_out, enc_caches, dec_out, dec_caches)


def _ce_loss(logits, labels, label_mask):
    n = int(label_mask.sum())
    if n == 0:
        raise ValueError("batch has no target tokens")
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    denom = ez.sum(axis=-1, keepdims=True)
    lse = np.log(denom[..., 0])
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    loss = float(((lse - picked) * label_mask).sum() / n)

    weight = label_mask / n
    d_logits = (ez / denom) * weight[..., None]
    idx = labels[..., None]
    np.put_along_axis(
        d_logits, idx, np.take_along_axis(d_logits, idx, axis=-1) - weight[..., None], axis=-1
    )
    return loss, d_logits


def _loss_and_grads(p: dict, cfg: ModelConfig, arrays: dict, grads: dict | None = None):
    logits, (enc_out, enc_caches, dec_out, dec_caches) = _logits_fwd(p, cfg, arrays)
    loss, d_logits = _ce_loss(logits, arrays["labels"], arrays["label_mask"])

    if grads is None:
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    d = cfg.d_model
    grads["out.w"] += dec_out.reshape(-1, d).T @ d_logits.reshape(-1, cfg.vocab_size)
    grads["out.b"] += d_logits.sum(axis=(0, 1))
    d_y = _norm_bwd(dec_caches[-1], d_logits @ p["out.w"].T)

    d_enc_out = np.zeros_like(enc_out)
    for i in reversed(range(cfg.dec_layers)):
        c1, ca, c2, cx, c3, cf = dec_caches[i]
        d_branch = _ffn_bwd(p, grads, cf, d_y)
        d_y = d_y + _ln_bwd(p, grads, c3, d_branch)
        d_q, d_kv = _attn_bwd(p, grads, cx, d_y)
        d_enc_out += d_kv
        d_y = d_y + _ln_bwd(p, grads, c2, d_q)
        d_q, d_kv = _attn_bwd(p, grads, ca, d_y)
        d_y = d_y + _ln_bwd(p, grads, c1, d_q + d_kv)

    T = arrays["dec_in"].shape[1]
    np.add.at(grads["emb.tok"], arrays["dec_in"], d_y)
    grads["emb.pos"][:T] += d_y.sum(axis=0)

    d_x = _norm_bwd(enc_caches[-1], d_enc_out)
    for i in reversed(range(cfg.enc_layers)):
        c1, ca, c2, cf = enc_caches[i]
        d_branch = _ffn_bwd(p, grads, cf, d_x)
        d_x = d_x + _ln_bwd(p, grads, c2, d_branch)
        d_q, d_kv = _attn_bwd(p, grads, ca, d_x)
        d_x = d_x + _ln_bwd(p, grads, c1, d_q + d_kv)

    S = arrays["src_ids"].shape[1]
    np.add.at(grads["emb.tok"], arrays["src_ids"], d_x)
    grads["emb.pos"][:S] += d_x.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# Flat parameter layout: training works on one contiguous float64 buffer with
# per-tensor views, so optimizer updates are whole-vector operations.
# ---------------------------------------------------------------------------


def _flat_layout(cfg: ModelConfig) -> list[tuple[str, int, tuple[int, ...]]]:
    shapes = tensor_shapes(cfg)
    layout = []
    offset = 0
    for name in sorted(shapes):
        size = 1
        for s in shapes[name]:
            size *= s
        layout.append((name, offset, shapes[name]))
        offset += size
    return layout


def _views(buffer: np.ndarray, layout) -> dict[str, np.ndarray]:
    out = {}
    for name, offset, shape in layout:
        size = 1
        for s in shape:
            size *= s
        out[name] = buffer[offset : offset + size].reshape(shape)
    return out


def _to_flat(arrays: dict[str, np.ndarray], layout, total: int) -> np.ndarray:
    buf = np.zeros(total, dtype=np.float64)
    views = _views(buf, layout)
    for name, view in views.items():
        view[...] = arrays[name]
    return buf


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def loss_with_params(cfg: ModelConfig, params: dict[str, np.ndarray], batch: Sequence[Pair]) -> float:
    """Teacher-forced mean cross-entropy computed directly on float64 arrays.

    Exposed separately so perturbation-based checks can bypass float32 storage.
    """
    arrays = _prep_batch(batch, cfg)
    logits, _ = _logits_fwd(params, cfg, arrays)
    loss, _ = _ce_loss(logits, arrays["labels"], arrays["label_mask"])
    return loss


def forward_loss(model: ModelState, batch: Sequence[Pair]) -> float:
    """Mean token cross-entropy over non-PAD target positions (teacher forcing)."""
    return loss_with_params(model.config, model.arrays64(), batch)


def backward(model: ModelState, batch: Sequence[Pair]) -> dict[str, NamedTensor]:
    """d(loss)/d(tensor) for every model tensor; names/shapes mirror the model."""
    arrays = _prep_batch(batch, model.config)
    _, grads = _loss_and_grads(model.arrays64(), model.config, arrays)
    return {
        name: NamedTensor(name, tuple(g.shape), g.astype(np.float32).reshape(-1))
        for name, g in grads.items()
    }


def _apply_update(pbuf, gbuf, mbuf, vbuf, kind, lr, t):
    if kind == "sgd":
        pbuf -= lr * gbuf
        return
    np.multiply(mbuf, ADAM_BETA1, out=mbuf)
    mbuf += (1.0 - ADAM_BETA1) * gbuf
    np.multiply(vbuf, ADAM_BETA2, out=vbuf)
    vbuf += (1.0 - ADAM_BETA2) * gbuf * gbuf
    b1t = 1.0 - ADAM_BETA1**t
    b2t = 1.0 - ADAM_BETA2**t
    pbuf -= lr * (mbuf / b1t) / (np.sqrt(vbuf / b2t) + ADAM_EPS)


class _BatchStream:
    """Seeded minibatch index stream cycling with a reshuffle per epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self._n = n
        self._rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_batch(self, size: int) -> list[int]:
        out: list[int] = []
        while len(out) < size:
            if self._pos == self._n:
                self._order = self._rng.permutation(self._n)
                self._pos = 0
            take = min(size - len(out), self._n - self._pos)
            out.extend(int(i) for i in self._order[self._pos : self._pos + take])
            self._pos += take
        return out


def train_steps(
    model: ModelState,
    opt: OptimizerState,
    corpus: Corpus,
    steps: int,
    batch_size: int,
    seed,
) -> tuple[ModelState, OptimizerState, list[float]]:
    """Run `steps` optimizer updates on seeded minibatches; returns per-step losses.

    Deterministic for a fixed seed; the inputs are never mutated.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if corpus.n_k == 0:
        raise ValueError("empty corpus")
    if steps == 0:
        return model, opt, []

    cfg = model.config
    layout = _flat_layout(cfg)
    total = model.param_count
    pbuf = _to_flat(model.arrays64(), layout, total)
    p = _views(pbuf, layout)
    if opt.kind == "adam":
        mbuf = _to_flat(opt.m, layout, total) if opt.m else np.zeros(total, dtype=np.float64)
        vbuf = _to_flat(opt.v, layout, total) if opt.v else np.zeros(total, dtype=np.float64)
    else:
        mbuf = vbuf = None
    gbuf = np.zeros(total, dtype=np.float64)
    grads = _views(gbuf, layout)
    stream = _BatchStream(corpus.n_k, np.random.default_rng(seed))
    losses = []
    for k in range(steps):
        batch = [corpus.pairs[i] for i in stream.next_batch(batch_size)]
        arrays = _prep_batch(batch, cfg)
        gbuf.fill(0.0)
        loss, _ = _loss_and_grads(p, cfg, arrays, grads)
        losses.append(loss)
        _apply_update(pbuf, gbuf, mbuf, vbuf, opt.kind, opt.learning_rate, opt.step + k + 1)
    new_model = ModelState.from_arrays(cfg, p)
    if opt.kind == "adam":
        mviews = _views(mbuf, layout)
        vviews = _views(vbuf, layout)
        new_m = {name: mviews[name].copy() for name in mviews}
        new_v = {name: vviews[name].copy() for name in vviews}
    else:
        new_m = new_v = None
    new_opt = OptimizerState(opt.kind, opt.learning_rate, opt.step + steps, new_m, new_v)
    return new_model, new_opt, losses


def greedy_decode_batch(model: ModelState, sources: Sequence[tuple[int, ...]]) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or max_len, batched over sources.

    Ties resolve to the lowest token id.  Returns content tokens (no BOS/EOS).
    """
    cfg = model.config
    if not sources:
        return []
    for si, src in enumerate(sources):
        if len(src) > cfg.max_len:
            raise ValueError(f"source {si} length {len(src)} exceeds max_len {cfg.max_len}")
        for pos, tok in enumerate(src):
            if not 0 <= tok < cfg.vocab_size:
                raise ValueError(f"token id {tok} out of range at source {si} position {pos}")
    p = model.arrays64()
    B = len(sources)
    S = max(len(s) for s in sources)
    src_ids = np.full((B, S), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((B, S), dtype=bool)
    for b, src in enumerate(sources):
        src_ids[b, : len(src)] = src
        src_mask[b, : len(src)] = True
    enc_out, _ = _encoder_fwd(p, cfg, src_ids, src_mask)

    dec = np.full((B, 1), BOS_ID, dtype=np.int64)
    finished = np.zeros(B, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(B)]
    while dec.shape[1] < cfg.max_len and not finished.all():
        dec_mask = dec != PAD_ID
        dec_out, _ = _decoder_fwd(p, cfg, dec, dec_mask, enc_out, src_mask)
        logits = dec_out[:, -1, :] @ p["out.w"] + p["out.b"]
        nxt = logits.argmax(axis=-1)
        col = np.full((B, 1), PAD_ID, dtype=np.int64)
        for b in range(B):
            if finished[b]:
                continue
            tok = int(nxt[b])
            col[b, 0] = tok
            if tok == EOS_ID:
                finished[b] = True
            else:
                outputs[b].append(tok)
        dec = np.concatenate([dec, col], axis=1)
    return outputs


def greedy_decode(model: ModelState, source: tuple[int, ...]) -> list[int]:
    return greedy_decode_batch(model, [tuple(source)])[0]


# ---------------------------------------------------------------------------
# Checkpoints: utf-8 "key=value" header lines, blank line, tensor records.
# ---------------------------------------------------------------------------


def save_checkpoint(model: ModelState, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        for key, value in model.config.header_fields():
            fh.write(f"{key}={value}\n".encode("utf-8"))
        fh.write(b"\n")
        write_tensors(fh, (model.tensors[name] for name in model.names()))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        fields = {}
        while True:
            line = b""
            while not line.endswith(b"\n"):
                ch = fh.read(1)
                if not ch:
                    raise ValueError(f"truncated checkpoint header in {path}")
                line += ch
            text = line.decode("utf-8").strip()
            if not text:
                break
            key, _, value = text.partition("=")
            fields[key] = int(value)
        cfg = ModelConfig(**fields)
        tensors = {t.name: t for t in read_all_tensors(fh)}
    return ModelState(cfg, tensors)
