"""Soft attention: scaled dot-product, multi-head, and chunked LSH attention.

LSH attention follows the shared-QK scheme: keys are the row-normalised
queries, positions are hashed into buckets with an angular hash per round,
sorted by bucket, split into chunks of ``chunk_len`` and each chunk attends to
itself and the chunk before it.  Within a round a query ``i`` may only attend
to keys ``j <= i`` of the same bucket; attending to itself costs ``SELF_PENALTY``
and a key reachable in several rounds is discounted by the log of that count so
the rounds can be merged with their log-normalisers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, conv2d, is_grad_enabled, matmul, softmax

__all__ = [
    "SELF_PENALTY",
    "NORM_EPS",
    "MultiHeadParams",
    "LshAttentionConfig",
    "BucketAssignment",
    "GateParams",
    "scaled_dot_attention",
    "multi_head_attention",
    "lsh_hash",
    "shared_qk_normalize",
    "assign_buckets",
    "lsh_attention",
    "attention_gate_2d",
    "AttentionError",
]

SELF_PENALTY = 1e5
NORM_EPS = 1e-6


class AttentionError(ValueError):
    pass


# -- dense attention ----------------------------------------------------


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(n)) v over the key axis; leading batch dims allowed."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    scores = matmul(q, k.T if k.ndim == 2 else k.permute(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))
    weights = softmax(scores * (1.0 / math.sqrt(q.shape[-1])), axis=-1)
    return matmul(weights, v)


@dataclass
class MultiHeadParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @property
    def heads(self) -> int:
        return len(self.wq)

    def validate(self, d_model: int) -> None:
        if not (len(self.wq) == len(self.wk) == len(self.wv) >= 1):
            raise AttentionError("multi-head: projection lists must be non-empty and equally long")
        dk = self.wq[0].shape[1]
        dv = self.wv[0].shape[1]
        for i in range(self.heads):
            if self.wq[i].shape != (d_model, dk) or self.wk[i].shape != (d_model, dk):
                raise AttentionError(f"multi-head: head {i} query/key projections must be ({d_model}, {dk})")
            if self.wv[i].shape != (d_model, dv):
                raise AttentionError(f"multi-head: head {i} value projection must be ({d_model}, {dv})")
        if self.wo.shape[0] != self.heads * dv:
            raise AttentionError(f"multi-head: output matrix has {self.wo.shape[0]} rows, expected h*d_v = {self.heads * dv}")

    @classmethod
    def init(cls, d_model: int, heads: int, d_k: int, d_v: int, rng: np.random.Generator) -> MultiHeadParams:
        def mat(r, c):
            bound = 1.0 / math.sqrt(r)
            return Tensor(rng.uniform(-bound, bound, (r, c)), requires_grad=True)

        return cls(
            wq=[mat(d_model, d_k) for _ in range(heads)],
            wk=[mat(d_model, d_k) for _ in range(heads)],
            wv=[mat(d_model, d_v) for _ in range(heads)],
            wo=mat(heads * d_v, d_model),
        )


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: MultiHeadParams) -> Tensor:
    params.validate(q.shape[-1])
    heads = [
        scaled_dot_attention(matmul(q, wq), matmul(k, wk), matmul(v, wv))
        for wq, wk, wv in zip(params.wq, params.wk, params.wv)
    ]
    return matmul(concat(heads, axis=-1), params.wo)


# -- hashing ------------------------------------------------------------


@dataclass(frozen=True)
class LshAttentionConfig:
    """Hashing and chunking settings for one LSH attention call.

    ``chunk_len`` is stored explicitly; :meth:`for_length` applies the default
    rule ``chunk_len = 2 * length / n_rounds``.
    """

    n_rounds: int = 2
    n_buckets: int = 8
    chunk_len: int = 64
    seed: int = 0
    scale: float | None = None

    def __post_init__(self):
        if self.n_rounds < 1:
            raise AttentionError(f"n_rounds must be >= 1, got {self.n_rounds}")
        if self.n_buckets < 1 or (self.n_buckets > 1 and self.n_buckets % 2):
            raise AttentionError(f"n_buckets must be 1 or even, got {self.n_buckets}")
        if self.chunk_len < 1:
            raise AttentionError(f"chunk_len must be positive, got {self.chunk_len}")

    @classmethod
    def for_length(cls, length: int, n_rounds: int, n_buckets: int, seed: int = 0) -> LshAttentionConfig:
        if (2 * length) % n_rounds:
            raise AttentionError(f"default chunk rule 2*{length}/{n_rounds} is not an integer")
        return cls(n_rounds=n_rounds, n_buckets=n_buckets, chunk_len=2 * length // n_rounds, seed=seed)


def lsh_hash(vectors: np.ndarray, n_buckets: int, seed: int, round_index: int) -> np.ndarray:
    """Angular LSH bucket ids for the rows of ``vectors`` (last axis is the feature axis).

    Rows are L2-normalised (norm floored at ``NORM_EPS``), projected by a random
    Gaussian matrix drawn from ``(seed, round_index)``, and the bucket is the
    argmax over ``[proj, -proj]``.  A zero row lands in bucket 0.
    """
    if n_buckets == 1:
        return np.zeros(vectors.shape[:-1], dtype=np.int64)
    if n_buckets % 2:
        raise AttentionError(f"n_buckets must be even, got {n_buckets}")
    vecs = np.asarray(vectors, dtype=np.float64)
    unit = vecs / np.maximum(np.linalg.norm(vecs, axis=-1, keepdims=True), NORM_EPS)
    rot = np.random.default_rng([seed, round_index]).standard_normal((vecs.shape[-1], n_buckets // 2))
    proj = unit @ rot
    return np.concatenate([proj, -proj], axis=-1).argmax(axis=-1)


def shared_qk_normalize(q: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(q, k)`` with ``k`` the row-wise L2 normalisation of ``q``."""
    norm = np.linalg.norm(q.data, axis=-1, keepdims=True)
    denom = np.maximum(norm, NORM_EPS)
    k = q.data / denom
    clipped = norm < NORM_EPS

    def backward(g):
        radial = np.where(clipped, 0.0, (g * k).sum(axis=-1, keepdims=True))
        return ((g - k * radial) / denom,)

    return q, Tensor.from_op(k, (q,), backward, "shared_qk_normalize")


@dataclass
class BucketAssignment:
    """Per-round bucket ids and the bucket-sorted position order.

    ``buckets`` and ``order`` have shape ``(..., n_rounds, length)``.
    """

    buckets: np.ndarray
    order: np.ndarray
    n_buckets: int


def assign_buckets(k: np.ndarray, cfg: LshAttentionConfig) -> BucketAssignment:
    """Hash ``k`` of shape ``(..., l, d)`` for every round and sort positions by (bucket, position)."""
    l = k.shape[-2]
    rounds = [lsh_hash(k, cfg.n_buckets, cfg.seed, g) for g in range(cfg.n_rounds)]
    buckets = np.stack(rounds, axis=-2)
    order = np.argsort(buckets * l + np.arange(l), axis=-1, kind="stable")
    return BucketAssignment(buckets=buckets, order=order, n_buckets=cfg.n_buckets)


# -- chunked LSH attention ----------------------------------------------


def _gather_rows(x: np.ndarray, order: np.ndarray) -> np.ndarray:
    """x: (B, l, d), order: (B, l) -> x[b, order[b]]"""
    return np.take_along_axis(x, order[:, :, None], axis=1)


def _scatter_rows(x: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_gather_rows`."""
    out = np.empty_like(x)
    np.put_along_axis(out, order[:, :, None], x, axis=1)
    return out


def _window(x: np.ndarray, c0: int, c1: int, fill) -> np.ndarray:
    """Chunks c0..c1-1 of x (B, nc, m, ...), each preceded by its previous chunk -> (B, c1-c0, 2m, ...)."""
    cur = x[:, c0:c1]
    if c0 > 0:
        prev = x[:, c0 - 1 : c1 - 1]
    else:
        prev = np.empty_like(cur)
        prev[:, 1:] = x[:, : c1 - 1]
        prev[:, 0] = fill
    return np.concatenate([prev, cur], axis=2)


def _unwindow_add(dst: np.ndarray, xw: np.ndarray, c0: int, c1: int) -> None:
    """Adjoint of :func:`_window`: accumulate (B, c1-c0, 2m, ...) into dst (B, nc, m, ...)."""
    m = xw.shape[2] // 2
    dst[:, c0:c1] += xw[:, :, m:]
    if c0 > 0:
        dst[:, c0 - 1 : c1 - 1] += xw[:, :, :m]
    else:
        dst[:, : c1 - 1] += xw[:, 1:, :m]


# Transient logits per block are capped at this many scalars (and at l * m / 4);
# only the per-round softmax weights kept for backward scale with l * m.
_BLOCK_BUDGET = 1 << 18


class _Round:
    """Sorted layout of one hashing round, evaluated in blocks of chunks."""

    def __init__(self, assignment: BucketAssignment, round_index: int, m: int):
        buckets = assignment.buckets  # (B, R, l)
        bsz, n_rounds, l = buckets.shape
        self.m = m
        self.nc = l // m
        self.order = assignment.order[:, round_index]
        self.pos = self.order.reshape(bsz, self.nc, m)
        self.l = l
        self.round_index = round_index
        # bucket ids of every round, in this round's sorted order: (R, B, nc, m)
        self.sorted_buckets = np.stack(
            [np.take_along_axis(buckets[:, g], self.order, axis=1).reshape(bsz, self.nc, m) for g in range(n_rounds)]
        )
        per_chunk = bsz * m * 2 * m
        self.block = max(1, min(_BLOCK_BUDGET, bsz * l * m // 4) // per_chunk)

    def blocks(self):
        for c0 in range(0, self.nc, self.block):
            yield c0, min(self.nc, c0 + self.block)

    def penalty_into(self, logits: np.ndarray, c0: int, c1: int) -> None:
        """Subtract the mask/self/multi-round penalty from logits (B, c1-c0, m, 2m) in place."""
        pos_q = self.pos[:, c0:c1, :, None]
        pos_k = _window(self.pos, c0, c1, self.l)[:, :, None, :]
        count = np.zeros(logits.shape, dtype=np.int16)
        for g, sb in enumerate(self.sorted_buckets):
            same = _window(sb, c0, c1, -1)[:, :, None, :] == sb[:, c0:c1, :, None]
            count += same
            if g == self.round_index:
                valid = same & (pos_k <= pos_q)
        pen = np.log(np.maximum(count, 1), dtype=logits.dtype)
        del count
        pen[np.broadcast_to(pos_k == pos_q, pen.shape)] = SELF_PENALTY
        logits -= pen
        logits[~valid] = -np.inf


def _round_forward(q, k, v, rd: _Round, scale: float, keep: bool):
    bsz, l, d = q.shape
    nc, m = rd.nc, rd.m
    qs = _gather_rows(q, rd.order).reshape(bsz, nc, m, d)
    ks = _gather_rows(k, rd.order).reshape(bsz, nc, m, d)
    vs = _gather_rows(v, rd.order).reshape(bsz, nc, m, -1)
    out_sorted = np.empty(vs.shape, dtype=q.dtype)
    z_sorted = np.empty((bsz, nc, m), dtype=q.dtype)
    probs_all = np.empty((bsz, nc, m, 2 * m), dtype=q.dtype) if keep else None
    for c0, c1 in rd.blocks():
        logits = qs[:, c0:c1] @ np.swapaxes(_window(ks, c0, c1, 0), -1, -2)
        logits *= scale
        rd.penalty_into(logits, c0, c1)
        peak = logits.max(axis=-1, keepdims=True)
        logits -= peak
        np.exp(logits, out=logits)
        total = logits.sum(axis=-1, keepdims=True)
        logits /= total
        out_sorted[:, c0:c1] = logits @ _window(vs, c0, c1, 0)
        z_sorted[:, c0:c1] = (peak + np.log(total))[..., 0]
        if keep:
            probs_all[:, c0:c1] = logits
        del logits
    out = _scatter_rows(out_sorted.reshape(bsz, l, -1), rd.order)
    z = _scatter_rows(z_sorted.reshape(bsz, l, 1), rd.order)[..., 0]
    return out, z, probs_all


def _round_backward(g_out, g_z, rd: _Round, q, k, v, probs_all, scale: float, grads) -> None:
    """Accumulate this round's input gradients into ``grads = (dq, dk, dv)``."""
    # sorted inputs are gathered again rather than kept alive per round
    bsz, l, d = q.shape
    nc, m = rd.nc, rd.m
    qs = _gather_rows(q, rd.order).reshape(bsz, nc, m, d)
    ks = _gather_rows(k, rd.order).reshape(bsz, nc, m, d)
    vs = _gather_rows(v, rd.order).reshape(bsz, nc, m, -1)
    go = _gather_rows(g_out, rd.order).reshape(bsz, nc, m, -1)
    gz = _gather_rows(g_z[:, :, None], rd.order).reshape(bsz, nc, m, 1)
    dq = np.empty_like(qs)
    dk = np.zeros_like(ks)
    dv = np.zeros_like(vs)
    for c0, c1 in rd.blocks():
        probs = probs_all[:, c0:c1]
        g_blk = go[:, c0:c1]
        dp = g_blk @ np.swapaxes(_window(vs, c0, c1, 0), -1, -2)
        _unwindow_add(dv, np.swapaxes(probs, -1, -2) @ g_blk, c0, c1)
        dp -= (probs * dp).sum(axis=-1, keepdims=True) - gz[:, c0:c1]
        dp *= probs
        dp *= scale
        dq[:, c0:c1] = dp @ _window(ks, c0, c1, 0)
        _unwindow_add(dk, np.swapaxes(dp, -1, -2) @ qs[:, c0:c1], c0, c1)
    rows = np.arange(bsz)[:, None]
    for acc, x in zip(grads, (dq, dk, dv)):
        acc[rows, rd.order] += x.reshape(bsz, l, -1)


def _lsh_core(q: Tensor, k: Tensor, v: Tensor, assignment: BucketAssignment, cfg: LshAttentionConfig) -> Tensor:
    """Fused chunked LSH attention over (B, l, d) inputs with precomputed buckets."""
    scale = cfg.scale if cfg.scale is not None else 1.0 / math.sqrt(q.shape[-1])
    keep = is_grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)
    n_rounds = assignment.buckets.shape[1]
    outs, zs, saves, rounds = [], [], [], []
    for g in range(n_rounds):
        rd = _Round(assignment, g, cfg.chunk_len)
        o, z, s = _round_forward(q.data, k.data, v.data, rd, scale, keep)
        outs.append(o)
        zs.append(z)
        if keep:
            saves.append(s)
            rounds.append(rd)
    # merge rounds with weights exp(z_g - logsumexp_g z_g)
    z_stack = np.stack(zs)
    z_max = z_stack.max(axis=0)
    weights = np.exp(z_stack - z_max)
    weights /= weights.sum(axis=0)
    out = np.zeros_like(outs[0])
    for g in range(n_rounds):
        out += weights[g][:, :, None] * outs[g]

    def backward(grad):
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        dv = np.zeros_like(v.data)
        for g in range(n_rounds):
            g_out = weights[g][:, :, None] * grad
            g_z = weights[g] * (grad * (outs[g] - out)).sum(axis=-1)
            _round_backward(g_out, g_z, rounds[g], q.data, k.data, v.data, saves[g], scale, (dq, dk, dv))
        return dq, dk, dv

    return Tensor.from_op(out, (q, k, v), backward, "lsh_attention")


def _pad_rows(x: Tensor, target: int) -> Tensor:
    extra = target - x.shape[1]
    if not extra:
        return x
    filler = Tensor(np.zeros((x.shape[0], extra, x.shape[2]), dtype=x.dtype), dtype=x.dtype)
    return concat([x, filler], axis=1)


def lsh_attention(
    q: Tensor, v: Tensor, cfg: LshAttentionConfig, return_buckets: bool = False
) -> Tensor | tuple[Tensor, BucketAssignment]:
    """Causal shared-QK LSH attention of ``q[(B,) l, d]`` over values ``v[(B,) l, d_v]``.

    Sequences whose length is not a multiple of ``cfg.chunk_len`` are padded
    with positions that sit in a bucket of their own, so no real query can
    attend to them; their outputs are dropped.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q = q.reshape(1, *q.shape)
        v = v.reshape(1, *v.shape)
    if q.ndim != 3 or v.ndim != 3 or q.shape[:2] != v.shape[:2]:
        raise ShapeError(f"lsh_attention: q {q.shape} and v {v.shape} must share batch and length")
    bsz, l, _ = q.shape
    m = cfg.chunk_len
    l_pad = -(-l // m) * m
    _, k = shared_qk_normalize(q)
    assignment = assign_buckets(k.data, cfg)
    if l_pad != l:
        pad_b = np.full((bsz, cfg.n_rounds, l_pad - l), cfg.n_buckets, dtype=np.int64)
        buckets = np.concatenate([assignment.buckets, pad_b], axis=-1)
        order = np.argsort(buckets * l_pad + np.arange(l_pad), axis=-1, kind="stable")
        padded = BucketAssignment(buckets, order, cfg.n_buckets)
        out = _lsh_core(_pad_rows(q, l_pad), _pad_rows(k, l_pad), _pad_rows(v, l_pad), padded, cfg)
        out = out[:, :l]
    else:
        out = _lsh_core(q, k, v, assignment, cfg)
    if squeeze:
        out = out.reshape(*out.shape[1:])
        assignment = BucketAssignment(assignment.buckets[0], assignment.order[0], assignment.n_buckets)
    return (out, assignment) if return_buckets else out


# -- 2-D gate -------------------------------------------------------------


@dataclass
class GateParams:
    """Query projection (1×1 conv) and per-channel output gain of an attention gate."""

    query_weight: Tensor  # (d_k, C, 1, 1)
    query_bias: Tensor  # (d_k,)
    gain: Tensor  # (C,)


def attention_gate_2d(skip: Tensor, gate: Tensor, params: GateParams, cfg: LshAttentionConfig) -> Tensor:
    """Filter an encoder skip map with LSH attention driven by the decoder's upsampled features.

    Positions are flattened row-major.  Queries are a 1×1 projection of
    ``skip + gate``, values are the skip features, and the result is
    ``skip + gain * attention``; a zero gain passes the skip through untouched.
    """
    if skip.shape != gate.shape:
        raise ShapeError(f"attention gate: skip {skip.shape} and gate {gate.shape} are not aligned")
    n, c, h, w = skip.shape
    q = conv2d(skip + gate, params.query_weight, params.query_bias)
    d_k = q.shape[1]
    q_seq = q.reshape(n, d_k, h * w).permute(0, 2, 1)
    v_seq = skip.reshape(n, c, h * w).permute(0, 2, 1)
    attended = lsh_attention(q_seq, v_seq, cfg)
    attended = attended.permute(0, 2, 1).reshape(n, c, h, w)
    return skip + attended * params.gain.reshape(1, c, 1, 1)
