"""Self-attention building blocks, encoder and prediction networks.

Everything is post-norm: LayerNorm(x + Sublayer(x)), eps 1e-6. Attention
windows are expressed as additive masks of 0 / LOG_ZERO built for every call,
so an unbounded window and a window wider than the sequence produce the same
(all-zero) mask bit for bit.

Two evaluation paths coexist deliberately. The Tensor path records the tape
and is what training differentiates. The ``*_np`` path is plain numpy for
decoding; it mirrors the same arithmetic and exists so that streaming and
offline decoding can share one fixed-order per-frame routine
(:meth:`Encoder.frame_np`), which makes their outputs bit-identical instead
of merely close.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_ZERO, Tensor
from .vocab import SOS

LN_EPS = 1e-6


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, rows=None) -> Tensor:
    """Uniform Glorot-scaled parameter matrix.

    ``rows`` carves a (rows x fan_out) block that keeps the scale of the full
    (fan_in x fan_out) matrix, for weights stored as column/row blocks.
    """
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in if rows is None else rows, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass(frozen=True)
class ChunkSpec:
    """Per-layer attention window: ``left`` past and ``right`` future frames.

    ``math.inf`` on either side lifts that bound. Stacking B blocks widens
    the effective receptive field to [t - B*left, t + B*right].
    """

    left: float
    right: float

    def __post_init__(self):
        for v in (self.left, self.right):
            if v != math.inf and (v < 0 or int(v) != v):
                raise ValueError(f"window sizes must be non-negative integers or inf, got {v}")

    @classmethod
    def unbounded(cls):
        return cls(math.inf, math.inf)

    @property
    def bounded(self):
        return self.left != math.inf and self.right != math.inf

    def receptive_field(self, t: int, n_blocks: int, length: int):
        """Inclusive input range that can influence output frame t."""
        lo = 0 if self.left == math.inf else max(0, t - n_blocks * int(self.left))
        hi = length - 1 if self.right == math.inf else min(length - 1, t + n_blocks * int(self.right))
        return lo, hi

    @staticmethod
    def parse(left: str, right: str):
        conv = lambda s: math.inf if s == "inf" else int(s)
        return ChunkSpec(conv(left), conv(right))

    def config_values(self):
        fmt = lambda v: "inf" if v == math.inf else str(int(v))
        return fmt(self.left), fmt(self.right)


def window_mask(n_q: int, n_kv: int, chunk: ChunkSpec, q_offset: int = 0) -> np.ndarray:
    """(n_q, n_kv) additive mask: 0 inside the window, LOG_ZERO outside.

    Query i sits at key coordinate i + q_offset; key j is visible iff
    -left <= j - (i + q_offset) <= right.
    """
    rel = np.arange(n_kv)[None, :] - (np.arange(n_q)[:, None] + q_offset)
    ok = (rel >= -chunk.left) & (rel <= chunk.right)
    return np.where(ok, 0.0, LOG_ZERO)


def causal_mask(n: int) -> np.ndarray:
    return window_mask(n, n, ChunkSpec(math.inf, 0))


def positional_encoding(length: int, d_m: int, start: int = 0) -> np.ndarray:
    """Sine/cosine position table for positions start .. start+length-1.

    Column 2i is sin(pos / 10000^(2i/d_m)), column 2i+1 the matching cos.
    ``start`` lets a sequence slice keep its global positions.
    """
    if length < 1:
        raise ValueError("positional encoding needs length >= 1")
    if d_m % 2:
        raise ValueError(f"positional encoding needs even width, got {d_m}")
    pos = np.arange(start, start + length, dtype=np.float64)[:, None]
    inv = np.power(10000.0, -np.arange(0, d_m, 2, dtype=np.float64) / d_m)
    pe = np.empty((length, d_m))
    pe[:, 0::2] = np.sin(pos * inv)
    pe[:, 1::2] = np.cos(pos * inv)
    return pe


def _check_open_rows(mask: np.ndarray):
    if mask.size and mask.max(axis=-1).min() < 0.0:
        raise ValueError("attention mask blocks every key for some query row")


def self_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over already-projected 2-D inputs."""
    if k.shape[0] != v.shape[0]:
        raise ad.ShapeError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=scores.dtype)
        _check_open_rows(mask)
        scores = ad.add(scores, Tensor(mask))
    return ad.matmul(ad.softmax_lastdim(scores), v)


class MultiHeadAttention:
    """n_h heads over shared (d_m x d_m) projections.

    Head i reads column block [i*d_k, (i+1)*d_k) of each projection, which is
    the concat-then-project formulation with the per-head matrices stored
    side by side.
    """

    def __init__(self, d_m: int, n_heads: int, rng, prefix: str):
        if d_m % n_heads:
            raise ValueError(f"d_m={d_m} not divisible by n_heads={n_heads}")
        self.d_m, self.n_heads, self.d_k = d_m, n_heads, d_m // n_heads
        self.params = {
            f"{prefix}.w_q": glorot(rng, d_m, d_m),
            f"{prefix}.w_k": glorot(rng, d_m, d_m),
            f"{prefix}.w_v": glorot(rng, d_m, d_m),
            f"{prefix}.w_o": glorot(rng, d_m, d_m),
        }
        self._prefix = prefix

    def _split(self, x: Tensor, n: int) -> Tensor:
        # (n, d_m) -> (heads, n, d_k)
        return ad.transpose(ad.reshape(x, (n, self.n_heads, self.d_k)), (1, 0, 2))

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask=None) -> Tensor:
        p, pre = self.params, self._prefix
        n_q, n_kv = x_q.shape[0], x_kv.shape[0]
        q = self._split(ad.matmul(x_q, p[f"{pre}.w_q"]), n_q)
        k = self._split(ad.matmul(x_kv, p[f"{pre}.w_k"]), n_kv)
        v = self._split(ad.matmul(x_kv, p[f"{pre}.w_v"]), n_kv)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.d_k))
        if mask is not None:
            mask = np.asarray(mask, dtype=scores.dtype)
            _check_open_rows(mask)
            scores = ad.add(scores, Tensor(mask))
        ctx = ad.matmul(ad.softmax_lastdim(scores), v)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (n_q, self.d_m))
        return ad.matmul(merged, p[f"{pre}.w_o"])

    def apply_np(self, x_q: np.ndarray, x_kv: np.ndarray, mask=None) -> np.ndarray:
        p, pre = self.params, self._prefix
        n_q, n_kv = x_q.shape[0], x_kv.shape[0]
        sp = lambda x, n: (x.reshape(n, self.n_heads, self.d_k)).transpose(1, 0, 2)
        q = sp(x_q @ p[f"{pre}.w_q"].data, n_q)
        k = sp(x_kv @ p[f"{pre}.w_k"].data, n_kv)
        v = sp(x_kv @ p[f"{pre}.w_v"].data, n_kv)
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(self.d_k)
        if mask is not None:
            _check_open_rows(mask)
            scores = scores + mask
        w = _np_softmax(scores)
        return (w @ v).transpose(1, 0, 2).reshape(n_q, self.d_m) @ p[f"{pre}.w_o"].data


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * gain + bias


class FeedForward:
    """max(0, x W1 + b1) W2 + b2."""

    def __init__(self, d_m: int, d_ff: int, rng, prefix: str):
        self.params = {
            f"{prefix}.w1": glorot(rng, d_m, d_ff),
            f"{prefix}.b1": zeros_param(d_ff),
            f"{prefix}.w2": glorot(rng, d_ff, d_m),
            f"{prefix}.b2": zeros_param(d_m),
        }
        self._prefix = prefix

    def __call__(self, x: Tensor) -> Tensor:
        p, pre = self.params, self._prefix
        h = ad.relu(ad.add(ad.matmul(x, p[f"{pre}.w1"]), p[f"{pre}.b1"]))
        return ad.add(ad.matmul(h, p[f"{pre}.w2"]), p[f"{pre}.b2"])

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        p, pre = self.params, self._prefix
        h = np.maximum(x @ p[f"{pre}.w1"].data + p[f"{pre}.b1"].data, 0.0)
        return h @ p[f"{pre}.w2"].data + p[f"{pre}.b2"].data


class SABlock:
    """Post-norm self-attention block.

    y = LayerNorm(x + MultiHead(x, x, x)); out = LayerNorm(y + FFN(y)).
    Dropout hits each sublayer output, training mode only.
    """

    def __init__(self, d_m: int, n_heads: int, d_ff: int, rng, prefix: str):
        self.attn = MultiHeadAttention(d_m, n_heads, rng, f"{prefix}.attn")
        self.ffn = FeedForward(d_m, d_ff, rng, f"{prefix}.ffn")
        self.params = dict(self.attn.params)
        self.params.update(self.ffn.params)
        self.params[f"{prefix}.ln1.g"] = ones_param(d_m)
        self.params[f"{prefix}.ln1.b"] = zeros_param(d_m)
        self.params[f"{prefix}.ln2.g"] = ones_param(d_m)
        self.params[f"{prefix}.ln2.b"] = zeros_param(d_m)
        self._prefix = prefix

    def __call__(self, x: Tensor, mask=None, dropout_rate: float = 0.0,
                 rng=None, training: bool = False) -> Tensor:
        p, pre = self.params, self._prefix
        a = ad.dropout(self.attn(x, x, mask), dropout_rate, rng, training)
        y = ad.layer_norm(ad.add(x, a), p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], LN_EPS)
        f = ad.dropout(self.ffn(y), dropout_rate, rng, training)
        return ad.layer_norm(ad.add(y, f), p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], LN_EPS)

    def apply_np(self, x: np.ndarray, mask=None) -> np.ndarray:
        p, pre = self.params, self._prefix
        y = _np_layer_norm(x + self.attn.apply_np(x, x, mask),
                           p[f"{pre}.ln1.g"].data, p[f"{pre}.ln1.b"].data)
        return _np_layer_norm(y + self.ffn.apply_np(y),
                              p[f"{pre}.ln2.g"].data, p[f"{pre}.ln2.b"].data)

    def apply_rows_np(self, x_new: np.ndarray, x_all: np.ndarray, mask=None) -> np.ndarray:
        """Block output for the query rows ``x_new`` attending over ``x_all``."""
        p, pre = self.params, self._prefix
        y = _np_layer_norm(x_new + self.attn.apply_np(x_new, x_all, mask),
                           p[f"{pre}.ln1.g"].data, p[f"{pre}.ln1.b"].data)
        return _np_layer_norm(y + self.ffn.apply_np(y),
                              p[f"{pre}.ln2.g"].data, p[f"{pre}.ln2.b"].data)


class Encoder:
    """Feature-side stack: linear projection + positional encoding + B blocks.

    Every block applies the same chunk window. ``start`` pins positional
    encodings to global frame indices so slice-wise evaluation matches the
    full pass.
    """

    def __init__(self, d_in: int, d_m: int, n_heads: int, d_ff: int,
                 n_blocks: int, chunk: ChunkSpec, rng):
        self.d_in, self.d_m, self.n_blocks = d_in, d_m, n_blocks
        self.chunk = chunk
        self.blocks = [SABlock(d_m, n_heads, d_ff, rng, f"enc.{i}") for i in range(n_blocks)]
        self.params = {
            "enc.in.w": glorot(rng, d_in, d_m),
            "enc.in.b": zeros_param(d_m),
        }
        for b in self.blocks:
            self.params.update(b.params)

    def __call__(self, feats: Tensor, chunk: ChunkSpec = None, start: int = 0,
                 dropout_rate: float = 0.0, rng=None, training: bool = False) -> Tensor:
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ad.ShapeError(f"encoder expects non-empty (T, {self.d_in}), got {feats.shape}")
        if feats.shape[1] != self.d_in:
            raise ad.ShapeError(f"encoder expects width {self.d_in}, got {feats.shape}")
        chunk = chunk if chunk is not None else self.chunk
        T = feats.shape[0]
        x = ad.add(ad.matmul(feats, self.params["enc.in.w"]), self.params["enc.in.b"])
        x = ad.add(x, Tensor(positional_encoding(T, self.d_m, start).astype(x.dtype)))
        x = ad.dropout(x, dropout_rate, rng, training)
        mask = window_mask(T, T, chunk)
        for block in self.blocks:
            x = block(x, mask, dropout_rate, rng, training)
        return x

    def apply_np(self, feats: np.ndarray, chunk: ChunkSpec = None, start: int = 0) -> np.ndarray:
        chunk = chunk if chunk is not None else self.chunk
        T = feats.shape[0]
        x = feats @ self.params["enc.in.w"].data + self.params["enc.in.b"].data
        x = x + positional_encoding(T, self.d_m, start)
        mask = window_mask(T, T, chunk)
        for block in self.blocks:
            x = block.apply_np(x, mask)
        return x

    def frame_np(self, feats: np.ndarray, t: int, chunk: ChunkSpec = None) -> np.ndarray:
        """Encoder output row t computed from exactly its receptive field.

        Recomputes the block pyramid over the slice [t - B*left, t + B*right]
        each call. Wasteful but fixed-order: any caller handing in the same
        feature window gets the same bits, which is what ties streaming and
        offline decoding together.
        """
        chunk = chunk if chunk is not None else self.chunk
        if not chunk.bounded:
            raise ValueError("per-frame encoding needs a bounded chunk window")
        lo, hi = chunk.receptive_field(t, self.n_blocks, feats.shape[0])
        return self.apply_np(feats[lo:hi + 1], chunk, start=lo)[t - lo]


class PredictionNetwork:
    """Label-side stack: token embedding + positional encoding + causal blocks.

    Input label ids are prefixed with the start token, so an empty prefix
    still yields one state row. Embeddings are scaled by sqrt(d_m) before the
    positional encoding is added.
    """

    def __init__(self, vocab_size: int, d_m: int, n_heads: int, d_ff: int,
                 n_blocks: int, rng):
        self.vocab_size, self.d_m, self.n_blocks = vocab_size, d_m, n_blocks
        self.blocks = [SABlock(d_m, n_heads, d_ff, rng, f"pred.{i}") for i in range(n_blocks)]
        self.params = {"pred.emb": glorot(rng, vocab_size, d_m)}
        for b in self.blocks:
            self.params.update(b.params)

    def _embed_ids(self, labels):
        ids = [SOS] + [int(t) for t in labels]
        return np.asarray(ids, dtype=np.int64)

    def __call__(self, labels, dropout_rate: float = 0.0, rng=None,
                 training: bool = False) -> Tensor:
        ids = self._embed_ids(labels)
        n = ids.shape[0]
        x = ad.scale(ad.index_rows(self.params["pred.emb"], ids), math.sqrt(self.d_m))
        x = ad.add(x, Tensor(positional_encoding(n, self.d_m).astype(x.dtype)))
        x = ad.dropout(x, dropout_rate, rng, training)
        mask = causal_mask(n)
        for block in self.blocks:
            x = block(x, mask, dropout_rate, rng, training)
        return x

    def apply_np(self, labels) -> np.ndarray:
        ids = self._embed_ids(labels)
        n = ids.shape[0]
        x = self.params["pred.emb"].data[ids] * math.sqrt(self.d_m)
        x = x + positional_encoding(n, self.d_m)
        mask = causal_mask(n)
        for block in self.blocks:
            x = block.apply_np(x, mask)
        return x

    def init_state(self):
        """Incremental decode state: per-block input rows seen so far."""
        state = PredState(layers=[None] * (self.n_blocks + 1), length=0)
        return self.advance_np(state, None)

    def advance_np(self, state: "PredState", token) -> "PredState":
        """Extend a decode state by one token (None = the start token).

        Only the new row is computed per block; cached rows stay untouched,
        which the causal mask guarantees is equivalent to a fresh full pass.
        """
        u = state.length
        tok = SOS if token is None else int(token)
        row = self.params["pred.emb"].data[tok] * math.sqrt(self.d_m)
        row = row + positional_encoding(1, self.d_m, start=u)[0]
        new_layers = []
        x_new = row[None, :]
        for i, block in enumerate(self.blocks):
            x_all = x_new if state.layers[i] is None else np.concatenate(
                [state.layers[i], x_new], axis=0)
            new_layers.append(x_all)
            x_new = block.apply_rows_np(x_new, x_all)
        top = x_new if state.layers[-1] is None else np.concatenate(
            [state.layers[-1], x_new], axis=0)
        new_layers.append(top)
        return PredState(layers=new_layers, length=u + 1)


@dataclass
class PredState:
    """Prediction-network cache for one decode prefix.

    ``layers[i]`` holds the input rows of block i (last entry: the output
    rows); ``length`` counts rows, so the newest state vector is
    ``layers[-1][length - 1]``. States are immutable: advancing returns a new
    one, so beam hypotheses can share ancestors safely.
    """

    layers: list
    length: int

    @property
    def g(self) -> np.ndarray:
        return self.layers[-1][self.length - 1]
