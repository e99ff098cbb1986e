"""Minimal encoder-stack transformer whose layers are the partition unit.

Encoder blocks only, plus a client-side output projection: that surface is
enough to exercise attention, the feed-forward pair, layer norm, positional
encoding, and the softmax head, while keeping the parameter count small
enough that full-model comparisons run in milliseconds. The FFN uses ReLU
and layer norm adds eps = 1e-5 to the variance. Everything is pure and
deterministic: equal inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Matrix, ShapeMismatchError, as_matrix, matmul, softmax_rows

__all__ = [
    "ModelConfig",
    "LayerParams",
    "ModelParams",
    "PartitionPlan",
    "PlanEntry",
    "LayerShard",
    "DESK_CONFIG",
    "positional_encoding",
    "embed",
    "attention",
    "layer_norm_raw",
    "layer_norm",
    "layer_forward",
    "model_forward",
    "split_model",
    "reassemble",
    "init_params",
]

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.d_ff, self.vocab_size,
               self.max_seq_len) < 1:
            raise ValueError(f"all config fields must be >= 1, got {self}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


# Desk-scale default: every experiment completes in seconds.
DESK_CONFIG = ModelConfig(d_model=32, n_heads=4, n_layers=4, d_ff=64,
                          vocab_size=101, max_seq_len=64)


@dataclass
class LayerParams:
    """Weights of one encoder block; per-head projections kept separate."""

    w_q: list  # n_heads matrices, each d_model x d_head
    w_k: list
    w_v: list
    w_o: Matrix  # d_model x d_model
    w_1: Matrix  # d_model x d_ff
    w_2: Matrix  # d_ff x d_model
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def validate(self, config: ModelConfig) -> None:
        d, dh = config.d_model, config.d_head
        for name, mats in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)):
            if len(mats) != config.n_heads:
                raise ValueError(f"{name} must hold {config.n_heads} head matrices")
            for w in mats:
                if w.shape != (d, dh):
                    raise ShapeMismatchError(f"{name} head shape {w.shape} != ({d}, {dh})")
        if self.w_o.shape != (d, d):
            raise ShapeMismatchError(f"w_o shape {self.w_o.shape} != ({d}, {d})")
        if self.w_1.shape != (d, config.d_ff):
            raise ShapeMismatchError(f"w_1 shape {self.w_1.shape} != ({d}, {config.d_ff})")
        if self.w_2.shape != (config.d_ff, d):
            raise ShapeMismatchError(f"w_2 shape {self.w_2.shape} != ({config.d_ff}, {d})")
        for name, v in (("ln1_gain", self.ln1_gain), ("ln1_bias", self.ln1_bias),
                        ("ln2_gain", self.ln2_gain), ("ln2_bias", self.ln2_bias)):
            if v.shape != (d,):
                raise ShapeMismatchError(f"{name} shape {v.shape} != ({d},)")


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: Matrix  # vocab_size x d_model
    layers: list  # n_layers LayerParams
    w_out: Matrix  # d_model x vocab_size

    def validate(self) -> None:
        c = self.config
        if self.embedding.shape != (c.vocab_size, c.d_model):
            raise ShapeMismatchError(
                f"embedding shape {self.embedding.shape} != ({c.vocab_size}, {c.d_model})"
            )
        if len(self.layers) != c.n_layers:
            raise ValueError(f"expected {c.n_layers} layers, got {len(self.layers)}")
        if self.w_out.shape != (c.d_model, c.vocab_size):
            raise ShapeMismatchError(
                f"w_out shape {self.w_out.shape} != ({c.d_model}, {c.vocab_size})"
            )
        for layer in self.layers:
            layer.validate(c)


@dataclass(frozen=True)
class PlanEntry:
    """One server's contiguous layer range [start, stop)."""

    server: int
    start: int
    stop: int


@dataclass(frozen=True)
class PartitionPlan:
    """Ordered assignment of layer ranges to servers, covering [0, n_layers)."""

    entries: tuple
    n_layers: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        expect = 0
        for e in self.entries:
            if e.start != expect:
                raise ValueError(
                    f"plan ranges must be contiguous and disjoint: server {e.server} "
                    f"starts at {e.start}, expected {expect}"
                )
            if e.stop <= e.start:
                raise ValueError(f"empty range for server {e.server}")
            expect = e.stop
        if expect != self.n_layers:
            raise ValueError(f"plan covers [0, {expect}), model has {self.n_layers} layers")
        servers = [e.server for e in self.entries]
        if len(set(servers)) != len(servers):
            raise ValueError("a server appears twice in the plan")

    @classmethod
    def even(cls, n_layers: int, n_servers: int) -> "PartitionPlan":
        """Split layers as evenly as possible, earlier servers taking the excess."""
        if not 1 <= n_servers <= n_layers:
            raise ValueError(f"need 1 <= n_servers <= {n_layers}, got {n_servers}")
        base, extra = divmod(n_layers, n_servers)
        entries, start = [], 0
        for s in range(n_servers):
            count = base + (1 if s < extra else 0)
            entries.append(PlanEntry(server=s, start=start, stop=start + count))
            start += count
        return cls(entries=tuple(entries), n_layers=n_layers)

    @classmethod
    def from_counts(cls, counts) -> "PartitionPlan":
        entries, start = [], 0
        for s, count in enumerate(counts):
            entries.append(PlanEntry(server=s, start=start, stop=start + count))
            start += count
        return cls(entries=tuple(entries), n_layers=start)

    def layer_counts(self) -> list:
        return [e.stop - e.start for e in self.entries]


@dataclass
class LayerShard:
    """The contiguous slice of layers one server executes."""

    server: int
    start: int
    stop: int
    layers: list


def positional_encoding(max_seq_len: int, d_model: int) -> Matrix:
    """Sinusoidal position table: sin on even columns, cos on odd.

    Column pair i uses angular frequency 1/10000**(2i/d). For odd d_model
    the trailing cos column is truncated, so the final column is a sin one.
    """
    if d_model < 2:
        raise ValueError(f"d_model must be >= 2, got {d_model}")
    if max_seq_len < 0:
        raise ValueError(f"max_seq_len must be >= 0, got {max_seq_len}")
    pos = np.arange(max_seq_len, dtype=np.float64)[:, None]
    pair = np.arange((d_model + 1) // 2, dtype=np.float64)
    angles = pos / (10000.0 ** (2.0 * pair / d_model))
    pe = np.empty((max_seq_len, 2 * pair.shape[0]))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return np.ascontiguousarray(pe[:, :d_model])


def embed(tokens, params: ModelParams) -> Matrix:
    """Token embedding rows plus their positional-encoding rows."""
    c = params.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("tokens must be a flat sequence of ids")
    if ids.shape[0] > c.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[0]} exceeds max {c.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
        bad = ids[(ids < 0) | (ids >= c.vocab_size)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {c.vocab_size}")
    if ids.size == 0:
        return np.empty((0, c.d_model))
    pe = positional_encoding(ids.shape[0], c.d_model)
    return np.ascontiguousarray(params.embedding[ids] + pe)


def attention(q: Matrix, k: Matrix, v: Matrix) -> Matrix:
    """Scaled dot-product attention: softmax(Q Kt / sqrt(d_head)) V."""
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatchError(f"q cols {q.shape[1]} != k cols {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatchError(f"k rows {k.shape[0]} != v rows {v.shape[0]}")
    scores = matmul(q, np.ascontiguousarray(k.T)) / np.sqrt(q.shape[1])
    return matmul(softmax_rows(scores), v)


def layer_norm_raw(x: Matrix) -> Matrix:
    """Row-wise normalization to mean 0, variance ~1 (before gain/bias)."""
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS)


def layer_norm(x: Matrix, gain: np.ndarray, bias: np.ndarray) -> Matrix:
    return layer_norm_raw(x) * gain + bias


def _multi_head(x: Matrix, layer: LayerParams) -> Matrix:
    heads = [
        attention(matmul(x, wq), matmul(x, wk), matmul(x, wv))
        for wq, wk, wv in zip(layer.w_q, layer.w_k, layer.w_v)
    ]
    return matmul(np.ascontiguousarray(np.concatenate(heads, axis=1)), layer.w_o)


def layer_forward(x: Matrix, layer: LayerParams) -> Matrix:
    """One encoder block: post-norm attention then post-norm ReLU FFN."""
    x = as_matrix(x, "x")
    if x.shape[1] != layer.w_o.shape[0]:
        raise ShapeMismatchError(
            f"input width {x.shape[1]} != layer d_model {layer.w_o.shape[0]}"
        )
    h = layer_norm(x + _multi_head(x, layer), layer.ln1_gain, layer.ln1_bias)
    ffn = matmul(np.maximum(matmul(h, layer.w_1), 0.0), layer.w_2)
    return layer_norm(h + ffn, layer.ln2_gain, layer.ln2_bias)


def model_forward(tokens, params: ModelParams, layer_hook=None) -> Matrix:
    """Embed, run all blocks, project to vocabulary, softmax per row.

    `layer_hook(index)` fires once per executed block; tests use it to pin
    the layer-call count to exactly n_layers.
    """
    x = embed(tokens, params)
    for i, layer in enumerate(params.layers):
        if layer_hook is not None:
            layer_hook(i)
        x = layer_forward(x, layer)
    return softmax_rows(matmul(x, params.w_out))


def split_model(params: ModelParams, plan: PartitionPlan) -> list:
    """Carve the layer list into per-server shards.

    The embedding and output projection are not sharded; they stay with the
    client, which runs the ends of the pipeline.
    """
    if plan.n_layers != len(params.layers):
        raise ValueError(
            f"plan covers {plan.n_layers} layers, model has {len(params.layers)}"
        )
    return [
        LayerShard(server=e.server, start=e.start, stop=e.stop,
                   layers=params.layers[e.start:e.stop])
        for e in plan.entries
    ]


def reassemble(shards) -> list:
    """Concatenate shard layer lists back into the full ordered list."""
    ordered = sorted(shards, key=lambda s: s.start)
    expect = 0
    layers = []
    for shard in ordered:
        if shard.start != expect:
            raise ValueError(f"shard gap: expected start {expect}, got {shard.start}")
        layers.extend(shard.layers)
        expect = shard.stop
    return layers


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic random weights: N(0, 1/sqrt(fan_in)) projections."""
    rng = np.random.default_rng(seed)
    d, dh, dff = config.d_model, config.d_head, config.d_ff

    def mat(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(rows)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            w_q=[mat(d, dh) for _ in range(config.n_heads)],
            w_k=[mat(d, dh) for _ in range(config.n_heads)],
            w_v=[mat(d, dh) for _ in range(config.n_heads)],
            w_o=mat(d, d),
            w_1=mat(d, dff),
            w_2=mat(dff, d),
            ln1_gain=np.ones(d),
            ln1_bias=np.zeros(d),
            ln2_gain=np.ones(d),
            ln2_bias=np.zeros(d),
        ))
    params = ModelParams(
        config=config,
        embedding=rng.standard_normal((config.vocab_size, d)),
        layers=layers,
        w_out=mat(d, config.vocab_size),
    )
    params.validate()
    return params
