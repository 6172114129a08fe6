"""Feature pooling: collapse per-layer, per-position hidden states to one
vector per example.

Pooling happens in two stages.  Layer-wise pooling reduces the L+1
layer outputs to a single (n, d) sequence: the last layer, the mean of
the last m layers, or a learned softmax combination over all layers.
Position-wise pooling then reduces positions to one d-vector: the first
(CLS) position, a masked mean, or multi-head attention with a learned
task-specific query where the features act as keys and values.

Strategy objects own their trainable parameters (combination logits,
MHA projections); a :class:`PoolingSpec` is the cheap descriptor from
which per-task strategies are materialized.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import backend, rng, wire
from .errors import InputError, ParameterError

DEFAULT_LAYER_AVG_M = 16
MHA_QUERY_STD = 0.02


# ---------------------------------------------------------------------------
# strategy descriptors


@dataclass(frozen=True)
class PoolingSpec:
    """(layer-wise, position-wise) strategy pair, before materialization."""

    layer: str = "layer-avg"      # last | layer-avg | learned-comb
    position: str = "mha"         # cls | pos-avg | mha
    m: Optional[int] = None       # layer-avg window; None = min(16, L)

    def __post_init__(self):
        if self.layer not in ("last", "layer-avg", "learned-comb"):
            raise ParameterError(f"unknown layer pooling {self.layer!r}")
        if self.position not in ("cls", "pos-avg", "mha"):
            raise ParameterError(f"unknown position pooling {self.position!r}")
        if self.m is not None and self.m < 1:
            raise ParameterError(f"layer-avg window must be >= 1, got {self.m}")

    def describe(self) -> str:
        layer = self.layer
        if self.layer == "layer-avg" and self.m is not None:
            layer = f"layer-avg:{self.m}"
        return f"{layer},{self.position}"


def parse_pooling(text: str) -> PoolingSpec:
    """Parse ``<layer>[:<m>],<position>`` (e.g. ``layer-avg:16,mha``)."""
    parts = text.split(",")
    if len(parts) != 2:
        raise ParameterError(
            f"pooling spec must be '<layer>,<position>', got {text!r}")
    layer_part, position = parts[0].strip(), parts[1].strip()
    m = None
    if ":" in layer_part:
        layer_part, _, arg = layer_part.partition(":")
        try:
            m = int(arg)
        except ValueError:
            raise ParameterError(f"bad layer-avg window {arg!r}") from None
    return PoolingSpec(layer=layer_part, position=position, m=m)


# ---------------------------------------------------------------------------
# layer-wise pooling


@dataclass
class LastLayer:
    def trainable(self) -> dict:
        return {}


@dataclass
class LayerAvg:
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ParameterError(f"layer-avg window must be >= 1, got {self.m}")

    def trainable(self) -> dict:
        return {}


@dataclass
class LearnedComb:
    logits: np.ndarray

    def weights(self, dtype=None) -> np.ndarray:
        logits = self.logits if dtype is None else self.logits.astype(dtype)
        return backend.softmax_fwd(logits.reshape(1, -1))[0]

    def trainable(self) -> dict:
        return {"layer_logits": self.logits}


def materialize_layer_pooling(spec: PoolingSpec, num_slices: int):
    """Build a layer strategy for ``num_slices`` available layer outputs.

    ``num_slices`` is L+1 when pooling straight off the encoder and L
    when replaying stored raw features (the embedding layer is not
    persisted).  Windows are clamped to the available slices.
    """
    if spec.layer == "last":
        return LastLayer()
    if spec.layer == "layer-avg":
        m = spec.m if spec.m is not None else min(DEFAULT_LAYER_AVG_M,
                                                  num_slices - 1 or 1)
        return LayerAvg(min(m, num_slices))
    return LearnedComb(np.zeros(num_slices, dtype=np.float32))


def pool_layers(features, strategy):
    """Collapse the leading layer axis; shape (S, ..., d) -> (..., d)."""
    num = len(features)
    if num == 0:
        raise InputError("no layer features to pool")
    if isinstance(strategy, LastLayer):
        return np.array(features[num - 1], copy=True)
    if isinstance(strategy, LayerAvg):
        m = strategy.m
        if m > num:
            m = num
        acc = features[num - m].copy()
        for i in range(num - m + 1, num):
            acc += features[i]
        return acc / acc.dtype.type(m)
    if isinstance(strategy, LearnedComb):
        if len(strategy.logits) != num:
            raise ParameterError(
                f"learned-comb has {len(strategy.logits)} logits for "
                f"{num} layers")
        w = strategy.weights(dtype=np.asarray(features[0]).dtype)
        acc = w[0] * features[0]
        for i in range(1, num):
            acc += w[i] * features[i]
        return acc
    raise ParameterError(f"unknown layer pooling strategy {strategy!r}")


def pool_layers_bwd(features, strategy, dpooled):
    """Backward pass of :func:`pool_layers`.

    Returns ``(dlayers, dlogits)`` where ``dlayers`` is a list aligned
    with ``features`` (``None`` for layers that receive no gradient)
    and ``dlogits`` is None unless the strategy is LearnedComb.
    """
    num = len(features)
    dlayers = [None] * num
    dlogits = None
    if isinstance(strategy, LastLayer):
        dlayers[num - 1] = dpooled
    elif isinstance(strategy, LayerAvg):
        m = min(strategy.m, num)
        share = dpooled / dpooled.dtype.type(m)
        for i in range(num - m, num):
            dlayers[i] = share
    elif isinstance(strategy, LearnedComb):
        w = strategy.weights(dtype=dpooled.dtype)
        s = np.empty(num, dtype=dpooled.dtype)
        for i in range(num):
            dlayers[i] = w[i] * dpooled
            s[i] = np.sum(dpooled * features[i])
        dlogits = backend.softmax_bwd(w.reshape(1, -1), s.reshape(1, -1))[0]
    else:
        raise ParameterError(f"unknown layer pooling strategy {strategy!r}")
    return dlayers, dlogits


# ---------------------------------------------------------------------------
# position-wise pooling


@dataclass
class ClsPool:
    def trainable(self) -> dict:
        return {}


@dataclass
class PositionAvg:
    def trainable(self) -> dict:
        return {}


@dataclass
class MhaParams:
    query: np.ndarray       # (d,)
    key_proj: np.ndarray    # (d, d)
    value_proj: np.ndarray  # (d, d)
    out_proj: np.ndarray    # (d, d)
    num_heads: int

    def __post_init__(self):
        d = self.query.shape[0]
        for name in ("key_proj", "value_proj", "out_proj"):
            mat = getattr(self, name)
            if mat.shape != (d, d):
                raise ParameterError(
                    f"{name} must be ({d}, {d}), got {mat.shape}")
        if self.num_heads < 1 or d % self.num_heads != 0:
            raise ParameterError(
                f"model dim {d} not divisible by {self.num_heads} heads")
        for name in ("query", "key_proj", "value_proj", "out_proj"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"{name} contains non-finite values")


@dataclass
class MhaPool:
    params: MhaParams

    def trainable(self) -> dict:
        p = self.params
        return {"query": p.query, "key_proj": p.key_proj,
                "value_proj": p.value_proj, "out_proj": p.out_proj}


def init_mha_params(dim: int, num_heads: int, seed: int) -> MhaParams:
    """Identity projections plus a small random query.

    Identity key/value/output projections make the pooler start out as
    a soft position average, which trains stably at desk scale; the
    seeded query breaks symmetry between heads.
    """
    gen = rng.generator(seed)
    eye = np.eye(dim, dtype=np.float32)
    return MhaParams(
        query=gen.normal(0.0, MHA_QUERY_STD, size=dim).astype(np.float32),
        key_proj=eye.copy(), value_proj=eye.copy(), out_proj=eye.copy(),
        num_heads=num_heads)


def materialize_position_pooling(spec: PoolingSpec, dim: int,
                                 num_heads: int, seed: int):
    if spec.position == "cls":
        return ClsPool()
    if spec.position == "pos-avg":
        return PositionAvg()
    return MhaPool(init_mha_params(dim, num_heads, seed))


def mha_pool_batch(features: np.ndarray, params: MhaParams,
                   mask: Optional[np.ndarray] = None):
    """Attention pooling over positions for a (B, n, d) batch.

    Returns ``(pooled, cache)``; ``cache`` feeds :func:`mha_pool_bwd`
    and exposes the per-head attention weights as ``cache['probs']``
    with shape (B, h, n).
    """
    b, n, d = features.shape
    h = params.num_heads
    dh = d // h
    dtype = features.dtype
    scale = dtype.type(1.0 / math.sqrt(dh))

    q = params.query.astype(dtype, copy=False).reshape(h, dh)
    k = (features @ params.key_proj.astype(dtype, copy=False)) \
        .reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    v = (features @ params.value_proj.astype(dtype, copy=False)) \
        .reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    scores = np.einsum("hd,bhnd->bhn", q, k) * scale
    if mask is not None:
        scores = scores + ((mask - 1.0) * 1e9).astype(dtype)[:, None, :]
    probs = backend.softmax_fwd(scores)
    heads = np.einsum("bhn,bhnd->bhd", probs, v)
    concat = heads.reshape(b, d)
    pooled = concat @ params.out_proj.astype(dtype, copy=False)
    cache = dict(features=features, q=q, k=k, v=v, probs=probs, concat=concat)
    return pooled, cache


def mha_pool_bwd(params: MhaParams, cache: dict, dpooled: np.ndarray):
    """Gradients w.r.t. the input features and all MHA parameters."""
    features = cache["features"]
    b, n, d = features.shape
    h = params.num_heads
    dh = d // h
    dtype = features.dtype
    scale = dtype.type(1.0 / math.sqrt(dh))
    out_proj = params.out_proj.astype(dtype, copy=False)

    d_out_proj = cache["concat"].T @ dpooled
    dconcat = (dpooled @ out_proj.T).reshape(b, h, dh)
    dprobs = np.einsum("bhd,bhnd->bhn", dconcat, cache["v"])
    dv = np.einsum("bhn,bhd->bhnd", cache["probs"], dconcat)
    dscores = backend.softmax_bwd(cache["probs"], dprobs)
    dq = np.einsum("bhn,bhnd->hd", dscores, cache["k"]) * scale
    dk = np.einsum("bhn,hd->bhnd", dscores, cache["q"]) * scale

    dk_merged = dk.transpose(0, 2, 1, 3).reshape(b, n, d)
    dv_merged = dv.transpose(0, 2, 1, 3).reshape(b, n, d)
    flat = features.reshape(-1, d)
    d_key_proj = flat.T @ dk_merged.reshape(-1, d)
    d_value_proj = flat.T @ dv_merged.reshape(-1, d)
    dfeatures = (dk_merged @ params.key_proj.astype(dtype, copy=False).T
                 + dv_merged @ params.value_proj.astype(dtype, copy=False).T)
    grads = {"query": dq.reshape(d), "key_proj": d_key_proj,
             "value_proj": d_value_proj, "out_proj": d_out_proj}
    return dfeatures, grads


def mha_pool(features: np.ndarray, params: MhaParams) -> np.ndarray:
    """Single-example attention pooling: (n, d) -> (d,)."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ParameterError(
            f"expected (n, d) features, got shape {features.shape}")
    if features.shape[1] != params.query.shape[0]:
        raise ParameterError(
            f"feature width {features.shape[1]} does not match query "
            f"width {params.query.shape[0]}")
    if features.shape[0] == 0:
        raise InputError("cannot pool zero positions")
    pooled, _ = mha_pool_batch(features[None], params)
    return pooled[0]


def pool_positions_batch(features: np.ndarray, strategy,
                         mask: Optional[np.ndarray] = None):
    """Batched position pooling: (B, n, d) -> (B, d), with cache."""
    if isinstance(strategy, ClsPool):
        return features[:, 0, :].copy(), None
    if isinstance(strategy, PositionAvg):
        if mask is None:
            pooled = features.mean(axis=1)
            return pooled, None
        counts = mask.sum(axis=1, keepdims=True).astype(features.dtype)
        pooled = (features * mask[:, :, None]).sum(axis=1) / counts
        return pooled, dict(counts=counts)
    if isinstance(strategy, MhaPool):
        return mha_pool_batch(features, strategy.params, mask)
    raise ParameterError(f"unknown position pooling strategy {strategy!r}")


def pool_positions_bwd(strategy, features: np.ndarray, cache,
                       dpooled: np.ndarray,
                       mask: Optional[np.ndarray] = None):
    """Backward pass of :func:`pool_positions_batch`.

    Returns ``(dfeatures, param_grads)``.
    """
    if isinstance(strategy, ClsPool):
        dfeatures = np.zeros_like(features)
        dfeatures[:, 0, :] = dpooled
        return dfeatures, {}
    if isinstance(strategy, PositionAvg):
        n = features.shape[1]
        if mask is None:
            dfeatures = np.broadcast_to(
                dpooled[:, None, :] / features.dtype.type(n),
                features.shape).copy()
        else:
            dfeatures = (dpooled / cache["counts"])[:, None, :] \
                * mask[:, :, None].astype(features.dtype)
        return dfeatures, {}
    if isinstance(strategy, MhaPool):
        return mha_pool_bwd(strategy.params, cache, dpooled)
    raise ParameterError(f"unknown position pooling strategy {strategy!r}")


def pool_positions(features: np.ndarray, strategy) -> np.ndarray:
    """Single-example position pooling: (n, d) -> (d,)."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise InputError(
            f"expected non-empty (n, d) features, got shape {features.shape}")
    pooled, _ = pool_positions_batch(features[None], strategy)
    return pooled[0]


# ---------------------------------------------------------------------------
# serialization (embedded in head checkpoints)

_LAYER_TAGS = {"LastLayer": 0, "LayerAvg": 1, "LearnedComb": 2}
_POSITION_TAGS = {"ClsPool": 0, "PositionAvg": 1, "MhaPool": 2}


def write_pooling(stream, layer_strategy, position_strategy):
    wire.write_u8(stream, _LAYER_TAGS[type(layer_strategy).__name__])
    if isinstance(layer_strategy, LayerAvg):
        wire.write_u32(stream, layer_strategy.m)
    elif isinstance(layer_strategy, LearnedComb):
        wire.write_tensor(stream, layer_strategy.logits)
    wire.write_u8(stream, _POSITION_TAGS[type(position_strategy).__name__])
    if isinstance(position_strategy, MhaPool):
        p = position_strategy.params
        wire.write_u32(stream, p.num_heads)
        for tensor in (p.query, p.key_proj, p.value_proj, p.out_proj):
            wire.write_tensor(stream, tensor)


def read_pooling(reader: wire.Reader):
    layer_tag = reader.u8("layer pooling tag")
    if layer_tag == 0:
        layer_strategy = LastLayer()
    elif layer_tag == 1:
        layer_strategy = LayerAvg(reader.u32("layer-avg window"))
    elif layer_tag == 2:
        layer_strategy = LearnedComb(reader.tensor("layer logits"))
    else:
        raise wire.FormatError(f"unknown layer pooling tag {layer_tag}",
                               offset=reader.offset - 1)
    position_tag = reader.u8("position pooling tag")
    if position_tag == 0:
        position_strategy = ClsPool()
    elif position_tag == 1:
        position_strategy = PositionAvg()
    elif position_tag == 2:
        num_heads = reader.u32("mha num_heads")
        tensors = [reader.tensor(name) for name in
                   ("query", "key_proj", "value_proj", "out_proj")]
        position_strategy = MhaPool(MhaParams(*tensors, num_heads=num_heads))
    else:
        raise wire.FormatError(f"unknown position pooling tag {position_tag}",
                               offset=reader.offset - 1)
    return layer_strategy, position_strategy


def describe_strategies(layer_strategy, position_strategy) -> str:
    if isinstance(layer_strategy, LastLayer):
        layer = "last"
    elif isinstance(layer_strategy, LayerAvg):
        layer = f"layer-avg:{layer_strategy.m}"
    else:
        layer = "learned-comb"
    position = {"ClsPool": "cls", "PositionAvg": "pos-avg",
                "MhaPool": "mha"}[type(position_strategy).__name__]
    return f"{layer},{position}"
