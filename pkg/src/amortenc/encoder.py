"""Deterministic Transformer encoder exposing every layer's hidden states.

The encoder is the shared computation whose cost gets amortized across
tasks: one forward pass yields hidden states for all layers and
positions, and everything downstream (pooling, quantization, heads) is
cheap by comparison.

Architecture: token + learned position embeddings, then ``num_layers``
pre-norm residual blocks (self-attention, then a GELU feed-forward).
The per-layer outputs returned by :func:`encode` are the residual
stream after each block; index 0 is the embedding-layer output.
Weights are drawn from a counter-based Philox stream keyed by the
config seed, so two models built from the same config are
bit-identical.

``forward``/``backward`` implement the full training path over padded
batches with attention masking of PAD keys; masked positions receive
exactly zero attention weight, so real positions of a padded batch see
the same values as an unpadded encode.
"""

import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import backend, rng, wire
from .errors import ConfigError, InputError

MAGIC = b"AMTM"
VERSION = 1
LN_EPS = 1e-5
INIT_STD = 0.02

# Reserved token ids shared with the tasks module.
CLS_ID = 0
SEP_ID = 1
PAD_ID = 2


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 64
    max_positions: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.model_dim < 1 or self.num_heads < 1:
            raise ConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by "
                f"num_heads {self.num_heads}")
        if self.ffn_dim < self.model_dim:
            raise ConfigError(
                f"ffn_dim {self.ffn_dim} must be >= model_dim {self.model_dim}")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")
        if not 0 <= self.seed <= rng.MASK64:
            raise ConfigError("seed must fit in 64 bits")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def _param_shapes(config: EncoderConfig):
    """Parameter (name, shape) pairs in checkpoint declaration order."""
    d, f = config.model_dim, config.ffn_dim
    yield "tok_emb", (config.vocab_size, d)
    yield "pos_emb", (config.max_positions, d)
    for i in range(config.num_layers):
        p = f"layers.{i}."
        yield p + "ln1_gain", (d,)
        yield p + "ln1_bias", (d,)
        yield p + "attn_qkv_w", (d, 3 * d)
        yield p + "attn_qkv_b", (3 * d,)
        yield p + "attn_out_w", (d, d)
        yield p + "attn_out_b", (d,)
        yield p + "ln2_gain", (d,)
        yield p + "ln2_bias", (d,)
        yield p + "ffn1_w", (d, f)
        yield p + "ffn1_b", (f,)
        yield p + "ffn2_w", (f, d)
        yield p + "ffn2_b", (d,)


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict = field(repr=False)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config,
                            {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.config,
                            {k: v.astype(dtype) for k, v in self.params.items()})

    def weight_bytes(self) -> bytes:
        return b"".join(v.tobytes() for v in self.params.values())


def init_model(config: EncoderConfig) -> EncoderModel:
    """Build a model with Philox-seeded weights.

    Projection and embedding matrices are normal(0, 0.02); biases are
    zero; normalization gains are one.  Tensors are drawn in
    declaration order from a single stream keyed by ``config.seed``.
    """
    gen = rng.generator(config.seed)
    params = {}
    for name, shape in _param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_w") or leaf in ("tok_emb", "pos_emb"):
            params[name] = gen.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        elif leaf.endswith("gain"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return EncoderModel(config, params)


def param_count(config: EncoderConfig) -> int:
    """Exact number of trainable scalars for this architecture."""
    return sum(math.prod(shape) for _, shape in _param_shapes(config))


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def forward(model: EncoderModel, ids: np.ndarray, mask: np.ndarray = None,
            want_cache: bool = False):
    """Batched encoder pass.

    ids: int array (B, n); mask: float (B, n) with 1 for real tokens and
    0 for PAD, or None for no masking.  Returns ``(hs, cache)`` where
    ``hs`` is a list of L+1 arrays of shape (B, n, d); ``cache`` holds
    the intermediates :func:`backward` needs (or None).
    """
    cfg = model.config
    p = model.params
    dtype = p["tok_emb"].dtype
    b, n = ids.shape
    hdim = cfg.head_dim
    scale = 1.0 / math.sqrt(hdim)

    x = p["tok_emb"][ids] + p["pos_emb"][:n]
    hs = [x]
    if mask is not None:
        attn_bias = ((mask - 1.0) * 1e9).astype(dtype).reshape(b, 1, 1, n)
    else:
        attn_bias = None

    layers = [] if want_cache else None
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        t, xhat1, rstd1 = backend.layernorm_fwd(
            x, p[pre + "ln1_gain"], p[pre + "ln1_bias"], LN_EPS)
        qkv = t @ p[pre + "attn_qkv_w"] + p[pre + "attn_qkv_b"]
        q, k, v = (_split_heads(part, cfg.num_heads)
                   for part in np.split(qkv, 3, axis=-1))
        scores = (q @ k.transpose(0, 1, 3, 2)) * dtype.type(scale)
        if attn_bias is not None:
            scores = scores + attn_bias
        probs = backend.softmax_fwd(scores)
        ctx = _merge_heads(probs @ v)
        u = x + ctx @ p[pre + "attn_out_w"] + p[pre + "attn_out_b"]

        t2, xhat2, rstd2 = backend.layernorm_fwd(
            u, p[pre + "ln2_gain"], p[pre + "ln2_bias"], LN_EPS)
        z = t2 @ p[pre + "ffn1_w"] + p[pre + "ffn1_b"]
        g = backend.gelu_fwd(z)
        h = u + g @ p[pre + "ffn2_w"] + p[pre + "ffn2_b"]

        if want_cache:
            layers.append(dict(t=t, xhat1=xhat1, rstd1=rstd1, q=q, k=k, v=v,
                               probs=probs, ctx=ctx, u=u, t2=t2, xhat2=xhat2,
                               rstd2=rstd2, z=z, g=g))
        hs.append(h)
        x = h

    cache = dict(ids=ids, hs=hs, layers=layers) if want_cache else None
    return hs, cache


def backward(model: EncoderModel, cache: dict, dhs) -> dict:
    """Gradients of a scalar loss w.r.t. all encoder parameters.

    ``dhs`` is a list of L+1 arrays matching the shapes returned by
    :func:`forward` (entries may be None when a layer's output is
    unused downstream).  Returns a dict keyed like ``model.params``.
    """
    cfg = model.config
    p = model.params
    ids = cache["ids"]
    hs = cache["hs"]
    dtype = p["tok_emb"].dtype
    b, n = ids.shape
    d = cfg.model_dim
    scale = 1.0 / math.sqrt(cfg.head_dim)

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    g = dhs[cfg.num_layers]
    if g is None:
        g = np.zeros_like(hs[cfg.num_layers])
    for i in range(cfg.num_layers - 1, -1, -1):
        pre = f"layers.{i}."
        c = cache["layers"][i]

        grads[pre + "ffn2_w"] += flat(c["g"]).T @ flat(g)
        grads[pre + "ffn2_b"] += flat(g).sum(axis=0)
        dgact = g @ p[pre + "ffn2_w"].T
        dz = backend.gelu_bwd(c["z"], dgact)
        grads[pre + "ffn1_w"] += flat(c["t2"]).T @ flat(dz)
        grads[pre + "ffn1_b"] += flat(dz).sum(axis=0)
        dt2 = dz @ p[pre + "ffn1_w"].T
        du_ln, dg2, db2 = backend.layernorm_bwd(
            dt2, c["xhat2"], c["rstd2"], p[pre + "ln2_gain"])
        grads[pre + "ln2_gain"] += dg2
        grads[pre + "ln2_bias"] += db2
        du = g + du_ln

        dctx_flat = du @ p[pre + "attn_out_w"].T
        grads[pre + "attn_out_w"] += flat(c["ctx"]).T @ flat(du)
        grads[pre + "attn_out_b"] += flat(du).sum(axis=0)
        dctx = _split_heads(dctx_flat, cfg.num_heads)
        dprobs = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["probs"].transpose(0, 1, 3, 2) @ dctx
        dscores = backend.softmax_bwd(c["probs"], dprobs)
        dq = (dscores @ c["k"]) * dtype.type(scale)
        dk = (dscores.transpose(0, 1, 3, 2) @ c["q"]) * dtype.type(scale)
        dqkv = np.concatenate(
            [_merge_heads(part) for part in (dq, dk, dv)], axis=-1)
        grads[pre + "attn_qkv_w"] += flat(c["t"]).T @ flat(dqkv)
        grads[pre + "attn_qkv_b"] += flat(dqkv).sum(axis=0)
        dt = dqkv @ p[pre + "attn_qkv_w"].T
        dx_ln, dg1, db1 = backend.layernorm_bwd(
            dt, c["xhat1"], c["rstd1"], p[pre + "ln1_gain"])
        grads[pre + "ln1_gain"] += dg1
        grads[pre + "ln1_bias"] += db1

        g = du + dx_ln
        if dhs[i] is not None:
            g = g + dhs[i]

    np.add.at(grads["tok_emb"], ids.reshape(-1), g.reshape(-1, d))
    grads["pos_emb"][:n] += g.sum(axis=0)
    return grads


def _validate_ids(config: EncoderConfig, ids: np.ndarray):
    if ids.size == 0:
        raise InputError("token sequence is empty")
    if ids.shape[-1] > config.max_positions:
        raise InputError(
            f"sequence length {ids.shape[-1]} exceeds max_positions "
            f"{config.max_positions}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(
            f"token id out of range [0, {config.vocab_size})")


def encode(model: EncoderModel, token_ids) -> np.ndarray:
    """All-layer features for one token sequence.

    Returns an array of shape (L+1, n, d): index 0 is the embedding
    output, index l the output of Transformer layer l.  Pure function
    of (model, input); repeated calls are bit-identical.
    """
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    _validate_ids(model.config, ids)
    hs, _ = forward(model, ids)
    return np.stack([h[0] for h in hs])


def save_model(stream, model: EncoderModel):
    cfg = model.config
    stream.write(MAGIC)
    wire.write_u16(stream, VERSION)
    for value in (cfg.num_layers, cfg.model_dim, cfg.num_heads,
                  cfg.ffn_dim, cfg.vocab_size, cfg.max_positions):
        wire.write_u32(stream, value)
    wire.write_u64(stream, cfg.seed)
    for name, _ in _param_shapes(cfg):
        wire.write_tensor(stream, model.params[name])


def load_model(stream) -> EncoderModel:
    r = wire.Reader(stream)
    r.magic(MAGIC)
    r.version(VERSION)
    fields = [r.u32(f) for f in ("num_layers", "model_dim", "num_heads",
                                 "ffn_dim", "vocab_size", "max_positions")]
    seed = r.u64("seed")
    config = EncoderConfig(*fields, seed=seed)
    params = {}
    for name, shape in _param_shapes(config):
        arr = r.tensor(name)
        if arr.shape != shape:
            raise wire.FormatError(
                f"tensor {name} has shape {arr.shape}, expected {shape}",
                offset=r.offset)
        params[name] = arr
    return EncoderModel(config, params)


def model_bytes(model: EncoderModel) -> bytes:
    buf = io.BytesIO()
    save_model(buf, model)
    return buf.getvalue()


def fingerprint(model: EncoderModel) -> int:
    """64-bit hash of the model checkpoint, for stale-feature detection."""
    digest = hashlib.sha256(model_bytes(model)).digest()
    return int.from_bytes(digest[:8], "little")


def save_model_file(path, model: EncoderModel):
    with open(path, "wb") as fh:
        save_model(fh, model)


def load_model_file(path) -> EncoderModel:
    with open(path, "rb") as fh:
        return load_model(fh)


def clone_config(config: EncoderConfig, **overrides) -> EncoderConfig:
    return dataclasses.replace(config, **overrides)
