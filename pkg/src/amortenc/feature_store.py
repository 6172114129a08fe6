"""Bit-exact persistence of extracted (possibly quantized) features.

Records support the backfilling scenario: features computed by a frozen
encoder are written once and replayed later when new tasks appear.
Each record carries the 64-bit fingerprint of the producing encoder so
stale features are refused instead of silently reused.

Wire format (little-endian):

    magic "AMTF" | version u16 | doc_id (u16 len + UTF-8) |
    fingerprint u64 | stage u8 | scheme u8 |
    [scale f32, zero_point u8  -- u8 scheme only] |
    rank u8 | dims u32 x rank | payload

Stage 0 (``raw_layers``) stores a 3-D (layers, tokens, dim) tensor of
the post-embedding layer outputs; stage 1 (``layer_pooled``) stores a
2-D (tokens, dim) tensor.  One-bit payloads pack each trailing-axis row
MSB-first, rows byte-aligned.  Files live at ``<store>/<doc_id>.amtf``.
"""

import os
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Optional

from . import wire
from .errors import FormatError, InputError, StorageError
from .quantization import (KIND_BIT1, KIND_F16, KIND_F32, KIND_U8,
                           QuantParams, QuantScheme, QuantizedFeatures,
                           payload_nbytes)

MAGIC = b"AMTF"
VERSION = 1

STAGE_RAW_LAYERS = "raw_layers"
STAGE_LAYER_POOLED = "layer_pooled"

_STAGE_CODES = {STAGE_RAW_LAYERS: 0, STAGE_LAYER_POOLED: 1}
_STAGE_NAMES = {v: k for k, v in _STAGE_CODES.items()}
_STAGE_RANKS = {STAGE_RAW_LAYERS: 3, STAGE_LAYER_POOLED: 2}

_SCHEME_CODES = {KIND_F32: 0, KIND_F16: 1, KIND_U8: 2, KIND_BIT1: 3}
_SCHEME_NAMES = {v: k for k, v in _SCHEME_CODES.items()}


@dataclass(frozen=True)
class FeatureRecord:
    doc_id: str
    encoder_fingerprint: int
    pooling_stage: str
    quantized: QuantizedFeatures
    token_count: int

    def __post_init__(self):
        if self.pooling_stage not in _STAGE_CODES:
            raise InputError(f"unknown pooling stage {self.pooling_stage!r}")
        rank = _STAGE_RANKS[self.pooling_stage]
        if len(self.quantized.shape) != rank:
            raise InputError(
                f"{self.pooling_stage} features must be {rank}-D, got shape "
                f"{self.quantized.shape}")
        if self.token_count != self.quantized.shape[-2]:
            raise InputError(
                f"token_count {self.token_count} does not match feature "
                f"shape {self.quantized.shape}")


def write_features(sink: BinaryIO, record: FeatureRecord) -> None:
    try:
        sink.write(MAGIC)
        wire.write_u16(sink, VERSION)
        wire.write_str16(sink, record.doc_id)
        wire.write_u64(sink, record.encoder_fingerprint)
        wire.write_u8(sink, _STAGE_CODES[record.pooling_stage])
        scheme = record.quantized.scheme
        wire.write_u8(sink, _SCHEME_CODES[scheme.kind])
        if scheme.kind == KIND_U8:
            wire.write_f32(sink, scheme.params.scale)
            wire.write_u8(sink, scheme.params.zero_point)
        shape = record.quantized.shape
        wire.write_u8(sink, len(shape))
        for dim in shape:
            wire.write_u32(sink, dim)
        sink.write(record.quantized.payload)
        sink.flush()
    except OSError as exc:
        raise StorageError(f"failed to write features: {exc}") from exc


def read_features(source: BinaryIO) -> FeatureRecord:
    r = wire.Reader(source)
    r.magic(MAGIC)
    r.version(VERSION)
    doc_id = r.str16("doc_id")
    fp = r.u64("fingerprint")
    stage_code = r.u8("stage")
    if stage_code not in _STAGE_NAMES:
        raise FormatError(f"unknown stage code {stage_code}",
                          offset=r.offset - 1)
    scheme_code = r.u8("scheme")
    if scheme_code not in _SCHEME_NAMES:
        raise FormatError(f"unknown scheme code {scheme_code}",
                          offset=r.offset - 1)
    kind = _SCHEME_NAMES[scheme_code]
    params = None
    if kind == KIND_U8:
        scale = r.f32("scale")
        zero_point = r.u8("zero_point")
        params = QuantParams(scale=scale, zero_point=zero_point)
    rank = r.u8("rank")
    dims = tuple(r.u32(f"dim {i}") for i in range(rank))
    stage = _STAGE_NAMES[stage_code]
    if rank != _STAGE_RANKS[stage]:
        raise FormatError(
            f"{stage} record must be {_STAGE_RANKS[stage]}-D, got rank {rank}",
            offset=r.offset)
    nbytes = payload_nbytes(dims, kind)
    payload = r.read_exact(nbytes, "payload")
    trailing = source.read(1)
    if trailing:
        raise FormatError("trailing bytes after payload", offset=r.offset)
    quantized = QuantizedFeatures(
        scheme=QuantScheme(kind, params), shape=dims, payload=payload)
    return FeatureRecord(doc_id=doc_id, encoder_fingerprint=fp,
                         pooling_stage=stage, quantized=quantized,
                         token_count=dims[-2])


class FeatureStore:
    """Directory of one ``.amtf`` file per document."""

    def __init__(self, root):
        self.root = str(root)

    def path_for(self, doc_id: str) -> str:
        if "/" in doc_id or "\\" in doc_id or doc_id in ("", ".", ".."):
            raise InputError(f"doc_id {doc_id!r} is not a valid file stem")
        return os.path.join(self.root, f"{doc_id}.amtf")

    def save(self, record: FeatureRecord) -> str:
        os.makedirs(self.root, exist_ok=True)
        path = self.path_for(record.doc_id)
        try:
            with open(path, "wb") as fh:
                write_features(fh, record)
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc
        return path

    def load(self, doc_id: str,
             expect_fingerprint: Optional[int] = None) -> FeatureRecord:
        path = self.path_for(doc_id)
        try:
            with open(path, "rb") as fh:
                record = read_features(fh)
        except FileNotFoundError as exc:
            raise StorageError(f"no features stored for {doc_id!r}") from exc
        if (expect_fingerprint is not None
                and record.encoder_fingerprint != expect_fingerprint):
            raise InputError(
                f"stored features for {doc_id!r} were produced by encoder "
                f"{record.encoder_fingerprint:#018x}, expected "
                f"{expect_fingerprint:#018x}")
        return record

    def doc_ids(self) -> Iterator[str]:
        if not os.path.isdir(self.root):
            return iter(())
        names = sorted(n[:-5] for n in os.listdir(self.root)
                       if n.endswith(".amtf"))
        return iter(names)
