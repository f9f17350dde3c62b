"""Binary trace files: the bit-exact record of one trajectory's noise
predictions (and optionally latents), replayable offline.

Layout, all integers little-endian:

    magic  b"TAOT"
    u32    format version (currently 1)
    u32    header length in bytes
    bytes  header: canonical JSON (sorted keys, no whitespace) with fields
           T, dtype ("f32"), endianness ("little"), model_id,
           schedule_kind, seed, shape, streams (bitmask)
    ...    record frames, t descending, stream code ascending within a t:
               u32 t | u8 stream | u8 flags (bit0 = latent follows)
               f32[prod(shape)] prediction payload
               f32[prod(shape)] latent payload, only if flags bit0
    u32    CRC32 of every byte before it

Payloads are stored as f32; all statistics downstream are computed in f64
after upcasting. Header canonicalization makes two writes of the same
trace byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ParameterError,
    TraceValidationError,
    TruncatedError,
    VersionError,
)

MAGIC = b"TAOT"
FORMAT_VERSION = 1
_STREAM_CODES = (1, 2, 4)  # cond, uncond, guided
_FLAG_HAS_LATENT = 0x01
_FRAME_HEAD = struct.Struct("<IBB")


@dataclass
class Trace:
    """In-memory trajectory record.

    records maps (t, stream_code) to a flat f64 prediction array; latents
    maps t to a flat f64 latent array. Arrays are upcast copies of the f32
    payloads, so replayed statistics are deterministic in f64.
    """

    model_id: str
    T: int
    shape: tuple[int, ...]
    stream_mask: int
    schedule_kind: str
    seed: int
    records: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    latents: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        if not 0 < self.stream_mask < 8:
            raise ParameterError(f"stream mask {self.stream_mask} out of range")

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def stream_codes(self) -> tuple[int, ...]:
        return tuple(c for c in _STREAM_CODES if self.stream_mask & c)

    def add(self, t: int, stream: int, eps, latent=None):
        key = (int(t), int(stream))
        if key in self.records:
            raise TraceValidationError(f"duplicate record for {key}")
        self.records[key] = np.asarray(eps, dtype=np.float64).reshape(-1)
        if latent is not None:
            self.latents[int(t)] = np.asarray(latent, dtype=np.float64).reshape(-1)

    def validate(self):
        """Check completeness and payload sizes against the header fields."""
        missing = [
            t
            for t in range(self.T, 0, -1)
            if any((t, c) not in self.records for c in self.stream_codes())
        ]
        if missing:
            raise TraceValidationError(f"missing records for t = {missing}")
        extra = [k for k in self.records if not (1 <= k[0] <= self.T)]
        extra += [k for k in self.records if k[1] not in self.stream_codes()]
        if extra:
            raise TraceValidationError(f"records outside header range: {sorted(set(extra))}")
        for key, arr in self.records.items():
            if arr.size != self.dim:
                raise TraceValidationError(
                    f"record {key} has {arr.size} values, expected {self.dim}"
                )
        for t, arr in self.latents.items():
            if arr.size != self.dim:
                raise TraceValidationError(
                    f"latent at t={t} has {arr.size} values, expected {self.dim}"
                )

    def meta_dict(self) -> dict:
        return {
            "T": self.T,
            "dtype": "f32",
            "endianness": "little",
            "model_id": self.model_id,
            "schedule_kind": self.schedule_kind,
            "seed": int(self.seed),
            "shape": list(self.shape),
            "streams": int(self.stream_mask),
        }


def _encode(trace: Trace) -> bytes:
    trace.validate()
    header = json.dumps(trace.meta_dict(), sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    out.write(header)
    codes = trace.stream_codes()
    for t in range(trace.T, 0, -1):
        latent_pending = t in trace.latents
        for code in codes:
            flags = _FLAG_HAS_LATENT if latent_pending else 0
            out.write(_FRAME_HEAD.pack(t, code, flags))
            out.write(trace.records[(t, code)].astype("<f4").tobytes())
            if latent_pending:
                out.write(trace.latents[t].astype("<f4").tobytes())
                latent_pending = False
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def write_trace(trace: Trace, sink) -> int:
    """Serialize a validated trace to a path or binary file; returns byte count."""
    blob = _encode(trace)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(blob)
    else:
        sink.write(blob)
    return len(blob)


def _take(buf: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise TruncatedError(f"unexpected end of data while reading {what}")
    return buf[pos : pos + n], pos + n


def read_trace(source) -> Trace:
    """Parse and fully validate a trace file (path, binary file, or bytes)."""
    if isinstance(source, (str, Path)):
        buf = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        buf = bytes(source)
    else:
        buf = source.read()
    if buf[:4] != MAGIC:
        raise BadMagicError("source does not start with trace magic")
    pos = 4
    raw, pos = _take(buf, pos, 8, "version and header length")
    version, header_len = struct.unpack("<II", raw)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported trace format version {version}")
    raw, pos = _take(buf, pos, header_len, "header")
    try:
        meta = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceValidationError(f"unreadable header: {exc}") from exc
    try:
        trace = Trace(
            model_id=str(meta["model_id"]),
            T=int(meta["T"]),
            shape=tuple(meta["shape"]),
            stream_mask=int(meta["streams"]),
            schedule_kind=str(meta["schedule_kind"]),
            seed=int(meta["seed"]),
        )
        if meta.get("dtype") != "f32" or meta.get("endianness") != "little":
            raise TraceValidationError("unsupported payload dtype or endianness")
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceValidationError(f"malformed header: {exc}") from exc
    payload = trace.dim * 4
    last_t = None
    while pos < len(buf) - 4:
        raw, pos = _take(buf, pos, _FRAME_HEAD.size, "record frame head")
        t, code, flags = _FRAME_HEAD.unpack(raw)
        raw, pos = _take(buf, pos, payload, f"prediction payload at t={t}")
        eps = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        latent = None
        if flags & _FLAG_HAS_LATENT:
            raw, pos = _take(buf, pos, payload, f"latent payload at t={t}")
            latent = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if last_t is not None and t > last_t:
            raise TraceValidationError("record timesteps are not descending")
        last_t = t
        trace.add(t, code, eps, latent)
    raw, pos = _take(buf, pos, 4, "trailing checksum")
    (crc_stored,) = struct.unpack("<I", raw)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("CRC32 mismatch: trace is corrupt")
    trace.validate()
    return trace
