"""Capture per-step noise predictions from a pipeline run and write them in
the trajectory-trace wire format.

Layout (little-endian): magic "TAOT", u32 version 1, u32 header length,
canonical JSON header, then one frame per (t, stream) record -- u32 t,
u8 stream code, u8 flags (bit0: an f32 latent payload follows the f32
prediction payload) -- and a trailing CRC32 over everything before it.
Timesteps are written descending, stream codes ascending within a step,
and the optional latent rides on the first stream frame of its step.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TAOT"
FORMAT_VERSION = 1
STREAM_CODES = {"cond": 1, "uncond": 2, "guided": 4}
_FLAG_HAS_LATENT = 0x01


class ExportError(Exception):
    """Base class for exporter failures."""


class StepCountMismatch(ExportError):
    """The pipeline did not report every (step, stream) exactly once."""


@dataclass
class ExportSession:
    """One recording session: what the pipeline is expected to emit and where
    the finished trace goes."""

    model_id: str
    T: int
    shape: tuple[int, ...]
    streams: tuple[str, ...]
    output_path: str | os.PathLike
    capture_latents: bool = False
    schedule_kind: str = "unknown"
    seed: int = 0
    _records: dict = field(default_factory=dict, repr=False)
    _latents: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.streams = tuple(self.streams)
        if self.T < 1:
            raise ExportError(f"T must be >= 1, got {self.T}")
        unknown = [s for s in self.streams if s not in STREAM_CODES]
        if unknown or not self.streams:
            raise ExportError(f"unknown or empty stream selection: {unknown}")

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def emit(self, t: int, stream: str, eps, latent=None) -> None:
        """Callback handed to the pipeline; call once per (t, stream)."""
        if stream not in self.streams:
            raise ExportError(f"stream {stream!r} not in session selection {self.streams}")
        key = (int(t), stream)
        if key in self._records:
            raise StepCountMismatch(f"step {key} reported twice")
        arr = np.asarray(eps, dtype="<f4").reshape(-1)
        if arr.size != self.dim:
            raise ExportError(f"payload at {key} has {arr.size} values, expected {self.dim}")
        self._records[key] = arr
        if latent is not None:
            if not self.capture_latents:
                raise ExportError("latent passed but capture_latents is off")
            lat = np.asarray(latent, dtype="<f4").reshape(-1)
            if lat.size != self.dim:
                raise ExportError(f"latent at t={t} has {lat.size} values, expected {self.dim}")
            self._latents[int(t)] = lat

    def _check_complete(self) -> None:
        missing = [
            (t, s)
            for t in range(self.T, 0, -1)
            for s in self.streams
            if (t, s) not in self._records
        ]
        if missing:
            raise StepCountMismatch(f"pipeline never reported steps {missing[:8]}")
        extra = [k for k in self._records if not 1 <= k[0] <= self.T]
        if extra:
            raise StepCountMismatch(f"steps outside [1, T]: {sorted(extra)[:8]}")

    def _header_bytes(self) -> bytes:
        meta = {
            "T": self.T,
            "dtype": "f32",
            "endianness": "little",
            "model_id": self.model_id,
            "schedule_kind": self.schedule_kind,
            "seed": int(self.seed),
            "shape": list(self.shape),
            "streams": sum(STREAM_CODES[s] for s in set(self.streams)),
        }
        return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()

    def _encode(self) -> bytes:
        header = self._header_bytes()
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
        codes = sorted(STREAM_CODES[s] for s in set(self.streams))
        by_code = {STREAM_CODES[s]: s for s in self.streams}
        for t in range(self.T, 0, -1):
            latent_pending = t in self._latents
            for code in codes:
                flags = _FLAG_HAS_LATENT if latent_pending else 0
                parts.append(struct.pack("<IBB", t, code, flags))
                parts.append(self._records[(t, by_code[code])].tobytes())
                if latent_pending:
                    parts.append(self._latents[t].tobytes())
                    latent_pending = False
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def export_run(pipeline, session: ExportSession) -> Path:
    """Drive one pipeline run and write the finished trace.

    ``pipeline`` is any callable taking the per-step emit callback:
    ``pipeline(emit)`` with ``emit(t, stream, eps, latent=None)`` invoked
    once per denoising step and stream. If the run dies or misses steps,
    no output file is left behind.
    """
    out = Path(session.output_path)
    try:
        pipeline(session.emit)
        session._check_complete()
        blob = session._encode()
    except Exception:
        if out.exists():
            out.unlink()
        raise
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=out.parent, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp_name, out)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return out
