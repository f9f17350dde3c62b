"""One-time warmup calibration: run unaccelerated trajectories over a
prompt set, collect per-timestep delta statistics, and aggregate them into
mean/std lookup tables per conditioning stream.

Statistics exist for t <= T-2 (a delta pair needs three predictions).
Zero-delta samples are excluded rather than clamped so the tables stay
unbiased. Per-entry sums use math.fsum, which makes every table entry
exactly permutation-invariant in the prompt list.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .backends import DenoiserBackend, GuidanceSpec, Stream
from .core import EPS_ZERO, Latent, NoisePred, delta, delta_stats
from .errors import ParameterError, TableMismatchError
from .schedule import NoiseSchedule, SamplerMode, SamplerState, init_noise, scheduler_step
from .traceio import Trace

TABLE_FORMAT = "taocache-calibration-v1"

_STREAM_KEYS = {Stream.COND: "cond", Stream.UNCOND: "uncond", Stream.GUIDED: "guided"}
_KEY_STREAMS = {v: k for k, v in _STREAM_KEYS.items()}


@dataclass
class _Moments:
    """Count / mean / centered second moment, mergeable without resampling."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def from_samples(cls, vals: list[float]) -> "_Moments":
        n = len(vals)
        if n == 0:
            return cls()
        mean = math.fsum(vals) / n
        m2 = math.fsum((v - mean) ** 2 for v in vals)
        return cls(n=n, mean=mean, m2=m2)

    def merged(self, other: "_Moments") -> "_Moments":
        if self.n == 0:
            return _Moments(other.n, other.mean, other.m2)
        if other.n == 0:
            return _Moments(self.n, self.mean, self.m2)
        n = self.n + other.n
        d = other.mean - self.mean
        mean = self.mean + d * other.n / n
        m2 = self.m2 + other.m2 + d * d * self.n * other.n / n
        return _Moments(n=n, mean=mean, m2=m2)

    @property
    def std(self) -> float:
        """Sample standard deviation (n-1 denominator); 0.0 below two samples."""
        if self.n < 2:
            return 0.0
        return math.sqrt(max(self.m2, 0.0) / (self.n - 1))


@dataclass
class StreamStats:
    """Per-timestep moments for one conditioning stream; index i holds t = i + 1."""

    cos: list[_Moments]
    ratio: list[_Moments]

    @classmethod
    def empty(cls, T: int) -> "StreamStats":
        return cls(
            cos=[_Moments() for _ in range(T - 1)],
            ratio=[_Moments() for _ in range(T - 1)],
        )


@dataclass
class CalibrationTable:
    """Mean/std lookup tables for delta cosine similarity and norm ratio.

    Entries are indexed by timestep t in [1, T-1]; only t <= T-2 can carry
    samples. Entries with no valid samples are absent (NaN in the exported
    arrays, null in JSON) and must never be consumed by a policy.
    """

    T: int
    schedule_kind: str
    backend_id: str
    prompt_count: int
    streams: dict[Stream, StreamStats] = dc_field(default_factory=dict)
    created_at: str | None = None

    def _entry(self, t: int, stream: Stream) -> tuple[_Moments, _Moments]:
        if not 1 <= t <= self.T - 1:
            raise ParameterError(f"t = {t} outside table range [1, {self.T - 1}]")
        ss = self.streams[Stream(stream)]
        return ss.cos[t - 1], ss.ratio[t - 1]

    def n_valid(self, t: int, stream: Stream = Stream.GUIDED) -> int:
        return self._entry(t, stream)[0].n

    def is_valid(self, t: int, stream: Stream = Stream.GUIDED) -> bool:
        return self.n_valid(t, stream) > 0

    def cos_mean(self, t: int, stream: Stream = Stream.GUIDED) -> float:
        return self._entry(t, stream)[0].mean

    def cos_std(self, t: int, stream: Stream = Stream.GUIDED) -> float:
        return self._entry(t, stream)[0].std

    def ratio_mean(self, t: int, stream: Stream = Stream.GUIDED) -> float:
        return self._entry(t, stream)[1].mean

    def ratio_std(self, t: int, stream: Stream = Stream.GUIDED) -> float:
        return self._entry(t, stream)[1].std

    def arrays(self, stream: Stream = Stream.GUIDED) -> dict[str, np.ndarray]:
        """Dense arrays indexed by t - 1 for t in [1, T-1]; NaN where absent."""
        ss = self.streams[Stream(stream)]
        n = np.array([m.n for m in ss.cos], dtype=np.int64)
        out = {"n_valid": n}
        for name, moms in (("cos", ss.cos), ("ratio", ss.ratio)):
            mean = np.array([m.mean if m.n else np.nan for m in moms])
            std = np.array([m.std if m.n else np.nan for m in moms])
            out[f"{name}_mean"] = mean
            out[f"{name}_std"] = std
        return out

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        streams = {}
        for stream, ss in self.streams.items():
            streams[_STREAM_KEYS[stream]] = {
                "n_valid": [m.n for m in ss.cos],
                "cos_mean": [m.mean if m.n else None for m in ss.cos],
                "cos_m2": [m.m2 if m.n else None for m in ss.cos],
                "cos_std": [m.std if m.n else None for m in ss.cos],
                "ratio_mean": [m.mean if m.n else None for m in ss.ratio],
                "ratio_m2": [m.m2 if m.n else None for m in ss.ratio],
                "ratio_std": [m.std if m.n else None for m in ss.ratio],
            }
        return {
            "format": TABLE_FORMAT,
            "T": self.T,
            "schedule_kind": self.schedule_kind,
            "backend_id": self.backend_id,
            "prompt_count": self.prompt_count,
            "created_at": self.created_at,
            "streams": streams,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationTable":
        if d.get("format") != TABLE_FORMAT:
            raise ParameterError(f"unrecognized table format {d.get('format')!r}")
        table = cls(
            T=int(d["T"]),
            schedule_kind=d["schedule_kind"],
            backend_id=d["backend_id"],
            prompt_count=int(d["prompt_count"]),
            created_at=d.get("created_at"),
        )
        for key, block in d["streams"].items():
            stream = _KEY_STREAMS[key]
            ss = StreamStats.empty(table.T)
            for i, n in enumerate(block["n_valid"]):
                if n:
                    ss.cos[i] = _Moments(int(n), block["cos_mean"][i], block["cos_m2"][i])
                    ss.ratio[i] = _Moments(int(n), block["ratio_mean"][i], block["ratio_m2"][i])
            table.streams[stream] = ss
        return table

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, path) -> None:
        """One row per timestep with per-stream mean/std columns (plot fodder)."""
        names = [_STREAM_KEYS[s] for s in self.streams]
        header = ["t"]
        for name in names:
            header += [
                f"{name}_cos_mean",
                f"{name}_cos_std",
                f"{name}_ratio_mean",
                f"{name}_ratio_std",
                f"{name}_n_valid",
            ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(1, self.T):
                row: list = [t]
                for stream in self.streams:
                    cos_m, ratio_m = self._entry(t, stream)
                    if cos_m.n:
                        row += [
                            f"{cos_m.mean:.12g}",
                            f"{cos_m.std:.12g}",
                            f"{ratio_m.mean:.12g}",
                            f"{ratio_m.std:.12g}",
                            cos_m.n,
                        ]
                    else:
                        row += ["", "", "", "", 0]
                writer.writerow(row)


@dataclass(frozen=True)
class Prompt:
    """One calibration/evaluation case: a conditioning spec plus a noise seed."""

    prompt_id: str
    seed: int
    guidance: GuidanceSpec | None = None  # used by mixture-family backends


def resolve_backend(backend, prompt: Prompt) -> DenoiserBackend:
    """Backends may be shared instances or per-prompt factories."""
    return backend(prompt) if callable(backend) else backend


def walk_trajectory(
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    mode: SamplerMode,
    seed: int,
    streams: tuple[Stream, ...],
    drive: Stream,
    visit,
) -> Latent:
    """Run one full (unaccelerated) trajectory, calling visit(t, x_t, eps_by_stream)
    at every step; returns x0. This is the single source of truth for what an
    uncached run does, so recording never perturbs sampling."""
    state = SamplerState(x=init_noise(seed, backend.shape), t=sched.T, rng_seed=seed)
    for t in range(sched.T, 0, -1):
        eps = {s: backend.predict(state.x, t, s) for s in streams}
        visit(t, state.x, eps)
        state = scheduler_step(state, eps[drive], sched, mode)
    return state.x


def _pick_drive(streams: tuple[Stream, ...]) -> Stream:
    return Stream.GUIDED if Stream.GUIDED in streams else streams[0]


def calibrate(
    prompts: list[Prompt],
    backend,
    sched: NoiseSchedule,
    mode: SamplerMode = SamplerMode.DDIM,
    *,
    streams: tuple[Stream, ...] | None = None,
    eps_zero: float = EPS_ZERO,
    created_at: str | None = None,
) -> CalibrationTable:
    """Run the prompt set without acceleration and build the lookup tables.

    For each prompt and stream the full T-step loop records predictions,
    forms deltas for t <= T-1 and (cos, ratio) pairs for t <= T-2, drops
    invalid (zero-delta) samples, then aggregates mean and sample std
    across prompts per timestep.
    """
    if len(prompts) < 2:
        raise ParameterError("calibration needs at least 2 prompts")
    if sched.T < 4:
        raise ParameterError("calibration needs T >= 4")
    first_backend = resolve_backend(backend, prompts[0])
    if streams is None:
        streams = first_backend.streams
    drive = _pick_drive(streams)
    samples: dict[Stream, dict[str, list[list[float]]]] = {
        s: {"cos": [[] for _ in range(sched.T - 1)], "ratio": [[] for _ in range(sched.T - 1)]}
        for s in streams
    }
    for prompt in prompts:
        b = resolve_backend(backend, prompt)
        prev_eps: dict[Stream, NoisePred] = {}
        prev_delta: dict[Stream, object] = {}

        def record(t, x, eps_by_stream):
            for s in streams:
                eps = eps_by_stream[s]
                if s in prev_eps:
                    d = delta(eps, prev_eps[s])
                    if s in prev_delta:
                        st = delta_stats(d, prev_delta[s], eps_zero)
                        if st.valid:
                            samples[s]["cos"][t - 1].append(st.cos)
                            samples[s]["ratio"][t - 1].append(st.ratio)
                    prev_delta[s] = d
                prev_eps[s] = eps

        walk_trajectory(b, sched, mode, prompt.seed, streams, drive, record)
    table = CalibrationTable(
        T=sched.T,
        schedule_kind=sched.kind,
        backend_id=first_backend.backend_id,
        prompt_count=len(prompts),
        created_at=created_at,
    )
    for s in streams:
        ss = StreamStats.empty(sched.T)
        for i in range(sched.T - 1):
            ss.cos[i] = _Moments.from_samples(samples[s]["cos"][i])
            ss.ratio[i] = _Moments.from_samples(samples[s]["ratio"][i])
        table.streams[s] = ss
    return table


def table_merge(a: CalibrationTable, b: CalibrationTable) -> CalibrationTable:
    """Pool two tables as if calibrated over the union of their prompt sets."""
    if (a.T, a.schedule_kind, a.backend_id) != (b.T, b.schedule_kind, b.backend_id):
        raise TableMismatchError(
            f"cannot merge tables with metadata (T={a.T}, {a.schedule_kind}, {a.backend_id}) "
            f"vs (T={b.T}, {b.schedule_kind}, {b.backend_id})"
        )
    if set(a.streams) != set(b.streams):
        raise TableMismatchError("cannot merge tables with different stream sets")
    out = CalibrationTable(
        T=a.T,
        schedule_kind=a.schedule_kind,
        backend_id=a.backend_id,
        prompt_count=a.prompt_count + b.prompt_count,
        created_at=a.created_at,
    )
    for stream in a.streams:
        sa, sb = a.streams[stream], b.streams[stream]
        ss = StreamStats.empty(a.T)
        for i in range(a.T - 1):
            ss.cos[i] = sa.cos[i].merged(sb.cos[i])
            ss.ratio[i] = sa.ratio[i].merged(sb.ratio[i])
        out.streams[stream] = ss
    return out


def record_trace(
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    mode: SamplerMode,
    seed: int,
    *,
    streams: tuple[Stream, ...] | None = None,
    with_latents: bool = False,
    model_id: str | None = None,
) -> tuple[Trace, Latent]:
    """Record one unaccelerated trajectory into a trace; returns (trace, x0)."""
    if streams is None:
        streams = backend.streams
    mask = 0
    for s in streams:
        mask |= int(s)
    trace = Trace(
        model_id=model_id or backend.backend_id,
        T=sched.T,
        shape=backend.shape,
        stream_mask=mask,
        schedule_kind=sched.kind,
        seed=seed,
    )

    def record(t, x, eps_by_stream):
        for i, s in enumerate(streams):
            trace.add(t, int(s), eps_by_stream[s].data, x.data if with_latents and i == 0 else None)

    x0 = walk_trajectory(backend, sched, mode, seed, streams, _pick_drive(streams), record)
    return trace, x0
