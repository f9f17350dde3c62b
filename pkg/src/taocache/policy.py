"""Skip-window selection and the inference-time caching policies.

The flagship policy replaces late-stage model calls with delta
extrapolation: on a skipped step the running delta is scaled by the
calibrated mean norm ratio and added onto the running prediction. The
baselines (residual reuse, magnitude hold) and the residual-in-window
ablation exist for controlled comparisons, and the hybrid policy chains
residual caching early with delta extrapolation late across a forced
guard band.

Window scores are accumulated with math.fsum (exactly rounded), so the
sliding search is bit-identical to brute-force enumeration, ties included.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .backends import DenoiserBackend, Stream
from .calibration import CalibrationTable
from .core import Delta, Latent, NoisePred, delta, extrapolate
from .errors import InfeasibleWindowError, ParameterError, PlanInvalidError
from .schedule import NoiseSchedule, SamplerMode, SamplerState, scheduler_step
from .traceio import Trace

ACTION_COMPUTED = "computed"
ACTION_EXTRAPOLATED = "extrapolated"
ACTION_REFRESHED = "refreshed"


@dataclass(frozen=True)
class WindowParams:
    """Knobs for deviation-aware window selection.

    lam penalizes directional variability (std of cosine), gamma penalizes
    scale variability (std of ratio). tau_cos and t_upper confine the
    window to the late, well-calibrated regime; both act conjunctively
    when present. k_refresh of None means never refresh inside the window;
    a finite value forces a full call after every k_refresh consecutive
    skips, lengthening the window so the skip budget is preserved.
    warmup_steps counts initial steps (highest t) that are never skippable.
    """

    n_skip: int
    lam: float = 0.0
    gamma: float = 0.0
    tau_cos: float | None = None
    t_upper: int | None = None
    k_refresh: int | None = None
    warmup_steps: int = 2

    def __post_init__(self):
        if self.n_skip < 0:
            raise ParameterError(f"n_skip must be >= 0, got {self.n_skip}")
        if self.lam < 0.0 or self.gamma < 0.0:
            raise ParameterError("penalty weights must be >= 0")
        if self.tau_cos is not None and not -1.0 <= self.tau_cos <= 1.0:
            raise ParameterError(f"tau_cos {self.tau_cos} outside [-1, 1]")
        if self.k_refresh is not None and self.k_refresh < 1:
            raise ParameterError("k_refresh must be >= 1 or None")
        if self.warmup_steps < 0:
            raise ParameterError("warmup_steps must be >= 0")

    @property
    def window_len(self) -> int:
        """Window length including any interleaved refresh steps."""
        if self.n_skip == 0:
            return 0
        extra = 0 if self.k_refresh is None else math.ceil(self.n_skip / self.k_refresh) - 1
        return self.n_skip + extra


@dataclass(frozen=True)
class SkipPlan:
    """A resolved set of timesteps to skip plus forced-refresh points within it.

    skip_set is stored descending (loop order). Steps T and T-1 can never
    be skipped: two full calls are needed before the first delta exists.
    """

    T: int
    skip_set: tuple[int, ...]
    refresh_points: frozenset[int] = dc_field(default_factory=frozenset)
    provenance: str = "manual"
    score: float | None = None

    def __post_init__(self):
        skips = tuple(sorted(set(int(t) for t in self.skip_set), reverse=True))
        object.__setattr__(self, "skip_set", skips)
        object.__setattr__(self, "refresh_points", frozenset(int(t) for t in self.refresh_points))
        if self.provenance not in ("auto", "manual"):
            raise ParameterError(f"unknown provenance {self.provenance!r}")
        if any(not 1 <= t <= self.T - 2 for t in skips):
            raise PlanInvalidError("skip steps must lie in [1, T-2]")
        if not self.refresh_points <= set(skips):
            raise PlanInvalidError("refresh points must lie inside the skip window")
        if self.provenance == "auto" and skips:
            if skips[0] - skips[-1] != len(skips) - 1:
                raise PlanInvalidError("auto plans must cover a contiguous window")

    @property
    def n_skipped(self) -> int:
        return len(self.skip_set) - len(self.refresh_points)

    def to_dict(self) -> dict:
        return {
            "format": "taocache-skipplan-v1",
            "T": self.T,
            "skip_set": list(self.skip_set),
            "refresh_points": sorted(self.refresh_points),
            "provenance": self.provenance,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkipPlan":
        return cls(
            T=int(d["T"]),
            skip_set=tuple(d["skip_set"]),
            refresh_points=frozenset(d["refresh_points"]),
            provenance=d["provenance"],
            score=d.get("score"),
        )


def empty_plan(T: int) -> SkipPlan:
    return SkipPlan(T=T, skip_set=(), provenance="manual")


def manual_plan(T: int, t_lo: int, t_hi: int, k_refresh: int | None = None) -> SkipPlan:
    """Explicit contiguous window [t_lo, t_hi] with optional interleaved refreshes."""
    if t_lo > t_hi:
        raise ParameterError(f"empty window bounds [{t_lo}, {t_hi}]")
    window = tuple(range(t_hi, t_lo - 1, -1))
    return SkipPlan(
        T=T,
        skip_set=window,
        refresh_points=_refresh_points(window, k_refresh),
        provenance="manual",
    )


def _refresh_points(window_desc: tuple[int, ...], k_refresh: int | None) -> frozenset[int]:
    if k_refresh is None:
        return frozenset()
    points, consec = [], 0
    for t in window_desc:
        if consec == k_refresh:
            points.append(t)
            consec = 0
        else:
            consec += 1
    return frozenset(points)


@dataclass(frozen=True)
class PolicyRunReport:
    """What one policy run did: output, call ledger, and timing.

    trajectory holds (t, input latent, prediction used) per step so runs
    can be exported as traces and compared in prediction space; it is
    internal plumbing and never serialized with the report.
    """

    policy: str
    x0: Latent
    model_calls: int
    skipped: int
    steps: tuple[tuple[int, str], ...]
    duration_s: float
    trajectory: tuple[tuple[int, np.ndarray, np.ndarray], ...] | None = None

    def __post_init__(self):
        if self.model_calls + self.skipped != len(self.steps):
            raise ParameterError("ledger does not cover every step exactly once")

    @property
    def skip_fraction(self) -> float:
        return self.skipped / len(self.steps)

    def to_dict(self, duration: bool = True) -> dict:
        return {
            "format": "taocache-report-v1",
            "policy": self.policy,
            "model_calls": self.model_calls,
            "skipped": self.skipped,
            "skip_fraction": self.skip_fraction,
            "steps": [[t, a] for t, a in self.steps],
            "duration_s": self.duration_s if duration else None,
        }


def feasible_steps(
    table: CalibrationTable, p: WindowParams, stream: Stream = Stream.GUIDED
) -> set[int]:
    """Timesteps an auto-selected window may cover: valid table entries in
    the skippable range that satisfy tau_cos and t_upper (conjunctively).
    Raises InfeasibleWindowError naming the binding constraint."""
    T = table.T
    t_max = min(T - 2, T - p.warmup_steps)
    candidates = [t for t in range(1, t_max + 1) if table.is_valid(t, stream)]
    if not candidates:
        raise InfeasibleWindowError(
            "no feasible window: no valid table entries at or below "
            f"t = {t_max} (warmup_steps = {p.warmup_steps})"
        )
    if p.tau_cos is not None:
        candidates = [t for t in candidates if table.cos_mean(t, stream) >= p.tau_cos]
        if not candidates:
            raise InfeasibleWindowError(
                f"no feasible window: binding constraint tau_cos = {p.tau_cos}"
            )
    if p.t_upper is not None:
        candidates = [t for t in candidates if t <= p.t_upper]
        if not candidates:
            raise InfeasibleWindowError(
                f"no feasible window: binding constraint t_upper = {p.t_upper}"
            )
    return set(candidates)


def feasible_windows(
    table: CalibrationTable, p: WindowParams, stream: Stream = Stream.GUIDED
) -> list[tuple[int, int, float]]:
    """All feasible contiguous windows as (t_lo, t_hi, score), ascending t_lo."""
    steps = feasible_steps(table, p, stream)
    length = p.window_len
    out = []
    for lo in range(1, max(steps) - length + 2):
        window = range(lo, lo + length)
        if all(t in steps for t in window):
            out.append((lo, lo + length - 1, window_score(table, lo, lo + length - 1, p.lam, p.gamma, stream)))
    return out


def select_window(
    table: CalibrationTable, p: WindowParams, stream: Stream = Stream.GUIDED
) -> SkipPlan:
    """Deviation-aware window search: maximize mean cosine minus weighted
    stds over all feasible contiguous windows; ties go to the smaller-t
    (later-stage) window. Raises InfeasibleWindowError naming the binding
    constraint when nothing fits."""
    T = table.T
    if p.n_skip == 0:
        return SkipPlan(T=T, skip_set=(), provenance="auto", score=0.0)
    if p.n_skip > T - 2 - p.warmup_steps:
        raise ParameterError(
            f"n_skip {p.n_skip} exceeds budget T - 2 - warmup = {T - 2 - p.warmup_steps}"
        )
    windows = feasible_windows(table, p, stream)
    if not windows:
        raise InfeasibleWindowError(
            f"no feasible window: binding constraint window length = {p.window_len} "
            "(no contiguous run of feasible timesteps is long enough)"
        )
    best = None
    for lo, hi, score in windows:
        if best is None or score > best[0]:
            best = (score, lo, hi)
    score, lo, hi = best
    window_desc = tuple(range(hi, lo - 1, -1))
    return SkipPlan(
        T=T,
        skip_set=window_desc,
        refresh_points=_refresh_points(window_desc, p.k_refresh),
        provenance="auto",
        score=score,
    )


def window_score(
    table: CalibrationTable,
    t_lo: int,
    t_hi: int,
    lam: float,
    gamma: float,
    stream: Stream = Stream.GUIDED,
) -> float:
    """mean cos - lam * mean cos-std - gamma * mean ratio-std over [t_lo, t_hi]."""
    ts = range(t_lo, t_hi + 1)
    n = len(ts)
    m_cos = math.fsum(table.cos_mean(t, stream) for t in ts) / n
    m_scos = math.fsum(table.cos_std(t, stream) for t in ts) / n
    m_srat = math.fsum(table.ratio_std(t, stream) for t in ts) / n
    return m_cos - lam * m_scos - gamma * m_srat


class _Loop:
    """Shared per-step machinery: running prediction/delta, ledger, scheduling.

    Every policy funnels each step through push(), so a policy that never
    skips performs bit-identical arithmetic to plain sampling.
    """

    def __init__(self, policy, x_T, backend, sched, mode, stream, rng_seed):
        self.policy = policy
        self.backend = backend
        self.sched = sched
        self.mode = SamplerMode(mode)
        self.stream = Stream(stream)
        self.state = SamplerState(x=x_T, t=sched.T, rng_seed=rng_seed)
        self.eps_prev: NoisePred | None = None
        self.delta_prev: Delta | None = None
        self.steps: list[tuple[int, str]] = []
        self.trajectory: list[tuple[int, np.ndarray, np.ndarray]] = []
        self.calls = 0
        self.skipped = 0
        self._t0 = time.perf_counter()

    @property
    def x(self) -> Latent:
        return self.state.x

    def compute(self, t: int, action: str = ACTION_COMPUTED) -> NoisePred:
        eps = self.backend.predict(self.state.x, t, self.stream)
        self.calls += 1
        self.push(t, eps, action)
        return eps

    def reconstruct(self, t, eps, action=ACTION_EXTRAPOLATED, new_delta=None):
        self.skipped += 1
        self.push(t, eps, action, new_delta)

    def push(self, t, eps, action, new_delta=None):
        if new_delta is not None:
            self.delta_prev = new_delta
        elif self.eps_prev is not None:
            self.delta_prev = delta(eps, self.eps_prev)
        self.eps_prev = eps
        self.steps.append((t, action))
        self.trajectory.append((t, self.state.x.data, eps.data))
        self.state = scheduler_step(self.state, eps, self.sched, self.mode)

    def report(self) -> PolicyRunReport:
        return PolicyRunReport(
            policy=self.policy,
            x0=self.state.x,
            model_calls=self.calls,
            skipped=self.skipped,
            steps=tuple(self.steps),
            duration_s=time.perf_counter() - self._t0,
            trajectory=tuple(self.trajectory),
        )


def full_forward(
    x_T: Latent,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    mode: SamplerMode = SamplerMode.DDIM,
    stream: Stream = Stream.GUIDED,
    rng_seed: int = 0,
) -> PolicyRunReport:
    """Plain sampling: every step is a full model call."""
    loop = _Loop("full", x_T, backend, sched, mode, stream, rng_seed)
    for t in range(sched.T, 0, -1):
        loop.compute(t)
    return loop.report()


def _check_plan(plan: SkipPlan, sched: NoiseSchedule):
    if plan.T != sched.T:
        raise PlanInvalidError(f"plan T = {plan.T} does not match schedule T = {sched.T}")


def taocache_forward(
    x_T: Latent,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    table: CalibrationTable,
    plan: SkipPlan,
    mode: SamplerMode = SamplerMode.DDIM,
    stream: Stream = Stream.GUIDED,
    rng_seed: int = 0,
) -> PolicyRunReport:
    """Delta-extrapolation caching: on a skipped step, scale the running
    delta by the calibrated mean ratio and add it onto the running
    prediction; on compute and refresh steps, call the model and rebuild
    the delta from the two most recent running predictions."""
    _check_plan(plan, sched)
    skip_only = set(plan.skip_set) - plan.refresh_points
    for t in sorted(skip_only, reverse=True):
        if not table.is_valid(t, stream):
            raise PlanInvalidError(f"calibration table has no valid entry at skipped t = {t}")
    loop = _Loop("taocache", x_T, backend, sched, mode, stream, rng_seed)
    for t in range(sched.T, 0, -1):
        if t in skip_only:
            if loop.delta_prev is None:
                raise PlanInvalidError(f"skip at t = {t} before any delta exists")
            d_t = extrapolate(loop.delta_prev, table.ratio_mean(t, stream))
            eps_t = NoisePred(data=loop.eps_prev.data + d_t.data, shape=loop.eps_prev.shape)
            loop.reconstruct(t, eps_t, ACTION_EXTRAPOLATED, new_delta=d_t)
        elif t in plan.refresh_points:
            loop.compute(t, ACTION_REFRESHED)
        else:
            loop.compute(t)
    return loop.report()


def report_to_trace(
    report: PolicyRunReport,
    sched: NoiseSchedule,
    stream: Stream,
    seed: int,
    model_id: str,
    with_latents: bool = False,
) -> Trace:
    """Export a policy run's per-step predictions (computed or reconstructed)
    as a single-stream trace, so cached runs can be diffed in prediction space."""
    if report.trajectory is None:
        raise ParameterError("report carries no trajectory")
    trace = Trace(
        model_id=model_id,
        T=sched.T,
        shape=report.x0.shape,
        stream_mask=int(stream),
        schedule_kind=sched.kind,
        seed=seed,
    )
    for t, x, eps in report.trajectory:
        trace.add(t, int(stream), eps, x if with_latents else None)
    return trace


@dataclass(frozen=True)
class ResidualRule:
    """Thresholded residual reuse (simplified TeaCache-style baseline).

    Skip while the accumulated relative L1 drift of the scheduler input
    since the last full call stays under rel_l1_thresh, at most
    max_consecutive skips in a row, optionally capped by a total budget.
    """

    rel_l1_thresh: float
    max_consecutive: int = 3
    max_total: int | None = None

    def __post_init__(self):
        if math.isnan(self.rel_l1_thresh) or self.rel_l1_thresh < 0.0:
            raise ParameterError("rel_l1_thresh must be >= 0 (inf allowed)")
        if self.max_consecutive < 1:
            raise ParameterError("max_consecutive must be >= 1")
        if self.max_total is not None and self.max_total < 0:
            raise ParameterError("max_total must be >= 0 or None")


def _rel_l1(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.mean(np.abs(a - b)))
    den = float(np.mean(np.abs(b)))
    if den < 1e-12:
        return 0.0 if num < 1e-12 else math.inf
    return num / den


def residual_forward(
    x_T: Latent,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    skip_rule: ResidualRule,
    mode: SamplerMode = SamplerMode.DDIM,
    stream: Stream = Stream.GUIDED,
    rng_seed: int = 0,
) -> PolicyRunReport:
    """Residual-reuse baseline: cache R = eps - x at full calls and rebuild
    eps_t = x_t + R while the input has drifted little since the last call."""
    loop = _Loop("residual", x_T, backend, sched, mode, stream, rng_seed)
    _residual_region(loop, skip_rule, range(sched.T, 0, -1))
    return loop.report()


def _residual_region(loop: _Loop, rule: ResidualRule, ts) -> None:
    """Run residual-reuse logic over the given timesteps (shared with hybrid)."""
    residual: np.ndarray | None = None
    x_prev: np.ndarray | None = None
    acc = 0.0
    consec = 0
    total = 0
    for t in ts:
        x_t = loop.x.data
        if x_prev is not None:
            acc += _rel_l1(x_t, x_prev)
        x_prev = x_t
        budget_left = rule.max_total is None or total < rule.max_total
        if (
            residual is not None
            and consec < rule.max_consecutive
            and budget_left
            and acc < rule.rel_l1_thresh
        ):
            eps_t = NoisePred(data=x_t + residual, shape=loop.x.shape)
            loop.reconstruct(t, eps_t)
            consec += 1
            total += 1
        else:
            eps_t = loop.compute(t)
            residual = eps_t.data - x_t
            acc = 0.0
            consec = 0


def tao_window_residual_forward(
    x_T: Latent,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    plan: SkipPlan,
    mode: SamplerMode = SamplerMode.DDIM,
    stream: Stream = Stream.GUIDED,
    rng_seed: int = 0,
) -> PolicyRunReport:
    """Ablation: the exact skip placement of a delta-extrapolation plan, but
    with residual reuse (eps_t = x_t + R) on the skipped steps."""
    _check_plan(plan, sched)
    skip_only = set(plan.skip_set) - plan.refresh_points
    loop = _Loop("tao_residual", x_T, backend, sched, mode, stream, rng_seed)
    residual: np.ndarray | None = None
    for t in range(sched.T, 0, -1):
        if t in skip_only:
            if residual is None:
                raise PlanInvalidError(f"skip at t = {t} before any residual exists")
            eps_t = NoisePred(data=loop.x.data + residual, shape=loop.x.shape)
            loop.reconstruct(t, eps_t)
        else:
            action = ACTION_REFRESHED if t in plan.refresh_points else ACTION_COMPUTED
            x_t = loop.x.data
            eps_t = loop.compute(t, action)
            residual = eps_t.data - x_t
    return loop.report()


@dataclass(frozen=True)
class MagnitudeRule:
    """Magnitude-hold baseline: skip while the running product of calibrated
    ratios stays within mag_thresh of 1."""

    mag_thresh: float
    max_consecutive: int = 3

    def __post_init__(self):
        if self.mag_thresh < 0.0:
            raise ParameterError("mag_thresh must be >= 0")
        if self.max_consecutive < 1:
            raise ParameterError("max_consecutive must be >= 1")


def magnitude_forward(
    x_T: Latent,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    table: CalibrationTable,
    mag_rule: MagnitudeRule,
    mode: SamplerMode = SamplerMode.DDIM,
    stream: Stream = Stream.GUIDED,
    rng_seed: int = 0,
) -> PolicyRunReport:
    """Zeroth-order hold driven by calibrated ratio products (MagCache-style)."""
    loop = _Loop("magnitude", x_T, backend, sched, mode, stream, rng_seed)
    acc_ratio = 1.0
    consec = 0
    for t in range(sched.T, 0, -1):
        can_skip = (
            loop.eps_prev is not None
            and consec < mag_rule.max_consecutive
            and 1 <= t <= sched.T - 1
            and table.is_valid(t, stream)
        )
        if can_skip:
            cand = acc_ratio * table.ratio_mean(t, stream)
            if abs(cand - 1.0) < mag_rule.mag_thresh:
                loop.reconstruct(t, loop.eps_prev)
                acc_ratio = cand
                consec += 1
                continue
        loop.compute(t)
        acc_ratio = 1.0
        consec = 0
    return loop.report()


def hybrid_forward(
    x_T: Latent,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    table: CalibrationTable,
    tao_params: WindowParams,
    tea_rule: ResidualRule,
    refresh_steps: int,
    mode: SamplerMode = SamplerMode.DDIM,
    stream: Stream = Stream.GUIDED,
    rng_seed: int = 0,
) -> PolicyRunReport:
    """Residual caching early, delta extrapolation late, separated by a
    forced-compute guard band of refresh_steps steps above the window."""
    if refresh_steps < 0:
        raise PlanInvalidError("refresh_steps must be >= 0 (ranges would overlap)")
    plan = select_window(table, tao_params, stream)
    skip_only = set(plan.skip_set) - plan.refresh_points
    t_hi = plan.skip_set[0] if plan.skip_set else 0
    t_brk = min(t_hi + refresh_steps, sched.T) if plan.skip_set else 0
    loop = _Loop("hybrid", x_T, backend, sched, mode, stream, rng_seed)
    _residual_region(loop, tea_rule, range(sched.T, t_brk, -1))
    for t in range(t_brk, t_hi, -1):
        loop.compute(t, ACTION_REFRESHED)
    for t in range(t_hi, 0, -1):
        if t in skip_only:
            if loop.delta_prev is None:
                raise PlanInvalidError(f"skip at t = {t} before any delta exists")
            d_t = extrapolate(loop.delta_prev, table.ratio_mean(t, stream))
            eps_t = NoisePred(data=loop.eps_prev.data + d_t.data, shape=loop.eps_prev.shape)
            loop.reconstruct(t, eps_t, ACTION_EXTRAPOLATED, new_delta=d_t)
        elif t in plan.refresh_points:
            loop.compute(t, ACTION_REFRESHED)
        else:
            loop.compute(t)
    return loop.report()
