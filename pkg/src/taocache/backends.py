"""Pluggable noise predictors.

Three families stand in for a trained denoiser:

* an exact Gaussian-mixture oracle (closed-form posterior mean, so the
  noise prediction equals the true score up to the schedule scaling),
  with classifier-free guidance across a cond/uncond model pair;
* a geometric-delta generator whose consecutive prediction deltas form an
  exact geometric sequence -- the exactness fixture for delta
  extrapolation;
* a replay backend that serves predictions recorded in a trace file.

Every backend is deterministic given (x, t, stream) and counts its
predict() calls, which is how policy runs prove they skipped what they
claim to have skipped.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

import numpy as np

from .core import Delta, Latent, NoisePred
from .errors import ParameterError, TraceIncompleteError, UndefinedScoreError
from .schedule import NoiseSchedule, counter_rng
from .traceio import Trace

_TAG_MODEL = 2


class Stream(enum.IntEnum):
    """Conditioning stream of a prediction; values double as trace bitmask bits."""

    COND = 1
    UNCOND = 2
    GUIDED = 4


ALL_STREAMS = (Stream.COND, Stream.UNCOND, Stream.GUIDED)


@dataclass(frozen=True)
class MixtureModel:
    """Isotropic Gaussian mixture over the data space.

    weights: (k,), sum to 1. means: (k, d) flattened component means.
    scales: (k,) per-component isotropic standard deviations.
    """

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        sc = np.asarray(self.scales, dtype=np.float64)
        shape = tuple(int(s) for s in self.shape)
        d = int(np.prod(shape))
        if mu.ndim != 2 or mu.shape[1] != d or w.shape != (mu.shape[0],) or sc.shape != w.shape:
            raise ParameterError("inconsistent mixture component arrays")
        if abs(float(w.sum()) - 1.0) > 1e-9 or np.any(w <= 0.0):
            raise ParameterError("component weights must be positive and sum to 1")
        if np.any(sc <= 0.0):
            raise ParameterError("component scales must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "scales", sc)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _noised_component_params(m: MixtureModel, sched: NoiseSchedule, t: int):
    """Per-component (mean, variance) of the mixture diffused to time t."""
    if not 1 <= t <= sched.T:
        raise ParameterError(f"t = {t} outside [1, T]")
    a, s = sched.alpha[t], sched.sigma[t]
    if s == 0.0:
        raise UndefinedScoreError(f"sigma[{t}] = 0: noise prediction undefined")
    var = (a * m.scales) ** 2 + s * s  # (k,)
    return a * m.means, var, a, s


def mixture_log_density(m: MixtureModel, sched: NoiseSchedule, x: np.ndarray, t: int) -> float:
    """log p_t(x) of the mixture diffused to time t (log-sum-exp over components)."""
    means_t, var, _, _ = _noised_component_params(m, sched, t)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = m.dim
    sq = np.sum((x[None, :] - means_t) ** 2, axis=1)
    logs = np.log(m.weights) - 0.5 * d * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
    peak = logs.max()
    return float(peak + np.log(np.sum(np.exp(logs - peak))))


def mixture_predict(m: MixtureModel, sched: NoiseSchedule, x: Latent, t: int) -> NoisePred:
    """Exact noise prediction for the mixture: (x - alpha_t * E[x0|x]) / sigma_t.

    E[x0|x] combines per-component posterior means with responsibilities
    computed through a log-sum-exp, so widely separated components cannot
    underflow to 0/0.
    """
    means_t, var, a, s = _noised_component_params(m, sched, t)
    xv = x.data
    diff = xv[None, :] - means_t  # (k, d)
    sq = np.sum(diff**2, axis=1)
    logs = np.log(m.weights) - 0.5 * m.dim * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
    logs -= logs.max()
    resp = np.exp(logs)
    resp /= resp.sum()
    # E[x0 | x, component i] = mu_i + (a s_i^2 / var_i) (x - a mu_i)
    gain = a * m.scales**2 / var
    comp_post = m.means + gain[:, None] * diff
    m0 = resp @ comp_post
    return NoisePred(data=(xv - a * m0) / s, shape=x.shape)


@dataclass(frozen=True)
class GuidanceSpec:
    """A cond/uncond model pair plus the guidance scale that mixes them."""

    cond_model: MixtureModel
    uncond_model: MixtureModel
    scale: float

    def __post_init__(self):
        if self.cond_model.shape != self.uncond_model.shape:
            raise ParameterError("cond and uncond models must share a shape")
        if not (np.isfinite(self.scale) and self.scale >= 0.0):
            raise ParameterError(f"guidance scale must be >= 0, got {self.scale}")


def guided_predict(g: GuidanceSpec, sched: NoiseSchedule, x: Latent, t: int) -> NoisePred:
    """Classifier-free guidance: eps_u + scale * (eps_c - eps_u)."""
    eps_c = mixture_predict(g.cond_model, sched, x, t)
    eps_u = mixture_predict(g.uncond_model, sched, x, t)
    return NoisePred(
        data=eps_u.data + g.scale * (eps_c.data - eps_u.data), shape=x.shape
    )


class DenoiserBackend:
    """Behavioral contract every noise predictor implements.

    predict() must be deterministic given (x, t, stream) and bumps the call
    counter exactly once; the counter increment is lock-guarded so parallel
    trajectory workers can share a backend.
    """

    backend_id: str = "abstract"
    shape: tuple[int, ...] = ()

    def __init__(self):
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return self._calls

    def reset_call_count(self):
        with self._lock:
            self._calls = 0

    @property
    def streams(self) -> tuple[Stream, ...]:
        return ALL_STREAMS

    def predict(self, x: Latent, t: int, stream: Stream = Stream.GUIDED) -> NoisePred:
        with self._lock:
            self._calls += 1
        return self._predict(x, t, Stream(stream))

    def _predict(self, x: Latent, t: int, stream: Stream) -> NoisePred:
        raise NotImplementedError


class MixtureBackend(DenoiserBackend):
    """Guidance-combined mixture oracle; the desk-scale stand-in for a DiT."""

    def __init__(self, guidance: GuidanceSpec, sched: NoiseSchedule):
        super().__init__()
        self.guidance = guidance
        self.sched = sched
        self.backend_id = "mixture"
        self.shape = guidance.cond_model.shape

    def _predict(self, x, t, stream):
        if stream is Stream.COND:
            return mixture_predict(self.guidance.cond_model, self.sched, x, t)
        if stream is Stream.UNCOND:
            return mixture_predict(self.guidance.uncond_model, self.sched, x, t)
        return guided_predict(self.guidance, self.sched, x, t)


def geometric_predict(
    base: NoisePred, d0: Delta, r: float, t: int, T: int
) -> NoisePred:
    """Prediction at step t of the geometric-delta sequence.

    Constructed so that eps_t - eps_{t+1} = r**(T-1-t) * d0 for every
    t <= T-1: deltas are perfectly aligned (cosine 1) with constant norm
    ratio r, which makes calibrated extrapolation exact.
    """
    if r <= 0.0:
        raise ParameterError(f"geometric ratio must be > 0, got {r}")
    if not 0 <= t <= T:
        raise ParameterError(f"t = {t} outside [0, T]")
    k = T - t
    coeff = float(k) if r == 1.0 else (1.0 - r**k) / (1.0 - r)
    return NoisePred(data=base.data + coeff * d0.data, shape=base.shape)


class GeometricBackend(DenoiserBackend):
    """Open-loop geometric-delta generator (ignores x and stream)."""

    def __init__(self, base: NoisePred, d0: Delta, r: float, T: int):
        super().__init__()
        if base.shape != d0.shape:
            raise ParameterError("base and d0 must share a shape")
        self.base = base
        self.d0 = d0
        self.r = float(r)
        self.T = int(T)
        self.backend_id = f"geometric(r={self.r})"
        self.shape = base.shape

    def _predict(self, x, t, stream):
        return geometric_predict(self.base, self.d0, self.r, t, self.T)


def trace_predict(trace: Trace, t: int, stream: Stream) -> NoisePred:
    """Recorded prediction for (t, stream), verbatim; open-loop by design."""
    key = (int(t), int(stream))
    if key not in trace.records:
        raise TraceIncompleteError(f"trace has no record for t={t} stream={Stream(stream).name}")
    return NoisePred(data=trace.records[key], shape=trace.shape)


class TraceBackend(DenoiserBackend):
    """Replays a recorded trajectory; x is ignored (a trace cannot answer
    counterfactual latents)."""

    def __init__(self, trace: Trace):
        super().__init__()
        self.trace = trace
        self.backend_id = f"trace:{trace.model_id}"
        self.shape = trace.shape

    @property
    def streams(self) -> tuple[Stream, ...]:
        return tuple(s for s in ALL_STREAMS if self.trace.stream_mask & s)

    def _predict(self, x, t, stream):
        return trace_predict(self.trace, t, stream)


def random_mixture(
    shape, n_components: int, seed: int, mean_scale: float = 1.0, component_scale: float = 0.35
) -> MixtureModel:
    """Reproducible random mixture: means ~ N(0, mean_scale^2), random weights."""
    shape = tuple(int(s) for s in shape)
    d = int(np.prod(shape))
    rng = counter_rng(seed, _TAG_MODEL, 0)
    means = rng.standard_normal((n_components, d)) * mean_scale
    w = rng.uniform(0.5, 1.5, n_components)
    w /= w.sum()
    scales = np.full(n_components, float(component_scale))
    return MixtureModel(weights=w, means=means, scales=scales, shape=shape)


def related_guidance(
    shape,
    n_components: int,
    base_seed: int,
    prompt_seed: int,
    *,
    guidance_scale: float = 3.0,
    mean_scale: float = 1.0,
    component_scale: float = 0.35,
    uncond_broaden: float = 2.5,
    prompt_jitter: float = 0.15,
) -> GuidanceSpec:
    """A realistic cond/uncond pair: the uncond model is a broadened version
    of a shared base mixture, and each prompt's cond model jitters the base
    means. Keeps the guided extrapolation target inside the data support;
    an unrelated uncond model would fling it far out of distribution.
    """
    shape = tuple(int(s) for s in shape)
    d = int(np.prod(shape))
    rng0 = counter_rng(base_seed, _TAG_MODEL, 0)
    base_means = rng0.standard_normal((n_components, d)) * mean_scale
    w = rng0.uniform(0.5, 1.5, n_components)
    w /= w.sum()
    rng_p = counter_rng(prompt_seed, _TAG_MODEL, 1)
    cond_means = base_means + prompt_jitter * rng_p.standard_normal((n_components, d))
    cond = MixtureModel(
        weights=w, means=cond_means, scales=np.full(n_components, component_scale), shape=shape
    )
    uncond = MixtureModel(
        weights=w,
        means=base_means,
        scales=np.full(n_components, component_scale * uncond_broaden),
        shape=shape,
    )
    return GuidanceSpec(cond_model=cond, uncond_model=uncond, scale=guidance_scale)
