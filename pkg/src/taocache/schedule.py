"""Variance-preserving noise schedules and the sampler update rules that
consume noise predictions.

Index convention: t = T is pure noise, t = 0 is data. One scheduler step
maps (x_t, eps_t) to x_{t-1}. Ancestral noise comes from a counter-based
generator keyed by (seed, t), so a trajectory that skips model calls still
consumes bit-identical noise at the steps it shares with a full run.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import Latent, NoisePred
from .errors import ParameterError, ShapeMismatchError, TerminalStateError

# Floor on the squared signal level so alpha[T] stays meaningfully nonzero;
# the raw cosine form reaches cos^2(pi/2) ~ 4e-33 at t = T, which makes the
# first DDIM step divide by ~6e-17 and pushes sigma[T] to exactly 1.0.
ALPHA_BAR_FLOOR = 1e-8

COSINE_OFFSET = 0.008
LINEAR_ALPHA_BAR_START = 0.9999  # t = 0
LINEAR_ALPHA_BAR_END = 0.02  # t = T


class ScheduleKind(str, enum.Enum):
    VP_COSINE = "vp-cosine"
    VP_LINEAR = "vp-linear"


class SamplerMode(str, enum.Enum):
    DDIM = "ddim"
    ANCESTRAL = "ancestral"


# Tags keep independent noise streams from colliding on the same (seed, t).
_TAG_INIT = 0
_TAG_STEP = 1
_MASK64 = (1 << 64) - 1


def counter_rng(seed: int, tag: int, counter: int) -> np.random.Generator:
    """Deterministic generator keyed by (seed, tag, counter) via Philox."""
    key = np.array(
        [seed & _MASK64, ((tag & 0xFFFF) << 48 | (counter & (1 << 48) - 1)) & _MASK64],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def init_noise(seed: int, shape) -> Latent:
    """Standard-normal starting latent x_T for a trajectory seed."""
    shape = tuple(int(s) for s in shape)
    data = counter_rng(seed, _TAG_INIT, 0).standard_normal(int(np.prod(shape)))
    return Latent(data=data, shape=shape)


def step_noise(seed: int, t: int, size: int) -> np.ndarray:
    return counter_rng(seed, _TAG_STEP, t).standard_normal(size)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep signal (alpha) and noise (sigma) coefficients, t = 0..T."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.T < 2:
            raise ParameterError(f"step count T must be >= 2, got {self.T}")
        if alpha.shape != (self.T + 1,) or sigma.shape != (self.T + 1,):
            raise ParameterError("alpha and sigma must have length T + 1")
        if not np.allclose(alpha**2 + sigma**2, 1.0, atol=1e-9):
            raise ParameterError("schedule is not variance-preserving")
        if np.any(np.diff(alpha) >= 0.0):
            raise ParameterError("alpha must strictly decrease from t=0 to t=T")
        if alpha[0] < 0.9999 or sigma[-1] < 0.98:
            raise ParameterError("schedule endpoints too far from data / pure noise")
        if np.any(alpha <= 0.0) or np.any(sigma < 0.0) or np.any(sigma >= 1.0):
            raise ParameterError("alpha must lie in (0, 1], sigma in [0, 1)")
        for name, arr in (("alpha", alpha), ("sigma", sigma)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def make_schedule(kind: ScheduleKind | str, T: int) -> NoiseSchedule:
    """Build a cosine or linear variance-preserving schedule with T steps."""
    kind = ScheduleKind(kind)
    if T < 2:
        raise ParameterError(f"step count T must be >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    if kind is ScheduleKind.VP_COSINE:
        s = COSINE_OFFSET
        alpha_bar = np.cos((t / T + s) / (1.0 + s) * (math.pi / 2.0)) ** 2
    else:
        alpha_bar = LINEAR_ALPHA_BAR_START + (
            LINEAR_ALPHA_BAR_END - LINEAR_ALPHA_BAR_START
        ) * (t / T)
    alpha_bar = np.maximum(alpha_bar, ALPHA_BAR_FLOOR)
    return NoiseSchedule(
        T=T,
        alpha=np.sqrt(alpha_bar),
        sigma=np.sqrt(1.0 - alpha_bar),
        kind=kind.value,
    )


@dataclass(frozen=True)
class SamplerState:
    """Latent, current timestep, and the seed of the trajectory's noise stream."""

    x: Latent
    t: int
    rng_seed: int


def scheduler_step(
    state: SamplerState,
    eps: NoisePred,
    sched: NoiseSchedule,
    mode: SamplerMode | str = SamplerMode.DDIM,
) -> SamplerState:
    """Advance one step: predict x0 from (x_t, eps), then move to t - 1.

    DDIM is deterministic. Ancestral DDPM adds Gaussian noise with the
    standard posterior variance, drawn from the counter generator keyed by
    (rng_seed, t); DDIM ignores the seed entirely.
    """
    mode = SamplerMode(mode)
    t = state.t
    if t <= 0:
        raise TerminalStateError("cannot step from t = 0")
    if t > sched.T:
        raise ParameterError(f"t = {t} exceeds schedule T = {sched.T}")
    if eps.shape != state.x.shape:
        raise ShapeMismatchError(f"eps shape {eps.shape} vs x shape {state.x.shape}")
    a_t, s_t = sched.alpha[t], sched.sigma[t]
    a_p, s_p = sched.alpha[t - 1], sched.sigma[t - 1]
    x0_hat = (state.x.data - s_t * eps.data) / a_t
    if mode is SamplerMode.DDIM:
        x_prev = a_p * x0_hat + s_p * eps.data
    else:
        # eta = 1 ancestral variance: sigma_noise^2 = (s_p^2/s_t^2)(1 - abar_t/abar_p)
        abar_t, abar_p = a_t * a_t, a_p * a_p
        var = (s_p * s_p) / (s_t * s_t) * (1.0 - abar_t / abar_p)
        var = max(var, 0.0)
        dir_coeff = math.sqrt(max(s_p * s_p - var, 0.0))
        z = step_noise(state.rng_seed, t, eps.size)
        x_prev = a_p * x0_hat + dir_coeff * eps.data + math.sqrt(var) * z
    return SamplerState(
        x=Latent(data=x_prev, shape=state.x.shape), t=t - 1, rng_seed=state.rng_seed
    )
