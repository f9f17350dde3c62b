"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

import taocache as tc
from taocache.backends import MixtureBackend, related_guidance
from taocache.calibration import CalibrationTable, StreamStats, _Moments


def geometric_setup(T=50, r=0.9, shape=(16,), seed=0, delta_scale=0.1):
    rng = np.random.default_rng(seed)
    base = tc.NoisePred.from_array(rng.standard_normal(shape))
    d0 = tc.Delta.from_array(rng.standard_normal(shape) * delta_scale)
    return tc.GeometricBackend(base, d0, r=r, T=T)


def mixture_prompts(shape=(16, 16), count=4, base_seed=500, prompt_seed0=600, noise_seed0=100,
                    guidance_scale=3.0):
    return [
        tc.Prompt(
            f"p{i:02d}",
            seed=noise_seed0 + i,
            guidance=related_guidance(
                shape, 3, base_seed=base_seed, prompt_seed=prompt_seed0 + i,
                guidance_scale=guidance_scale,
            ),
        )
        for i in range(count)
    ]


def mixture_factory(sched):
    return lambda prompt: MixtureBackend(prompt.guidance, sched)


def make_table(
    T,
    cos_mean,
    ratio_mean,
    cos_std=None,
    ratio_std=None,
    n=5,
    stream=tc.Stream.GUIDED,
    backend_id="synthetic",
    schedule_kind="vp-cosine",
):
    """Build a table directly from target statistics; None entries are absent.

    Arrays are indexed by t - 1 for t in [1, T-1], matching the table layout.
    """
    cos_std = cos_std if cos_std is not None else [0.0] * (T - 1)
    ratio_std = ratio_std if ratio_std is not None else [0.0] * (T - 1)
    table = CalibrationTable(
        T=T, schedule_kind=schedule_kind, backend_id=backend_id, prompt_count=n
    )
    ss = StreamStats.empty(T)
    for i in range(T - 1):
        if cos_mean[i] is None:
            continue
        ss.cos[i] = _Moments(n=n, mean=float(cos_mean[i]), m2=float(cos_std[i]) ** 2 * (n - 1))
        ss.ratio[i] = _Moments(n=n, mean=float(ratio_mean[i]), m2=float(ratio_std[i]) ** 2 * (n - 1))
    table.streams[stream] = ss
    return table


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))
