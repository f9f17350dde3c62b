"""Vector primitives for noise predictions, their step-to-step deltas, and
the pairwise statistics (cosine similarity, norm ratio) that drive caching.

All arithmetic is done in float64 regardless of how inputs were stored, so
calibration tables are reproducible across platforms. Norms are Euclidean
over the flattened array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeMismatchError

# Below this Euclidean norm a delta counts as zero and its statistics are
# flagged invalid instead of producing NaN.
EPS_ZERO = 1e-12


def _freeze(data, shape) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64).reshape(-1)
    n = int(np.prod(shape)) if shape else arr.size
    if arr.size != n:
        raise ShapeMismatchError(
            f"data length {arr.size} does not match shape {tuple(shape)}"
        )
    if not np.all(np.isfinite(arr)):
        raise ParameterError("non-finite entries in field data")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VectorField:
    """A flat float64 array plus the logical shape it represents.

    Immutable after construction; the underlying buffer is write-protected,
    so instances are safe to share across threads.
    """

    data: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", _freeze(self.data, shape))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(data=arr.reshape(-1), shape=arr.shape)

    @classmethod
    def zeros(cls, shape):
        shape = tuple(int(s) for s in shape)
        return cls(data=np.zeros(int(np.prod(shape))), shape=shape)

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    @property
    def size(self) -> int:
        return self.data.size


class Latent(VectorField):
    """A point on the sampler trajectory."""


class NoisePred(VectorField):
    """A model noise prediction for one timestep."""


class Delta(VectorField):
    """Difference between noise predictions at consecutive timesteps."""


@dataclass(frozen=True)
class DeltaStats:
    """Cosine similarity and norm ratio of a consecutive delta pair.

    ``valid`` is False when either delta's norm falls below the zero
    threshold; in that case ``cos`` and ``ratio`` are 0.0 placeholders and
    must not enter any aggregate.
    """

    cos: float
    ratio: float
    valid: bool = True

    def __post_init__(self):
        if self.valid:
            if not (-1.0 - 1e-6 <= self.cos <= 1.0 + 1e-6):
                raise ParameterError(f"cosine {self.cos} outside [-1, 1]")
            if not (np.isfinite(self.ratio) and self.ratio >= 0.0):
                raise ParameterError(f"ratio {self.ratio} must be finite and >= 0")


def delta(curr: NoisePred, prev: NoisePred) -> Delta:
    """Element-wise difference ``curr - prev`` of two noise predictions."""
    if curr.shape != prev.shape:
        raise ShapeMismatchError(f"shape {curr.shape} vs {prev.shape}")
    return Delta(data=curr.data - prev.data, shape=curr.shape)


def delta_stats(d_t: Delta, d_t1: Delta, eps_zero: float = EPS_ZERO) -> DeltaStats:
    """Cosine similarity and norm ratio of ``d_t`` against ``d_t1``.

    ratio = |d_t| / |d_t1|, i.e. current-step delta over the one before it
    (the orientation consumed by delta extrapolation). Returns an invalid
    DeltaStats instead of NaN when either norm is below ``eps_zero``.
    """
    if d_t.shape != d_t1.shape:
        raise ShapeMismatchError(f"shape {d_t.shape} vs {d_t1.shape}")
    n_t = float(np.linalg.norm(d_t.data))
    n_t1 = float(np.linalg.norm(d_t1.data))
    if n_t1 < eps_zero or n_t < eps_zero:
        return DeltaStats(cos=0.0, ratio=0.0, valid=False)
    cos = float(np.dot(d_t.data, d_t1.data)) / (n_t * n_t1)
    cos = min(1.0, max(-1.0, cos))
    return DeltaStats(cos=cos, ratio=n_t / n_t1, valid=True)


def extrapolate(d_t1: Delta, ratio: float) -> Delta:
    """Scale the previous delta by a calibrated norm ratio."""
    if not np.isfinite(ratio):
        raise ParameterError(f"ratio must be finite, got {ratio}")
    return Delta(data=d_t1.data * float(ratio), shape=d_t1.shape)
