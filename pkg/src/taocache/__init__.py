"""taocache: delta-extrapolation caching for iterative diffusion samplers.

Calibrate per-timestep statistics of consecutive noise-prediction deltas,
pick a late-stage skip window that trades directional agreement against
its dispersion, and replace skipped model calls with second-order delta
extrapolation -- verified against an exact Gaussian-mixture noise oracle,
a geometric exactness fixture, and recorded trajectory traces.
"""

from .backends import (
    ALL_STREAMS,
    DenoiserBackend,
    GeometricBackend,
    GuidanceSpec,
    MixtureBackend,
    MixtureModel,
    Stream,
    TraceBackend,
    geometric_predict,
    guided_predict,
    mixture_log_density,
    mixture_predict,
    random_mixture,
    trace_predict,
)
from .calibration import (
    CalibrationTable,
    Prompt,
    calibrate,
    record_trace,
    table_merge,
    walk_trajectory,
)
from .core import (
    EPS_ZERO,
    Delta,
    DeltaStats,
    Latent,
    NoisePred,
    delta,
    delta_stats,
    extrapolate,
)
from .metrics import MetricReport, compare, eps_divergence, mse, peak_range, psnr, ssim
from .policy import (
    MagnitudeRule,
    PolicyRunReport,
    ResidualRule,
    SkipPlan,
    WindowParams,
    empty_plan,
    feasible_windows,
    full_forward,
    hybrid_forward,
    magnitude_forward,
    manual_plan,
    report_to_trace,
    residual_forward,
    select_window,
    tao_window_residual_forward,
    taocache_forward,
    window_score,
)
from .schedule import (
    NoiseSchedule,
    SamplerMode,
    SamplerState,
    ScheduleKind,
    counter_rng,
    init_noise,
    make_schedule,
    scheduler_step,
)
from .traceio import Trace, read_trace, write_trace

__version__ = "0.1.0"
