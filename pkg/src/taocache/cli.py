"""Operator surface: config-driven subcommands to calibrate, select skip
windows, sample under a policy, evaluate outputs, and dump per-step
statistics from traces.

Every command is deterministic given the config and seeds; rerunning
writes byte-identical artifacts (run reports carry a null duration unless
--timings is passed). Outputs land under the configured output directory,
which the TAOCACHE_OUTPUT_DIR environment variable overrides.

Exit codes: 0 success, 2 config error, 3 infeasible/invalid plan,
4 data or integrity error, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import errors
from .backends import (
    GeometricBackend,
    MixtureBackend,
    Stream,
    TraceBackend,
    related_guidance,
)
from .calibration import CalibrationTable, Prompt, calibrate, record_trace
from .core import Delta, Latent, NoisePred, delta_stats
from .metrics import compare, peak_range
from .policy import (
    MagnitudeRule,
    PolicyRunReport,
    ResidualRule,
    SkipPlan,
    WindowParams,
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
)
from .schedule import SamplerMode, init_noise, make_schedule
from .traceio import read_trace, write_trace

OUTPUT_DIR_ENV = "TAOCACHE_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_DATA = 4
EXIT_INTERNAL = 5

_STREAMS_BY_NAME = {"cond": Stream.COND, "uncond": Stream.UNCOND, "guided": Stream.GUIDED}


# -- config ----------------------------------------------------------------


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise errors.ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise errors.ConfigError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise errors.ConfigError(f"{p}: config must be a JSON object")
    cfg.setdefault("seed", 0)
    cfg.setdefault("workers", 1)
    cfg.setdefault("sampler", "ddim")
    for key in ("schedule", "backend"):
        if key not in cfg:
            raise errors.ConfigError(f"{p}: missing required config key {key!r}")
    cfg["_dir"] = p.parent
    return cfg


def _cfg_get(cfg: dict, key: str, kind, where: str):
    if key not in cfg:
        raise errors.ConfigError(f"missing key {key!r} in {where}")
    val = cfg[key]
    try:
        return kind(val)
    except (TypeError, ValueError) as exc:
        raise errors.ConfigError(f"bad value for {key!r} in {where}: {val!r}") from exc


def build_schedule(cfg: dict):
    sc = cfg["schedule"]
    kind = _cfg_get(sc, "kind", str, "schedule")
    T = _cfg_get(sc, "T", int, "schedule")
    try:
        return make_schedule(kind, T)
    except (ValueError, errors.ParameterError) as exc:
        raise errors.ConfigError(f"schedule: {exc}") from exc


def sampler_mode(cfg: dict) -> SamplerMode:
    try:
        return SamplerMode(cfg.get("sampler", "ddim"))
    except ValueError as exc:
        raise errors.ConfigError(f"unknown sampler {cfg.get('sampler')!r}") from exc


def build_prompts(cfg: dict) -> list[Prompt]:
    spec = cfg.get("prompts", {"count": 20})
    bk = cfg["backend"]
    if isinstance(spec, dict):
        count = _cfg_get(spec, "count", int, "prompts")
        model_seed0 = int(spec.get("model_seed", 600))
        noise_seed0 = int(spec.get("noise_seed", 100))
        entries = [
            {"id": f"p{i:03d}", "noise_seed": noise_seed0 + i, "model_seed": model_seed0 + i}
            for i in range(count)
        ]
    elif isinstance(spec, list):
        entries = spec
    else:
        raise errors.ConfigError("prompts must be an object with a count or a list")
    prompts = []
    for e in entries:
        guidance = None
        if bk["type"] == "mixture":
            guidance = related_guidance(
                shape=tuple(bk["shape"]),
                n_components=int(bk.get("components", 3)),
                base_seed=int(bk.get("base_seed", 500)),
                prompt_seed=int(e.get("model_seed", 600)),
                guidance_scale=float(bk.get("guidance_scale", 3.0)),
                mean_scale=float(bk.get("mean_scale", 1.0)),
                component_scale=float(bk.get("component_scale", 0.35)),
                uncond_broaden=float(bk.get("uncond_broaden", 2.5)),
                prompt_jitter=float(bk.get("prompt_jitter", 0.15)),
            )
        prompts.append(
            Prompt(
                prompt_id=str(e.get("id", f"p{len(prompts):03d}")),
                seed=int(e["noise_seed"]),
                guidance=guidance,
            )
        )
    if not prompts:
        raise errors.ConfigError("prompt list is empty")
    return prompts


def backend_factory(cfg: dict, sched):
    bk = cfg["backend"]
    btype = _cfg_get(bk, "type", str, "backend")
    if btype == "mixture":
        return lambda prompt: MixtureBackend(prompt.guidance, sched)
    if btype == "geometric":
        shape = tuple(bk["shape"])
        dim = int(np.prod(shape))
        base = NoisePred(
            data=init_noise(int(bk.get("base_seed", 7)), (dim,)).data, shape=shape
        )
        d0 = Delta(
            data=init_noise(int(bk.get("delta_seed", 8)), (dim,)).data
            * float(bk.get("delta_scale", 0.1)),
            shape=shape,
        )
        backend = GeometricBackend(base, d0, float(bk.get("ratio", 0.9)), sched.T)
        return lambda prompt: backend
    if btype == "trace":
        pattern = _cfg_get(bk, "path", str, "backend")

        def from_trace(prompt):
            path = Path(pattern.format(prompt_id=prompt.prompt_id))
            if not path.is_absolute():
                path = cfg["_dir"] / path
            return TraceBackend(read_trace(path))

        return from_trace
    raise errors.ConfigError(f"unknown backend type {btype!r}")


def output_dir(cfg: dict, override: str | None) -> Path:
    raw = override or os.environ.get(OUTPUT_DIR_ENV) or cfg.get("output_dir", "out")
    path = Path(raw)
    if not path.is_absolute():
        path = cfg["_dir"] / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def policy_stream(cfg: dict) -> Stream:
    name = cfg.get("policy", {}).get("stream", "guided")
    if name not in _STREAMS_BY_NAME:
        raise errors.ConfigError(f"unknown stream {name!r}")
    return _STREAMS_BY_NAME[name]


def window_params(cfg: dict, args=None) -> WindowParams:
    w = dict(cfg.get("policy", {}).get("window", {}))
    if args is not None:
        for key, attr in (
            ("n_skip", "n_skip"),
            ("lambda", "lam"),
            ("gamma", "gamma"),
            ("tau_cos", "tau_cos"),
            ("t_upper", "t_upper"),
            ("k_refresh", "k_refresh"),
            ("warmup_steps", "warmup_steps"),
        ):
            val = getattr(args, attr, None)
            if val is not None:
                w[key] = val
    try:
        return WindowParams(
            n_skip=int(w.get("n_skip", 0)),
            lam=float(w.get("lambda", 0.0)),
            gamma=float(w.get("gamma", 0.0)),
            tau_cos=None if w.get("tau_cos") is None else float(w["tau_cos"]),
            t_upper=None if w.get("t_upper") is None else int(w["t_upper"]),
            k_refresh=None if w.get("k_refresh") is None else int(w["k_refresh"]),
            warmup_steps=int(w.get("warmup_steps", 2)),
        )
    except errors.ParameterError as exc:
        raise errors.ConfigError(f"window params: {exc}") from exc


def residual_rule(cfg: dict) -> ResidualRule:
    r = cfg.get("policy", {}).get("residual", {})
    thresh = r.get("rel_l1_thresh", 0.05)
    return ResidualRule(
        rel_l1_thresh=math.inf if thresh in ("inf", None) else float(thresh),
        max_consecutive=int(r.get("max_consecutive", 3)),
        max_total=None if r.get("max_total") is None else int(r["max_total"]),
    )


def magnitude_rule(cfg: dict) -> MagnitudeRule:
    r = cfg.get("policy", {}).get("magnitude", {})
    return MagnitudeRule(
        mag_thresh=float(r.get("mag_thresh", 0.05)),
        max_consecutive=int(r.get("max_consecutive", 3)),
    )


# -- artifact writers -------------------------------------------------------


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_report(path: Path, report: PolicyRunReport, prompt_id: str, timings: bool):
    d = report.to_dict(duration=timings)
    d["prompt_id"] = prompt_id
    _write_json(path, d)


# -- subcommands -------------------------------------------------------------


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    sched = build_schedule(cfg)
    mode = sampler_mode(cfg)
    prompts = build_prompts(cfg)
    factory = backend_factory(cfg, sched)
    table = calibrate(prompts, factory, sched, mode)
    out = output_dir(cfg, args.out)
    table.save(out / "table.json")
    table.write_csv(out / "table_curves.csv")
    print(f"calibrated {len(prompts)} prompts -> {out / 'table.json'}")
    return EXIT_OK


def cmd_select_window(args) -> int:
    cfg = load_config(args.config)
    table = CalibrationTable.load(args.table)
    params = window_params(cfg, args)
    stream = policy_stream(cfg)
    if args.manual:
        t_lo, t_hi = args.manual
        plan = manual_plan(table.T, t_lo, t_hi, params.k_refresh)
    else:
        plan = select_window(table, params, stream)
    out = output_dir(cfg, args.out)
    _write_json(out / "plan.json", plan.to_dict())
    with open(out / "window_scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_lo", "t_hi", "score"])
        if params.n_skip > 0 and not args.manual:
            for lo, hi, score in feasible_windows(table, params, stream):
                writer.writerow([lo, hi, f"{score:.12g}"])
    lo = plan.skip_set[-1] if plan.skip_set else None
    hi = plan.skip_set[0] if plan.skip_set else None
    print(f"selected window [{lo}, {hi}] score={plan.score} -> {out / 'plan.json'}")
    return EXIT_OK


def _run_one_prompt(cfg, sched, mode, factory, table, plan, prompt, stream):
    backend = factory(prompt)
    x_T = init_noise(prompt.seed, backend.shape)
    name = cfg.get("policy", {}).get("name", "full")
    if name == "full":
        report = full_forward(x_T, backend, sched, mode, stream, prompt.seed)
    elif name == "taocache":
        report = taocache_forward(x_T, backend, sched, table, plan, mode, stream, prompt.seed)
    elif name == "tao_residual":
        report = tao_window_residual_forward(x_T, backend, sched, plan, mode, stream, prompt.seed)
    elif name == "residual":
        report = residual_forward(x_T, backend, sched, residual_rule(cfg), mode, stream, prompt.seed)
    elif name == "magnitude":
        report = magnitude_forward(x_T, backend, sched, table, magnitude_rule(cfg), mode, stream, prompt.seed)
    elif name == "hybrid":
        report = hybrid_forward(
            x_T, backend, sched, table, window_params(cfg), residual_rule(cfg),
            int(cfg.get("policy", {}).get("hybrid", {}).get("refresh_steps", 2)),
            mode, stream, prompt.seed,
        )
    else:
        raise errors.ConfigError(f"unknown policy {name!r}")
    trace = None
    if cfg.get("record_trace", False):
        with_latents = bool(cfg.get("record_latents", False))
        if cfg.get("record_streams") == "all":
            # Multi-stream calibration-grade trace; the extra predictions do
            # not perturb the trajectory because backends are pure.
            trace, _ = record_trace(
                factory(prompt), sched, mode, prompt.seed, with_latents=with_latents
            )
        else:
            trace = report_to_trace(
                report, sched, stream, prompt.seed, factory(prompt).backend_id, with_latents
            )
    return report, trace


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    sched = build_schedule(cfg)
    mode = sampler_mode(cfg)
    prompts = build_prompts(cfg)
    factory = backend_factory(cfg, sched)
    stream = policy_stream(cfg)
    name = cfg.get("policy", {}).get("name", "full")
    table = None
    table_path = args.table or cfg.get("table")
    if table_path:
        table = CalibrationTable.load(Path(cfg["_dir"]) / table_path if not Path(table_path).is_absolute() else table_path)
    plan_path = args.plan or cfg.get("plan")
    if plan_path:
        p = Path(plan_path)
        if not p.is_absolute():
            p = cfg["_dir"] / p
        plan = SkipPlan.from_dict(json.loads(p.read_text()))
    else:
        plan = None
    if name in ("taocache", "magnitude", "hybrid") and table is None:
        raise errors.ConfigError(f"policy {name!r} needs a calibration table (--table)")
    if name in ("taocache", "tao_residual") and plan is None:
        if table is None:
            raise errors.ConfigError(f"policy {name!r} needs a plan or a table to select one")
        plan = select_window(table, window_params(cfg), stream)
    out = output_dir(cfg, args.out)
    workers = max(1, int(cfg.get("workers", 1)))
    failures = []
    results: list[tuple[Prompt, PolicyRunReport, object]] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            (prompt, pool.submit(_run_one_prompt, cfg, sched, mode, factory, table, plan, prompt, stream))
            for prompt in prompts
        ]
        for prompt, fut in futures:
            try:
                report, trace = fut.result()
                results.append((prompt, report, trace))
            except errors.TaoCacheError as exc:
                failures.append((prompt.prompt_id, exc))
    for prompt, report, trace in results:
        np.save(out / f"x0_{prompt.prompt_id}.npy", report.x0.as_array())
        _write_report(out / f"report_{prompt.prompt_id}.json", report, prompt.prompt_id, args.timings)
        if trace is not None:
            write_trace(trace, out / f"trace_{prompt.prompt_id}.taot")
    with open(out / "steps.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prompt_id", "t", "action"])
        for prompt, report, _ in results:
            for t, action in report.steps:
                writer.writerow([prompt.prompt_id, t, action])
    for pid, exc in failures:
        print(f"prompt {pid} failed: {exc}", file=sys.stderr)
    print(f"sampled {len(results)}/{len(prompts)} prompts under policy {name!r} -> {out}")
    if failures:
        raise failures[0][1]
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ref_dir, cand_dir = Path(args.reference), Path(args.candidate)
    refs = sorted(ref_dir.glob("x0_*.npy"))
    if not refs:
        raise errors.ConfigError(f"no x0_*.npy files under {ref_dir}")
    rows = []
    missing = []
    for ref_path in refs:
        pid = ref_path.stem[len("x0_"):]
        cand_path = cand_dir / ref_path.name
        if not cand_path.exists():
            missing.append(pid)
            continue
        ref = Latent.from_array(np.load(ref_path))
        cand = Latent.from_array(np.load(cand_path))
        ref_trace = cand_trace = None
        rt, ct = ref_dir / f"trace_{pid}.taot", cand_dir / f"trace_{pid}.taot"
        if rt.exists() and ct.exists():
            ref_trace, cand_trace = read_trace(rt), read_trace(ct)
        report = compare(ref, cand, peak_range(ref), ref_trace, cand_trace)
        rows.append((pid, report.to_dict()))
    out_path = Path(args.out) if args.out else cand_dir / "metrics.csv"
    cols = ["mse", "psnr_db", "ssim", "peak", "eps_err_mean", "eps_err_max"]
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prompt_id"] + cols)
        for pid, d in rows:
            writer.writerow([pid] + [_fmt(d.get(c)) for c in cols])
        if rows:
            agg = {
                c: float(np.mean([d[c] for _, d in rows if d.get(c) is not None]))
                if any(d.get(c) is not None for _, d in rows)
                else None
                for c in cols
            }
            writer.writerow(["__mean__"] + [_fmt(agg[c]) for c in cols])
    print(f"metrics for {len(rows)} pairs -> {out_path}")
    if missing:
        print("missing candidate outputs for prompts: " + ", ".join(missing), file=sys.stderr)
        raise errors.TraceValidationError(f"{len(missing)} reference outputs had no candidate pair")
    return EXIT_OK


def _fmt(v) -> str:
    return "" if v is None else f"{v:.12g}"


def cmd_stats(args) -> int:
    trace = read_trace(args.trace)
    has_latents = bool(trace.latents)
    if not has_latents:
        print(
            "trace has no latents: single-step residual columns are omitted",
            file=sys.stderr,
        )
    streams = [s for s in ("cond", "uncond", "guided") if trace.stream_mask & _STREAMS_BY_NAME[s]]
    out_path = Path(args.out) if args.out else Path(args.trace).with_suffix(".stats.csv")
    header = ["t"]
    for s in streams:
        header += [f"{s}_delta_cos", f"{s}_delta_ratio"]
        if has_latents:
            header += [f"{s}_resid_cos", f"{s}_resid_ratio"]
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(trace.T - 2, 0, -1):
            row: list = [t]
            for s in streams:
                code = int(_STREAMS_BY_NAME[s])
                e = {k: trace.records[(k, code)] for k in (t, t + 1, t + 2)}
                d_t = Delta.from_array(e[t] - e[t + 1])
                d_t1 = Delta.from_array(e[t + 1] - e[t + 2])
                st = delta_stats(d_t, d_t1)
                row += [_fmt(st.cos if st.valid else None), _fmt(st.ratio if st.valid else None)]
                if has_latents:
                    r_t = Delta.from_array(e[t] - trace.latents[t])
                    r_t1 = Delta.from_array(e[t + 1] - trace.latents[t + 1])
                    rs = delta_stats(r_t, r_t1)
                    row += [_fmt(rs.cos if rs.valid else None), _fmt(rs.ratio if rs.valid else None)]
            writer.writerow(row)
    print(f"per-step statistics -> {out_path}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taocache",
        description="Calibrate, plan, and run delta-extrapolation caching for diffusion samplers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="run warmup trajectories and write the lookup table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides config/output_dir)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("select-window", help="choose a skip window from a calibration table")
    p.add_argument("--config", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out")
    p.add_argument("--manual", nargs=2, type=int, metavar=("T_LO", "T_HI"),
                   help="use an explicit window instead of auto-selection")
    p.add_argument("--n-skip", dest="n_skip", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", dest="gamma", type=float)
    p.add_argument("--tau-cos", dest="tau_cos", type=float)
    p.add_argument("--t-upper", dest="t_upper", type=int)
    p.add_argument("--k-refresh", dest="k_refresh", type=int)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.set_defaults(func=cmd_select_window)

    p = sub.add_parser("sample", help="sample all prompts under the configured policy")
    p.add_argument("--config", required=True)
    p.add_argument("--table")
    p.add_argument("--plan")
    p.add_argument("--out")
    p.add_argument("--timings", action="store_true", help="record wall-clock durations in reports")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="compare candidate outputs against a reference directory")
    p.add_argument("--reference", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="per-step delta/residual statistics from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (errors.ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (errors.InfeasibleWindowError, errors.PlanInvalidError) as exc:
        print(f"infeasible plan: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (errors.TraceFormatError, errors.TraceIncompleteError, errors.TableMismatchError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except errors.TaoCacheError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
