"""Command-line entry point.

Subcommands:
    generate     render a scenario to AGLP logs, clouds, and a truth sidecar
    run          run the localization pipeline and write reports + figures
    ablate       run every residual-ablation mode on the same data
    bandwidth    reproduce the payload bandwidth table for keypoint budgets
    bench-index  recall/latency of the descriptor index vs exhaustive scan

Run settings come from an optional flat key = value config file plus flag
overrides; `--seed` shifts the scenario seed everywhere.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .association import PairFilterConfig
from .errors import AglocError
from .harness import (
    MODES,
    BadRunConfig,
    RunConfig,
    ablate,
    export_scenario,
    run_pipeline,
    summary_text,
    write_cycles_csv,
    write_trials_csv,
)
from .optimizer import SolverConfig
from .place_index import HnswIndex, brute_force_search
from .protocol import bandwidth
from .simkit import ScenarioConfig, generate, read_config
from .voxel_map import RayCastConfig

_RUN_SCALARS = ("trials", "base_seed", "mode", "window", "min_window",
                "success_threshold_m", "voxel_size", "max_points_per_voxel",
                "hnsw_m", "hnsw_ef_construction", "hnsw_ef_search", "hnsw_seed",
                "huber_px", "emit_trace")
_PREFIXED = {"raycast": RayCastConfig, "matching": PairFilterConfig,
             "solver": SolverConfig}


def _coerce_str(current, value: str):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def read_run_config(path) -> dict:
    """Flat key = value file into RunConfig keyword arguments."""
    raw: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BadRunConfig(f"bad config line: {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            raw[key] = value
    return run_kwargs_from_dict(raw)


def run_kwargs_from_dict(raw: dict[str, str]) -> dict:
    kwargs: dict = {}
    sub: dict[str, dict] = {name: {} for name in _PREFIXED}
    defaults = RunConfig(scenario=ScenarioConfig())
    sub_defaults = {name: cls() for name, cls in _PREFIXED.items()}
    sub_fields = {name: {f.name for f in fields(cls)}
                  for name, cls in _PREFIXED.items()}
    for key, value in raw.items():
        if key in _RUN_SCALARS:
            kwargs[key] = _coerce_str(getattr(defaults, key), value)
            continue
        matched = False
        for name in _PREFIXED:
            prefix = name + "_"
            if key.startswith(prefix) and key[len(prefix):] in sub_fields[name]:
                field_name = key[len(prefix):]
                sub[name][field_name] = _coerce_str(
                    getattr(sub_defaults[name], field_name), value)
                matched = True
                break
            if key in sub_fields[name]:
                sub[name][key] = _coerce_str(getattr(sub_defaults[name], key), value)
                matched = True
                break
        if not matched:
            raise BadRunConfig(f"unknown run config key {key!r}")
    for name, cls in _PREFIXED.items():
        if sub[name]:
            kwargs[name] = cls(**sub[name])
    return kwargs


def _build_run_config(args) -> RunConfig:
    kwargs = read_run_config(args.config) if args.config else {}
    scenario = None
    if args.scenario:
        scenario = read_config(args.scenario)
    elif args.input is None:
        scenario = ScenarioConfig()
    if scenario is not None and args.seed is not None:
        from dataclasses import replace
        scenario = replace(scenario, seed=args.seed)
    if args.trials is not None:
        kwargs["trials"] = args.trials
    if getattr(args, "mode", None):
        kwargs["mode"] = args.mode
    return RunConfig(scenario=scenario, input_dir=args.input, **kwargs)


def _cmd_generate(args) -> int:
    cfg = read_config(args.scenario) if args.scenario else ScenarioConfig()
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    scenario = generate(cfg)
    export_scenario(scenario, args.out_dir)
    print(f"wrote {cfg.cycles()} cycles ({cfg.preset}, seed {cfg.seed}) "
          f"to {args.out_dir}")
    return 0


def _cmd_run(args) -> int:
    cfg = _build_run_config(args)
    report = run_pipeline(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trials_csv(report, out / "trials.csv")
    write_cycles_csv(report, out / "cycles.csv")
    text = summary_text({report.mode: report})
    (out / "summary.txt").write_text(text)
    if not args.no_figures:
        from .figures import render_run_figures
        render_run_figures(report, out)
    print(text, end="")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_run_config(args)
    modes = args.modes.split(",") if args.modes else list(MODES)
    reports = ablate(cfg, modes=modes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for mode, report in reports.items():
        write_trials_csv(report, out / f"trials_{mode}.csv")
    text = summary_text(reports)
    (out / "summary.txt").write_text(text)
    if not args.no_figures:
        from .figures import render_ablate_figure
        render_ablate_figure(reports, out)
    print(text, end="")
    return 0


def _cmd_bandwidth(args) -> int:
    ns = [int(x) for x in args.keypoints.split(",")]
    rows = [bandwidth(n, fps=args.fps) for n in ns]
    lines = [f"{'keypoints':>10}{'payload bytes':>15}{'Mbps':>8}"]
    for r in rows:
        lines.append(f"{r.n:>10}{r.payload_bytes:>15}{r.mbps:>8.2f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv = "n,payload_bytes,framed_bytes,mbps\n" + "\n".join(
            f"{r.n},{r.payload_bytes},{r.framed_bytes},{r.mbps:.6f}" for r in rows)
        (out / "bandwidth.csv").write_text(csv + "\n")
        if not args.no_figures:
            from .figures import render_bandwidth_figure
            render_bandwidth_figure(rows, out)
    return 0


def _cmd_bench_index(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    vs = rng.normal(size=(args.size, 512)).astype(np.float32)
    vs /= np.linalg.norm(vs, axis=1, keepdims=True)
    qs = rng.normal(size=(args.queries, 512)).astype(np.float32)
    qs /= np.linalg.norm(qs, axis=1, keepdims=True)
    index = HnswIndex(ef_search=args.ef, seed=args.seed or 0)
    t0 = time.perf_counter()
    for i, v in enumerate(vs):
        index.insert(i, v)
    build_s = time.perf_counter() - t0
    vectors = {i: v for i, v in enumerate(vs)}
    hits = 0
    t_index = t_brute = 0.0
    for q in qs:
        t0 = time.perf_counter()
        got = index.search(q, top_k=1)[0][0]
        t_index += time.perf_counter() - t0
        t0 = time.perf_counter()
        want = brute_force_search(vectors, q, top_k=1)[0][0]
        t_brute += time.perf_counter() - t0
        hits += int(got == want)
    result = {
        "size": args.size,
        "queries": args.queries,
        "ef_search": args.ef,
        "recall_at_1": hits / args.queries,
        "build_s": build_s,
        "index_query_ms": 1e3 * t_index / args.queries,
        "brute_query_ms": 1e3 * t_brute / args.queries,
    }
    print(f"recall@1 {result['recall_at_1']:.3f} over {args.queries} queries "
          f"on {args.size} vectors (ef={args.ef})")
    print(f"build {build_s:.2f} s; query {result['index_query_ms']:.2f} ms vs "
          f"exhaustive {result['brute_query_ms']:.2f} ms")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv = "key,value\n" + "\n".join(f"{k},{v}" for k, v in result.items())
        (out / "bench_index.csv").write_text(csv + "\n")
        if not args.no_figures:
            from .figures import render_bench_figure
            render_bench_figure(result, out)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agloc",
                                     description="air-ground relative localization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a scenario to logs")
    p.add_argument("--scenario", help="scenario config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_generate)

    for name, func in (("run", _cmd_run), ("ablate", _cmd_ablate)):
        p = sub.add_parser(name, help=f"{name} the pipeline")
        p.add_argument("--scenario", help="scenario config file")
        p.add_argument("--input", help="directory with recorded AGLP logs")
        p.add_argument("--config", help="run config file (flat key = value)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--no-figures", action="store_true")
        if name == "run":
            p.add_argument("--mode", choices=MODES, default=None)
        else:
            p.add_argument("--modes", default=None,
                           help="comma-separated subset of modes")
        p.set_defaults(func=func)

    p = sub.add_parser("bandwidth", help="payload bandwidth per keypoint budget")
    p.add_argument("--keypoints", default="128,256,512,1024")
    p.add_argument("--fps", type=float, default=1.0)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_bandwidth)

    p = sub.add_parser("bench-index", help="descriptor index vs exhaustive scan")
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--ef", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_bench_index)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except AglocError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
