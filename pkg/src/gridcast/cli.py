"""Command line front end.

Subcommands: gen-data, train, forecast, evaluate, scorecard, bench-offload,
verify. Every artifact-producing run writes a manifest JSON next to its
output recording the command, the resolved configuration, the seed, library
versions, output paths, and wall time.

Exit codes: 0 on success; 1 on a handled failure, with a single
machine-parseable line "error: <category>: message" on stderr where
category is one of io, config, data, compute; 2 for usage errors.

The environment variable GRIDCAST_OUT_DIR, when set, is prepended to
relative output paths. It affects nothing else.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Tensor, backward
from .errors import ConfigError, DataError
from .model import (
    available_sources,
    blend_latents,
    decode,
    encode,
    init_model_params,
    load_config,
    process,
    tiny_config,
)
from .offload import OffloadEngine
from .rollout import greedy_plan, plan_hours, rollout
from .serialization import ContainerError, load_params_file, save_params_file
from .synthdata import generate_dataset, load_dataset_file, save_dataset_file
from .training import add_source_encoders, train

OUT_DIR_ENV = "GRIDCAST_OUT_DIR"


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _resolve_out(path: str) -> str:
    base = os.environ.get(OUT_DIR_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _versions() -> dict:
    out = {"gridcast": __version__, "numpy": np.__version__,
           "python": platform.python_version()}
    try:
        import scipy
        out["scipy"] = scipy.__version__
    except ImportError:
        pass
    return out


def write_manifest(target, command, config: dict, seed, outputs, wall_time_s):
    """Record one run next to its artifact; returns the manifest path."""
    if os.path.isdir(target):
        path = os.path.join(target, "manifest.json")
    else:
        path = str(target) + ".manifest.json"
    doc = {"command": list(command), "config": config, "seed": seed,
           "versions": _versions(),
           "outputs": [str(p) for p in outputs],
           "wall_time_s": round(float(wall_time_s), 6)}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _config_dict(cfg) -> dict:
    g = cfg.grid
    return {"rows": g.rows, "cols": g.cols, "north_lat": g.north_lat,
            "lat_step": g.lat_step, "lon_step": g.lon_step,
            "surface_in": cfg.surface_in, "surface_out": cfg.surface_out,
            "atmos_vars": cfg.atmos_vars, "levels": cfg.levels,
            "level_patch": cfg.level_patch, "stem_channels": cfg.stem_channels,
            "stage_channels": list(cfg.stage_channels), "hidden": cfg.hidden,
            "heads": cfg.heads, "window": list(cfg.window),
            "enc_blocks": cfg.enc_blocks, "dec_blocks": cfg.dec_blocks,
            "proc_blocks": cfg.proc_blocks, "horizons": list(cfg.horizons),
            "max_dt": cfg.max_dt}


def _load_params_tensors(path) -> dict:
    return {k: Tensor(v, requires_grad=True)
            for k, v in load_params_file(path).items()}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args, argv) -> int:
    t0 = time.time()
    cfg = load_config(args.spec)
    ds = generate_dataset(cfg.grid, cfg.surface_in, cfg.surface_out,
                          cfg.atmos_vars, cfg.levels, hours=args.hours,
                          seed=args.seed, n_sources=args.sources,
                          advection_only=args.advection_only)
    out = _resolve_out(args.out)
    _ensure_parent(out)
    save_dataset_file(ds, out)
    write_manifest(out, argv, _config_dict(cfg), args.seed, [out],
                   time.time() - t0)
    print(f"wrote {out}: {ds.n_times} hourly samples, "
          f"{ds.n_sources} source(s)")
    return 0


def _cmd_train(args, argv) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    ds = load_dataset_file(args.data)
    if args.params:
        params = _load_params_tensors(args.params)
    else:
        params = init_model_params(cfg, seed=args.seed)
    if args.stage == "operational":
        names = [f"op{j}" for j in range(1, ds.n_sources)]
        have = set(available_sources(params))
        missing = [n for n in names if n not in have]
        if missing:
            add_source_encoders(params, cfg, missing, seed=args.seed)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    hist = train(params, cfg, ds, args.stage, steps=args.steps,
                 seed=args.seed, out_dir=out, lr_max=args.lr_max,
                 checkpoint_every=args.checkpoint_every)
    outputs = [os.path.join(out, "train_log.csv"),
               os.path.join(out, "params_final.lmtw")]
    write_manifest(out, argv, _config_dict(cfg), args.seed, outputs,
                   time.time() - t0)
    print(f"trained {args.steps} steps ({args.stage}); "
          f"loss {hist[0]['loss']:.6f} -> {hist[-1]['loss']:.6f}")
    return 0


def _cmd_forecast(args, argv) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    params = _load_params_tensors(args.params)
    ds = load_dataset_file(args.init)
    init_hour = args.init_hour if args.init_hour is not None else int(ds.times[-1])
    idx = ds.index_at(init_hour)

    sources = args.source or ["primary"]
    known = available_sources(params)
    for s in sources:
        if s not in known:
            raise ConfigError(f"no encoder for source {s!r}; have {known}")

    def ds_index(name: str) -> int:
        # dataset stream 0 feeds the primary encoder, stream j feeds "opj"
        if name == "primary":
            return 0
        j = int(name[2:]) if name.startswith("op") and name[2:].isdigit() else -1
        if not 1 <= j < ds.n_sources:
            raise ConfigError(f"source {name!r} has no dataset stream "
                              f"(dataset carries {ds.n_sources})")
        return j

    engine = None
    if args.offload:
        engine = OffloadEngine(budget_bytes=args.budget_bytes,
                               lookahead=args.lookahead)
    try:
        with ad.no_grad():
            if len(sources) == 1:
                lat = encode(ds.input_state(idx, ds_index(sources[0])),
                             params, cfg, source=sources[0])
            else:
                if "blend.logits" not in params:
                    raise ConfigError(
                        "multi-source forecast needs blend.logits in params")
                lats = [encode(ds.input_state(idx, ds_index(s)), params, cfg,
                               source=s) for s in sources]
                logits = params["blend.logits"]
                if logits.values.shape != (len(known),):
                    raise ConfigError(
                        f"blend.logits covers {logits.values.shape[0]} sources, "
                        f"model has {len(known)}")
                picked = [known.index(s) for s in sources]
                w = np.exp(logits.values[picked])
                lat = blend_latents(lats, w / w.sum())
            plan = greedy_plan(args.dt, cfg.max_dt)
            lat = rollout(lat, plan, params, cfg, engine=engine)
            dec = decode(lat, params, cfg)
    finally:
        if engine is not None:
            engine.close()

    out = _resolve_out(args.out)
    _ensure_parent(out)
    save_params_file(out, {"surface": dec.surface.values,
                           "atmos": dec.atmos.values,
                           "valid_time": np.float64(dec.valid_time)})
    write_manifest(out, argv, _config_dict(cfg), None, [out], time.time() - t0)
    print(f"forecast +{args.dt} h from hour {init_hour} "
          f"({len(plan)} latent steps) -> {out}")
    return 0


def _load_forecast_fields(path):
    blobs = load_params_file(path)
    for key in ("surface", "atmos", "valid_time"):
        if key not in blobs:
            raise DataError(f"forecast file lacks {key!r}")
    return blobs["surface"], blobs["atmos"], int(blobs["valid_time"])


def _cmd_evaluate(args, argv) -> int:
    from .evaluation import blur_index, latitude_rmse

    t0 = time.time()
    sfc, atm, valid_time = _load_forecast_fields(args.forecast)
    ds = load_dataset_file(args.truth)
    idx = ds.index_at(valid_time)
    true_sfc, true_atm = ds.truth_fields(idx)
    if sfc.shape != true_sfc.shape or atm.shape != true_atm.shape:
        raise DataError(
            f"forecast shapes {sfc.shape}/{atm.shape} do not match truth "
            f"{true_sfc.shape}/{true_atm.shape}")

    rmse = {}
    blur = {}

    def add(name, pred, true):
        rmse[name] = latitude_rmse(pred, true, ds.grid)
        b = blur_index(pred, true, ds.grid, args.wavelength_km)
        blur[name] = None if not np.isfinite(b) else b

    for i in range(sfc.shape[0]):
        add(f"sfc{i}", sfc[i], true_sfc[i])
    for a in range(atm.shape[0]):
        for l in range(atm.shape[1]):
            add(f"atm{a}.lev{l}", atm[a, l], true_atm[a, l])

    doc = {"valid_time": valid_time, "wavelength_km": args.wavelength_km,
           "rmse": rmse, "blur": blur}
    out = _resolve_out(args.out)
    _ensure_parent(out)
    with open(out, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(out, argv, {"wavelength_km": args.wavelength_km}, None,
                   [out], time.time() - t0)
    mean_rmse = float(np.mean(list(rmse.values())))
    print(f"evaluated {len(rmse)} planes at hour {valid_time}; "
          f"mean rmse {mean_rmse:.6f} -> {out}")
    return 0


def _cmd_scorecard(args, argv) -> int:
    from .evaluation import scorecard as score

    t0 = time.time()
    with open(args.a) as f:
        doc_a = json.load(f)
    with open(args.b) as f:
        doc_b = json.load(f)
    for name, doc in (("a", doc_a), ("b", doc_b)):
        if "rmse" not in doc:
            raise DataError(f"file {name} is not an evaluation report")
    pct = score(doc_a["rmse"], doc_b["rmse"])
    width = max(len(k) for k in pct)
    for k in sorted(pct):
        print(f"{k:<{width}}  {doc_a['rmse'][k]:12.6f}  "
              f"{doc_b['rmse'][k]:12.6f}  {pct[k]:+8.3f}%")
    if args.out:
        out = _resolve_out(args.out)
        _ensure_parent(out)
        with open(out, "w") as f:
            json.dump({"percent_vs_baseline": pct}, f, indent=2, sort_keys=True)
            f.write("\n")
        write_manifest(out, argv, {}, None, [out], time.time() - t0)
    return 0


def _bench_workload(n_segments: int, budget: int, lookahead: int,
                    latency_us: float):
    """One offloaded forward+backward over a chain of identical token mixers."""
    cfg = tiny_config()
    params = init_model_params(cfg, seed=0, zero_residual=False)
    ext = (cfg.depth_planes, cfg.grid.rows // 8, cfg.grid.cols // 8)
    n_tokens = ext[0] * ext[1] * ext[2]
    rng = np.random.default_rng(42)
    z0 = Tensor(rng.standard_normal((n_tokens, cfg.hidden)), requires_grad=True)

    from .model import LatentState

    def step(tokens):
        return process(LatentState(tokens, 0, ext), params, cfg, 6).tokens

    engine = OffloadEngine(budget_bytes=budget, lookahead=lookahead,
                           latency_us=latency_us)
    try:
        t0 = time.time()
        z = engine.run_segments([step] * n_segments, z0)
        loss = (z * z).mean()
        backward(loss, leaves=[z0])
        wall = time.time() - t0
        return {"segments": n_segments, "high_water_bytes": engine.high_water,
                "demand_stalls": engine.demand_stalls,
                "blocked_waits": engine.blocked_waits,
                "wall_time_s": round(wall, 6)}
    finally:
        engine.close()


def _cmd_bench_offload(args, argv) -> int:
    t0 = time.time()
    try:
        counts = [int(s) for s in args.segments.split(",") if s]
    except ValueError:
        raise ConfigError(f"bad --segments {args.segments!r}; "
                          "expected comma-separated integers")
    if not counts or any(c < 1 for c in counts):
        raise ConfigError("--segments needs positive integers")
    rows = [_bench_workload(c, args.budget, args.lookahead, args.latency_us)
            for c in counts]
    header = ["segments", "high_water_bytes", "demand_stalls",
              "blocked_waits", "wall_time_s"]
    if args.out:
        out = _resolve_out(args.out)
        _ensure_parent(out)
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for r in rows:
                w.writerow([r[k] for k in header])
        write_manifest(out, argv, {"budget": args.budget,
                                   "lookahead": args.lookahead,
                                   "latency_us": args.latency_us}, None,
                       [out], time.time() - t0)
        print(f"wrote {out}")
    else:
        print(",".join(header))
        for r in rows:
            print(",".join(str(r[k]) for k in header))
    return 0


def _cmd_verify(args, argv) -> int:
    from .verify import run_checks

    failures = run_checks(verbose=True)
    if failures:
        raise RuntimeError(f"{failures} invariant check(s) failed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gridcast",
        description="Grid forecasting toolkit: data, training, inference, "
                    "verification.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic WMD3 dataset")
    g.add_argument("--spec", required=True, help="model config file")
    g.add_argument("--hours", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sources", type=int, default=1)
    g.add_argument("--advection-only", action="store_true")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--stage", required=True,
                   choices=["pretrain", "anneal", "1h", "operational"])
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--params", help="warm start from a checkpoint")
    t.add_argument("--lr-max", type=float, default=3e-4)
    t.add_argument("--checkpoint-every", type=int, default=100)

    f = sub.add_parser("forecast", help="roll a forecast from a dataset state")
    f.add_argument("--config", required=True)
    f.add_argument("--params", required=True)
    f.add_argument("--init", required=True, help="WMD3 dataset file")
    f.add_argument("--init-hour", type=int, default=None)
    f.add_argument("--dt", type=int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--source", action="append",
                   help="input source name; repeat to blend several")
    f.add_argument("--offload", action="store_true",
                   help="run the latent chain through the offload engine")
    f.add_argument("--budget-bytes", type=int, default=1 << 28)
    f.add_argument("--lookahead", type=int, default=2)

    e = sub.add_parser("evaluate", help="score a forecast file against truth")
    e.add_argument("--forecast", required=True)
    e.add_argument("--truth", required=True, help="WMD3 dataset file")
    e.add_argument("--wavelength-km", type=float, default=2000.0)
    e.add_argument("--out", required=True)

    s = sub.add_parser("scorecard", help="percent RMSE change of a versus b")
    s.add_argument("--a", required=True, help="evaluation JSON")
    s.add_argument("--b", required=True, help="baseline evaluation JSON")
    s.add_argument("--out")

    b = sub.add_parser("bench-offload", help="measure the offload engine")
    b.add_argument("--segments", required=True,
                   help="comma-separated segment counts, e.g. 1,4,16")
    b.add_argument("--budget", type=int, required=True)
    b.add_argument("--lookahead", type=int, default=2)
    b.add_argument("--latency-us", type=float, default=0.0)
    b.add_argument("--out")

    sub.add_parser("verify", help="run the built-in invariant checks")
    return p


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "forecast": _cmd_forecast,
    "evaluate": _cmd_evaluate,
    "scorecard": _cmd_scorecard,
    "bench-offload": _cmd_bench_offload,
    "verify": _cmd_verify,
}


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (DataError, ContainerError, json.JSONDecodeError)):
        return "data"
    return "compute"


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _HANDLERS[args.command](args, ["gridcast"] + argv)
    except Exception as e:  # every failure becomes one parseable line
        msg = " ".join(str(e).split())
        print(f"error: {_categorize(e)}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
