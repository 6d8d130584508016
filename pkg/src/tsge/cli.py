"""Command-line entry point: ``tsge <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources

import numpy as np

from . import pipeline
from .model import (MultibandConfig, NoiseSpec, channel_from_json, channel_to_json, observation_from_csv,
                    observation_to_csv, observe, sample_channel)
from .refined import PSOOptions


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _range(text: str) -> np.ndarray:
    try:
        a, b, steps = text.split(":")
        return np.linspace(float(a), float(b), int(steps))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("range must look like start:stop:steps") from exc


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _load_inputs(args):
    with open(args.channel) as fh:
        channel, config, meta = channel_from_json(fh.read())
    if config is None:
        raise SystemExit("channel file carries no subband plan")
    if getattr(args, "observation", None):
        with open(args.observation) as fh:
            obs = observation_from_csv(fh.read(), config, float(meta.get("sigma_ns_sq", 0.0)), channel.sigma_p)
    else:
        obs = observe(channel, config, NoiseSpec(float(meta.get("snr_db", np.inf)), args.seed))
    return channel, config, obs


def cmd_simulate(args):
    config = MultibandConfig.from_bandwidth(args.fc, args.fs, args.bandwidth, allow_overlap=args.allow_overlap)
    ss = np.random.SeedSequence(args.seed)
    ch_seed, noise_seed = ss.spawn(2)
    channel = sample_channel(args.paths, (args.tau_min, args.tau_max), ch_seed, config.M, args.sigma_p)
    obs = observe(channel, config, NoiseSpec(args.snr_db, noise_seed))
    os.makedirs(args.out_dir, exist_ok=True)
    _write(os.path.join(args.out_dir, "channel.json"),
           channel_to_json(channel, config, snr_db=args.snr_db, sigma_ns_sq=obs.sigma_ns_sq, seed=args.seed))
    _write(os.path.join(args.out_dir, "observation.csv"), observation_to_csv(obs))
    print(os.path.join(args.out_dir, "channel.json"))


def cmd_estimate(args):
    channel, config, obs = _load_inputs(args)
    opts = pipeline.TSGEOptions(pso=PSOOptions(n_particles=args.particles, max_iters=args.iters),
                                e_tau=args.e_tau)
    scheme = args.scheme.replace("-", "_")
    out = {"scheme": args.scheme, "seed": args.seed}
    if scheme == "igd":
        est = pipeline.run_igd(obs, channel, opts)
        out["refined"] = json.loads(est.to_json())
        out["los_delay_s"] = est.los_delay
    else:
        coarse = pipeline.run_stage1(obs, opts)
        out["coarse"] = json.loads(coarse.to_json())
        if scheme == "turbo_bi":
            out["los_delay_s"] = coarse.los_delay
        else:
            if scheme == "tsge":
                est = pipeline.refine_pso(obs, coarse, opts, np.random.SeedSequence(args.seed))
            else:
                est = pipeline.run_tsgd(obs, coarse, opts)
            out["refined"] = json.loads(est.to_json())
            out["los_delay_s"] = est.los_delay
            if args.trace:
                _write(args.trace, est.trace_csv())
    out["error_s"] = abs(out["los_delay_s"] - channel.los_delay)
    _write(args.out, json.dumps(out, indent=2))


def cmd_benchmark(args):
    with open(args.plan) as fh:
        plan = pipeline.ExperimentPlan.from_json(fh.read())
    if args.seed is not None:
        plan.seed = args.seed
    if args.trials is not None:
        plan.trials = args.trials
    rows = pipeline.monte_carlo(plan, args.threads)
    paths = pipeline.write_outputs(rows, args.out_dir, args.prefix)
    summary = pipeline.summarize(rows)
    for scheme, cells in summary.items():
        for v, s in cells.items():
            print(f"{scheme:9s} {plan.sweep}={v:>12s}  rmse={s['rmse']:.4e}  median={s['median']:.4e}"
                  f"  p90={s['p90']:.4e}  failures={s['failures']}")
    print(paths["results"])


def cmd_scan(args):
    channel, config, obs = _load_inputs(args)
    if args.axis != "tau1":
        raise SystemExit("only the tau1 axis is supported")
    values = args.range
    ll = pipeline.scan_likelihood(args.model, obs, channel, values)
    _write(args.out, pipeline.scan_csv(values, ll))
    m = pipeline.lobe_metrics(values, ll)
    info = {"model": args.model, "truth_s": channel.los_delay, "peak_s": m.peak,
            "mainlobe_halfwidth_s": m.mainlobe_halfwidth, "mainlobe_s": list(m.mainlobe),
            "truth_in_mainlobe": m.contains(channel.los_delay), "peak_spacing_s": m.peak_spacing}
    print(json.dumps(info), file=sys.stderr)


def cmd_calibrate(args):
    entries = pipeline.calibrate_e(args.bandwidths, args.snrs, args.sigma_ps, args.trials, args.seed, args.threads)
    out = args.out
    if out is None:
        out = str(resources.files("tsge").joinpath("data/e_table.json"))
    doc = {"statistic": "Stage-1 LoS delay RMSE, two-path synthetic channels", "seed": args.seed,
           "entries": entries}
    _write(out, json.dumps(doc, indent=2))
    print(out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsge", description="Two-stage multiband LoS delay estimation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="draw a channel and its noisy CFR")
    s.add_argument("--out-dir", default=".")
    s.add_argument("--paths", type=int, default=2)
    s.add_argument("--snr-db", type=float, default=7.0)
    s.add_argument("--bandwidth", type=float, default=40e6)
    s.add_argument("--fc", type=_floats, default=[1.80e9, 2.02e9], help="comma-separated carriers (Hz)")
    s.add_argument("--fs", type=float, default=60e3)
    s.add_argument("--sigma-p", type=float, default=0.0, help="timing-offset std (s)")
    s.add_argument("--tau-min", type=float, default=20e-9)
    s.add_argument("--tau-max", type=float, default=200e-9)
    s.add_argument("--allow-overlap", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate the LoS delay of one observation")
    e.add_argument("--channel", required=True, help="channel JSON from `simulate`")
    e.add_argument("--observation", help="observation CSV; regenerated from the channel when omitted")
    e.add_argument("--scheme", choices=["tsge", "turbo-bi", "tsgd", "igd"], default="tsge")
    e.add_argument("--particles", type=int, default=100)
    e.add_argument("--iters", type=int, default=500)
    e.add_argument("--e-tau", type=float, default=None, help="delay half-width (s); default from table")
    e.add_argument("--trace", help="write the fitness trace CSV here")
    e.add_argument("--out", default="-")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("benchmark", help="run an ExperimentPlan")
    b.add_argument("--plan", required=True)
    b.add_argument("--out-dir", default="results")
    b.add_argument("--prefix", default="results")
    b.add_argument("--trials", type=int, default=None)
    b.add_argument("--threads", type=int, default=None, help=f"worker processes (default ${pipeline.THREADS_ENV} or 1)")
    b.add_argument("--seed", type=int, default=None)
    b.set_defaults(func=cmd_benchmark)

    c = sub.add_parser("scan-likelihood", help="1-D likelihood along the LoS delay")
    c.add_argument("--channel", required=True)
    c.add_argument("--observation")
    c.add_argument("--model", choices=list(pipeline.MODELS), required=True)
    c.add_argument("--axis", default="tau1")
    c.add_argument("--range", type=_range, required=True, help="start:stop:steps in seconds; write --range=START:STOP:N when START is negative")
    c.add_argument("--out", default="-")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_scan)

    k = sub.add_parser("calibrate-e", help="tabulate Stage-1 RMSE for the search half-widths")
    k.add_argument("--bandwidths", type=_floats, default=[40e6, 60e6])
    k.add_argument("--snrs", type=_floats, default=[0, 5, 7, 10, 15, 20, 30])
    k.add_argument("--sigma-ps", type=_floats, default=[0.0, 1e-9, 3e-9])
    k.add_argument("--trials", type=int, default=40)
    k.add_argument("--threads", type=int, default=None)
    k.add_argument("--out", default=None, help="default: the packaged table")
    k.add_argument("--seed", type=int, default=12345)
    k.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
