"""Command-line entry point orchestrating the full workflow.

Subcommands: prts, simulate, dataset, train, identify, eval, plot. Every
run writes a run_manifest.json into its output directory recording the
resolved configuration, seeds, paths and telemetry; re-running with the
same configuration reproduces the numeric artifacts bit-identically.
All quantities in files are SI (radians, seconds, N*m).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__, features, stimulus, tracefile
from . import cnn as cnn_mod
from . import dataset as dataset_mod
from . import identify as identify_mod
from .dynamics import BodyParams, DecParams, PARAM_NAMES, SimConfig
from .errors import ConfigError, InputFormatError, NotConvergedError, SwayidError

OUT_ROOT_ENV = "SWAYID_OUT_ROOT"


def load_config_file(path) -> dict:
    """Nested config dict from a JSON file or flat key=value text.

    Flat files use dotted keys (for example sim.noise_scale = 0.02); a
    run_manifest.json is accepted and contributes its "config" section.
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON config: {exc}")
        return data.get("config", data)
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_scalar(value)
    return out


def _parse_scalar(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return dict(value)


def build_gen_config(config: dict) -> dataset_mod.GenConfig:
    """GenConfig from the nested config dict (missing keys -> defaults)."""
    ranges_cfg = _section(config, "ranges")
    ranges_kwargs = {}
    for name, value in ranges_cfg.items():
        if name not in PARAM_NAMES:
            raise ConfigError(f"unknown parameter range {name!r}")
        if isinstance(value, dict):
            base = getattr(dataset_mod.ParamRanges(), name)
            ranges_kwargs[name] = (value.get("min", base[0]), value.get("max", base[1]))
        else:
            ranges_kwargs[name] = tuple(value)
    gen_kwargs = {}
    for key in ("stability_limit", "enrich_gate", "enrich_fraction", "max_attempt_factor"):
        if key in config:
            gen_kwargs[key] = config[key]
    try:
        return dataset_mod.GenConfig(
            ranges=dataset_mod.ParamRanges(**ranges_kwargs),
            body=BodyParams(**_section(config, "body")),
            prts=stimulus.PrtsConfig(**_section(config, "prts")),
            sim=SimConfig(**_section(config, "sim")),
            **gen_kwargs,
        )
    except TypeError as exc:
        raise ConfigError(f"invalid configuration key: {exc}")


def _params_from(config: dict, args) -> DecParams:
    values = _section(config, "params")
    for name in PARAM_NAMES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    missing = [n for n in PARAM_NAMES if n not in values]
    if missing:
        raise ConfigError(f"missing controller parameters: {', '.join(missing)}")
    return DecParams(**{n: float(values[n]) for n in PARAM_NAMES})


def _out_dir(args, default_name) -> str:
    if args.out_dir:
        path = args.out_dir
    else:
        root = os.environ.get(OUT_ROOT_ENV, ".")
        path = os.path.join(root, default_name)
    os.makedirs(path, exist_ok=True)
    return path


def write_run_manifest(out_dir, subcommand, config, seeds, inputs, outputs, t0,
                       throughput=None):
    telemetry = {"wall_seconds": time.perf_counter() - t0}
    if throughput:
        telemetry.update(throughput)
    manifest = {
        "tool": "swayid",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
        "telemetry": telemetry,
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_prts(args, config):
    t0 = time.perf_counter()
    gen = build_gen_config(config)
    prts = gen.prts
    out_dir = _out_dir(args, "prts")
    dt = args.dt if args.dt is not None else gen.sim.output_dt
    trace = stimulus.generate_prts(prts, dt)
    path = os.path.join(out_dir, "tilt.csv")
    tracefile.save_trace(path, trace, dt, header=("time_s", "tilt_rad"))
    write_run_manifest(out_dir, "prts", {**gen.to_dict(), "trace_dt": dt},
                       {}, {}, {"tilt_csv": path}, t0)
    print(f"wrote {path}: {trace.shape[0]} samples at {dt} s "
          f"({prts.duration:.2f} s total)")
    return 0


def cmd_simulate(args, config):
    t0 = time.perf_counter()
    gen = build_gen_config(config)
    if args.seed is not None:
        gen = replace(gen, sim=replace(gen.sim, seed=args.seed))
    params = _params_from(config, args)
    out_dir = _out_dir(args, "simulate")
    if args.tilt:
        tilt, tilt_dt = tracefile.load_trace(args.tilt)
        if abs(tilt_dt - gen.sim.dt) > 1e-12:
            raise InputFormatError(
                f"tilt trace dt {tilt_dt} does not match integration dt {gen.sim.dt}"
            )
    else:
        tilt = stimulus.generate_prts(gen.prts, gen.sim.dt)
    from .dynamics import simulate as run_sim

    trace = run_sim(params, gen.body, tilt, gen.sim)
    path = os.path.join(out_dir, "sway.csv")
    tracefile.save_trace(path, trace, gen.sim.output_dt)
    write_run_manifest(
        out_dir, "simulate",
        {**gen.to_dict(), "params": {n: getattr(params, n) for n in PARAM_NAMES}},
        {"sim_seed": gen.sim.seed}, {"tilt": args.tilt or "canonical"},
        {"sway_csv": path}, t0,
    )
    if not np.all(np.isfinite(trace)):
        print(f"wrote {path}: simulation diverged; trailing samples are NaN")
        return 4
    print(f"wrote {path}: {trace.shape[0]} samples, "
          f"max |sway| {np.max(np.abs(trace)):.5f} rad")
    return 0


def cmd_dataset(args, config):
    t0 = time.perf_counter()
    gen = build_gen_config(config)
    out_dir = _out_dir(args, "dataset")
    master_seed = args.seed if args.seed is not None else 0
    count_done = [0]

    def progress(accepted, attempted):
        if accepted - count_done[0] >= max(1, args.count // 20):
            count_done[0] = accepted
            print(f"  accepted {accepted}/{args.count} (attempted {attempted})",
                  flush=True)

    ds = dataset_mod.build_dataset(args.count, gen, master_seed,
                                   workers=args.workers, progress=progress)
    ds.save(out_dir)
    wall = time.perf_counter() - t0
    write_run_manifest(
        out_dir, "dataset", gen.to_dict(),
        {"master_seed": master_seed}, {},
        {"dataset_dir": out_dir}, t0,
        throughput={"records_per_second": args.count / wall},
    )
    rate = args.count / max(1, int(np.max(ds.candidate_index)) + 1)
    print(f"wrote {out_dir}: {len(ds)} records "
          f"({int(ds.enriched.sum())} enriched, acceptance ~{rate:.2f})")
    return 0


def cmd_train(args, config):
    t0 = time.perf_counter()
    ds = dataset_mod.Dataset.load(args.dataset)
    cfg = cnn_mod.TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed if args.seed is not None else 0,
        lr_decay=args.lr_decay,
    )
    out_dir = _out_dir(args, "model")

    def log(epoch, train_mse, val_mse):
        print(f"  epoch {epoch:3d}  train {train_mse:.4f}  val {val_mse:.4f}",
              flush=True)

    model = cnn_mod.train(ds, cfg=cfg, log=log)
    cnn_mod.save_model(out_dir, model)
    hist_path = os.path.join(out_dir, "history.csv")
    with open(hist_path, "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for i, (tr, va) in enumerate(zip(model.history["train_mse"],
                                         model.history["val_mse"])):
            fh.write(f"{i},{tr:.9g},{va:.9g}\n")
    write_run_manifest(out_dir, "train",
                       {"train": cfg.to_dict(), "dataset_config": ds.config},
                       {"train_seed": cfg.seed}, {"dataset": args.dataset},
                       {"model_dir": out_dir, "history_csv": hist_path}, t0)
    print(f"wrote {out_dir}: best val MSE {model.best_val_mse:.4f} "
          f"(epoch {model.history['best_epoch']})")
    return 0


def cmd_identify(args, config):
    t0 = time.perf_counter()
    gen = build_gen_config(config)
    trace, dt = tracefile.load_trace(args.trace)
    if args.resample or trace.shape[0] != features.TRACE_LEN:
        if not args.resample:
            raise InputFormatError(
                f"trace has {trace.shape[0]} samples; expected "
                f"{features.TRACE_LEN} (pass --resample to interpolate)"
            )
        trace = identify_mod.resample_trace(trace, features.TRACE_LEN)
    reference = None
    if args.reference:
        ref_cfg = load_config_file(args.reference)
        ref_values = ref_cfg.get("params", ref_cfg)
        reference = DecParams(**{n: float(ref_values[n]) for n in PARAM_NAMES})
    out_dir = _out_dir(args, "identify")
    exit_code = 0
    outputs = {}
    stats = None
    model = None
    if args.method in ("cnn", "both"):
        if not args.model:
            raise ConfigError("--model is required for method cnn")
        model = cnn_mod.load_model(args.model)
        stats = model.target_stats
        report = identify_mod.identify_cnn(model, trace, gen, reference=reference)
        sub = os.path.join(out_dir, "cnn")
        report.save(sub, gen.sim.output_dt)
        outputs["cnn_report"] = sub
        _print_report(report)
    if args.method in ("iterative", "both"):
        if stats is None and args.model:
            model = model or cnn_mod.load_model(args.model)
            stats = model.target_stats
        report = identify_mod.identify_iterative(
            trace, gen, budget=args.budget,
            seed=args.seed if args.seed is not None else 0,
            reference=reference, stats=stats,
        )
        sub = os.path.join(out_dir, "iterative")
        report.save(sub, gen.sim.output_dt)
        outputs["iterative_report"] = sub
        _print_report(report)
        if report.non_converged:
            exit_code = NotConvergedError.exit_code
    write_run_manifest(out_dir, "identify", gen.to_dict(),
                       {"seed": args.seed or 0},
                       {"trace": args.trace, "model": args.model or ""},
                       outputs, t0)
    return exit_code


def _print_report(report):
    print(f"[{report.method}] identified parameters:")
    for name in PARAM_NAMES:
        print(f"  {name:8s} {getattr(report.params, name):.6g}")
    m = report.metrics
    print(f"  trace RMS error {m['rms_error']:.6g} rad, "
          f"NRMSE {100 * m['nrmse']:.2f}%, input p2p {m['peak_to_peak_input']:.5f} rad")
    if report.se_total is not None:
        print(f"  normalized SE total {report.se_total:.4f} (mean {report.se_mean:.4f})")
    if report.method == "iterative":
        status = "converged" if not report.non_converged else "NOT converged"
        print(f"  {report.evaluations} evaluations, {status}")


def cmd_eval(args, config):
    t0 = time.perf_counter()
    ds = dataset_mod.Dataset.load(args.dataset)
    model = cnn_mod.load_model(args.model)
    val_idx = ds.val_indices
    val_mse = cnn_mod.evaluate_mse(model.net, ds.images[val_idx],
                                   ds.targets[val_idx], model.input_stats)
    # the mean predictor of z-scored targets has MSE equal to the target
    # variance, ~1.0 by construction on the training half
    baseline = float(np.mean(ds.targets[val_idx] ** 2))
    out_dir = _out_dir(args, "eval")
    result = {
        "val_mse": val_mse,
        "mean_predictor_mse": baseline,
        "n_val": int(len(val_idx)),
        "improvement_over_baseline": 1.0 - val_mse / baseline,
    }
    with open(os.path.join(out_dir, "eval.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_manifest(out_dir, "eval", {}, {},
                       {"dataset": args.dataset, "model": args.model},
                       {"eval_json": os.path.join(out_dir, "eval.json")}, t0)
    print(f"validation MSE {val_mse:.4f} vs mean-predictor baseline "
          f"{baseline:.4f} ({100 * result['improvement_over_baseline']:.1f}% better)")
    return 0


def cmd_plot(args, config):
    t0 = time.perf_counter()
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = _out_dir(args, "plots")
    outputs = {}
    if args.kind == "trace":
        fig, ax = plt.subplots(figsize=(10, 4))
        for path in args.inputs:
            trace, dt = tracefile.load_trace(path)
            ax.plot(np.arange(trace.shape[0]) * dt, np.degrees(trace),
                    label=os.path.basename(path), linewidth=0.8)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("angle (deg)")
        ax.legend()
    elif args.kind == "history":
        fig, ax = plt.subplots(figsize=(6, 4))
        for path in args.inputs:
            data = np.genfromtxt(path, delimiter=",", names=True)
            ax.plot(data["epoch"], data["train_mse"], label="train")
            ax.plot(data["epoch"], data["val_mse"], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.set_yscale("log")
        ax.legend()
    elif args.kind == "sway-hist":
        ds = dataset_mod.Dataset.load(args.inputs[0])
        fig, ax = plt.subplots(figsize=(6, 4))
        base = ds.peak_to_peak_sway[~ds.enriched]
        ax.hist([base, ds.peak_to_peak_sway], bins=40, stacked=False,
                label=["before enrichment", "enriched set"])
        ax.set_xlabel("peak-to-peak sway (rad)")
        ax.set_ylabel("samples")
        ax.legend()
    elif args.kind == "report":
        with open(os.path.join(args.inputs[0], "report.json")) as fh:
            report = json.load(fh)
        fig, axes = plt.subplots(2, 1, figsize=(10, 7))
        names = list(PARAM_NAMES)
        values = [report["params"][n] for n in names]
        x = np.arange(len(names))
        axes[0].bar(x - 0.2, values, width=0.4, label="identified")
        if "reference" in report:
            axes[0].bar(x + 0.2, [report["reference"][n] for n in names],
                        width=0.4, label="reference")
        axes[0].set_xticks(x, names)
        axes[0].set_yscale("symlog")
        axes[0].legend()
        for fname, label in (("input_trace.csv", "input"),
                             ("resim_trace.csv", "re-simulation")):
            trace, dt = tracefile.load_trace(os.path.join(args.inputs[0], fname))
            axes[1].plot(np.arange(trace.shape[0]) * dt, np.degrees(trace),
                         label=label, linewidth=0.8)
        axes[1].set_xlabel("time (s)")
        axes[1].set_ylabel("sway (deg)")
        axes[1].legend()
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{args.kind}.svg")
    fig.savefig(path)
    plt.close(fig)
    outputs["figure"] = path
    write_run_manifest(out_dir, "plot", {"kind": args.kind}, {},
                       {"inputs": list(args.inputs)}, outputs, t0)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swayid",
        description="simulate, learn, and identify posture-control parameters",
    )
    parser.add_argument("--version", action="version", version=f"swayid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out-dir", default=None)

    p = sub.add_parser("prts", help="write the tilt stimulus as CSV")
    common(p)
    p.add_argument("--dt", type=float, default=None, help="sample step (s)")
    p.set_defaults(func=cmd_prts)

    p = sub.add_parser("simulate", help="simulate one parameter set")
    common(p)
    for name in PARAM_NAMES:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float,
                       default=None)
    p.add_argument("--tilt", help="tilt CSV (defaults to the canonical stimulus)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dataset", help="build a labeled dataset")
    common(p)
    p.add_argument("--count", type=int, required=True,
                   help="number of accepted records (even)")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the network on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("identify", help="identify parameters from a sway trace")
    common(p)
    p.add_argument("--trace", required=True, help="sway CSV")
    p.add_argument("--model", help="trained model directory")
    p.add_argument("--method", choices=("cnn", "iterative", "both"), default="cnn")
    p.add_argument("--budget", type=int, default=2000,
                   help="objective evaluations for the iterative fit")
    p.add_argument("--reference", help="key=value file of true parameters")
    p.add_argument("--resample", action="store_true",
                   help="linearly resample the trace to the canonical length")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("eval", help="validation MSE and baseline comparison")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render traces, histories, reports to SVG")
    common(p)
    p.add_argument("--kind", choices=("trace", "history", "sway-hist", "report"),
                   required=True)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = load_config_file(args.config) if getattr(args, "config", None) else {}
    try:
        return args.func(args, config)
    except SwayidError as exc:
        print(f"swayid {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"swayid {args.command}: {exc}", file=sys.stderr)
        return InputFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
