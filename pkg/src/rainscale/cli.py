"""Command-line interface: ``rainscale synth|train|downscale|evaluate|track``.

Exit codes: 0 success, 2 configuration or validation error, 3 I/O error,
4 numerical divergence.
"""

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig, coerce, read_config
from .errors import InvalidConfig, IoFailure, RainscaleError, TimeMisalignment
from .grid import (
    MANIFEST,
    GridStack,
    NormalizationSpec,
    Resolution,
    SplitScheme,
    Variable,
    apply_floor,
    bilinear_resample,
    load_dataset,
    load_grid_stack,
    load_region_masks,
    nca_regions,
    normalize_array,
    preprocess_precip,
    save_dataset,
    save_grid_stack,
    temporal_split_indices,
)
from .metrics import evaluate, write_pgm, write_report_csv
from .models import (
    GeneratorSpec,
    build_discriminator,
    build_generator,
    generate_batch,
    load_checkpoint,
    load_norm,
    save_checkpoint,
)
from .synth import PRESETS, preset, synth_dataset
from .tracker import (
    TrackerConfig,
    event_histograms,
    track,
    write_events_csv,
    write_histograms_csv,
)
from .training import (
    TrainConfig,
    prepare_data,
    prepare_inputs,
    train_cgan,
    train_simple,
    write_loss_csv,
)

log = logging.getLogger("rainscale")

VARIANTS = ("direct-simple", "encoded-simple", "direct-cgan", "encoded-cgan", "sr-cgan")


def _shape(text):
    try:
        ny, nx = (int(s) for s in text.lower().replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NY,NX, got {text!r}") from None
    return (ny, nx)


def _common(p, seed_required=False, seed_default=None, model_choices=None, model_default=None, out_default="out"):
    p.add_argument("--config", metavar="PATH", help="INI file; flags given on the command line win")
    if seed_required:
        p.add_argument("--seed", type=int, required=True, help="random seed (mandatory)")
    else:
        p.add_argument("--seed", type=int, default=seed_default, help="random seed")
    p.add_argument("--out", metavar="DIR", default=out_default, help="output directory")
    if model_choices is not None:
        p.add_argument("--model", choices=model_choices, default=model_default, help="model variant")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="rainscale", description="Learned downscaling of coarse precipitation.", formatter_class=fmt
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset", formatter_class=fmt)
    _common(p, seed_required=True, out_default="data")
    p.add_argument("--preset", choices=sorted(PRESETS), default="small", help="grid size and length")
    p.add_argument("--coarse-shape", type=_shape, default=None, help="coarse grid NY,NX (overrides preset)")
    p.add_argument("--fine-shape", type=_shape, default=None, help="fine grid NY,NX; must be 4x coarse")
    p.add_argument("--steps", type=int, default=None, help="number of 3-hourly steps (overrides preset)")
    p.add_argument("--storm-rate", type=float, default=0.4, help="mean new storms per step")
    p.add_argument("--jitter-cells", type=float, default=2.0, help="max coarse storm offset in coarse cells")

    p = sub.add_parser("train", help="train a downscaling model", formatter_class=fmt)
    _common(p, seed_required=True, model_choices=VARIANTS, model_default="direct-simple", out_default="run")
    p.add_argument("--data", metavar="DIR", default="data", help="dataset root with coarse/ and fine/")
    p.add_argument("--loss", choices=("l1", "l2"), default="l1", help="content loss of Simple variants")
    p.add_argument("--iterations", type=int, default=8000, help="generator updates")
    p.add_argument("--batch", type=int, default=32, help="minibatch size m")
    p.add_argument("--w-a", type=float, default=1.0, help="adversarial loss weight")
    p.add_argument("--w-c", type=float, default=5.0, help="content (L1) loss weight")
    p.add_argument("--lr-g", type=float, default=2e-4, help="generator learning rate")
    p.add_argument("--lr-d", type=float, default=2e-4, help="critic learning rate")
    p.add_argument("--c-clip", type=float, default=0.01, help="critic weight clip")
    p.add_argument("--k-d", type=int, default=3, help="critic steps per generator step")
    p.add_argument("--val-every", type=int, default=100, help="iterations between validations")
    p.add_argument("--literal-ybar", action="store_true", help="use the target's domain mean in the content term")
    p.add_argument("--precip-floor", type=float, default=0.05, help="drizzle floor, mm/3hr")
    p.add_argument("--cap-quantile", type=float, default=0.995, help="per-cell precipitation cap quantile")

    p = sub.add_parser("downscale", help="generate fine precipitation from a coarse stack", formatter_class=fmt)
    _common(p, seed_default=0, model_choices=("checkpoint", "interpolator"), model_default="checkpoint",
            out_default="downscaled")
    p.add_argument("--data", metavar="DIR", default="data", help="dataset root with coarse/ (and fine/ topography)")
    p.add_argument("--checkpoint", metavar="DIR", default="run/checkpoint", help="trained generator")
    p.add_argument("--steps", choices=("test", "all"), default="test", help="which timesteps to downscale")

    p = sub.add_parser("evaluate", help="score candidate stacks against ground truth", formatter_class=fmt)
    _common(p, seed_default=0, out_default="report")
    p.add_argument("--truth", metavar="DIR", required=True, help="FINE ground-truth stack")
    p.add_argument("candidates", nargs="+", metavar="NAME=DIR", help="candidate FINE precipitation stacks")
    p.add_argument("--regions", metavar="DIR", default=None, help="directory of <REGION>.npy masks")
    p.add_argument("--steps", choices=("test", "all"), default="test", help="timesteps to evaluate")
    p.add_argument("--eq3", action="store_true", help="also report the printed spatial-variance form")
    p.add_argument("--model", default=None, help="evaluate only this candidate name")

    p = sub.add_parser("track", help="identify and track storm events", formatter_class=fmt)
    _common(p, seed_default=0, out_default="events")
    p.add_argument("--data", metavar="DIR", required=True, help="stack directory holding precip")
    p.add_argument("--threshold", type=float, default=10.0, help="intensity threshold, mm/3hr")
    p.add_argument("--r-acc", type=int, default=2, help="dilation radius in cells")
    p.add_argument("--min-cells", type=int, default=1, help="smallest component kept")
    p.add_argument("--steps", choices=("test", "all"), default="all", help="timesteps to track")
    p.add_argument("--model", default=None, help="label written into the summary")
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from the ``--config`` file, if any."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    sections = read_config(known.config)
    sub = parser._subparsers._group_actions[0].choices[command]
    values = {**sections.get("common", {}), **sections.get(command, {})}
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config") or not action.option_strings:
            raise InvalidConfig(f"{known.config}: unknown key {key!r} for '{command}'")
        if isinstance(action, argparse._StoreTrueAction):
            value = coerce(raw, False, key)
        elif action.type in (int, float):
            value = coerce(raw, action.type(0), key)
        elif action.type is not None:
            try:
                value = action.type(raw)
            except argparse.ArgumentTypeError as exc:
                raise InvalidConfig(f"{known.config}: {key}: {exc}") from None
        else:
            value = raw
        if action.choices is not None and value not in action.choices:
            raise InvalidConfig(f"{known.config}: {key}={value!r} not in {sorted(action.choices)}")
        defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _run_config(args):
    train = tracker = None
    if args.command == "train":
        train = TrainConfig(
            w_a=args.w_a, w_c=args.w_c, m=args.batch, iterations=args.iterations, lr_g=args.lr_g,
            lr_d=args.lr_d, c_clip=args.c_clip, k_d=args.k_d, seed=args.seed, val_every=args.val_every,
            loss=args.loss, literal_ybar=args.literal_ybar,
        ).validate()
    if args.command == "track":
        tracker = TrackerConfig(threshold=args.threshold, r_acc=args.r_acc, min_cells=args.min_cells).validate()
    paths = {k: getattr(args, k) for k in ("out", "data", "checkpoint", "truth", "regions") if hasattr(args, k)}
    norm = {}
    if args.command == "train":
        norm = {"precip_floor": args.precip_floor, "precip_cap_quantile": args.cap_quantile}
        try:
            NormalizationSpec(**norm)
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from None
    return RunConfig(
        command=args.command, seed=args.seed, model=getattr(args, "model", None), paths=paths,
        train=train or TrainConfig(), tracker=tracker or TrackerConfig(), norm_overrides=norm,
    )


def _select_steps(timesteps, which):
    if which == "all":
        return np.arange(len(timesteps))
    return temporal_split_indices(timesteps, SplitScheme())[2]


# ---------------------------------------------------------------- commands


def cmd_synth(args, run):
    overrides = {"seed": run.seed, "storm_rate": args.storm_rate, "jitter_cells": args.jitter_cells}
    if args.coarse_shape:
        overrides["coarse_shape"] = args.coarse_shape
    if args.fine_shape:
        overrides["fine_shape"] = args.fine_shape
    if args.steps:
        overrides["n_steps"] = args.steps
    cfg = preset(args.preset, **overrides)
    coarse, fine = synth_dataset(cfg)
    save_dataset(coarse, fine, run.paths["out"])
    p = fine.fields[Variable.PRECIP]
    q50, q99, q999 = np.quantile(p, [0.5, 0.99, 0.999])
    print(f"coarse {coarse.shape}  fine {fine.shape}  steps {len(fine)} "
          f"({int(fine.timesteps[0])}..{int(fine.timesteps[-1])})")
    print(f"fine precip quantiles  p50 {q50:.3f}  p99 {q99:.3f}  p99.9 {q999:.3f}  max {p.max():.3f} mm/3hr")
    print(f"wrote {run.paths['out']}")


def cmd_train(args, run):
    coarse, fine = load_dataset(run.paths["data"])
    kind = run.model.split("-")[0].upper()
    norm = dataclasses.replace(NormalizationSpec(), **run.norm_overrides)
    scheme = SplitScheme(seed=run.seed)
    data = prepare_data(None if kind == "SR" else coarse, fine, kind, scheme=scheme, norm=norm)
    spec = GeneratorSpec(kind=kind)
    gen = build_generator(spec, seed=run.seed)
    cfg = run.train
    t0 = time.perf_counter()
    if run.model.endswith("simple"):
        result = train_simple(gen, data, cfg, cfg.loss)
        disc = None
    else:
        disc = build_discriminator(seed=run.seed + 1)
        result = train_cgan(gen, disc, data, cfg)
    elapsed = time.perf_counter() - t0
    out = run.paths["out"]
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    meta = {"variant": run.model, "best_iteration": result.best_iteration}
    save_checkpoint(gen, os.path.join(out, "checkpoint"), run.seed, cfg.config_hash(), data.norm, meta)
    final = build_generator(spec, seed=run.seed)
    final.load_state_dict(result.final_state)
    save_checkpoint(final, os.path.join(out, "final"), run.seed, cfg.config_hash(), data.norm, meta)
    if disc is not None:
        save_checkpoint(disc, os.path.join(out, "critic"), run.seed + 1, cfg.config_hash())
    write_loss_csv(result.reports, os.path.join(out, "losses.csv"))
    print(f"{run.model}: {cfg.iterations} iterations in {elapsed:.1f} s; "
          f"best val L1 {result.best_val:.6g} at iteration {result.best_iteration}")
    print(f"wrote {out}")


def _interpolate(coarse, positions):
    """Bilinear Interpolator baseline on floor/cap-preprocessed coarse precip."""
    steps = coarse.timesteps
    train, val, _ = temporal_split_indices(steps, SplitScheme())
    fit = np.sort(np.concatenate([train, val]))
    pre, _ = preprocess_precip(coarse.fields[Variable.PRECIP], NormalizationSpec(), fit=fit)
    cy, cx = coarse.shape
    up = bilinear_resample(pre[positions], 4 * cy, 4 * cx)
    return apply_floor(up, 0.05)


def cmd_downscale(args, run):
    root = run.paths["data"]
    cpath = os.path.join(root, "coarse")
    if not os.path.isfile(os.path.join(cpath, MANIFEST)):
        raise IoFailure(f"{root}: no coarse/{MANIFEST}")
    coarse = load_grid_stack(cpath)
    positions = _select_steps(coarse.timesteps, args.steps)
    t0 = time.perf_counter()
    if run.model == "interpolator":
        fine = _interpolate(coarse, positions)
    else:
        gen = load_checkpoint(run.paths["checkpoint"])
        norm = load_norm(os.path.join(run.paths["checkpoint"], "norm"))
        inputs, _ = prepare_inputs(coarse.subset(positions), gen.spec.variables, norm)
        topo = None
        if gen.spec.uses_topo:
            fpath = os.path.join(root, "fine")
            if not os.path.isfile(os.path.join(fpath, MANIFEST)):
                raise IoFailure(f"{root}: topography needs fine/{MANIFEST}")
            fstack = load_grid_stack(fpath)
            if Variable.TOPO not in fstack.static:
                raise IoFailure(f"{fpath}: no topo field")
            topo = normalize_array(fstack.static[Variable.TOPO], Variable.TOPO, norm)[None, None]
        fine = generate_batch(gen, inputs, topo, norm)
    elapsed = max(time.perf_counter() - t0, 1e-9)
    out = GridStack(Resolution.FINE, coarse.timesteps[positions], {Variable.PRECIP: fine})
    save_grid_stack(out, run.paths["out"])
    log.info("%.3g fine cells/s", fine.size / elapsed)
    print(f"downscaled {len(positions)} steps {coarse.shape} -> {fine.shape[1:]} "
          f"({fine.size / elapsed:.3g} cells/s); wrote {run.paths['out']}")


def _parse_candidates(items):
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise InvalidConfig(f"candidate must be NAME=DIR, got {item!r}")
        out[name] = path
    return out


def cmd_evaluate(args, run):
    truth_stack = load_grid_stack(run.paths["truth"])
    positions = _select_steps(truth_stack.timesteps, args.steps)
    steps = truth_stack.timesteps[positions]
    truth = apply_floor(truth_stack.fields[Variable.PRECIP][positions], 0.05)
    candidates = {}
    for name, path in _parse_candidates(args.candidates).items():
        if args.model and name != args.model:
            continue
        stack = load_grid_stack(path)
        where = {int(s): i for i, s in enumerate(stack.timesteps)}
        missing = [int(s) for s in steps if int(s) not in where]
        if missing:
            raise TimeMisalignment(f"{name}: missing {len(missing)} truth steps (first {missing[0]})")
        # same drizzle floor as the truth so identical stacks score exactly
        cand = apply_floor(stack.fields[Variable.PRECIP][[where[int(s)] for s in steps]], 0.05)
        if cand.shape != truth.shape:
            raise TimeMisalignment(f"{name}: grid {cand.shape[1:]} does not match truth {truth.shape[1:]}")
        candidates[name] = cand
    if not candidates:
        raise InvalidConfig("no candidates to evaluate")
    masks = load_region_masks(run.paths["regions"]) if run.paths.get("regions") else nca_regions(*truth.shape[1:])
    report = evaluate(truth, candidates, masks, use_eq3=args.eq3)
    out = run.paths["out"]
    try:
        os.makedirs(os.path.join(out, "maps"), exist_ok=True)
        write_report_csv(report, os.path.join(out, "metrics.csv"))
        for name, maps in report.maps.items():
            for kind, values in maps.items():
                # shared scale per statistic so maps are comparable
                hi = max(float(m[kind].max()) for m in report.maps.values())
                write_pgm(values, os.path.join(out, "maps", f"{name}_{kind}.pgm"), 0.0, hi)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    conus = [r for r in report.rows if r[0] == "CONUS"]
    for region, model, metric, value in conus:
        print(f"{region:6s} {model:16s} {metric:12s} {value:.6g}")
    print(f"{len(report.rows)} rows; wrote {out}")


def cmd_track(args, run):
    stack = load_grid_stack(run.paths["data"])
    if Variable.PRECIP not in stack.fields:
        raise IoFailure(f"{run.paths['data']}: no precip field")
    positions = _select_steps(stack.timesteps, args.steps)
    precip = stack.fields[Variable.PRECIP][positions]
    events = track(precip, run.tracker)
    tables = event_histograms(events)
    out = run.paths["out"]
    try:
        os.makedirs(out, exist_ok=True)
        write_events_csv(events, os.path.join(out, "events.csv"), stack.timesteps[positions])
        write_histograms_csv(tables, os.path.join(out, "histograms.csv"))
    except OSError as exc:
        raise IoFailure(f"cannot write events to {out}: {exc}") from exc
    label = f"{run.model}: " if run.model else ""
    print(f"{label}{len(events)} events over {len(positions)} steps; wrote {out}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "downscale": cmd_downscale,
    "evaluate": cmd_evaluate,
    "track": cmd_track,
}


def _threads():
    raw = os.environ.get("RAINSCALE_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"RAINSCALE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidConfig(f"RAINSCALE_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        run = _run_config(args)
        with threadpool_limits(limits=_threads()):
            COMMANDS[args.command](args, run)
    except RainscaleError as exc:
        print(f"rainscale: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"rainscale: I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
