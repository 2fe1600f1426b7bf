"""Command-line front end: ``python -m activechannel <command> ...``.

Exit codes
----------
0  success
2  bad flags or invalid configuration
3  I/O or dataset ingestion failure
4  numerical failure during a run (the partial trace is still written)
5  malformed trace given to ``report``
"""
import argparse
import csv
import json
import logging
import os
import sys
import time
from importlib import resources

import numpy as np

from . import dkl, imaging, synthetic
from .active import (LOOP_BACKENDS, ChannelDataset, DklPredictor, LoopConfig, normalize_channels,
                     run_active_learning, static_channel_benchmark)
from .container import read_manifest
from .errors import IngestionError, InvalidConfigError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_TRACE = 0, 2, 3, 4, 5

# Keys a run config may carry besides the loop settings.
EXPERIMENT_KEYS = {
    "scalarizer": None,      # image datasets: which scalarizer defines the target
    "patch_size": 3,         # image datasets: patch edge length
    "fractions": None,       # bench defaults
    "trials": None,
    "backends": None,
    "embed_channel": 0,
}


# -- config ---------------------------------------------------------------

def _presets_dir():
    return resources.files("activechannel").joinpath("presets")


def preset_names():
    return sorted(p.name[:-5] for p in _presets_dir().iterdir()
                  if p.name.endswith(".json"))


def _strict_pairs(pairs):
    keys = [k for k, _ in pairs]
    dup = {k for k in keys if keys.count(k) > 1}
    if dup:
        raise InvalidConfigError(f"duplicate config keys: {', '.join(sorted(dup))}")
    return dict(pairs)


def load_config(spec):
    """Parse a JSON run config from a file path or a shipped preset name.

    Returns ``(LoopConfig, experiment dict)``. Unknown keys abort.
    """
    if os.path.isfile(spec):
        with open(spec, encoding="utf-8") as f:
            text = f.read()
    elif spec in preset_names():
        text = _presets_dir().joinpath(f"{spec}.json").read_text("utf-8")
    else:
        raise InvalidConfigError(f"config {spec!r} is neither a file nor a preset ({', '.join(preset_names())})")
    try:
        raw = json.loads(text, object_pairs_hook=_strict_pairs,
                         parse_constant=lambda c: (_ for _ in ()).throw(InvalidConfigError(f"{c} not allowed")))
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfigError("config must be a JSON object")
    raw.pop("description", None)
    exp = {k: raw.pop(k, v) for k, v in EXPERIMENT_KEYS.items()}
    return LoopConfig.from_dict(raw), exp


def _override(config, **kw):
    d = config.to_dict()
    d.update({k: v for k, v in kw.items() if v is not None})
    return LoopConfig.from_dict(d)


def _override_exp(exp, args):
    exp = dict(exp)
    for key in ("scalarizer", "patch_size"):
        if getattr(args, key, None) is not None:
            exp[key] = getattr(args, key)
    return exp


# -- datasets -------------------------------------------------------------

def load_any(path):
    """``(kind, payload)`` for a toy or image container."""
    kind = read_manifest(path).get("kind")
    if kind == "toy":
        return kind, synthetic.load_toy(path)
    if kind == "image":
        return kind, imaging.load_dataset(path)
    raise IngestionError(f"unsupported dataset kind {kind!r}", field="kind")


def channel_dataset(kind, payload, exp):
    """A :class:`ChannelDataset` for the loop, plus the image patch stack."""
    if kind == "toy":
        return ChannelDataset.from_targets(payload.channels, payload.targets,
                                           correct_channel=payload.correct_channel), None
    image, spectra, manifest = payload
    scal = exp.get("scalarizer")
    if scal is None:
        raise InvalidConfigError("image datasets need a 'scalarizer' in the config")
    ds, stack = imaging.structure_property_dataset(image, spectra, scal, int(exp.get("patch_size") or 3))
    signal = imaging.SCALARIZERS[scal][0]
    informative = manifest.get("informative") or {}
    if signal in informative:
        ds.correct_channel = int(informative[signal])
    return ds, stack


# -- commands ---------------------------------------------------------------

def cmd_generate(args):
    if args.kind == "toy":
        ds = synthetic.generate_toy(args.n, args.d, args.noise_std, args.shift_range, rng=args.seed)
        synthetic.save_toy(args.out, ds)
        print(f"generated toy: n={args.n} d={args.d} channels=2 seed={args.seed} -> {args.out}")
    else:
        image, spectra, extra = imaging.generate_synthetic_image(
            args.height, args.width, args.channels, v=args.v, rng=args.seed)
        imaging.save_dataset(args.out, image, spectra, extra)
        print(f"generated synth-image: m={args.height} n={args.width} channels={args.channels} "
              f"v={args.v} informative={json.dumps(extra['informative'], sort_keys=True)} "
              f"seed={args.seed} -> {args.out}")
    return EXIT_OK


def _rewards_table(trace):
    avg = trace.rewards.average
    lines = [f"{'channel':<12} {'n':>4} {'R_a':>8}"]
    for i, name in enumerate(trace.channel_names):
        lines.append(f"{name:<12} {int(trace.rewards.counts[i]):>4} {avg[i]:>8.3f}")
    return "\n".join(lines)


def _trace_paths(out):
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, "trace.json"), os.path.join(out, "trace.csv")


def cmd_run(args):
    config, exp = load_config(args.config)
    config = _override(config, seed=args.seed, workers=args.workers, backend=args.backend)
    exp = _override_exp(exp, args)
    kind, payload = load_any(args.data)
    ds, _ = channel_dataset(kind, payload, exp)
    json_path, csv_path = _trace_paths(args.out)
    try:
        trace = run_active_learning(ds, config)
    except NumericError as exc:
        trace = getattr(exc, "trace", None)
        if trace is not None:
            trace.save(json_path, csv_path)
        raise
    trace.save(json_path, csv_path)
    print(_rewards_table(trace))
    print(f"status={trace.status} steps={len(trace.records)} -> {json_path}")
    return EXIT_OK


def _parse_list(text, cast):
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InvalidConfigError(f"cannot parse list {text!r}") from exc


def cmd_bench(args):
    config, exp = load_config(args.config)
    config = _override(config, seed=args.seed, workers=args.workers)
    exp = _override_exp(exp, args)
    fractions = _parse_list(args.fractions, float) if args.fractions else exp["fractions"]
    trials = args.trials if args.trials is not None else exp["trials"]
    backends = _parse_list(args.backends, str) if args.backends else (exp["backends"] or [config.backend])
    if not fractions or not trials:
        raise InvalidConfigError("bench needs fractions and trials (flags or config)")
    bad = [b for b in backends if b not in LOOP_BACKENDS]
    if bad:
        raise InvalidConfigError(f"unknown backend(s) {bad}; expected {LOOP_BACKENDS}")
    kind, payload = load_any(args.data)
    ds, _ = channel_dataset(kind, payload, exp)
    if ds.correct_channel is None:
        raise InvalidConfigError("dataset has no correct-channel label")
    rows = []
    for backend in backends:
        cfg = _override(config, backend=backend)
        for frac in fractions:
            t0 = time.perf_counter()
            res = static_channel_benchmark(ds, cfg, [frac], int(trials))[0]
            rows.append([backend, frac, res["accuracy"], res["trials"], round(time.perf_counter() - t0, 3)])
            print(f"{backend:<9} fraction={frac:<6} accuracy={res['accuracy']:.3f}")
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["backend", "fraction", "accuracy", "trials", "wall_time"])
        w.writerows(rows)
    return EXIT_OK


def cmd_embed(args):
    if args.model is None and args.config is None:
        raise InvalidConfigError("embed needs --model or --config")
    kind, payload = load_any(args.data)
    exp = dict(EXPERIMENT_KEYS)
    config = None
    if args.config is not None:
        config, exp = load_config(args.config)
        config = _override(config, seed=args.seed)
    exp = _override_exp(exp, args)
    ds, _ = channel_dataset(kind, payload, exp)
    channel = args.channel if args.channel is not None else int(exp.get("embed_channel") or 0)
    if not 0 <= channel < ds.n_channels:
        raise InvalidConfigError(f"channel {channel} out of range")
    X = normalize_channels(ds.channels, config.input_norm if config else "standardize")[channel]
    y = np.array([ds.oracle(i) for i in range(ds.n_rows)])
    if args.model is not None:
        model = dkl.load_model(args.model)
    else:
        model = DklPredictor(config).fit(channel, X, y, config.seed)
    if args.save_model:
        dkl.save_model(args.save_model, model)
    z = dkl.embed(model, X).z
    header = ["index"] + [f"z{i + 1}" for i in range(z.shape[1])]
    cols = [np.arange(ds.n_rows), *z.T]
    if kind == "toy":
        lat = payload.latents
        header += ["mu", "sigma", "A", "y"]
        cols += [lat.mu, lat.sigma, lat.amplitude, payload.targets]
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in range(ds.n_rows):
            w.writerow([int(cols[0][r])] + [repr(float(c[r])) for c in cols[1:]])
    print(f"embedded {ds.n_rows} rows of channel {channel} into {z.shape[1]} dims -> {args.out}")
    return EXIT_OK


class TraceFormatError(Exception):
    def __init__(self, field):
        super().__init__(f"malformed trace: field {field!r}")
        self.field = field


def _need(d, key, kind, where=""):
    if not isinstance(d, dict) or key not in d or not isinstance(d[key], kind):
        raise TraceFormatError(where + key)
    return d[key]


def validate_trace(d):
    """Check the structure ``report`` relies on; raise naming the first bad field."""
    names = _need(d, "channel_names", list)
    n_ch = len(names)
    _need(d, "status", str)
    records = _need(d, "records", list)
    fr = _need(d, "final_rewards", dict)
    for key in ("cumulative", "counts", "average"):
        v = _need(fr, key, list, "final_rewards.")
        if len(v) != n_ch:
            raise TraceFormatError(f"final_rewards.{key}")
    for i, r in enumerate(records):
        at = f"records[{i}]."
        _need(r, "step", int, at)
        if _need(r, "phase", str, at) not in ("warmup", "explore"):
            raise TraceFormatError(at + "phase")
        vm = _need(r, "vm", list, at)
        deltas = _need(r, "reward_deltas", list, at)
        if len(vm) != n_ch or len(deltas) != n_ch:
            raise TraceFormatError(at + ("vm" if len(vm) != n_ch else "reward_deltas"))
        ch = _need(r, "chosen_channel", int, at)
        if not 0 <= ch < n_ch:
            raise TraceFormatError(at + "chosen_channel")
        _need(r, "point", int, at)
        if "epsilon" not in r:
            raise TraceFormatError(at + "epsilon")
    return d


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_report(args):
    try:
        with open(args.trace, encoding="utf-8") as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise TraceFormatError("<json>") from exc
    validate_trace(d)
    names = d["channel_names"]
    os.makedirs(args.out, exist_ok=True)
    fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
    unc = [[r["step"], r["phase"], names[c], fmt(r["vm"][c])]
           for r in d["records"] for c in range(len(names)) if r["vm"][c] is not None]
    _write_csv(os.path.join(args.out, "uncertainty.csv"), ["step", "phase", "channel", "V_m"], unc)
    explore = [[r["step"], names[r["chosen_channel"]], fmt(r["vm"][r["chosen_channel"]]),
                r["reward_deltas"][r["chosen_channel"]], fmt(r["epsilon"])]
               for r in d["records"] if r["phase"] == "explore"]
    _write_csv(os.path.join(args.out, "explore.csv"), ["step", "channel", "V_m", "reward", "epsilon"], explore)
    warm = [[r["step"], names[r["chosen_channel"]]] + [fmt(v) for v in r["vm"]]
            for r in d["records"] if r["phase"] == "warmup"]
    _write_csv(os.path.join(args.out, "warmup.csv"), ["step", "winner"] + [f"V_m_{n}" for n in names], warm)
    fr = d["final_rewards"]
    rew = [[n, int(fr["counts"][i]), repr(float(fr["cumulative"][i])), repr(float(fr["average"][i]))]
           for i, n in enumerate(names)]
    _write_csv(os.path.join(args.out, "rewards.csv"), ["channel", "n_sampled", "cumulative", "R_a"], rew)
    print(f"wrote uncertainty.csv, explore.csv, warmup.csv, rewards.csv -> {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="activechannel", description="Active channel learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a toy or synthetic image dataset")
    g.add_argument("--kind", choices=("toy", "synth-image"), default="toy")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=1000, help="toy: number of curves")
    g.add_argument("--d", type=int, default=64, help="toy: grid length")
    g.add_argument("--noise-std", type=float, default=synthetic.DEFAULT_NOISE)
    g.add_argument("--shift-range", type=float, default=0.1)
    g.add_argument("--height", type=int, default=32, help="synth-image: rows")
    g.add_argument("--width", type=int, default=32, help="synth-image: columns")
    g.add_argument("--channels", type=int, default=4)
    g.add_argument("--v", type=int, default=64, help="synth-image: voltage points")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the active channel loop")
    r.add_argument("--config", required=True, help="JSON file or preset name")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True, help="output directory for trace.json/trace.csv")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--backend", choices=LOOP_BACKENDS)
    r.add_argument("--scalarizer", help="image datasets: override the config's scalarizer")
    r.add_argument("--patch-size", type=int, help="image datasets: override the config's patch size")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="static channel-identification accuracy")
    b.add_argument("--config", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True, help="CSV path")
    b.add_argument("--fractions", help="comma-separated training fractions")
    b.add_argument("--trials", type=int)
    b.add_argument("--backends", help="comma-separated subset of " + ",".join(LOOP_BACKENDS))
    b.add_argument("--seed", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--scalarizer")
    b.add_argument("--patch-size", type=int)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("embed", help="export latent coordinates as CSV")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--model", help="saved model directory (skips training)")
    e.add_argument("--save-model")
    e.add_argument("--channel", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--scalarizer")
    e.add_argument("--patch-size", type=int)
    e.set_defaults(func=cmd_embed)

    rp = sub.add_parser("report", help="turn a trace into plot-ready CSV series")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--out", required=True, help="output directory")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TraceFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRACE
