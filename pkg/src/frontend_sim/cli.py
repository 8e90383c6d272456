"""Command-line entry point ``frontend-sim``.

Subcommands::

    enc-sweep   ENC decomposition over (tp, C, I[, W, Id]) grids
    scan        threshold / noise-occupancy / time-walk scans with fits
    registers   dump a chip config as register writes, or load writes into one
    rerun       repeat a run from its manifest.json
    presets     list bundled presets

Exit status: 0 success, 2 configuration or usage error, 3 runtime error.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import characterization as chz
from . import io as fio
from .channel_sim import ChannelSimulator, ChipConfig
from .noise_model import InputTransistor, ProcessParams, enc_grid

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUT_ENV = "FRONTEND_SIM_OUT"


def tool_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def preset_names():
    files = resources.files("frontend_sim").joinpath("presets").iterdir()
    names = [f.name[:-5] for f in files if f.name.endswith(".json")]
    return sorted(names, key=lambda n: (len(n), n))


def load_preset(name):
    path = resources.files("frontend_sim").joinpath("presets", f"{name}.json")
    if not path.is_file():
        raise fio.ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return fio.loads_json(path.read_text(), f"preset:{name}")


def _axis(spec, where):
    """A grid axis: a list of numbers or ``{start, stop, num}`` (inclusive)."""
    if isinstance(spec, (int, float)):
        return np.array([float(spec)])
    if isinstance(spec, list):
        vals = np.array(spec, dtype=float)
    elif isinstance(spec, dict):
        try:
            vals = np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise fio.ConfigError(f"{where}: expected {{start, stop, num}}: {exc}") from exc
    else:
        raise fio.ConfigError(f"{where}: expected a list or {{start, stop, num}}")
    if vals.size == 0:
        raise fio.ConfigError(f"{where}: empty grid")
    return np.round(vals, 12)


def digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class Run:
    """Output directory bookkeeping; every written file lands in the manifest."""

    def __init__(self, out, fmt):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.fmt = fmt
        self.outputs = []

    def path(self, name):
        self.outputs.append(name)
        return self.out / name

    def table(self, stem, rows, columns):
        if self.fmt == "json":
            fio.dump_json([{c: r[c] for c in columns} for r in rows], self.path(f"{stem}.json"))
        else:
            fio.rows_to_csv(rows, columns, self.path(f"{stem}.csv"))

    def curve(self, stem, curve):
        if self.fmt == "json":
            fio.dump_json({"kind": curve.kind, "x": curve.x, "y": curve.y, "y_err": curve.y_err,
                           "count": curve.counts, "exposure": curve.exposure},
                          self.path(f"{stem}.json"))
        else:
            fio.write_scan_curve(curve, self.path(f"{stem}.csv"))

    def json(self, name, obj):
        fio.dump_json(obj, self.path(name))

    def manifest(self, command, inputs, seed):
        man = {"command": command, "config_digest": digest(inputs), "seed": seed,
               "tool_version": tool_version(), "format": self.fmt,
               "outputs": sorted(self.outputs), "inputs": inputs}
        fio.dump_json(man, self.out / "manifest.json")
        return man


# --- enc-sweep ----------------------------------------------------------------

def _transistor(cfg):
    proc = cfg.get("process", {})
    tr = cfg.get("transistor", {})
    try:
        return InputTransistor(**tr, process=ProcessParams(**proc))
    except (TypeError, ValueError) as exc:
        raise fio.ConfigError(f"transistor/process: {exc}") from exc


def run_enc_sweep(cfg, run, jobs=1):
    sweep = cfg.get("sweep")
    if not isinstance(sweep, dict):
        raise fio.ConfigError("sweep: missing grid specification")
    unknown = set(sweep) - {"tp_ns", "c_pf", "i_ua", "width_um", "drain_current_ma"}
    if unknown:
        raise fio.ConfigError(f"sweep: unknown axis {', '.join(sorted(unknown))}")
    for key in ("tp_ns", "c_pf", "i_ua"):
        if key not in sweep:
            raise fio.ConfigError(f"sweep.{key}: missing")
    tp = _axis(sweep["tp_ns"], "sweep.tp_ns")
    if np.any(tp <= 0) or np.any(np.diff(tp) <= 0):
        raise fio.ConfigError("sweep.tp_ns: must be positive and increasing")
    c = _axis(sweep["c_pf"], "sweep.c_pf")
    i = _axis(sweep["i_ua"], "sweep.i_ua")
    order = cfg.get("order", 3)
    base = _transistor(cfg)
    widths = _axis(sweep.get("width_um", base.width), "sweep.width_um")
    currents = _axis(sweep.get("drain_current_ma", base.drain_current), "sweep.drain_current_ma")
    try:
        devices = [replace(base, width=float(w), drain_current=float(d))
                   for w in widths for d in currents]
    except ValueError as exc:
        raise fio.ConfigError(f"sweep: {exc}") from exc

    rows = [r for res in chz._map(lambda tr: enc_grid(tp, c, i, tr, order), devices, jobs)
            for r in res]
    columns = ["tp_ns", "c_pf", "i_ua", "enc_p", "enc_s", "enc_tot", "w_um", "id_ma"]
    run.table("enc_grid", rows, columns)

    slices = {}
    for r in rows:
        slices.setdefault((r["w_um"], r["id_ma"], r["c_pf"], r["i_ua"]), []).append(r)
    summary = []
    for (w, d, cc, ii), rs in slices.items():
        best = min(rs, key=lambda r: (r["enc_tot"], r["tp_ns"]))
        summary.append({"w_um": w, "id_ma": d, "c_pf": cc, "i_ua": ii, "tp_opt_ns": best["tp_ns"],
                        "enc_tot_min": best["enc_tot"], "enc_p": best["enc_p"],
                        "enc_s": best["enc_s"]})
    run.json("summary.json", {"order": order, "slices": summary})
    return summary


# --- scan -----------------------------------------------------------------------

def _thresholds(spec, center, where):
    rel = isinstance(spec, dict) and spec.get("relative", False)
    if isinstance(spec, dict):
        spec = {k: v for k, v in spec.items() if k != "relative"}
    vals = _axis(spec, where)
    return np.round(vals + center, 9) if rel else vals


def run_scan(cfg, run, seed=None, jobs=1):
    chip = fio.chip_from_dict(cfg.get("chip", {}), "chip")
    if seed is not None:
        chip = replace(chip, rng_seed=seed)
    scans = cfg.get("scans")
    if not isinstance(scans, list) or not scans:
        raise fio.ConfigError("scans: expected a non-empty list")
    default_ch = cfg.get("channel", 0)
    reports = []
    for n, scan in enumerate(scans):
        where = f"scans[{n}]"
        if not isinstance(scan, dict) or "type" not in scan:
            raise fio.ConfigError(f"{where}: missing 'type'")
        ch = scan.get("channel", default_ch)
        try:
            sim = ChannelSimulator(chip, ch)
        except (TypeError, ValueError) as exc:
            raise fio.ConfigError(f"{where}.channel: {exc}") from exc
        tag = f"ch{ch}"
        kind = scan["type"]
        if kind == "threshold":
            reports.append(_threshold_scans(sim, scan, run, tag, where, jobs))
        elif kind == "noise":
            reports.append(_noise_scan(sim, scan, run, tag, where, jobs))
        elif kind == "time_walk":
            reports.append(_walk_scan(sim, scan, run, tag, where, jobs))
        else:
            raise fio.ConfigError(f"{where}.type: unknown scan type {kind!r}")
    run.json("fits.json", reports)
    return chip, reports


def _req(scan, key, where):
    if key not in scan:
        raise fio.ConfigError(f"{where}.{key}: missing")
    return scan[key]


def _threshold_scans(sim, scan, run, tag, where, jobs):
    charges = _axis(_req(scan, "charges", where), f"{where}.charges")
    n_inj = int(scan.get("n_inj", 10000))
    fits = []
    per_charge = []
    hits = []
    for q in charges:
        v = _thresholds(_req(scan, "thresholds", where), sim.gain * q, f"{where}.thresholds")
        curve = chz.run_threshold_scan(sim, q, v, n_inj, jobs=jobs, keep_hits=scan.get("hits", False))
        hits += curve.meta.get("hits", [])
        run.curve(f"scurve_{tag}_q{q:g}fC", curve)
        fit = chz.fit_scurve(curve)
        fits.append((q, fit))
        per_charge.append({"q_fc": q, **chz.fit_report("scurve", fit, curve)})
    report = {"type": "threshold", "channel": sim.channel, "rc_code": sim.config.rc_code,
              "peaking_time": sim.peaking_time, "scurves": per_charge}
    if len(fits) >= 2:
        gain, offset = chz.extract_gain(fits)
        sigma = float(np.mean([f.sigma for _, f in fits]))
        report["gain"] = {"gain_mv_per_fc": gain, "offset_mv": offset, "sigma_mv": sigma,
                          "enc_e": chz.enc_from_noise(sigma, gain)}
    if hits:
        fio.write_hits(hits, run.path(f"hits_{tag}_threshold.csv"))
    return report


def _noise_scan(sim, scan, run, tag, where, jobs):
    v = _thresholds(_req(scan, "thresholds", where), 0.0, f"{where}.thresholds")
    duration = float(scan.get("duration_ns", 1e5 * sim.peaking_time))
    curve = chz.run_noise_occupancy(sim, v, duration, jobs=jobs)
    run.curve(f"noise_occupancy_{tag}", curve)
    fit = chz.fit_rice(curve, order=sim.shape.order)
    rep = chz.fit_report("rice", fit, curve)
    rep.update({"type": "noise", "channel": sim.channel, "peaking_time_config": sim.peaking_time,
                "enc_e": chz.enc_from_noise(fit.sigma, sim.gain)})
    return rep


def _walk_scan(sim, scan, run, tag, where, jobs):
    charges = _axis(_req(scan, "charges", where), f"{where}.charges")
    thr = float(_req(scan, "threshold_fc", where))
    n_inj = int(scan.get("n_inj", 1000))
    try:
        res = chz.measure_time_walk(sim, charges, thr, n_inj, jobs=jobs)
    except ValueError as exc:
        raise fio.ConfigError(f"{where}: {exc}") from exc
    rows = [{"q_fc": q, "delay_ns": d, "delay_err": e, "tot_ns": t, "tot_err": te}
            for q, d, e, t, te in zip(res.curve.x, res.curve.y, res.curve.y_err, res.tot,
                                      res.tot_err)]
    run.table(f"time_walk_{tag}", rows, ["q_fc", "delay_ns", "delay_err", "tot_ns", "tot_err"])
    if scan.get("hits", False):
        v_th = sim.gain * thr
        hits = []
        for i, q in enumerate(res.curve.x):
            r = sim.simulate_injections(q, n_inj, v_th, key=(chz._KIND_ID["time_walk"],
                                                              chz._qkey(q), i))
            hits += r.hits
        fio.write_hits(hits, run.path(f"hits_{tag}_time_walk.csv"))
    ideal = chz.ideal_time_walk(sim.shape, charges, thr)
    return {"type": "time_walk", "channel": sim.channel, "threshold_fc": thr,
            "walk_ns": res.walk, "ideal_walk_ns": ideal,
            "inputs_digest": res.curve.digest()}


# --- registers --------------------------------------------------------------------

def run_registers(args):
    base = ChipConfig()
    if args.config:
        base = fio.load_chip(args.config)
    if args.action == "dump":
        text = fio.dump_registers(base)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    else:
        try:
            text = Path(args.regfile).read_text()
        except OSError as exc:
            raise fio.ConfigError(f"{args.regfile}: {exc.strerror}") from exc
        chip = fio.load_registers(text, base)
        out = fio.dump_json(fio.chip_to_dict(chip), args.out)
        if not args.out:
            sys.stdout.write(out)
    return EXIT_OK


# --- driver -----------------------------------------------------------------------

def _resolve(args):
    if args.preset and args.config:
        raise fio.ConfigError("use either --preset or --config, not both")
    if args.preset:
        return load_preset(args.preset)
    if args.config:
        return fio.load_json(args.config)
    raise fio.ConfigError("one of --preset or --config is required")


def execute(cfg, out, fmt="csv", seed=None, jobs=1):
    """Run a resolved configuration; returns the manifest dict."""
    command = cfg.get("command")
    run = Run(out, fmt)
    if command == "enc-sweep":
        run_enc_sweep(cfg, run, jobs)
    elif command == "scan":
        chip, _ = run_scan(cfg, run, seed, jobs)
        seed = chip.rng_seed
    else:
        raise fio.ConfigError(f"command: unknown or missing ({command!r})")
    inputs = dict(cfg)
    return run.manifest(command, inputs, seed)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run or chip configuration (JSON)")
    common.add_argument("--preset", metavar="NAME", help="bundled preset, e.g. fig3 or fig9")
    common.add_argument("--seed", type=int, help="override the chip RNG seed")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--jobs", type=int, default=1, help="worker threads; never changes results")

    p = argparse.ArgumentParser(prog="frontend-sim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("enc-sweep", parents=[common], help="ENC grids over tp, C, I")
    sub.add_parser("scan", parents=[common], help="simulated bench scans and fits")
    r = sub.add_parser("registers", parents=[common], help="register map dump/load")
    r.add_argument("action", choices=("dump", "load"))
    r.add_argument("regfile", nargs="?", help="register file for 'load'")
    rr = sub.add_parser("rerun", parents=[common], help="repeat a run from its manifest")
    rr.add_argument("manifest")
    sub.add_parser("presets", help="list bundled presets")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.cmd == "presets":
            for name in preset_names():
                print(f"{name:6s} {load_preset(name).get('description', '')}")
            return EXIT_OK
        if args.cmd == "registers":
            if args.action == "load" and not args.regfile:
                raise fio.ConfigError("registers load: missing register file")
            return run_registers(args)
        out = args.out or os.environ.get(OUT_ENV, ".")
        if args.cmd == "rerun":
            man = fio.load_json(args.manifest)
            if "inputs" not in man:
                raise fio.ConfigError(f"{args.manifest}: not a manifest")
            seed = man.get("seed") if args.seed is None else args.seed
            execute(man["inputs"], out, man.get("format", args.format), seed, args.jobs)
            return EXIT_OK
        cfg = _resolve(args)
        expected = {"enc-sweep": "enc-sweep", "scan": "scan"}[args.cmd]
        if cfg.get("command", expected) != expected:
            raise fio.ConfigError(f"configuration is for '{cfg.get('command')}', not '{args.cmd}'")
        cfg = {**cfg, "command": expected}
        execute(cfg, out, args.format, args.seed, args.jobs)
        return EXIT_OK
    except fio.ConfigError as exc:
        print(f"frontend-sim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (chz.FitError, ValueError, RuntimeError, OSError) as exc:
        print(f"frontend-sim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
