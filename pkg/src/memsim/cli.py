"""``memsim`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import crossbar as xb
from . import dpe
from .config import ConfigError, engine_from, load_file, resolve
from .numerics import read_csv, stream, write_csv

SUBCOMMANDS = ("xbar", "matmul", "mc", "solve", "cwt", "kmeans", "train", "infer")


class Outputs:
    """Writes files inside one directory and remembers their checksums."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        self.files: dict[str, str] = {}

    def path(self, name: str) -> str:
        p = os.path.abspath(os.path.join(self.root, name))
        if os.path.commonpath([p, self.root]) != self.root:
            raise ValueError(f"output {name!r} escapes the output directory")
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def _record(self, name: str):
        with open(self.path(name), "rb") as fh:
            self.files[name] = hashlib.sha256(fh.read()).hexdigest()

    def matrix(self, name, data, header=None):
        write_csv(self.path(name), data, header)
        self._record(name)

    def table(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        self._record(name)

    def json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        self._record(name)

    def adopt(self, name):
        """Record a file some other writer already put under the root."""
        self._record(name)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# -- subcommands ------------------------------------------------------------

def run_xbar(doc, out: Outputs):
    sec = doc["xbar"]
    eng = engine_from(doc)
    xcfg, dev = eng.crossbar, eng.device
    g = stream(doc["seed"], "signal", 2).uniform(dev.lgs, dev.hgs, (xcfg.rows, xcfg.cols))
    v = stream(doc["seed"], "signal", 3).uniform(0, xcfg.v_read, (sec["batch"], xcfg.rows))
    report = {"mode": sec["mode"], "rows": xcfg.rows, "cols": xcfg.cols, "r_wire": xcfg.r_wire}
    if sec["mode"] == "ideal" or xcfg.r_wire == 0:
        cur = xb.solve_ideal(v, g)
        report.update(iterations=0, converged=True)
    elif sec["mode"] == "kcl":
        sols = [xb.solve_kcl(vi, g, xcfg) for vi in v]
        cur = np.stack([r.currents for r in sols])
        out.matrix("wordline_voltages.csv", sols[0].voltages.word_line)
        out.matrix("bitline_voltages.csv", sols[0].voltages.bit_line)
        report.update(iterations=1, converged=True)
    else:
        res = xb.solve_irdrop(v, g, xcfg, sec["tol"], sec["max_iter"])
        cur = res.currents
        # node voltages of the first input vector
        out.matrix("wordline_voltages.csv", res.voltages.word_line[0])
        out.matrix("bitline_voltages.csv", res.voltages.bit_line[0])
        report.update(iterations=res.iterations, converged=res.converged, changes=res.changes)
        if "plot-data" in doc["emit"]:
            out.table("plot_data/convergence.csv", ("iteration", "max_change"),
                      [(i + 1, c) for i, c in enumerate(res.changes)])
    ideal = xb.solve_ideal(v, g)
    report["irdrop_current_loss"] = float(1 - np.sum(cur) / np.sum(ideal))
    out.matrix("currents.csv", cur)
    out.json("report.json", report)
    return report


def _operand(path, shape, seed, which):
    if path:
        return read_csv(path)
    return stream(seed, "operand", which).standard_normal(shape)


def run_matmul(doc, out: Outputs):
    sec = doc["matmul"]
    eng = engine_from(doc)
    a = _operand(sec["a"], (sec["m"], sec["k"]), doc["seed"], 0)
    b = _operand(sec["b"], (sec["k"], sec["n"]), doc["seed"], 1)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    ideal = a @ b
    pw = dpe.program_weights(b, eng, sec["cycle"])
    rep = dpe.matmul(a, pw, eng, ideal=ideal if np.any(ideal) else None)
    out.matrix("result.csv", rep.result)
    report = {"re": rep.relative_error, "iterations": rep.iterations, "converged": rep.converged,
              "cycle": rep.cycle, "n_groups": pw.n_groups, "shape": list(rep.result.shape),
              "config": eng.to_dict()}
    out.json("report.json", report)
    return report


def run_mc(doc, out: Outputs):
    from .montecarlo import monte_carlo, summarize
    sec = doc["mc"]
    eng = engine_from(doc)
    rows = monte_carlo(sec["grid"], sec["cycles"], eng, tuple(sec["size"]))
    summary = summarize(rows)
    out.table("mc.csv", ("cv", "block", "scheme", "path", "cycle", "re"), [r.as_tuple() for r in rows])
    keys = ("cv", "block", "scheme", "path", "n", "median", "q1", "q3")
    out.table("summary.csv", keys, [[s[k] for k in keys] for s in summary])
    if "plot-data" in doc["emit"]:
        out.table("plot_data/re_boxes.csv", keys, [[s[k] for k in keys] for s in summary])
    return {"points": len(summary), "rows": len(rows)}


def run_solve(doc, out: Outputs):
    from .apps.circuit import WordLineCircuit, solve_circuit_hw
    sec = doc["solve"]
    base = engine_from(doc)
    eng = base.replace(crossbar=base.crossbar.replace(rows=sec["block"], cols=sec["block"]),
                       weight_scheme=sec["scheme"], input_scheme=sec["scheme"])
    circ = WordLineCircuit.random(sec["nodes"], doc["seed"], sec["rwire"], sec["g_min"], sec["g_max"],
                                  sec["v_drive"])
    rep = solve_circuit_hw(circ, eng, sec["tol"], sec["max_iter"])
    n = sec["nodes"]
    out.table("voltages.csv", ("node", "hardware", "software", "dense"),
              [(i, float(rep.voltages[i]), float(rep.software_voltages[i]), float(rep.reference[i]))
               for i in range(n)])
    m = max(len(rep.hw_history), len(rep.sw_history))
    pad = lambda h, i: float(h[i]) if i < len(h) else ""
    hist = [(i + 1, pad(rep.hw_history, i), pad(rep.sw_history, i)) for i in range(m)]
    out.table("residuals.csv", ("iteration", "hardware", "software"), hist)
    if "plot-data" in doc["emit"]:
        out.table("plot_data/residuals.csv", ("iteration", "hardware", "software"), hist)
    report = {"hw_converged": rep.hw_converged, "hw_status": rep.hw_status, "sw_converged": rep.sw_converged,
              "hw_iterations": len(rep.hw_history), "sw_iterations": len(rep.sw_history),
              "rms_error": rep.rms_error, "config": eng.to_dict()}
    out.json("report.json", report)
    return report


def run_cwt(doc, out: Outputs):
    from .apps.cwt import (cwt_hw, cwt_reference, load_series, morlet_bank, normalized_correlation,
                           parse_scales, synthetic_chirp)
    sec = doc["cwt"]
    sig = load_series(sec["signal"]) if sec["signal"] else synthetic_chirp(seed=doc["seed"])
    bank = morlet_bank(parse_scales(sec["scales"]), length=sec["length"])
    eng = engine_from(doc, weight_scheme=sec["kernel_scheme"])
    power = cwt_hw(sig, bank, eng, sec["mode"])
    ref = cwt_reference(sig, bank, sec["mode"])
    out.matrix("power.csv", power)
    out.matrix("scales.csv", np.column_stack([bank.scales, bank.frequencies]), ("scale", "frequency"))
    if "plot-data" in doc["emit"]:
        out.matrix("plot_data/signal.csv", sig, ("signal",))
        out.matrix("plot_data/power_reference.csv", ref)
        out.matrix("plot_data/kernels_real.csv", bank.real)
        out.matrix("plot_data/kernels_imag.csv", bank.imag)
    report = {"correlation": normalized_correlation(power, ref), "n_scales": int(bank.scales.size),
              "kernel_length": bank.length, "samples": int(sig.size), "config": eng.to_dict()}
    out.json("report.json", report)
    return report


def run_kmeans(doc, out: Outputs):
    from .apps.kmeans import agreement, kmeans_hw, load_iris, read_points
    sec = doc["kmeans"]
    if sec["input"]:
        x, source = read_points(sec["input"]), sec["input"]
    else:
        x, _, source = load_iris(seed=doc["seed"])
    eng = engine_from(doc)
    kw = dict(max_iter=sec["max_iter"], n_tail=sec["n_tail"], seed=doc["seed"],
              single_center=sec["single_center"])
    hw = kmeans_hw(x, sec["k"], eng, **kw)
    fp = kmeans_hw(x, sec["k"], None, **kw)
    out.table("assignments.csv", ("index", "cluster"), [(i, int(c)) for i, c in enumerate(hw.assignments)])
    out.matrix("centers.csv", hw.scaler.inverse(hw.centers))
    if "plot-data" in doc["emit"]:
        out.table("plot_data/sse.csv", ("iteration", "sse"), [(i + 1, s) for i, s in enumerate(hw.sse_history)])
    report = {"source": os.path.basename(source), "iterations": hw.iterations, "converged": hw.converged,
              "agreement_with_full_precision": agreement(hw.assignments, fp.assignments, sec["k"]),
              "reseeds": hw.reseeds, "config": eng.to_dict()}
    out.json("report.json", report)
    return report


def _mnist(path, split, limit):
    from .nn.data import bundled_mnist_dir, load_mnist
    path = path or bundled_mnist_dir()
    if path is None:
        raise FileNotFoundError("no MNIST directory given and no bundled subset found")
    return load_mnist(path, split, limit)


def _layer_cfgs(doc, path, eng):
    from .nn.checkpoint import read_layer_config
    from .nn.layers import LENET_LAYERS, MemLayerConfig
    if path:
        return read_layer_config(path, eng)
    return {name: MemLayerConfig(eng) for name in LENET_LAYERS}


def run_train(doc, out: Outputs):
    from .nn.checkpoint import save_checkpoint
    from .nn.layers import lenet
    from .nn.train import train
    sec = doc["train"]
    eng = engine_from(doc, threads=1)
    tr = _mnist(sec["data"], "train", sec["n_train"])
    te = _mnist(sec["data"], "test", sec["n_test"])
    model = lenet(_layer_cfgs(doc, sec["layer_config"], eng), seed=doc["seed"])
    log = train(model, tr, te, sec["epochs"], sec["batch_size"], sec["lr"], sec["momentum"], doc["seed"])
    rows = [(e.epoch, e.loss, e.train_acc, e.test_acc) for e in log.epochs]
    out.table("log.csv", ("epoch", "loss", "train_acc", "test_acc"), rows)
    save_checkpoint(model, out.path("checkpoint"), {"seed": doc["seed"]})
    for name in sorted(os.listdir(out.path("checkpoint"))):
        out.adopt(os.path.join("checkpoint", name))
    if "plot-data" in doc["emit"]:
        out.table("plot_data/training_curve.csv", ("epoch", "loss", "train_acc", "test_acc"), rows)
    report = {"halted": log.halted, "reason": log.reason, "final_test_acc": log.final_test_acc,
              "epochs": len(log.epochs), "config": eng.to_dict()}
    out.json("report.json", report)
    return report


def _parse_sweep(text):
    key, _, vals = text.partition("=")
    if key not in ("cv", "slices") or not vals:
        raise ValueError(f"infer.sweep must be cv=a,b,... or slices=a,b,..., got {text!r}")
    conv = float if key == "cv" else int
    return key, [conv(v) for v in vals.split(",")]


def run_infer(doc, out: Outputs):
    from .nn.checkpoint import load_checkpoint
    from .nn.layers import MemLayerConfig, configure, lenet
    from .nn.train import infer
    from .slicing import one_bit_scheme
    sec = doc["infer"]
    if not sec["checkpoint"]:
        raise ValueError("infer.checkpoint: a checkpoint directory is required")
    eng = engine_from(doc, threads=1)
    te = _mnist(sec["data"], "test", sec["n_test"])
    model = lenet(_layer_cfgs(doc, sec["layer_config"], eng), seed=doc["seed"])
    load_checkpoint(model, sec["checkpoint"])
    points = [("base", None)]
    if sec["sweep"]:
        key, vals = _parse_sweep(sec["sweep"])
        points = [(f"{key}={v}", (key, v)) for v in vals]
    results = []
    for label, point in points:
        if point is not None:
            key, v = point
            cfgs = {}
            for name, layer in model.mem_layers():
                c = layer.config
                if c.mode != "hardware":
                    continue
                if key == "cv":
                    cfgs[name] = MemLayerConfig(eng.replace(device=eng.device.replace(cv=v)),
                                                c.input_sli_med, c.weight_sli_med)
                else:
                    sch = one_bit_scheme(v)
                    cfgs[name] = MemLayerConfig(eng, sch, sch)
            configure(model, cfgs)
        model.update_weight(0)
        res = infer(model, te)
        results.append((label, res))
    base_label, base = results[0]
    out.table("predictions.csv", ("index", "label", "prediction"),
              [(i, int(t), int(p)) for i, (t, p) in enumerate(zip(te.y, base.predictions))])
    if len(results) > 1 or "plot-data" in doc["emit"]:
        out.table("sweep.csv", ("point", "accuracy"), [(lab, r.accuracy) for lab, r in results])
    report = {"accuracy": base.accuracy, "per_class": base.per_class,
              "sweep": {lab: r.accuracy for lab, r in results} if sec["sweep"] else None,
              "config": eng.to_dict()}
    out.json("report.json", report)
    return report


RUNNERS = {"xbar": run_xbar, "matmul": run_matmul, "mc": run_mc, "solve": run_solve, "cwt": run_cwt,
           "kmeans": run_kmeans, "train": run_train, "infer": run_infer}


# -- argument parsing --------------------------------------------------------

S = argparse.SUPPRESS

# flag dest -> config path
FLAG_PATHS = {
    "seed": ("seed",), "threads": ("threads",),
    "hgs": ("device", "hgs"), "lgs": ("device", "lgs"), "g_levels": ("device", "g_levels"),
    "cv": ("device", "cv"),
    "rows": ("crossbar", "rows"), "cols": ("crossbar", "cols"), "r_wire": ("crossbar", "r_wire"),
    "v_read": ("crossbar", "v_read"), "rdac": ("crossbar", "rdac"), "radc": ("crossbar", "radc"),
    "adc_range_mode": ("crossbar", "adc_range_mode"),
    "weight_scheme": ("engine", "weight_scheme"), "input_scheme": ("engine", "input_scheme"),
    "noise_mode": ("engine", "noise_mode"),
}

SUB_FLAGS = {
    "xbar": [("--mode", str, "mode"), ("--tol", float, "tol"), ("--max-iter", int, "max_iter"),
             ("--batch", int, "batch")],
    "matmul": [("--m", int, "m"), ("--k", int, "k"), ("--n", int, "n"), ("--cycle", int, "cycle"),
               ("--a", str, "a"), ("--b", str, "b")],
    "mc": [("--cycles", int, "cycles")],
    "solve": [("--nodes", int, "nodes"), ("--rwire", float, "rwire"), ("--g-min", float, "g_min"),
              ("--g-max", float, "g_max"), ("--v-drive", float, "v_drive"), ("--tol", float, "tol"),
              ("--max-iter", int, "max_iter"), ("--block", int, "block"), ("--fp-scheme", str, "scheme")],
    "cwt": [("--signal", str, "signal"), ("--scales", str, "scales"), ("--mode", str, "mode"),
            ("--kernel-scheme", str, "kernel_scheme"), ("--length", int, "length")],
    "kmeans": [("--input", str, "input"), ("--k", int, "k"), ("--max-iter", int, "max_iter"),
               ("--n-tail", int, "n_tail")],
    "train": [("--data", str, "data"), ("--epochs", int, "epochs"), ("--batch-size", int, "batch_size"),
              ("--lr", float, "lr"), ("--momentum", float, "momentum"),
              ("--layer-config", str, "layer_config"), ("--n-train", int, "n_train"),
              ("--n-test", int, "n_test")],
    "infer": [("--data", str, "data"), ("--checkpoint", str, "checkpoint"),
              ("--layer-config", str, "layer_config"), ("--n-test", int, "n_test"), ("--sweep", str, "sweep")],
}


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("run")
    g.add_argument("--config", default=S, help="JSON config file (or a previous run's manifest.json)")
    g.add_argument("--out", default=S, help="output directory (default: memsim-out/<subcommand>)")
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--threads", type=int, default=S, help="worker cap; results do not depend on it")
    g.add_argument("--emit", choices=["plot-data"], action="append", default=S)
    d = p.add_argument_group("hardware (defaults follow the reference device table)")
    d.add_argument("--hgs", type=float, default=S)
    d.add_argument("--lgs", type=float, default=S)
    d.add_argument("--g-levels", type=int, default=S)
    d.add_argument("--cv", type=float, default=S, help="conductance coefficient of variation")
    d.add_argument("--rows", type=int, default=S)
    d.add_argument("--cols", type=int, default=S)
    d.add_argument("--array-size", type=int, default=S, help="square array: sets rows and cols")
    d.add_argument("--r-wire", type=float, default=S)
    d.add_argument("--v-read", type=float, default=S)
    d.add_argument("--rdac", type=int, default=S)
    d.add_argument("--radc", type=int, default=S)
    d.add_argument("--adc-range-mode", choices=["worst_case", "dynamic"], default=S)
    d.add_argument("--scheme", default=S, help="slice scheme for weights and inputs, e.g. int8:1,1,2,4")
    d.add_argument("--weight-scheme", default=S)
    d.add_argument("--input-scheme", default=S)
    d.add_argument("--noise-mode", choices=["ideal", "variation_only", "variation_plus_irdrop"], default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memsim", description="Memristive crossbar computing simulator.")
    parser.add_argument("--version", action="version", version=f"memsim {__version__}")
    subs = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    subs.required = True
    helps = {"xbar": "crossbar DC solve", "matmul": "one matrix product on the engine",
             "mc": "Monte Carlo relative-error sweep", "solve": "word-line circuit via hardware CG",
             "cwt": "Morlet wavelet power spectrum", "kmeans": "k-means with hardware distances",
             "train": "train the desk-scale CNN", "infer": "evaluate a checkpoint on hardware"}
    for name in SUBCOMMANDS:
        sp = subs.add_parser(name, help=helps[name])
        _common(sp)
        for flag, typ, dest in SUB_FLAGS[name]:
            sp.add_argument(flag, type=typ, dest=f"sub_{dest}", default=S)
        if name == "mc":
            sp.add_argument("--grid", action="append", default=S, metavar="KEY=V1,V2",
                            help="grid axis (cv, block, scheme, noise_mode); repeatable")
            sp.add_argument("--size", default=S, metavar="M,K,N")
        if name == "kmeans":
            sp.add_argument("--single-center", action="store_true", dest="sub_single_center", default=S)
    return parser


def _set(doc, path, value):
    for k in path[:-1]:
        doc = doc.setdefault(k, {})
    doc[path[-1]] = value


def flags_to_doc(ns: argparse.Namespace) -> dict:
    args = vars(ns)
    doc: dict = {}
    if "scheme" in args and ({"weight_scheme", "input_scheme"} & set(args)):
        raise ConfigError("--scheme conflicts with --weight-scheme/--input-scheme; give one or the other")
    if "array_size" in args and ({"rows", "cols"} & set(args)):
        raise ConfigError("--array-size conflicts with --rows/--cols")
    for dest, path in FLAG_PATHS.items():
        if dest in args:
            _set(doc, path, args[dest])
    if "scheme" in args:
        _set(doc, ("engine", "weight_scheme"), args["scheme"])
        _set(doc, ("engine", "input_scheme"), args["scheme"])
    if "array_size" in args:
        _set(doc, ("crossbar", "rows"), args["array_size"])
        _set(doc, ("crossbar", "cols"), args["array_size"])
    if "emit" in args:
        doc["emit"] = sorted(set(args["emit"]))
    sub = args["subcommand"]
    for key, val in args.items():
        if key.startswith("sub_"):
            _set(doc, (sub, key[4:]), val)
    if sub == "mc":
        if "grid" in args:
            grid = {}
            for item in args["grid"]:
                key, sep, vals = item.partition("=")
                if not sep or not vals:
                    raise ConfigError(f"--grid expects KEY=V1,V2,..., got {item!r}")
                if key in grid:
                    raise ConfigError(f"--grid {key} given twice")
                parts = vals.split(";") if key == "scheme" else vals.split(",")
                conv = {"cv": float, "block": int}.get(key, str)
                try:
                    grid[key] = [conv(v) for v in parts]
                except ValueError:
                    raise ConfigError(f"mc.grid.{key}: bad value list {vals!r}") from None
            _set(doc, ("mc", "grid"), grid)
        if "size" in args:
            try:
                _set(doc, ("mc", "size"), [int(v) for v in args["size"].split(",")])
            except ValueError:
                raise ConfigError(f"mc.size: expected M,K,N, got {args['size']!r}") from None
    return doc


def _error(exc: BaseException, sub: str | None, code: int) -> int:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc), "subcommand": sub}}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    sub = ns.subcommand
    try:
        file_doc = load_file(ns.config) if hasattr(ns, "config") else None
        doc = resolve(flags_to_doc(ns), file_doc)
    except ConfigError as exc:
        return _error(exc, sub, 2)
    out_dir = getattr(ns, "out", os.path.join("memsim-out", sub))
    started = time.time()
    try:
        out = Outputs(out_dir)
        summary = RUNNERS[sub](doc, out)
    except (ValueError, FileNotFoundError, ArithmeticError, RuntimeError, OSError) as exc:
        return _error(exc, sub, 1)
    manifest = {
        "tool": "memsim", "version": __version__, "subcommand": sub, "seed": doc["seed"],
        "config": doc, "started": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3), "outputs": dict(sorted(out.files.items())),
    }
    with open(out.path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=_jsonable)
        fh.write("\n")
    print(json.dumps({"subcommand": sub, "out": out.root, **{k: v for k, v in summary.items()
                                                              if k != "config" and not isinstance(v, list)}},
                     default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
