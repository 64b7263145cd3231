"""Command-line entry point: ``tuckerconv <command> ...``.

Exit status is 0 on success, 1 for usage or input errors and 2 when a
numerical failure (diverged training, SVD failure) stops the run.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .admm import (ToyCnn, TrainConfig, TrainingDiverged, admm_train, compressed,
                   make_bar_dataset, toy_flops, toy_ranks)
from .conv import (ConvShape, FeatureMap, TilingConfig, check_tiling, conv2d_ref, kernel_to_crsn,
                   layout_convert, tiled_core_conv)
from .perf import load_gpu
from .ranks import (InfeasibleBudget, build_rank_latency_table, load_arch,
                    save_table_csv, select_ranks_under_budget)
from .tdct import TensorFileError, read_tensor, write_tensor
from .tensor import TuckerFactors, relative_error, tucker2_decompose, tucker2_reconstruct
from .tiling import select_tiling_analytical, select_tiling_exhaustive, time_tiling

RANKING_COLUMNS = ["TH", "TW", "TC", "occupancy", "comp_waves", "comp_latency_s",
                   "volume_total", "mem_latency_s", "combined_s", "measured_s"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _claim(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    return path


def _out_dir(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not force:
        raise FileExistsError(f"output directory {p} is not empty; pass --force to overwrite")
    p.mkdir(parents=True, exist_ok=True)
    return p


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(path, command: str, args, inputs, outputs, results=None,
                   started: float | None = None) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    man = {
        "command": command,
        "config": json.loads(json.dumps(cfg, default=str)),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "started": datetime.fromtimestamp(started or time.time(), timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "results": results or {},
    }
    dump_json(man, path)
    return man


def verify_manifest(path) -> bool:
    """Re-hash every output listed in a manifest; True when all digests match."""
    man = json.loads(Path(path).read_text())
    base = Path(path).parent
    return all(sha256_file(base / name) == digest for name, digest in man["outputs"].items())


def _parse_pair(text: str, what: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{what} must be two comma-separated integers, got {text!r}")
    return a, b


def _parse_shape(text: str) -> ConvShape:
    try:
        return ConvShape.parse(text)
    except ValueError as exc:
        raise UsageError(f"bad --shape {text!r}: {exc}")


def _gpu(text: str):
    try:
        return load_gpu(text)
    except FileNotFoundError:
        raise UsageError(f"--gpu {text!r} is neither a preset (a100, 2080ti, host) nor a file")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- commands

def cmd_decompose(args) -> int:
    t0 = time.time()
    k = read_tensor(args.kernel, dtype=np.float64)
    if k.ndim != 4:
        raise UsageError(f"{args.kernel} holds a {k.ndim}-way tensor, expected 4")
    if args.input_order == "ncrs":
        k = k.transpose(1, 0, 2, 3)
    d1, d2 = _parse_pair(args.ranks, "--ranks")
    f = tucker2_decompose(k, d1, d2)
    out = _out_dir(args.out, args.force)
    files = []
    for name, arr in (("u1", f.u1), ("u2", f.u2), ("core", f.core)):
        write_tensor(arr, out / f"{name}.tdct")
        files.append(out / f"{name}.tdct")
    err = relative_error(k, tucker2_reconstruct(f))
    write_manifest(out / "manifest.json", "decompose", args, [args.kernel], files,
                   {"relative_error": err, "ranks": [d1, d2], "kernel_shape": list(k.shape)}, t0)
    print(f"ranks ({d1}, {d2}) relative error {err:.6e}")
    return 0


def cmd_reconstruct(args) -> int:
    t0 = time.time()
    src = Path(args.factors)
    f = TuckerFactors(read_tensor(src / "u1.tdct"), read_tensor(src / "u2.tdct"),
                      read_tensor(src / "core.tdct"))
    out = _claim(Path(args.out) if args.out else src / "reconstructed.tdct", args.force)
    k_hat = tucker2_reconstruct(f)
    write_tensor(k_hat, out)
    results = {"kernel_shape": list(k_hat.shape)}
    if args.kernel:
        results["relative_error"] = relative_error(read_tensor(args.kernel, np.float64), k_hat)
    write_manifest(out.with_name(out.name + ".manifest.json"), "reconstruct", args,
                   [src / "u1.tdct", src / "u2.tdct", src / "core.tdct"], [out], results, t0)
    print(f"wrote {out}")
    return 0


def cmd_conv_bench(args) -> int:
    t0 = time.time()
    inputs = []
    if args.plan:
        plan = json.loads(Path(args.plan).read_text())
        shape = ConvShape(**plan["shape"])
        tiling = TilingConfig(*plan["tiling"])
        inputs.append(args.plan)
        if args.shape and _parse_shape(args.shape) != shape:
            raise UsageError("--shape disagrees with the plan file")
    else:
        if not args.shape or not args.tiling:
            raise UsageError("conv-bench needs --shape and --tiling, or --plan")
        shape = _parse_shape(args.shape)
        try:
            tiling = TilingConfig.parse(args.tiling)
        except ValueError as exc:
            raise UsageError(str(exc))
    if not shape.tileable:
        raise UsageError("the tiled kernel needs stride 1, odd square filters and same padding")
    dtype = np.float32 if args.dtype == "f32" else np.float64
    rng = np.random.default_rng(args.seed)
    if args.input:
        x = read_tensor(args.input, dtype)
        x = layout_convert(FeatureMap(x, args.layout.upper()), "CHW").data
        inputs.append(args.input)
    else:
        x = rng.standard_normal((shape.C, shape.H, shape.W)).astype(dtype)
    if args.kernel:
        k = read_tensor(args.kernel, dtype)
        inputs.append(args.kernel)
    else:
        k = rng.standard_normal((shape.C, shape.N, shape.R, shape.S)).astype(dtype)
    if k.shape != (shape.C, shape.N, shape.R, shape.S):
        raise UsageError(f"kernel shape {k.shape} does not match (C,N,R,S)")
    try:
        check_tiling(shape, tiling)
    except ValueError as exc:
        raise UsageError(str(exc))
    k_crsn = kernel_to_crsn(k)
    y = tiled_core_conv(x, k_crsn, shape, tiling, workers=args.workers,
                        true_convolution=args.flip_kernel)
    ref_k = k[:, :, ::-1, ::-1] if args.flip_kernel else k
    ref = conv2d_ref(x.astype(np.float64), ref_k.astype(np.float64), shape).transpose(1, 2, 0)
    scale = max(float(np.abs(ref).max()), np.finfo(float).tiny)
    max_rel = float(np.abs(y - ref).max() / scale)
    median = time_tiling(shape, tiling, x, k_crsn, args.repeats, args.workers)
    out = _out_dir(args.out, args.force)
    y_out = y if args.layout == "hwc" else y.transpose(2, 0, 1)
    write_tensor(np.ascontiguousarray(y_out), out / "y.tdct")
    checksum = hashlib.sha256(np.ascontiguousarray(y).tobytes()).hexdigest()
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["H", "W", "C", "N", "R", "S", "TH", "TW", "TC", "dtype", "workers",
                    "repeats", "median_s", "max_rel_err", "checksum"])
        w.writerow([shape.H, shape.W, shape.C, shape.N, shape.R, shape.S, *tiling, args.dtype,
                    args.workers, args.repeats, repr(median), repr(max_rel), checksum])
    write_manifest(out / "manifest.json", "conv-bench", args, inputs,
                   [out / "y.tdct", out / "bench.csv"],
                   {"tiling": list(tiling), "checksum": checksum, "median_s": median,
                    "max_rel_err": max_rel}, t0)
    print(f"tiling {tuple(tiling)} median {median * 1e3:.3f} ms, max rel err {max_rel:.2e}")
    return 0


def cmd_tile_select(args) -> int:
    t0 = time.time()
    shape = _parse_shape(args.shape)
    g = _gpu(args.gpu)
    divisors_only = True if args.divisors_only else (False if args.all_tilings else None)
    out = _claim(Path(args.out), args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    sel_path = _claim(out.with_name(out.stem + ".selection.json"), args.force)
    man_path = out.with_name(out.stem + ".manifest.json")
    try:
        if args.mode == "model":
            best = select_tiling_analytical(shape, g, args.top_frac, divisors_only)
            _, ranking = select_tiling_exhaustive(shape, g, "modeled", divisors_only=divisors_only,
                                                  workers=args.workers, seed=args.seed)
            if args.evaluator == "measured":
                _, ranking = select_tiling_exhaustive(shape, g, "measured", args.repeats,
                                                      divisors_only, args.workers, args.seed)
            # the selected tiling leads the ranking
            ranking = [c for c in ranking if c.config == best.config] + \
                      [c for c in ranking if c.config != best.config]
            best = ranking[0]
        else:
            best, ranking = select_tiling_exhaustive(shape, g, args.evaluator, args.repeats,
                                                     divisors_only, args.workers, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANKING_COLUMNS)
        for c in ranking:
            e = c.estimate
            w.writerow([_fmt(v) for v in (c.config.TH, c.config.TW, c.config.TC, e.occupancy,
                                          e.comp_waves, e.comp_latency, e.volume_total,
                                          e.mem_latency, e.combined, c.measured)])
    selection = {"shape": dict(H=shape.H, W=shape.W, C=shape.C, N=shape.N, R=shape.R,
                               S=shape.S, pad=shape.pad, stride=shape.stride),
                 "tiling": list(best.config), "mode": args.mode, "evaluator": args.evaluator,
                 "gpu": g.name, "top_frac": args.top_frac if args.top_frac else g.top_frac,
                 "candidates": len(ranking)}
    dump_json(selection, sel_path)
    write_manifest(man_path, "tile-select", args, [], [out, sel_path],
                   {"tiling": list(best.config)}, t0)
    print(f"{args.mode}: tiling {tuple(best.config)} of {len(ranking)} candidates")
    return 0


def cmd_admm_train(args) -> int:
    t0 = time.time()
    cfg_doc = json.loads(Path(args.config).read_text())
    known = set(TrainConfig.__dataclass_fields__)
    tc = TrainConfig(**{k: v for k, v in cfg_doc.items() if k in known})
    if "seed" not in cfg_doc:
        tc.seed = args.seed
    data_cfg = cfg_doc.get("data", {})
    rng = np.random.default_rng(tc.seed)
    train = make_bar_dataset(data_cfg.get("train", 2000), rng, noise=data_cfg.get("noise", 0.4))
    test = make_bar_dataset(data_cfg.get("test", 1000), rng, noise=data_cfg.get("noise", 0.4))
    model = ToyCnn.init(np.random.default_rng(tc.seed))
    if "ranks" in cfg_doc:
        ranks = {k: tuple(v) for k, v in cfg_doc["ranks"].items()}
    elif "budget" in cfg_doc:
        ranks = toy_ranks(model, cfg_doc["budget"], _gpu(cfg_doc.get("gpu", "a100")))
    else:
        raise UsageError("config needs either 'ranks' or 'budget'")
    trained, factors, history = admm_train(model, train, ranks, tc, test=test,
                                           admm=cfg_doc.get("admm", True))
    out = _out_dir(args.out, args.force)
    files = []
    for name, f in factors.items():
        for part, arr in (("u1", f.u1), ("u2", f.u2), ("core", f.core)):
            p = out / f"{name}.{part}.tdct"
            write_tensor(arr, p)
            files.append(p)
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["epoch", "loss", "train_acc", "test_acc", "residual_norm"]
        w.writerow(cols)
        for row in history.rows:
            w.writerow([_fmt(row[c]) for c in cols])
    files.append(out / "history.csv")
    orig, tucker = toy_flops(model, ranks)
    results = {"ranks": {k: list(v) for k, v in ranks.items()},
               "test_acc": trained.accuracy(*test),
               "compressed_test_acc": compressed(trained, factors).accuracy(*test),
               "flops_reduction": 1 - tucker / orig, "train_config": tc.to_dict()}
    dump_json(results, out / "summary.json")
    files.append(out / "summary.json")
    write_manifest(out / "manifest.json", "admm-train", args, [args.config], files, results, t0)
    print(f"compressed test accuracy {results['compressed_test_acc']:.4f} at "
          f"{results['flops_reduction']:.1%} fewer FLOPs")
    return 0


def cmd_rank_select(args) -> int:
    t0 = time.time()
    try:
        name, layers = load_arch(args.arch)
    except FileNotFoundError:
        raise UsageError(f"--arch {args.arch!r} is neither bundled nor a readable file")
    g = _gpu(args.gpu)
    out = _claim(Path(args.out), args.force)
    table = build_rank_latency_table(layers, g, evaluator=args.evaluator)
    plan = select_ranks_under_budget(layers, args.budget, table, exact=args.exact)
    doc = plan.to_dict()
    doc.update(arch=name, gpu=g.name)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_json(doc, out)
    outputs = [out]
    if args.table:
        save_table_csv(table, _claim(Path(args.table), args.force))
        outputs.append(Path(args.table))
    write_manifest(out.with_name(out.stem + ".manifest.json"), "rank-select", args,
                   [args.arch] if Path(args.arch).is_file() else [], outputs,
                   {"achieved_reduction": plan.achieved_reduction,
                    "modeled_latency_s": plan.latency}, t0)
    print(f"{plan.method} plan: {plan.achieved_reduction:.2%} FLOPs reduction, "
          f"modeled latency {plan.latency * 1e3:.4f} ms")
    return 0


def read_ranking(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0]) != RANKING_COLUMNS:
        raise UsageError(f"{path} is not a tile-select ranking")
    return rows


def summarize_rankings(paths) -> list[dict]:
    """One summary row per ranking file (shape, scheme, runtime, speedup)."""
    rows = []
    for path in paths:
        path = Path(path)
        sel_path = path.with_name(path.stem + ".selection.json")
        if not sel_path.exists():
            raise UsageError(f"{sel_path} not found next to {path}")
        sel = json.loads(sel_path.read_text())
        ranking = read_ranking(path)
        key = "measured_s" if ranking[0]["measured_s"] else "combined_s"
        chosen = ranking[0]
        s = sel["shape"]
        single = [r for r in ranking
                  if (int(r["TH"]), int(r["TW"]), int(r["TC"])) == (s["H"], s["W"], s["C"])]
        base = single[0] if single else max(ranking, key=lambda r: float(r[key]))
        runtime = float(chosen[key])
        rows.append({
            "shape": ",".join(str(s[k]) for k in ("H", "W", "C", "N", "R", "S")),
            "scheme": sel["mode"],
            "tiling": f"({chosen['TH']}, {chosen['TW']}, {chosen['TC']})",
            "runtime_kind": key[:-2],
            "runtime_s": runtime,
            "baseline_tiling": f"({base['TH']}, {base['TW']}, {base['TC']})",
            "baseline_s": float(base[key]),
            "speedup": float(base[key]) / runtime if runtime > 0 else float("inf"),
            "gpu": sel["gpu"],
        })
    return rows


def cmd_report(args) -> int:
    t0 = time.time()
    rows = summarize_rankings(args.ranking)
    cols = ["shape", "scheme", "tiling", "runtime_kind", "runtime_s", "baseline_tiling",
            "baseline_s", "speedup", "gpu"]
    if args.out:
        out = _claim(Path(args.out), args.force)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in cols])
        write_manifest(out.with_name(out.stem + ".manifest.json"), "report", args,
                       args.ranking, [out], {}, t0)
    widths = [max(len(c), *(len(f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]))
                            for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join((f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c])).ljust(w)
                        for c, w in zip(cols, widths)))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tuckerconv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, gpu=False):
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker threads; 1 forces reproducible single-thread mode")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if gpu:
            sp.add_argument("--gpu", default="a100", help="a100, 2080ti, host or a JSON path")

    sp = sub.add_parser("decompose", help="Tucker-2 factorize a kernel file")
    sp.add_argument("--kernel", required=True)
    sp.add_argument("--ranks", required=True, help="d1,d2")
    sp.add_argument("--input-order", choices=["cnrs", "ncrs"], default="cnrs")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("reconstruct", help="rebuild a kernel from factor files")
    sp.add_argument("factors", help="directory written by decompose")
    sp.add_argument("--kernel", help="original kernel, to report the error")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("conv-bench", help="run and time the tiled core convolution")
    sp.add_argument("--shape", help="H,W,C,N,R,S")
    sp.add_argument("--tiling", help="TH,TW,TC")
    sp.add_argument("--plan", help="selection JSON written by tile-select")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    sp.add_argument("--layout", choices=["chw", "hwc"], default="chw",
                    help="layout of --input and of the written output")
    sp.add_argument("--input")
    sp.add_argument("--kernel", help="(C,N,R,S) kernel file")
    sp.add_argument("--flip-kernel", action="store_true",
                    help="apply the kernel as stored (true convolution) instead of "
                         "flipping it to match cross-correlation")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_conv_bench)

    sp = sub.add_parser("tile-select", help="choose a tiling for a core convolution")
    sp.add_argument("--shape", required=True)
    sp.add_argument("--mode", choices=["model", "oracle"], default="model")
    sp.add_argument("--evaluator", choices=["modeled", "measured"], default="modeled")
    sp.add_argument("--top-frac", type=float)
    sp.add_argument("--repeats", type=int, default=5)
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("--divisors-only", action="store_true")
    grp.add_argument("--all-tilings", action="store_true",
                     help="enumerate every triple even for large problems")
    sp.add_argument("--out", required=True, help="ranking CSV path")
    common(sp, gpu=True)
    sp.set_defaults(func=cmd_tile_select)

    sp = sub.add_parser("admm-train", help="train the toy CNN with ADMM rank constraints")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_admm_train)

    sp = sub.add_parser("rank-select", help="pick Tucker ranks under a FLOPs budget")
    sp.add_argument("--arch", required=True, help="resnet18, vgg16, toy6 or a JSON path")
    sp.add_argument("--budget", type=float, required=True)
    sp.add_argument("--exact", action="store_true")
    sp.add_argument("--evaluator", choices=["modeled", "measured"], default="modeled")
    sp.add_argument("--table", help="also write the rank-latency table as CSV")
    sp.add_argument("--out", required=True)
    common(sp, gpu=True)
    sp.set_defaults(func=cmd_rank_select)

    sp = sub.add_parser("report", help="summarize tile-select rankings")
    sp.add_argument("--ranking", nargs="+", required=True)
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help / --version exit 0; argparse errors go through _Parser.error
        return int(exc.code or 0)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be positive")
    try:
        return args.func(args)
    except (TrainingDiverged, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"tuckerconv {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except InfeasibleBudget as exc:
        print(f"tuckerconv {args.command}: {exc}; lower --budget", file=sys.stderr)
        return 1
    except (UsageError, TensorFileError, FileExistsError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"tuckerconv {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
