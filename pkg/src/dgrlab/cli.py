"""`dgrlab` command line: dataset synthesis, training, evaluation, and
the robustness benchmark sweep.

Exit codes are stable contracts: 0 ok, 2 bad arguments, 3 I/O failure,
4 numerical abort (non-finite loss). `--threads 1` is the determinism
mode: all acceptance runs use it, and byte-identical outputs are only
promised there (wall-clock timings are then suppressed in bench.csv and
live in timings.json, which is diagnostic output outside the
idempotency contract).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__

BENCH_FIELDS = ["mode", "level", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std",
                "mae_mean", "r2_self_px", "r2_cross_px", "seconds"]


def _limit_threads(n: int) -> None:
    if n and n >= 1:
        os.environ.setdefault("OMP_NUM_THREADS", str(n))
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=n)
        except ImportError:  # numpy still honors the env vars
            pass


def _sha256_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def dataset_content_hash(manifest_path: Path) -> str:
    """Git-tree-style content hash: sha1 over sorted (path, file sha1)."""
    root = manifest_path.parent
    entries = []
    for p in sorted(root.rglob("*")):
        if p.is_file():
            entries.append((str(p.relative_to(root)), hashlib.sha1(p.read_bytes()).hexdigest()))
    return hashlib.sha1(json.dumps(entries).encode()).hexdigest()


def _write_run_manifest(out_dir: Path, config_obj, data_hash: str | None, extra=None) -> None:
    manifest = {
        "tool_version": __version__,
        "config_hash": _sha256_of(config_obj),
        "config": config_obj,
        "dataset_hash": data_hash,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(d["adam_betas"])
    return d


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthdata import build_dataset

    out = Path(args.out)
    manifest = build_dataset(args.n_train, args.n_test, args.level, args.seed, out,
                             src_size=args.src_size, crop=args.crop)
    data_hash = dataset_content_hash(manifest)
    _write_run_manifest(out, {
        "command": "synth", "n_train": args.n_train, "n_test": args.n_test,
        "level": args.level, "seed": args.seed, "src_size": args.src_size,
        "crop": args.crop,
    }, data_hash)
    print(f"synth: wrote {args.n_train} train / {args.n_test} test pairs "
          f"at level {args.level} into {out} (hash {data_hash[:12]})")
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .trainer import load_config, run_training

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log = run_training(cfg, args.data, out, log_every=args.log_every)
    _write_run_manifest(out, {"command": "train", **_cfg_dict(cfg)},
                        dataset_content_hash(Path(args.data)))
    print(f"train: final checkpoint {ckpt}, log {log}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import TrainConfig, evaluate, load_bundle_auto

    bundle, meta, mode = load_bundle_auto(args.ckpt)
    cfg = TrainConfig(mode=mode, batch=args.batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(bundle, args.data, cfg, heatmap_dir=out / "heatmaps")

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "psnr", "ssim", "mae"])
        for row in report.rows:
            writer.writerow([row["id"], f"{row['psnr']:.6f}", f"{row['ssim']:.6f}",
                             f"{row['mae']:.6f}"])
    aggregates = {"aggregates": report.aggregates,
                  "r2_self_px": report.r2_self_px, "r2_cross_px": report.r2_cross_px}
    (out / "aggregates.json").write_text(json.dumps(aggregates, indent=2, sort_keys=True))
    _write_run_manifest(out, {"command": "eval", "ckpt": str(args.ckpt), "mode": mode},
                        dataset_content_hash(Path(args.data)))
    print(f"eval: psnr {report.aggregates['psnr']['mean']:.3f} dB, "
          f"ssim {report.aggregates['ssim']['mean']:.4f} over {len(report.rows)} images")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _parse_levels(spec: str) -> list[int]:
    if ".." in spec:
        lo, hi = spec.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",") if s]


def _test_noise_hash(manifest_path: Path, level: int) -> str:
    """Hash of the test split's transform noise in level-independent
    (unit) form, so matched datasets at different levels agree."""
    from .misalign import level_spec
    from .synthdata import load_manifest

    spec = level_spec(level)
    units = []
    for rec in load_manifest(manifest_path):
        if rec["split"] != "test":
            continue
        a = rec["affine"]
        if level == 0:
            units.append((0.0, 0.0, 0.0, 0.0))
        else:
            units.append((
                round(a["rotation_deg"] / spec.rot_max, 7),
                round(a["ty"] / spec.trans_max, 7),
                round(a["tx"] / spec.trans_max, 7),
                round((a["scale"] - 1.0) / spec.scale_max, 7),
            ))
    return _sha256_of(units)


def _bench_cell(cell_args: dict) -> dict:
    """Train + evaluate one (mode, level) cell. Runs in-process or in a
    worker process; everything needed arrives in one picklable dict."""
    _limit_threads(cell_args["threads"])
    from .trainer import TrainConfig, evaluate, run_training
    from .losses import LossWeights

    t0 = time.perf_counter()
    cfg = TrainConfig(mode=cell_args["mode"], weights=LossWeights(),
                      epochs=cell_args["epochs"], batch=cell_args["batch"],
                      seed=cell_args["seed"], crop=cell_args["crop"],
                      checkpoint_every=0)
    cell_dir = Path(cell_args["cell_dir"])
    ckpt, _ = run_training(cfg, cell_args["manifest"], cell_dir,
                           log_every=cell_args["log_every"])
    from .nets import init_models
    from .trainer import load_checkpoint

    bundle = init_models(cfg.seed, mode=cfg.mode)
    load_checkpoint(ckpt, bundle)
    report = evaluate(bundle, cell_args["manifest"], cfg,
                      heatmap_dir=cell_dir / "heatmaps", heatmap_count=4)
    seconds = time.perf_counter() - t0
    return {
        "mode": cell_args["mode"],
        "level": cell_args["level"],
        "psnr_mean": report.aggregates["psnr"]["mean"],
        "psnr_std": report.aggregates["psnr"]["std"],
        "ssim_mean": report.aggregates["ssim"]["mean"],
        "ssim_std": report.aggregates["ssim"]["std"],
        "mae_mean": report.aggregates["mae"]["mean"],
        "r2_self_px": report.r2_self_px,
        "r2_cross_px": report.r2_cross_px,
        "seconds": seconds,
    }


def check_trends(rows: list[dict]) -> list[tuple[str, bool, str]]:
    """Robustness-trend assertions over one bench grid (single seed)."""
    by = {(r["mode"], int(r["level"])): r["psnr_mean"] for r in rows}
    levels = sorted({int(r["level"]) for r in rows})
    checks = []
    if ("baseline", 1) in by and ("baseline", 5) in by:
        ok = by[("baseline", 5)] < by[("baseline", 1)] - 1.0
        checks.append(("a: baseline degrades >1 dB from level 1 to 5", ok,
                       f"{by[('baseline', 1)]:.3f} -> {by[('baseline', 5)]:.3f}"))
    if ("dgr", 1) in by and ("dgr", 5) in by:
        ok = by[("dgr", 5)] >= by[("dgr", 1)] - 1.0
        checks.append(("b: dgr holds within 1 dB from level 1 to 5", ok,
                       f"{by[('dgr', 1)]:.3f} -> {by[('dgr', 5)]:.3f}"))
    if ("dgr", 5) in by and ("baseline", 5) in by:
        ok = by[("dgr", 5)] >= by[("baseline", 5)] + 0.5
        checks.append(("c: dgr beats baseline by >=0.5 dB at level 5", ok,
                       f"{by[('dgr', 5)]:.3f} vs {by[('baseline', 5)]:.3f}"))
    dgr_vs_rnr = [lv for lv in levels if ("dgr", lv) in by and ("rnr", lv) in by]
    if dgr_vs_rnr:
        ok = all(by[("dgr", lv)] >= by[("rnr", lv)] - 0.2 for lv in dgr_vs_rnr)
        if 5 in dgr_vs_rnr:
            ok = ok and by[("dgr", 5)] > by[("rnr", 5)]
        checks.append(("d: dgr >= rnr - 0.2 dB everywhere, strictly better at level 5", ok,
                       " ".join(f"L{lv}:{by[('dgr', lv)]:.3f}/{by[('rnr', lv)]:.3f}"
                                for lv in dgr_vs_rnr)))
    return checks


def cmd_bench(args) -> int:
    from .synthdata import build_dataset

    modes = [m for m in args.modes.split(",") if m]
    for m in modes:
        if m not in ("baseline", "rnr", "dgr"):
            raise ValueError(f"unknown mode {m!r}")
    levels = _parse_levels(args.levels)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    manifests: dict[int, Path] = {}
    noise_hashes: dict[int, str] = {}
    for level in levels:
        ddir = out / "datasets" / f"level{level}"
        manifest = ddir / "manifest.jsonl"
        if not manifest.exists():
            print(f"bench: synthesizing level-{level} dataset "
                  f"({args.n_train}/{args.n_test})", file=sys.stderr)
            build_dataset(args.n_train, args.n_test, level, args.seed, ddir,
                          crop=args.crop)
        manifests[level] = manifest
        noise_hashes[level] = _test_noise_hash(manifest, level)
    if len(set(noise_hashes.values())) > 1:
        raise RuntimeError(f"test-set transform noise differs across levels: {noise_hashes}")

    cells = []
    for mode in modes:
        for level in levels:
            cells.append({
                "mode": mode, "level": level, "seed": args.seed,
                "epochs": args.epochs, "batch": args.batch, "crop": args.crop,
                "manifest": str(manifests[level]),
                "cell_dir": str(out / f"cell_{mode}_L{level}"),
                "threads": args.threads if args.parallel_cells <= 1 else 1,
                "log_every": args.log_every,
            })

    results: dict[tuple[str, int], dict] = {}
    failures: dict[str, str] = {}
    if args.parallel_cells > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=args.parallel_cells) as pool:
            futs = {pool.submit(_bench_cell, c): c for c in cells}
            for fut in cf.as_completed(futs):
                c = futs[fut]
                try:
                    r = fut.result()
                    results[(r["mode"], r["level"])] = r
                except Exception as err:  # cell failure recorded, sweep continues
                    failures[f"{c['mode']}_L{c['level']}"] = repr(err)
    else:
        for c in cells:
            try:
                print(f"bench: running {c['mode']} level {c['level']}", file=sys.stderr)
                r = _bench_cell(c)
                results[(r["mode"], r["level"])] = r
            except Exception as err:
                failures[f"{c['mode']}_L{c['level']}"] = repr(err)

    rows = []
    timings = {}
    deterministic = args.threads == 1 and args.parallel_cells <= 1
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_FIELDS)
        for mode in modes:
            for level in levels:
                r = results.get((mode, level))
                if r is None:
                    continue
                rows.append(r)
                timings[f"{mode}_L{level}"] = r["seconds"]
                writer.writerow([
                    r["mode"], r["level"],
                    f"{r['psnr_mean']:.6f}", f"{r['psnr_std']:.6f}",
                    f"{r['ssim_mean']:.6f}", f"{r['ssim_std']:.6f}",
                    f"{r['mae_mean']:.6f}",
                    "" if r["r2_self_px"] is None else f"{r['r2_self_px']:.6f}",
                    "" if r["r2_cross_px"] is None else f"{r['r2_cross_px']:.6f}",
                    "0.000" if deterministic else f"{r['seconds']:.3f}",
                ])

    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    _write_run_manifest(out, {
        "command": "bench", "modes": modes, "levels": levels, "seed": args.seed,
        "epochs": args.epochs, "batch": args.batch, "crop": args.crop,
        "n_train": args.n_train, "n_test": args.n_test,
    }, _sha256_of({str(k): dataset_content_hash(v) for k, v in manifests.items()}),
        extra={"test_noise_hashes": {str(k): v for k, v in noise_hashes.items()},
               "failures": failures})

    for name, reason in failures.items():
        print(f"bench: cell {name} FAILED: {reason}", file=sys.stderr)

    if args.assert_trends:
        checks = check_trends(rows)
        all_ok = bool(checks)
        for name, ok, detail in checks:
            print(f"trend {name}: {'PASS' if ok else 'FAIL'} ({detail})")
            all_ok &= ok
        if not all_ok:
            return 1
    print(f"bench: {len(rows)} cells done, {len(failures)} failed, "
          f"results in {out / 'bench.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgrlab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("DGR_THREADS", "0")),
                   help="worker/BLAS thread cap; 1 = determinism mode "
                        "(env fallback DGR_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="synthesize a paired-stain dataset")
    ps.add_argument("--n-train", type=int, default=2000)
    ps.add_argument("--n-test", type=int, default=200)
    ps.add_argument("--level", type=int, default=0)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", required=True)
    ps.add_argument("--src-size", type=int, default=160)
    ps.add_argument("--crop", type=int, default=64)
    ps.set_defaults(fn=cmd_synth)

    pt = sub.add_parser("train", help="train one model from a TOML config")
    pt.add_argument("--config", required=True)
    pt.add_argument("--data", required=True, help="dataset manifest.jsonl")
    pt.add_argument("--out", required=True)
    pt.add_argument("--log-every", type=int, default=0)
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--out", required=True)
    pe.add_argument("--batch", type=int, default=4)
    pe.set_defaults(fn=cmd_eval)

    pb = sub.add_parser("bench", help="robustness sweep over modes x levels")
    pb.add_argument("--modes", default="baseline,rnr,dgr")
    pb.add_argument("--levels", default="1,3,5", help="comma list or lo..hi range")
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--out", required=True)
    pb.add_argument("--n-train", type=int, default=2000)
    pb.add_argument("--n-test", type=int, default=200)
    pb.add_argument("--epochs", type=int, default=30)
    pb.add_argument("--batch", type=int, default=4)
    pb.add_argument("--crop", type=int, default=64)
    pb.add_argument("--assert-trends", action="store_true")
    pb.add_argument("--parallel-cells", type=int, default=1)
    pb.add_argument("--log-every", type=int, default=0)
    pb.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    from .trainer import TrainingAborted, CheckpointError

    try:
        return args.fn(args)
    except TrainingAborted as err:
        print(f"dgrlab: numerical abort: {err}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, CheckpointError) as err:
        print(f"dgrlab: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"dgrlab: I/O error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
