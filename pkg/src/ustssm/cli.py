"""``ustssm`` command line: gen-data, train, eval, scan-bench, export-viz, perf-bench.

Exit codes: 0 on success, 1 for usage errors, 2 for runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError
from .data import (PcvFormatError, PointCloudVideo, SynthConfig, VizPoints, normalize,
                   read_dataset, read_pcv, synth_generate, write_dataset, write_viz_csv,
                   write_viz_ply)
from .hilbert import AXIS_ORDERS
from .model import (ModelConfig, TrainConfig, UstSsm, evaluate, load_model, save_model,
                    train)
from .nn import derive_seed
from .sampling import fps, fps_seed
from .serialization import CURVES, STRATEGIES, PromptNetParams, prompt_forward, scan_bench_rows

log = logging.getLogger("ustssm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SUBCOMMANDS = ("gen-data", "train", "eval", "scan-bench", "export-viz", "perf-bench")
BENCH_COLUMNS = ("strategy", "curve", "mean_adjacent_distance", "bijective", "throughput_points_per_sec")
PERF_COLUMNS = ("frames", "seq_len", "time_s", "peak_bytes", "time_ratio", "alloc_ratio")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _curve_arg(value: str) -> str:
    v = value.strip()
    if v.lower() == "hilbert":
        return "hilbert"
    if v.upper() in AXIS_ORDERS:
        return v.upper()
    raise argparse.ArgumentTypeError(f"unknown curve {value!r}; choose from {', '.join(CURVES)}")


def _frames_arg(value: str) -> list:
    try:
        frames = [int(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad frame list {value!r}") from None
    if not frames or min(frames) < 2:
        raise argparse.ArgumentTypeError("frame counts must be >= 2")
    if frames != sorted(frames):
        raise argparse.ArgumentTypeError("frame counts must be ascending")
    return frames


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    shared.add_argument("--out", type=Path, default=None, help="output file or directory")
    shared.add_argument("--config", type=Path, default=None,
                        help="JSON file of config fields; flags take precedence")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ustssm", description="Point-cloud video classification with selective scans.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    g = sub.add_parser("gen-data", parents=[shared], help="write a synthetic PCV dataset")
    g.add_argument("--classes", type=int, help="number of motion classes, 1-4 (default 4)")
    g.add_argument("--videos-per-class", type=int, help="default 64")
    g.add_argument("--frames", type=int, help="frames per clip (default 16)")
    g.add_argument("--points", type=int, help="points per frame (default 256)")
    g.add_argument("--noise", type=float, help="Gaussian jitter sigma (default 0.01)")

    t = sub.add_parser("train", parents=[shared], help="train a classifier")
    t.add_argument("--data", type=Path, help="PCV directory (synthesized when omitted)")
    t.add_argument("--epochs", type=int, help="default 50")
    t.add_argument("--lr", type=float, help="initial SGD learning rate (default 0.01)")
    t.add_argument("--batch-size", type=int, help="default 8")
    t.add_argument("--k-prompts", type=int, help="prompt clusters K (default 8)")
    t.add_argument("--blocks", type=int, help="ST-SSM blocks (default 1)")
    t.add_argument("--prompt-soft-gate", action=argparse.BooleanOptionalAction, default=None)

    e = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)

    s = sub.add_parser("scan-bench", parents=[shared], help="compare scanning strategies and curves")
    s.add_argument("--data", type=Path, help="PCV directory (synthesized when omitted)")
    s.add_argument("--trials", type=int, default=10, help="clips to average over")
    s.add_argument("--strategy", choices=STRATEGIES, action="append")
    s.add_argument("--curve", type=_curve_arg, action="append", help="hilbert or an axis order such as XYZ")
    s.add_argument("--points", type=int, default=64, help="sampled points per frame")

    x = sub.add_parser("export-viz", parents=[shared], help="export prompt clusters and pooling weights")
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--input", type=Path, required=True, help="one .pcv clip")

    b = sub.add_parser("perf-bench", parents=[shared], help="forward time and peak allocation vs frames")
    b.add_argument("--frames", type=_frames_arg, default=[16, 32, 64], help="increasing comma list")
    b.add_argument("--points", type=int, default=256)
    b.add_argument("--channels", type=int, default=64)
    b.add_argument("--runs", type=int, default=5, help="timed runs per size; the median is kept")
    return p


# ---------------------------------------------------------------- config plumbing

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise RuntimeError("config must be a JSON object")
    return cfg


def _make(cls, cfg: dict, **overrides):
    """Instantiate a config dataclass from the fields it knows, then apply non-None overrides."""
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {k: v for k, v in cfg.items() if k in names}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if "decay_epochs" in kw:
        kw["decay_epochs"] = tuple(kw["decay_epochs"])
    return cls(**kw)


def _check_keys(cfg: dict, *classes):
    known = set().union(*({f.name for f in dataclasses.fields(c)} for c in classes))
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise RuntimeError(f"unknown config keys: {', '.join(unknown)}")


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _out(args, default: str) -> Path:
    return args.out if args.out is not None else Path(default)


def _dataset(args, cfg, seed):
    if args.data is not None:
        return read_dataset(args.data)
    return synth_generate(_make(SynthConfig, cfg, seed=seed))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, SynthConfig)
    sc = _make(SynthConfig, cfg, seed=_seed(args, cfg), n_classes=args.classes,
               videos_per_class=args.videos_per_class, T=args.frames, N=args.points,
               noise_sigma=args.noise)
    out = _out(args, "data")
    paths = write_dataset(synth_generate(sc), out)
    print(f"wrote {len(paths)} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, ModelConfig, TrainConfig, SynthConfig)
    seed = _seed(args, cfg)
    videos = _dataset(args, cfg, seed)
    first = videos[0]
    n_classes = cfg.get("n_classes", max(v.label for v in videos if v.label is not None) + 1)
    mc = _make(ModelConfig, cfg, seed=seed, frames=first.T, in_channels=first.C or 3,
               n_classes=n_classes, k_prompts=args.k_prompts, n_blocks=args.blocks,
               prompt_soft_gate=args.prompt_soft_gate)
    tc = _make(TrainConfig, cfg, seed=seed, epochs=args.epochs, lr=args.lr,
               batch_size=args.batch_size)
    out = _out(args, "run")
    out.mkdir(parents=True, exist_ok=True)

    def report(row):
        print(f"epoch {row['epoch']:3d}  lr {row['lr']:.4g}  loss {row['train_loss']:.4f}  "
              f"train {row['train_acc']:.3f}  val {row['val_acc']:.3f}", flush=True)

    t0 = time.perf_counter()
    res = train(videos, mc, tc, epoch_callback=report)
    (out / "train_log.csv").write_text(res.log_csv())
    save_model(out / "model.ustc", res.model,
               {"best_val_acc": res.best_val_acc, "best_epoch": res.best_epoch,
                "train_config": dataclasses.asdict(tc)})
    print(f"best held-out accuracy {res.best_val_acc:.4f} at epoch {res.best_epoch}; "
          f"{res.model.n_params()} parameters; {time.perf_counter() - t0:.1f}s")
    print(f"checkpoint {out / 'model.ustc'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    metrics = evaluate(read_dataset(args.data), model)
    payload = json.dumps(metrics.as_dict(), indent=2)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(payload + "\n")
    print(f"accuracy {metrics.accuracy:.4f}")
    for c, acc in enumerate(metrics.per_class):
        print(f"  class {c}: {acc:.4f}")
    return EXIT_OK


def _sampled_coords(video: PointCloudVideo, n_points: int) -> np.ndarray:
    """Normalized FPS anchors of every second frame, ``T' x n_points x 3``."""
    v = normalize(video)
    frames = range(1, v.T, 2) if v.T > 1 else range(1)
    n = min(n_points, v.N)
    return np.stack([v.coords[f][fps(v.coords[f], n, fps_seed(v.coords[f]))] for f in frames])


def _prompt_clusters(coords: np.ndarray, net: PromptNetParams) -> np.ndarray:
    """Cluster ids from a seeded, untrained prompt network on raw coordinates."""
    flat = coords.reshape(-1, 3)
    with T.no_grad():
        return prompt_forward(flat, flat, net).assignment


def cmd_scan_bench(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, SynthConfig, ModelConfig)
    seed = _seed(args, cfg)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    videos = _dataset(args, cfg, seed)
    net = PromptNetParams.init(3, int(cfg.get("k_prompts", 8)), derive_seed(seed, 7), hidden=32)
    bits = int(cfg.get("hilbert_bits", 10))
    strategies = tuple(args.strategy) if args.strategy else STRATEGIES
    curves = tuple(dict.fromkeys(args.curve)) if args.curve else CURVES
    rng = np.random.default_rng(derive_seed(seed, 8))
    picks = rng.choice(len(videos), size=args.trials, replace=args.trials > len(videos))
    acc = {}
    for i in picks:
        coords = _sampled_coords(videos[int(i)], args.points)
        assignment = _prompt_clusters(coords, net)
        for row in scan_bench_rows(coords, assignment, bits, strategies, curves):
            acc.setdefault((row["strategy"], row["curve"]), []).append(row)
    out = _out(args, "scan_bench.csv")
    lines = _write_csv(out, BENCH_COLUMNS, [
        (s, c, repr(float(np.mean([r["mean_adjacent_distance"] for r in rows]))),
         str(all(r["bijective"] for r in rows)).lower(),
         f"{statistics.median(r['throughput_points_per_sec'] for r in rows):.1f}")
        for (s, c), rows in acc.items()])
    print(lines, end="")
    return EXIT_OK


def cmd_export_viz(args) -> int:
    model = load_model(args.checkpoint)
    video = read_pcv(args.input)
    prep = model.prepare(video)
    with T.no_grad():
        _, info = model.forward([prep], trace=True)
    plan = prep.plan
    perm = info["perms"][0]
    n_s = plan.n_spatial
    local_frame = perm // n_s
    src_frame = plan.out_frames[local_frame]
    point = plan.anchors[src_frame, perm % n_s]
    cluster = info["assignment"][0][perm]
    weight = info["stsa_weight"][-1][: len(perm)]
    coords = video.coords[src_frame, point]
    viz = VizPoints(coords, point, src_frame, cluster, weight)
    out = _out(args, "viz")
    out.mkdir(parents=True, exist_ok=True)
    write_viz_csv(out / "clusters.csv", viz, ("point", "frame", "cluster"))
    write_viz_csv(out / "weights.csv", viz, ("point", "frame", "weight"))
    write_viz_ply(out / "clusters.ply", viz)
    print(f"wrote {len(perm)} points ({len(np.unique(cluster))} clusters in use) to {out}")
    return EXIT_OK


def perf_bench(frames_list, points: int = 256, channels: int = 64, runs: int = 5,
               seed: int = 0, n_spatial: int = 64) -> list:
    """Median forward time and peak live tensor bytes of the default model per frame count."""
    rows = []
    for frames in frames_list:
        cfg = ModelConfig(channels=channels, frames=frames, n_spatial=min(n_spatial, points), seed=seed)
        model = UstSsm(cfg)
        rng = np.random.default_rng([seed, frames])
        clip = PointCloudVideo(rng.uniform(-1, 1, size=(frames, points, 3)))
        prep = model.prepare(clip)
        times, peaks = [], []
        for _ in range(runs):
            with T.no_grad(), T.AllocationCounter() as counter:
                t0 = time.perf_counter()
                model.forward([prep])
                times.append(time.perf_counter() - t0)
            peaks.append(counter.peak_bytes)
        rows.append({"frames": frames, "seq_len": cfg.seq_len, "time_s": statistics.median(times),
                     "peak_bytes": int(statistics.median(peaks))})
    for prev, row in zip(rows, rows[1:]):
        row["time_ratio"] = row["time_s"] / prev["time_s"]
        row["alloc_ratio"] = row["peak_bytes"] / prev["peak_bytes"]
    return rows


def cmd_perf_bench(args) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    rows = perf_bench(args.frames, args.points, args.channels, args.runs,
                      args.seed if args.seed is not None else 0)

    def fmt(r, k):
        return f"{r[k]:.6g}" if k in r else ""

    out = _out(args, "perf_bench.csv")
    text = _write_csv(out, PERF_COLUMNS, [
        (r["frames"], r["seq_len"], fmt(r, "time_s"), r["peak_bytes"], fmt(r, "time_ratio"),
         fmt(r, "alloc_ratio")) for r in rows])
    print(text, end="")
    return EXIT_OK


def _write_csv(path: Path, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return text


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "scan-bench": cmd_scan_bench,
    "export-viz": cmd_export_viz,
    "perf-bench": cmd_perf_bench,
}

RUNTIME_ERRORS = (OSError, ValueError, RuntimeError, FloatingPointError, KeyError,
                  PcvFormatError, CheckpointError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ustssm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"ustssm {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
