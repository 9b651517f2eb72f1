"""Command-line entry point: ``tadml {train,infer,eval,synth,gradcheck,bench}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("tadml")


def _read_flat(path) -> dict:
    text = Path(path).read_text()
    return json.loads(text) if str(path).endswith(".json") else tomllib.loads(text)


def _load_sequences(path):
    from .data import load_dataset, load_features, load_features_csv

    p = Path(path)
    if p.suffix == ".json":
        return [s for s, _ in load_dataset(p)]
    if p.suffix == ".csv":
        return [load_features_csv(p)]
    return [load_features(p)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .data import load_dataset
    from .plotting import plot_loss_curve
    from .train import TrainConfig, load_config, train

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    ann = Path(args.annotations) if args.annotations else Path(args.data).with_name("annotations.json")
    dataset = load_dataset(args.data, ann)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.flat(), indent=1, sort_keys=True) + "\n")

    def report(e):
        print(f"epoch {e['epoch']:3d}  loss {e['loss']:.5f}  cls {e['cls']:.5f}  "
              f"reg {e['reg']:.5f}  lr {e['lr']:.2e}  {e['seconds']:.1f}s", flush=True)

    res = train(cfg, dataset, out_dir=out, on_epoch=report)
    plot_loss_curve(res.history, out / "loss_curve.png")
    print(f"checkpoint: {out / 'checkpoint.tdck'}")
    return 0


def cmd_infer(args) -> int:
    from .network import load_checkpoint
    from .postprocess import write_detections
    from .train import InferConfig, TrainConfig, infer, load_config

    model_cfg, params, meta = load_checkpoint(args.ckpt)
    if args.config:
        infer_cfg = load_config(args.config).infer
    elif "train" in meta:
        infer_cfg = TrainConfig.from_flat(meta["train"]).infer
    else:
        infer_cfg = InferConfig()
    seqs = _load_sequences(args.features)
    t0 = time.perf_counter()
    results, timing = infer(params, model_cfg, seqs, infer_cfg)
    elapsed = time.perf_counter() - t0
    write_detections(args.out, results, unit="frames",
                     extra={"seconds_per_video": {k: round(v, 6) for k, v in timing.items()}})
    frames = sum(s.T for s in seqs)
    print(f"throughput: {len(seqs)} videos, {frames} feature steps in {elapsed:.3f}s "
          f"({frames / max(elapsed, 1e-9):.0f} steps/s)")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import mean_ap, read_ground_truth
    from .plotting import plot_pr_curves
    from .postprocess import read_detections

    thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    dets_by_vid, _ = read_detections(args.dets)
    gts_by_vid, _ = read_ground_truth(args.gt)
    only_dets = sorted(set(dets_by_vid) - set(gts_by_vid))
    only_gt = sorted(set(gts_by_vid) - set(dets_by_vid))
    shared = set(dets_by_vid) & set(gts_by_vid)
    for label, ids in (("in detections but not ground truth", only_dets),
                       ("in ground truth but not detections", only_gt)):
        if ids:
            print(f"unmatched video ids ({label}, excluded): {', '.join(ids)}", file=sys.stderr)
    dets = [d for v in sorted(shared) for d in dets_by_vid[v]]
    gts = [g for v in sorted(shared) for g in gts_by_vid[v]]
    report = mean_ap(dets, gts, thresholds)
    table = report.table(args.label)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = report.to_json()
        payload["excluded_videos"] = {"detections_only": only_dets, "ground_truth_only": only_gt}
        (out / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        (out / "report.txt").write_text(table + "\n")
        (out / "report.csv").write_text(report.csv())
        plot_pr_curves(report, out / "pr_curve.png")
    return 1 if only_dets or only_gt else 0


def cmd_synth(args) -> int:
    from .data import SynthConfig, synth_dataset, write_dataset

    d = _read_flat(args.config) if args.config else {}
    unknown = set(d) - set(SynthConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
    cfg = SynthConfig.from_dict(d)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.num_videos is not None:
        cfg.num_videos = args.num_videos
    manifest, ann = write_dataset(args.out, synth_dataset(cfg))
    print(f"wrote {cfg.num_videos} videos: {manifest} {ann}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    t0 = time.perf_counter()
    results = run_suite(args.module, tol=args.tol, seed=args.seed,
                        on_result=lambda n, r: print(f"{'PASS' if r.ok else 'FAIL'}  {n:<62s} "
                                                     f"max rel err {r.max_error:.2e}", flush=True))
    bad = [n for n, r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s "
          f"(tol {args.tol:g})")
    return 1 if bad else 0


def cmd_bench(args) -> int:
    from .benchmark import run_benchmark
    from .plotting import plot_ablation

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = [(n, b, s) for s in args.seeds for n in args.neck for b in args.beta]
    rows, reports = [], {}
    for n, b, s in runs:
        r = run_benchmark(s, n, b, args.epochs)
        print(r.report.table(r.label), flush=True)
        rows.append(r.row())
        reports[r.label] = r.report
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n")
    plot_ablation(reports, out / "ablation.png")
    print(f"wrote {out / 'ablation.csv'} and {out / 'ablation.png'}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tadml", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector on a feature manifest")
    p.add_argument("--config", help="flat TOML or JSON with TrainConfig/ModelConfig keys")
    p.add_argument("--data", required=True, help="manifest.json")
    p.add_argument("--annotations", help="annotation JSON (default: annotations.json next to the manifest)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect actions with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True, help=".tdml / .csv feature file or a manifest.json")
    p.add_argument("--out", required=True, help="detections JSON")
    p.add_argument("--config", help="override inference settings")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mAP of a detections file against annotations")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--thresholds", default="0.3,0.4,0.5,0.6,0.7")
    p.add_argument("--label", default="tadml", help="row label in the printed table")
    p.add_argument("--out", help="directory for report.json/.txt/.csv and pr_curve.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config", help="flat TOML or JSON with SynthConfig keys")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-videos", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", default="all", choices=["all", "autograd", "mechanics", "network", "losses"])
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="synthetic benchmark with neck/beta ablation")
    p.add_argument("--out", required=True)
    p.add_argument("--neck", type=int, nargs="+", default=[1, 6])
    p.add_argument("--beta", type=float, nargs="+", default=[3.0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=30)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"tadml {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
