"""``glo`` command line.

Exit codes: 0 success, 1 configuration error, 2 partial failure.
Log verbosity comes from ``GLO_LOG_LEVEL`` (default WARNING).
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .detection import CURATION_THRESHOLD, curate_by_score
from .errors import ConfigError, GlomError
from .evaluation import MODES, evaluate, write_report
from .pipeline import PipelineConfig, run
from .splits import make_folds
from .taxonomy import DatasetManifest

log = logging.getLogger("glomquant")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
COMMAND_MANIFEST = "glo_manifest.json"


def _write_command_manifest(out_dir, command, args, artifacts):
    out_dir = Path(out_dir)
    hashes = {}
    for a in artifacts:
        a = Path(a)
        hashes[a.name if a.parent == out_dir else str(a)] = hashlib.sha256(a.read_bytes()).hexdigest()
    payload = {"version": __version__, "command": command, "args": args, "outputs": hashes}
    (out_dir / COMMAND_MANIFEST).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_run(args):
    if args.config:
        cfg = PipelineConfig.load(
            args.config, input=args.input, output=args.output, steps=args.steps, workers=args.workers, seed=args.seed
        )
    else:
        if not args.input or not args.output:
            raise ConfigError("run needs --config or both --input and --output")
        extra = {k: v for k, v in {"steps": args.steps, "workers": args.workers, "seed": args.seed}.items() if v is not None}
        cfg = PipelineConfig(args.input, args.output, **extra)
    result = run(cfg)
    for s in result.manifest["slides"]:
        print(f"{s['wsi_id']}: {s['status']}" + (f" ({s.get('n_detections')} detections)" if s["status"] == "ok" else f" - {s.get('error')}"))
    return result.exit_code


def cmd_evaluate(args):
    report = evaluate(args.pred, args.truth, args.mode)
    sys.stdout.write(report.table())
    if args.out:
        write_report(report, args.out)
    return EXIT_OK


def cmd_phantom(args):
    from .wsi import generate_phantom

    mix = json.loads(args.class_mix) if args.class_mix else None
    _, truth = generate_phantom(
        args.seed, tuple(args.dims), args.n, mix, args.out, radius_range=tuple(args.radius)
    )
    out = Path(args.out)
    arts = sorted(p for p in out.glob("*") if p.is_file() and p.name != COMMAND_MANIFEST)
    _write_command_manifest(out, "phantom", vars_clean(args), arts)
    print(f"wrote phantom {truth.slide_id} with {len(truth.circles)} objects to {out}")
    return EXIT_OK


def cmd_split(args):
    if args.manifest:
        patients = DatasetManifest.read_csv(args.manifest).patients
    elif args.patients:
        patients = [f"P{i:04d}" for i in range(1, args.patients + 1)]
    else:
        raise ConfigError("split needs --patients N or --manifest CSV")
    plan = make_folds(patients, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.json").write_text(plan.to_json())
    _write_command_manifest(out, "split", vars_clean(args), [out / "folds.json"])
    print("test fold sizes:", [len(t) for t in plan.test_sets])
    return EXIT_OK


def cmd_train_toy(args):
    from .learnkit import AugmentPolicy, CosineSchedule, FocalLossParams, linear_probe, train_toy_simsiam
    from .learnkit.training import two_cluster_data

    x, y = two_cluster_data(args.n, args.dim, seed=args.seed)
    schedule = CosineSchedule(args.lr, args.batch_size, args.steps)
    result = train_toy_simsiam(
        x,
        AugmentPolicy(args.noise, args.dropout),
        schedule,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        stop_gradient=not args.no_stop_grad,
    )
    n_train = int(0.75 * len(x))
    probes = {}
    for f in args.fractions:
        pr = linear_probe(
            result.net, x[:n_train], y[:n_train], x[n_train:], y[n_train:], f, FocalLossParams(args.gamma), seed=args.seed
        )
        probes[str(f)] = pr.balanced_accuracy
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_log(out / "metrics.jsonl")
    result.net.save(out / "params.f32")
    summary = {
        "stop_gradient": not args.no_stop_grad,
        "final_collapse": result.final_collapse,
        "collapse_per_epoch": result.collapse_per_epoch,
        "probe_balanced_accuracy": probes,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    arts = [out / "metrics.jsonl", out / "params.f32", out / "params.f32.json", out / "summary.json"]
    _write_command_manifest(out, "train-toy", vars_clean(args), arts)
    print(f"final collapse statistic {result.final_collapse:.4f}")
    for f, acc in probes.items():
        print(f"probe f={f}: balanced accuracy {acc:.3f}")
    return EXIT_OK


def cmd_curate(args):
    with open(args.input, newline="", encoding="utf-8") as fh:
        rows = [(r["id"], float(r["score"])) for r in csv.DictReader(fh)]
    kept = curate_by_score(rows, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "kept.txt").write_text("".join(f"{k}\n" for k in kept))
    _write_command_manifest(out, "curate", vars_clean(args), [out / "kept.txt"])
    print(f"kept {len(kept)} of {len(rows)}")
    return EXIT_OK


def vars_clean(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser():
    ap = argparse.ArgumentParser(prog="glo", description="Glomerular quantification pipeline")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="detect, classify and segment glomeruli on slides")
    p.add_argument("--config")
    p.add_argument("--input", nargs="+")
    p.add_argument("--output")
    p.add_argument("--steps", help="comma-separated subset of detect,classify,segment")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score predictions against truth")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="generate a synthetic test slide")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--dims", type=int, nargs=2, default=[4096, 4096])
    p.add_argument("--radius", type=float, nargs=2, default=[48.0, 96.0])
    p.add_argument("--class-mix", help='JSON object, e.g. {"normal": 0.5, "obsolescent": 0.5}')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("split", help="patient-grouped five-fold plan")
    p.add_argument("--patients", type=int)
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-toy", help="toy SimSiam pretraining plus linear probes")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=2.5)
    p.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.05, 0.10, 0.25, 1.0])
    p.add_argument("--no-stop-grad", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("curate", help="keep candidates with score >= threshold")
    p.add_argument("--input", required=True, help="CSV with id,score columns")
    p.add_argument("--threshold", type=float, default=CURATION_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate)
    return ap


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("GLO_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except GlomError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
