"""Command-line entry point: generate, train, eval, match, ablate.

Defaults follow the method's hyperparameters (gamma=0.2, lambda1=0.1,
lambda2=0.5, p=0.2, P=10, V=4) with the synthetic benchmark scaled to
D=16. Every command is deterministic given --seed (DUATM_SEED is the
fallback) and --threads 1. Exit codes: 0 ok, 1 usage, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import data as dat
from . import evaluation as ev
from . import training as tr
from .errors import DataError, NumericError, UsageError
from .matcher import MODES, baseline_avepool_distance, distance_report


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(f"{self.prog}: {message}")


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not in [0, 1]")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} is not positive")
    return value


def _env_seed(default: int) -> int:
    raw = os.environ.get("DUATM_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as err:
        raise UsageError(f"DUATM_SEED must be an integer, got {raw!r}") from err


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="duatm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[], help="write a synthetic benchmark dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--identities", type=_positive, default=20, help="identities (default %(default)s)")
    gen.add_argument("--per-identity", type=_positive, default=8, help="instances per identity (default %(default)s)")
    gen.add_argument("--seq-len", type=_positive, default=8, help="sequence length S (default %(default)s)")
    gen.add_argument("--dim", type=_positive, default=16, help="feature dimension D (default %(default)s)")
    gen.add_argument("--corruption", type=_fraction, default=0.25, help="corrupted position fraction (default %(default)s)")
    gen.add_argument("--misalignment", choices=("on", "off"), default="on", help="random cyclic shift per instance (default %(default)s)")
    gen.add_argument("--noise-scale", type=float, default=0.15, help="Gaussian noise scale (default %(default)s)")
    gen.add_argument("--cameras", type=_positive, default=2, help="camera count, round-robin (default %(default)s)")
    gen.add_argument("--seed", type=int, default=None, help="generator seed (default DUATM_SEED or 0)")
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="train a matcher on a manifest")
    train.add_argument("--manifest", required=True, help="dataset manifest.json")
    train.add_argument("--out", required=True, help="output directory for checkpoint/logs")
    train.add_argument("--config", default=None, help="full JSON config document (flags override)")
    train.add_argument("--resume", default=None, help="checkpoint to continue from")
    train.add_argument("--eval-per-id", type=int, default=0, help="instances per identity held out of training (default %(default)s)")
    train.add_argument("--mode", choices=MODES, default=None, help="distance mode (default duatm)")
    train.add_argument("--dim", type=_positive, default=None, help="feature dimension D (default 16)")
    train.add_argument("--epochs", type=_positive, default=None, help="epochs (default 30)")
    train.add_argument("--steps-per-epoch", type=_positive, default=None, help="steps per epoch (default 50)")
    train.add_argument("--lr-initial", type=float, default=None, help="initial learning rate (default 0.01)")
    train.add_argument("--lr-final", type=float, default=None, help="learning rate after the drop (default 0.001)")
    train.add_argument("--lr-drop-epoch", type=int, default=None, help="epoch at which the rate drops (default 25)")
    train.add_argument("--seed", type=int, default=None, help="run seed (default DUATM_SEED or 42)")
    train.add_argument("--freeze-extractor", action="store_true", default=None, help="keep extractor parameters fixed")
    train.add_argument("--gamma", type=float, default=None, help="triplet margin (default 0.2)")
    train.add_argument("--lambda1", type=float, default=None, help="de-correlation weight (default 0.1)")
    train.add_argument("--lambda2", type=float, default=None, help="identity cross-entropy weight (default 0.5)")
    train.add_argument("--p", type=_fraction, default=None, help="convex-pool zeroing probability (default 0.2)")
    train.add_argument("--batch-p", type=_positive, default=None, help="identities per batch P (default 10)")
    train.add_argument("--batch-v", type=_positive, default=None, help="instances per identity V (default 4)")
    train.set_defaults(func=cmd_train)

    match = sub.add_parser("match", help="print the distance between two stored sequences")
    match.add_argument("fseq_a", help="first .fseq file")
    match.add_argument("fseq_b", help="second .fseq file")
    match.add_argument("--checkpoint", default=None, help="trained checkpoint (required unless --mode avepool)")
    match.add_argument("--mode", choices=MODES, default="duatm", help="distance mode (default %(default)s)")
    match.add_argument("--verbose", action="store_true", help="also print per-element distances")
    match.set_defaults(func=cmd_match)

    ev_p = sub.add_parser("eval", help="CMC/mAP evaluation of a checkpoint")
    ev_p.add_argument("--manifest", required=True)
    ev_p.add_argument("--checkpoint", default=None, help="trained checkpoint (required unless --mode avepool)")
    ev_p.add_argument("--mode", choices=MODES, default=None, help="distance mode (default: checkpoint's)")
    ev_p.add_argument("--eval-per-id", type=int, default=0, help="evaluate only the last N instances per identity (default: all)")
    ev_p.add_argument("--k-max", type=_positive, default=20, help="deepest CMC rank (default %(default)s)")
    ev_p.add_argument("--threads", type=_positive, default=1, help="parallel query fan-out; 1 is the deterministic reference (default %(default)s)")
    ev_p.add_argument("--out", default=None, help="metrics CSV path (default stdout)")
    ev_p.set_defaults(func=cmd_eval)

    abl = sub.add_parser("ablate", help="R1/R5/R20/mAP table across distance modes")
    abl.add_argument("--manifest", required=True)
    abl.add_argument(
        "--checkpoint",
        action="append",
        default=[],
        metavar="MODE=PATH",
        help="trained checkpoint per mode (repeatable; avepool needs none)",
    )
    abl.add_argument("--eval-per-id", type=int, default=0, help="evaluate only the last N instances per identity (default: all)")
    abl.add_argument("--threads", type=_positive, default=1, help="parallel query fan-out (default %(default)s)")
    abl.add_argument("--out", default=None, help="metrics CSV path (default stdout)")
    abl.set_defaults(func=cmd_ablate)

    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec = dat.SyntheticSpec(
        num_identities=args.identities,
        sequences_per_identity=args.per_identity,
        seq_len=args.seq_len,
        dim=args.dim,
        corruption_fraction=args.corruption,
        misalignment=args.misalignment == "on",
        noise_scale=args.noise_scale,
        num_cameras=args.cameras,
        seed=args.seed if args.seed is not None else _env_seed(0),
    )
    manifest = dat.generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.items)} items for {manifest.num_identities} identities to {args.out}")
    return 0


def _effective_config(args) -> tr.TrainConfig:
    if args.config is not None:
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as err:
                raise DataError(f"{args.config}: not valid JSON ({err})") from err
        cfg = tr.config_from_dict(doc)
    else:
        cfg = tr.TrainConfig()
    doc = tr.config_to_dict(cfg)
    overrides = {
        "mode": args.mode,
        "dim": args.dim,
        "epochs": args.epochs,
        "steps_per_epoch": args.steps_per_epoch,
        "lr_initial": args.lr_initial,
        "lr_final": args.lr_final,
        "lr_drop_epoch": args.lr_drop_epoch,
        "seed": args.seed if args.seed is not None else (None if args.config else _env_seed(42)),
        "freeze_extractor": args.freeze_extractor,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    # the built-in drop epoch only makes sense relative to the built-in
    # epoch count; keep it inside the run when only --epochs was given
    if args.config is None and args.lr_drop_epoch is None and args.epochs is not None:
        doc["lr_drop_epoch"] = min(doc["lr_drop_epoch"], doc["epochs"])
    for key, value in (("gamma", args.gamma), ("lambda1", args.lambda1), ("lambda2", args.lambda2), ("p", args.p)):
        if value is not None:
            doc["loss"][key] = value
    if args.batch_p is not None:
        doc["batch"]["P"] = args.batch_p
    if args.batch_v is not None:
        doc["batch"]["V"] = args.batch_v
    return tr.config_from_dict(doc)


def cmd_train(args) -> int:
    config = _effective_config(args)
    manifest = dat.read_manifest(args.manifest)
    if args.eval_per_id > 0:
        manifest, _ = dat.split_manifest(manifest, args.eval_per_id)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume is not None:
        resume = tr.load_checkpoint(args.resume)
        if resume.model.mode != config.mode or resume.model.dim != config.dim:
            raise DataError(
                f"resume checkpoint is mode={resume.model.mode} dim={resume.model.dim}, "
                f"config wants mode={config.mode} dim={config.dim}"
            )
    with open(out_dir / "config.json", "w") as fh:
        json.dump(tr.config_to_dict(config), fh, indent=1)
        fh.write("\n")
    result = tr.train(manifest, config, log_path=out_dir / "metrics.csv", resume=resume)
    tr.save_checkpoint(out_dir / "checkpoint.dmck", result.model, result.epoch, result.rng_states)
    print(f"trained {config.mode} for {len(result.log_rows)} steps; checkpoint in {out_dir}")
    return 0


def _load_model(checkpoint: str | None, mode: str | None):
    if checkpoint is None:
        if mode != "avepool":
            raise UsageError("--checkpoint is required unless --mode avepool")
        return None
    return tr.load_checkpoint(checkpoint).model


def cmd_match(args) -> int:
    model = _load_model(args.checkpoint, args.mode)
    seq_a = dat.normalize_sequence(dat.read_fseq(args.fseq_a))
    seq_b = dat.normalize_sequence(dat.read_fseq(args.fseq_b))
    if args.mode == "avepool":
        print(f"distance: {baseline_avepool_distance(seq_a, seq_b)!r}")
        return 0
    report = distance_report(seq_a, seq_b, model.matcher, mode=args.mode)
    print(f"distance: {report.distance!r}")
    if args.verbose:
        print("d_a: " + " ".join(repr(float(v)) for v in report.d_a))
        print("d_b: " + " ".join(repr(float(v)) for v in report.d_b))
    return 0


def _eval_split(args) -> dat.DatasetManifest:
    manifest = dat.read_manifest(args.manifest)
    if args.eval_per_id > 0:
        _, manifest = dat.split_manifest(manifest, args.eval_per_id)
    return manifest


def _emit_metrics(rows: list[dict], out: str | None) -> None:
    if out is not None:
        ev.write_metrics_csv(rows=rows, path=out)
        return
    print(",".join(ev.METRIC_COLUMNS))
    for row in rows:
        print(",".join([row["mode"]] + [repr(float(row[c])) for c in ev.METRIC_COLUMNS[1:]]))


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint, args.mode)
    mode = args.mode or (model.mode if model is not None else "avepool")
    manifest = _eval_split(args)
    report = ev.evaluate_manifest(manifest, model, mode=mode, k_max=max(args.k_max, 20), threads=args.threads)
    rows = [
        {
            "mode": mode,
            "R1": report.rank(1),
            "R5": report.rank(5),
            "R20": report.rank(20),
            "mAP": report.map,
        }
    ]
    _emit_metrics(rows, args.out)
    return 0


def cmd_ablate(args) -> int:
    manifest = _eval_split(args)
    models: dict[str, tr.Model | None] = {"avepool": None}
    for spec in args.checkpoint:
        if "=" not in spec:
            raise UsageError(f"--checkpoint expects MODE=PATH, got {spec!r}")
        mode, path = spec.split("=", 1)
        if mode not in ev.ABLATION_MODES:
            raise UsageError(f"unknown ablation mode {mode!r}")
        models[mode] = tr.load_checkpoint(path).model
    missing = [m for m in ev.ABLATION_MODES if m not in models]
    if missing:
        raise UsageError(f"missing checkpoints for modes: {', '.join(missing)}")
    rows = ev.ablation_report(manifest, models, threads=args.threads)
    _emit_metrics(rows, args.out)
    return 0


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (DataError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
