"""``camkit`` command line: synth, check, train, embed, eval, report.

Exit codes: 0 success, 1 validation failure, 2 runtime error, 64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, parse_value, worker_count
from .data import ImageFormatError, RecordError, SynthSpec, SynthSpecError, load_dataset, read_metadata, split_integrity_check, synth_generate
from .evaluation import ContractError, EmbeddingFormatError, evaluate_all, radar_svg, read_cemb, write_cemb, write_report
from .registry import ChannelRegistry
from .tasks import task_set
from .train import SamplerError, TrainConfig, embed_records, load_run, sweep_lr, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64

VALIDATION_ERRORS = (ConfigError, ContractError, ImageFormatError, RecordError, SynthSpecError, SamplerError, EmbeddingFormatError)


class UsageError(Exception):
    pass


class ValidationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> _Parser:
    p = _Parser(prog="camkit", description="Channel-adaptive embedding toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic varying-channel corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--train-per-class", type=int, default=167)
    s.add_argument("--test-per-class", type=int, default=40)

    c = sub.add_parser("check", help="validate split integrity of a metadata CSV")
    c.add_argument("--meta", required=True)
    c.add_argument("--tasks", default="chammi")

    t = sub.add_parser("train", help="train an embedding model")
    _data_args(t)
    t.add_argument("--out", required=True, help="run directory (model.camk, manifest.json)")
    t.add_argument("--config", help="key = value file; [section] headers prefix keys")
    t.add_argument("--strategy")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--image-size", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--paper-recipe", action="store_true", help="15 epochs, batch size 128")
    t.add_argument("--deterministic", action="store_true", help="sequential, reproducible execution")
    t.add_argument("--sweep-lr", type=int, metavar="N", help="run N log-spaced learning-rate trials")
    t.add_argument("--tasks", default="chammi")

    e = sub.add_parser("embed", help="export embeddings for every metadata row")
    _data_args(e)
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--out", required=True, help="output .cemb file")

    v = sub.add_parser("eval", help="score embeddings on the benchmark tasks")
    v.add_argument("--embeddings", required=True)
    v.add_argument("--meta", required=True)
    v.add_argument("--tasks", default="chammi")
    v.add_argument("--out", default="report.json")
    v.add_argument("--radar", help="also write a radar SVG here")
    v.add_argument("--all-classes", action="store_true", help="average F1 over the full label set")
    v.add_argument("--deterministic", action="store_true")
    v.add_argument("--skip-missing", action="store_true", help="ignore tasks without embeddings")

    r = sub.add_parser("report", help="summarise a report.json")
    r.add_argument("--report", required=True)
    r.add_argument("--radar", help="write a radar SVG here")
    return p


def _data_args(p):
    p.add_argument("--data", required=True, help="corpus root holding images and metadata")
    p.add_argument("--meta", help="metadata CSV (default <data>/metadata.csv)")
    p.add_argument("--channels", help="channel registry CSV (default <data>/channels.csv)")
    p.add_argument("--axis", type=int, default=0, choices=(0, 1), help="strip axis channels are stacked along")
    p.add_argument("--share-aliases", action="store_true", help="share weights between channels with equal aliases")
    p.add_argument("--skip-bad", action="store_true", help="log and skip unreadable records instead of failing")


def _corpus(args):
    root = Path(args.data)
    meta = Path(args.meta) if args.meta else root / "metadata.csv"
    chans = Path(args.channels) if args.channels else root / "channels.csv"
    if not chans.exists():
        raise ConfigError(f"channel registry {chans} not found")
    registry = ChannelRegistry.from_csv(chans, share_aliases=args.share_aliases)
    pairs = list(
        load_dataset(
            root, meta, registry, axis=args.axis, fail_fast=not args.skip_bad,
            deterministic=getattr(args, "deterministic", False), workers=worker_count(getattr(args, "deterministic", False)),
        )
    )
    images = {img.image_id: img for img, _ in pairs}
    records = [rec for _, rec in pairs]
    return registry, records, images


def _overrides(extra: list[str], sets: list[str]) -> dict:
    """Turn ``--model.embed_dim 32`` / ``--set model.embed_dim=32`` into a dict."""
    out = {}
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            k, v = tok[2:], extra[i + 1]
            i += 2
        out[k] = parse_value(v)
    return out


def _train_config(args, extra) -> TrainConfig:
    flat = load_config(args.config) if args.config else {}
    for flag, key in (("strategy", "strategy"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("lr", "lr"), ("seed", "seed"), ("image_size", "image_size")):
        val = getattr(args, flag)
        if val is not None:
            flat[key] = val
    flat.update(_overrides(extra, args.set))
    if args.deterministic:
        flat["deterministic"] = True
    base = TrainConfig.paper_recipe() if args.paper_recipe else TrainConfig()
    known = set(_flat_keys(base.to_dict()))
    unknown = [k for k in flat if k.replace("-", "_") not in known]
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig.from_flat(flat, base)


def _flat_keys(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flat_keys(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}"


def cmd_synth(args) -> int:
    spec = SynthSpec(image_size=args.image_size, train_per_class=args.train_per_class, test_per_class=args.test_per_class)
    summary = synth_generate(spec, args.seed, args.out)
    total = sum(summary["counts"].values())
    print(f"wrote {total} images to {args.out}")
    for k, v in summary["raw_pixel_iid_f1"].items():
        print(f"raw-pixel 1-NN macro-F1 {k}: {v:.3f}")
    return EXIT_OK


def cmd_check(args) -> int:
    violations = split_integrity_check(read_metadata(args.meta), task_set(args.tasks))
    for v in violations:
        print(v)
    if violations:
        print(f"{len(violations)} violation(s)", file=sys.stderr)
        return EXIT_INVALID
    print("splits ok")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    cfg = _train_config(args, extra)
    registry, records, images = _corpus(args)
    violations = split_integrity_check(records, task_set(args.tasks))
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        raise ValidationFailed(f"{len(violations)} split violation(s); refusing to train")
    out = Path(args.out)
    if args.sweep_lr is not None:
        res = sweep_lr(cfg, records, images, registry, task_set(args.tasks), args.sweep_lr)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
        for row in res["trials"]:
            print(f"lr {row['lr']:.3g}: score {row['score']:.4f}")
        print(f"best lr {res['best_lr']:.3g} (score {res['best_score']:.4f})")
        return EXIT_OK
    result = train(cfg, records, images, registry, out)
    print(f"trained {cfg.strategy} for {cfg.epochs} epochs; final loss {result.manifest.epoch_losses[-1]:.4f}")
    print(f"checkpoint: {out / 'model.camk'}")
    return EXIT_OK


def cmd_embed(args) -> int:
    registry, records, images = _corpus(args)
    model, cfg, _ = load_run(args.run, registry)
    emb = embed_records(model, records, images, cfg.image_size)
    write_cemb(args.out, emb)
    print(f"wrote {emb.rows} x {emb.dim} embeddings to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    emb = read_cemb(args.embeddings)
    records = read_metadata(args.meta)
    report = evaluate_all(
        emb, records, task_set(args.tasks), all_classes=args.all_classes,
        workers=worker_count(args.deterministic), skip_missing=args.skip_missing,
    )
    echo = {
        "tasks": args.tasks,
        "all_classes": args.all_classes,
        "embeddings_sha256": hashlib.sha256(Path(args.embeddings).read_bytes()).hexdigest(),
    }
    write_report(args.out, report, echo)
    for task, f1 in report.task_f1.items():
        print(f"{task}: {f1:.4f}")
    print(f"CPS: {report.cps:.4f}" if report.cps is not None else "CPS: n/a (generalization tasks missing)")
    if args.radar:
        Path(args.radar).write_text(radar_svg(report.task_f1, title="macro-F1 per task"))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
        task_f1 = doc["task_f1"]
    except (OSError, ValueError, KeyError) as exc:
        raise ContractError(f"cannot read report {args.report}: {exc}") from None
    width = max((len(t) for t in task_f1), default=4)
    for task, f1 in task_f1.items():
        print(f"{task:<{width}}  {f1:.4f}")
    cps = doc.get("cps")
    print(f"{'CPS':<{width}}  {cps:.4f}" if cps is not None else "CPS n/a")
    if args.radar:
        Path(args.radar).write_text(radar_svg(task_f1, title="macro-F1 per task"))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra and args.command != "train":
            raise UsageError(f"{parser.format_usage()}camkit: error: unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.command == "train":
            return cmd_train(args, extra)
        return {"synth": cmd_synth, "check": cmd_check, "embed": cmd_embed, "eval": cmd_eval, "report": cmd_report}[
            args.command
        ](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ValidationFailed as exc:
        print(f"camkit: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except VALIDATION_ERRORS as exc:
        print(f"camkit: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"camkit: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
