"""Command-line entry point: ``grrnn gen|train|eval|inspect``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import os
import sys

from . import backbone, datagen, evaluation, training
from .backbone import BackboneConfig
from .dataset import load_manifest_splits
from .errors import ConfigurationError, InputError
from .imageproc import ImageMode
from .model import GRRNN
from .variants import ALL_KINDS, Axis, Kind, ModelVariant

log = logging.getLogger("grrnn")

KINDS = [k.value for k in ALL_KINDS]
AXES = [a.value for a in Axis]
MODES = [m.value for m in ImageMode]
PROTOCOLS = ("word", "line", "page", "feature")


def read_config(path):
    """``key = value`` lines; ``#`` starts a comment. Returns an argv prefix."""
    argv = []
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if value.lower() in ("true", "yes", "on") and flag in BOOL_FLAGS:
                argv.append(flag)
            elif value.lower() in ("false", "no", "off") and flag in BOOL_FLAGS:
                continue
            else:
                argv += [flag, value]
    return argv


BOOL_FLAGS = {"--no-augment", "--save-every-epoch", "--no-texture"}


def build_parser():
    p = argparse.ArgumentParser(prog="grrnn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value file; command-line flags win")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic corpus")
    g.add_argument("--writers", type=int, default=20)
    g.add_argument("--words", type=int, default=50)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--no-texture", action="store_true", help="flat ink, no gray texture")

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=KINDS, default="fgrr")
    t.add_argument("--axis", choices=AXES, default="horizontal")
    t.add_argument("--mode", choices=MODES, default="gray")
    t.add_argument("--width", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--halve-every", type=int, default=10)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--epsilon", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--save-every-epoch", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--protocol", choices=PROTOCOLS + ("all",), default="all")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--mode", choices=MODES, help="defaults to the training mode")
    e.add_argument("--variant", choices=KINDS, help="assert the checkpoint variant")
    e.add_argument("--axis", choices=AXES, help="assert the checkpoint axis")
    e.add_argument("--out", default="results.csv")
    e.add_argument("--per-writer", help="CSV of per-writer word top-1")

    i = sub.add_parser("inspect", help="parameter and FLOP counts")
    i.add_argument("--writers", type=int, default=657)
    i.add_argument("--variant", choices=KINDS)
    i.add_argument("--width", type=float, default=1.0)
    return p


def cmd_gen(args):
    rows = datagen.generate_corpus(args.writers, args.words, args.seed, args.out,
                                   texture=not args.no_texture)
    n_train = sum(r.split == "train" for r in rows)
    print(f"wrote {len(rows)} images ({n_train} train / {len(rows) - n_train} test) "
          f"to {args.out}")
    return 0


def _train_config(args):
    return training.TrainConfig(epochs=args.epochs, batch=args.batch, lr0=args.lr,
                                halve_every=args.halve_every,
                                weight_decay=args.weight_decay, epsilon=args.epsilon,
                                seed=args.seed, augment=not args.no_augment)


def _effective_config(args):
    skip = {"command", "config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def write_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in cfg.items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            fh.write(f"{k.replace('_', '-')} = {v}\n")


def cmd_train(args):
    tcfg = _train_config(args)
    if args.width <= 0:
        raise ConfigurationError("--width must be positive")
    variant = ModelVariant.parse(args.variant, args.axis)
    print(f"lr={tcfg.lr0:g} batch={tcfg.batch} epochs={tcfg.epochs} "
          f"decay={tcfg.weight_decay:g} epsilon={tcfg.epsilon:g} halve_every={tcfg.halve_every} "
          f"variant={variant} mode={args.mode} width={args.width:g} seed={tcfg.seed}")
    writers, train_split, _ = load_manifest_splits(args.manifest, args.mode)
    if len(train_split) == 0:
        raise InputError("empty training split")
    os.makedirs(args.out, exist_ok=True)
    write_config(os.path.join(args.out, "config.txt"), _effective_config(args))
    model = GRRNN(variant, len(writers), BackboneConfig(width=args.width), seed=tcfg.seed)
    extra = {"mode": args.mode, "writers": sorted(writers, key=writers.get),
             "train": {k: getattr(tcfg, k) for k in vars(tcfg)}}
    ckpt = os.path.join(args.out, "model.ckpt")

    def on_epoch(m, model):
        print(f"epoch {m.epoch:3d}  lr {m.lr:.3g}  loss {m.train_loss:.4f}  "
              f"top1 {m.train_top1:.4f}", flush=True)
        if args.save_every_epoch:
            training.save_checkpoint(model, os.path.join(args.out, f"epoch_{m.epoch:03d}.ckpt"),
                                     extra)

    result = training.train(model, train_split.images, train_split.labels, tcfg,
                            pad_value=ImageMode(args.mode).pad_value, on_epoch=on_epoch)
    training.save_checkpoint(model, ckpt, extra)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
        training.write_metrics(result.metrics, fh)
    print(f"wrote {ckpt}")
    return 0


def evaluate(model, mode, manifest, split, protocols):
    """Result rows (dicts) for each requested protocol plus per-writer word accuracy."""
    writers, train_split, test_split = load_manifest_splits(manifest, mode)
    if len(writers) != model.n_writers:
        raise ConfigurationError(
            f"manifest has {len(writers)} writers, checkpoint expects {model.n_writers}")
    data = train_split if split == "train" else test_split
    if len(data) == 0:
        raise InputError(f"no {split} samples in {manifest}")
    base = {"variant": model.variant.kind.value, "axis": model.variant.axis.value,
            "mode": mode}
    rows = []
    word = None
    if {"word", "line", "page"} & set(protocols):
        probs = model.predict_proba(data.images)
        word = [evaluation.PredictionRecord(s.sample_id, s.label, s.line_id, s.page_id, p)
                for s, p in zip(data.samples, probs)]
    for proto in protocols:
        if proto == "feature":
            models = evaluation.build_writer_models(
                model.extract_features(train_split.images), train_split.labels)
            acc = evaluation.feature_topk(model.extract_features(data.images),
                                          data.labels, models)
            rows.append(dict(base, protocol=proto, top1=acc[1], top5=acc[5]))
            continue
        recs = word if proto == "word" else evaluation.aggregate(word, proto)
        rows.append(dict(base, protocol=proto, top1=evaluation.topk_accuracy(recs, 1),
                         top5=evaluation.topk_accuracy(recs, 5)))
    per_writer = evaluation.per_writer_accuracy(word) if word else {}
    names = sorted(writers, key=writers.get)
    return rows, per_writer, names


def cmd_eval(args):
    model, header = training.load_checkpoint(args.ckpt)
    if args.variant and Kind(args.variant) is not model.variant.kind:
        raise ConfigurationError(
            f"checkpoint holds variant {model.variant.kind.value}, not {args.variant}")
    if args.axis and Axis(args.axis) is not model.variant.axis:
        raise ConfigurationError(
            f"checkpoint holds axis {model.variant.axis.value}, not {args.axis}")
    mode = args.mode or header.get("extra", {}).get("mode", "gray")
    protocols = PROTOCOLS if args.protocol == "all" else (args.protocol,)
    rows, per_writer, names = evaluate(model, mode, args.manifest, args.split, protocols)
    evaluation.write_results(args.out, rows)
    if args.per_writer and per_writer:
        evaluation.write_per_writer(args.per_writer, per_writer, names)
    for r in rows:
        print(f"{r['protocol']:8s} top1 {r['top1']:.4f}  top5 {r['top5']:.4f}")
    return 0


def cmd_inspect(args):
    cfg = BackboneConfig(width=args.width)
    kinds = [Kind(args.variant)] if args.variant else list(ALL_KINDS)
    print(f"{'variant':10s} {'params':>12s} {'FLOPs':>16s}   (N={args.writers}, "
          f"width={args.width:g})")
    for k in kinds:
        v = ModelVariant(k)
        params = backbone.count_params(v, args.writers, cfg)
        flops = backbone.count_flops(v, cfg)
        print(f"{k.value:10s} {params:12,d} {flops:16,d}   {params / 1e6:.2f}M  "
              f"{flops / 1e9:.2f}G")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            prefix = read_config(known.config)
        except (OSError, InputError) as exc:
            parser.error(str(exc))
        # config keys go right after the subcommand so real flags override them
        cmd_pos = next((i for i, a in enumerate(argv) if a in COMMANDS), None)
        if cmd_pos is None:
            parser.error("missing subcommand")
        argv = argv[:cmd_pos + 1] + prefix + argv[cmd_pos + 1:]
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"grrnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
