"""Command-line interface: stylemt <subcommand> [options].

Exit codes: 0 ok, 1 other library error, 2 usage, 3 data, 4 config,
5 numeric divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .bench import BenchConfig, bench_throughput
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SYNTH_TAXONOMY, SplitSpec, SynthConfig, decode_image, generate_splits, load_dataset,
                   load_labelmap, load_taxonomy, read_manifest, synth_style_dataset, write_id_list)
from .errors import ConfigError, NumericError, StyleMTError, UsageError
from .evo import EvoConfig, KFoldFitness, StubFitness, decode, default_space, evolve, format_log
from .model import ModelConfig, attention_map_pgm, attention_map_text, export_attention_map
from .train import TrainConfig, evaluate, train
from .vision import EncoderConfig

log = logging.getLogger("stylemt")

# hyperparameter names accepted in config files and on the command line
ENCODER_KEYS = {"truncate_layer": "truncate_after_layer", "patch_size": "patch_size", "ndf": "ndf",
                "extra_layers": "extra_layers", "widths": "widths"}
MODEL_KEYS = {"use_attention", "patch_div", "gram_channels", "d_model", "ff_dim", "positional",
              "use_token_attention", "use_channel_attention", "attn_dim", "gram_matrix_size", "rtmg_mode",
              "hidden_dims", "num_layers", "attn_tau", "attn_use_se", "attn_softmax_spatial", "attn_tv_lambda",
              "focal_gamma", "weight_mode", "input_size"}
MODEL_ALIASES = {"attention_layers": "refiner_layers", "attention_heads": "refiner_heads",
                 "refiner_layers": "refiner_layers", "refiner_heads": "refiner_heads",
                 "class_weight_cap": "weight_cap"}
TRAIN_KEYS = {"batch_size", "lr", "weight_decay", "momentum", "epochs", "optimizer", "schedule", "folds",
              "freeze", "patience", "grad_clip"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _literal(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_configs(family, overrides, taxonomy, seed):
    """Build (ModelConfig, TrainConfig) from family defaults plus named overrides."""
    enc = EncoderConfig() if family in ("PM", "PMG") else EncoderConfig(family="residual")
    rtm = family in ("RTM", "RTMG")
    tc = TrainConfig(seed=seed, optimizer="sgd_momentum" if rtm else "adamw",
                     schedule="constant" if rtm else "cosine", lr=0.01 if rtm else 3e-3)
    mkw, ekw, tkw = {}, {}, {}
    for key, val in overrides.items():
        if key in ENCODER_KEYS:
            ekw[ENCODER_KEYS[key]] = tuple(val) if key == "widths" else val
        elif key in MODEL_KEYS:
            mkw[key] = val
        elif key in MODEL_ALIASES:
            mkw[MODEL_ALIASES[key]] = val
        elif key == "use_focal":
            mkw["loss"] = "focal" if val else "weighted_ce"
        elif key == "loss":
            mkw["loss"] = val
        elif key in TRAIN_KEYS:
            tkw[key] = val
        else:
            raise ConfigError(f"unknown hyperparameter {key!r}")
    mc = ModelConfig(family=family, encoder=replace(enc, **ekw), taxonomy=taxonomy, seed=seed, **mkw)
    return mc.validate(), replace(tc, **tkw).validate()


def _overrides(args):
    out = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            out.update(json.load(fh))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _literal(v.strip())
    for k in ("epochs", "lr", "batch_size"):
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _taxonomy(path):
    return load_taxonomy(path) if path else load_taxonomy()


def _sha(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(path, command, argv, resolved, seed, outputs=()):
    rec = {"tool": "stylemt", "version": __version__, "command": command, "argv": list(argv),
           "seed": seed, "resolved": resolved, "python": platform.python_version(),
           "numpy": np.__version__, "outputs": {o: _sha(o) for o in outputs if os.path.isfile(o)}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rec, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")


def _manifest_path(args, default_base):
    return args.run_manifest or f"{default_base}.run.json"


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, argv):
    cfg = SynthConfig(args.n_train, args.n_test, args.size)
    ds = synth_style_dataset(cfg, args.seed, args.out)
    print(f"wrote {cfg.n_train} train / {cfg.n_test} test images to {ds.root}")
    print(f"train manifest {ds.train_manifest}\ntest manifest  {ds.test_manifest}\ntaxonomy       {ds.taxonomy_file}")
    write_run_manifest(_manifest_path(args, os.path.join(args.out, "synth")), "synth", argv, asdict(cfg), args.seed,
                       [ds.train_manifest, ds.test_manifest, ds.taxonomy_file])


def cmd_split(args, argv):
    tax = _taxonomy(args.taxonomy)
    records = read_manifest(args.manifest, tax)
    spec = SplitSpec(args.min_gap, args.train_quota, args.test_quota, args.test_fraction, args.seed)
    tr, te, rep = generate_splits(records, spec)
    os.makedirs(args.out, exist_ok=True)
    paths = [os.path.join(args.out, n) for n in ("train_ids.txt", "test_ids.txt", "split_report.json")]
    write_id_list(paths[0], tr)
    write_id_list(paths[1], te)
    with open(paths[2], "w", encoding="utf-8") as fh:
        fh.write(rep.to_json() + "\n")
    print(f"train {rep.n_train} (mean gap {rep.mean_gap_train}), test {rep.n_test} (mean gap {rep.mean_gap_test})")
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    write_run_manifest(_manifest_path(args, os.path.join(args.out, "split")), "split", argv, asdict(spec),
                       args.seed, paths)


def cmd_train(args, argv):
    tax = _taxonomy(args.taxonomy)
    mc, tc = resolve_configs(args.family, _overrides(args), tax, args.seed)
    data = load_dataset(args.train, tax)
    val = load_dataset(args.val, tax) if args.val else None
    try:
        res = train(mc, tc, data, val)
    except NumericError as e:
        if e.last_good is not None:
            save_checkpoint(args.out + ".last_good", e.last_good)
            print(f"diverged; last good checkpoint written to {args.out}.last_good", file=sys.stderr)
        raise
    save_checkpoint(args.out, res.checkpoint)
    for h in res.history:
        extra = f" val_mean_f1 {h['val_mean_f1']:.6f}" if "val_mean_f1" in h else ""
        print(f"epoch {h['epoch']:3d} loss {h['loss']:.6f}{extra}")
    outputs = [args.out]
    if res.report is not None:
        print(f"final val mean F1 {res.report.mean_f1():.6f}")
        if args.metrics_out:
            with open(args.metrics_out, "w", encoding="utf-8") as fh:
                fh.write(res.report.to_text())
            outputs.append(args.metrics_out)
    counts = res.model.parameter_counts()
    print("parameters " + " ".join(f"{k}={v}" for k, v in counts.items()))
    write_run_manifest(_manifest_path(args, args.out), "train", argv,
                       {"model": mc.to_dict(), "train": tc.to_dict()}, args.seed, outputs)


def _model_with_heads(ckpt, heads):
    model = ckpt.to_model()
    if heads:
        wanted = [h.strip() for h in heads.split(",") if h.strip()]
        for t in wanted:
            if t not in model.heads:
                raise ConfigError(f"checkpoint has no head {t!r}")
        for t in model.task_names:
            model.set_head_enabled(t, t in wanted)
    return model


def cmd_evaluate(args, argv):
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_with_heads(ckpt, args.heads)
    lm = load_labelmap(args.labelmap) if args.labelmap else None
    tax = _taxonomy(args.taxonomy) if args.taxonomy else (lm.target_taxonomy() if lm else ckpt.taxonomy)
    data = load_dataset(args.manifest, tax)
    rep = evaluate(model, data, labelmap=lm)
    text = rep.to_text()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    for t, m in rep.tasks.items():
        print(f"{t}: n={m.n} accuracy={m.accuracy:.6f} weighted_f1={m.weighted_f1:.6f}")
    print(f"mean F1 {rep.mean_f1():.6f}")
    write_run_manifest(_manifest_path(args, args.out or "stylemt-evaluate"), "evaluate", argv,
                       {"checkpoint": _sha(args.checkpoint), "heads": model.enabled_tasks()}, ckpt.seed,
                       [args.out] if args.out else [])


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cmd_infer(args, argv):
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_with_heads(ckpt, args.heads)
    img = decode_image(args.image)[None]
    model.eval()
    out = model.forward(img)
    for t, lg in out.items():
        p = _softmax(lg.astype(np.float64))[0]
        k = int(np.argmax(p))
        print(f"{t}\t{model.taxonomy.task(t).classes[k]}\t{p[k]:.4f}")
    outputs = []
    if args.attention_map:
        amap = export_attention_map(model, args.attention_map, img)
        path = args.map_out or f"{args.attention_map.replace(' ', '_')}.pgm"
        if path.endswith(".txt"):
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(attention_map_text(amap))
        else:
            with open(path, "wb") as fh:
                fh.write(attention_map_pgm(amap))
        outputs.append(path)
    write_run_manifest(_manifest_path(args, "stylemt-infer"), "infer", argv,
                       {"checkpoint": _sha(args.checkpoint), "image": args.image, "heads": model.enabled_tasks()},
                       ckpt.seed, outputs)


def cmd_hpo(args, argv):
    space = default_space(args.family)
    cfg = EvoConfig(population=args.population, generations=args.generations, seed=args.seed,
                    folds=args.folds, budget_epochs=args.epochs, mutation_p=args.mutation_p)
    if args.stub:
        fitness, tax = StubFitness(space), SYNTH_TAXONOMY
    else:
        if not args.train:
            raise UsageError("hpo needs --train unless --stub is given")
        tax = _taxonomy(args.taxonomy)
        fitness = KFoldFitness(space, load_dataset(args.train, tax), args.folds, args.epochs)
    res = evolve(cfg, space, fitness, checkpoint=args.checkpoint, resume=args.resume, workers=args.workers)
    text = format_log(res.log)
    sys.stdout.write(text)
    mc, tc, notes = decode(res.best_genome, space, tax)
    print(f"best fitness {res.best_fitness:.6f} genome {list(res.best_genome)}")
    print("best " + json.dumps(space.values(res.best_genome), sort_keys=True))
    outputs = []
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        outputs.append(args.out)
    write_run_manifest(_manifest_path(args, args.out or "stylemt-hpo"), "hpo", argv,
                       {"evo": asdict(cfg), "family": args.family, "stub": args.stub}, args.seed, outputs)


def cmd_bench(args, argv):
    before = _sha(args.checkpoint)
    heads = [h.strip() for h in args.heads.split(",")] if args.heads else None
    cfg = BenchConfig(args.checkpoint, args.source, args.frame_size, args.duration, args.warmup, heads,
                      args.repetitions, args.mode)
    rep = bench_throughput(cfg)
    std = f" +- {rep.std_fps:.2f}" if rep.std_fps is not None else ""
    print(f"fps {rep.mean_fps:.2f}{std} over {args.repetitions} repetitions ({rep.frames} frames)")
    print("latency ms " + " ".join(f"{k}={v:.3f}" for k, v in rep.latency_ms.items()))
    print("heads " + ",".join(t for t, on in rep.heads.items() if on))
    if _sha(args.checkpoint) != before:
        raise StyleMTError("checkpoint changed during the benchmark")
    outputs = []
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rep.to_dict(), fh, sort_keys=True, indent=1)
        outputs.append(args.out)
    write_run_manifest(_manifest_path(args, args.out or "stylemt-bench"), "bench", argv, asdict(cfg), cfg.seed,
                       outputs)


def cmd_inspect(args, argv):
    ckpt = load_checkpoint(args.checkpoint)
    head = ckpt.header()
    model = ckpt.to_model()
    summary = {"version": head["version"], "family": ckpt.model_config["family"],
               "tasks": model.task_names, "seed": ckpt.seed, "epochs_trained": len(ckpt.history),
               "tensors": len(head["tensors"]), "blob_elements": head["blob_elements"],
               "parameters": model.parameter_counts()}
    print(json.dumps(summary, indent=1))
    if args.full:
        print(json.dumps(head, indent=1, sort_keys=True))
    write_run_manifest(_manifest_path(args, "stylemt-inspect"), "inspect", argv,
                       {"checkpoint": _sha(args.checkpoint)}, ckpt.seed)


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="stylemt", description="Style-biased multi-task attribute classification.")
    p.add_argument("--version", action="version", version=f"stylemt {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--run-manifest", help="where to write the run manifest")
        return sp

    s = common(sub.add_parser("synth", help="write the synthetic style dataset"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=int, default=600)
    s.add_argument("--n-test", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(fn=cmd_synth)

    s = common(sub.add_parser("split", help="source-stratified train/test id lists"))
    s.add_argument("--manifest", required=True)
    s.add_argument("--taxonomy")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-gap", type=int, default=1)
    s.add_argument("--train-quota", type=int)
    s.add_argument("--test-quota", type=int)
    s.add_argument("--test-fraction", type=float, default=0.1)
    s.set_defaults(fn=cmd_split)

    s = common(sub.add_parser("train", help="train a model"))
    s.add_argument("--family", choices=("PM", "PMG", "RTM", "RTMG"), default="PMG")
    s.add_argument("--train", required=True, help="training manifest")
    s.add_argument("--val", help="validation manifest (early stopping)")
    s.add_argument("--taxonomy")
    s.add_argument("--config", help="JSON file of hyperparameters")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one hyperparameter")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--metrics-out")
    s.set_defaults(fn=cmd_train)

    s = common(sub.add_parser("evaluate", help="metrics of a checkpoint on a manifest"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--taxonomy")
    s.add_argument("--labelmap")
    s.add_argument("--heads", help="comma-separated subset of heads")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = common(sub.add_parser("infer", help="predict one image"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("image")
    s.add_argument("--heads")
    s.add_argument("--attention-map", metavar="TASK")
    s.add_argument("--map-out")
    s.set_defaults(fn=cmd_infer)

    s = common(sub.add_parser("hpo", help="evolutionary hyperparameter search"))
    s.add_argument("--family", choices=("PM", "PMG", "RTM", "RTMG"), default="PMG")
    s.add_argument("--train")
    s.add_argument("--taxonomy")
    s.add_argument("--stub", action="store_true", help="analytic fitness, no training")
    s.add_argument("--population", type=int, default=12)
    s.add_argument("--generations", type=int, default=10)
    s.add_argument("--mutation-p", type=float, default=0.2)
    s.add_argument("--folds", type=int, default=2)
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--checkpoint", help="generation checkpoint file")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_hpo)

    s = common(sub.add_parser("bench", help="frame-wise throughput"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--source", help="directory of .ppm frames (default: synthetic)")
    s.add_argument("--frame-size", type=int)
    s.add_argument("--duration", type=float, default=3.0)
    s.add_argument("--warmup", type=float, default=0.5)
    s.add_argument("--heads")
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--mode", choices=("async", "serial"), default="async")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)

    s = common(sub.add_parser("inspect", help="checkpoint header and parameter counts"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--full", action="store_true")
    s.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (see stylemt --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.fn(args, argv)
        return 0
    except StyleMTError as e:
        print(f"stylemt: error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"stylemt: error: {e}", file=sys.stderr)
        return 3
    except SystemExit as e:       # --help / --version
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
