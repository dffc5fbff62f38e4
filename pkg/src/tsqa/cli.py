"""Command-line driver: data generation, training, evaluation, benchmarking,
checkpoint inspection.

Exit codes: 0 success, 2 I/O problems, 3 configuration or shape problems,
4 internal invariant violations.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, load_config, model_config_from

EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_INTERNAL = 4


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    sys.exit(code)


def _require_seed(args):
    if args.seed is None:
        _fail(EXIT_CONFIG, "an explicit --seed is required (reproducibility policy)")
    return args.seed


def _load(args):
    try:
        return load_config(args.config, overrides=args.override or [], seed=args.seed)
    except FileNotFoundError as exc:
        _fail(EXIT_IO, str(exc))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def cmd_gen_data(args):
    from .data import generate_dataset, split_records, write_manifest
    from .model import build_vocabulary

    seed = _require_seed(args)
    cfg = _load(args)
    d = cfg["data"]
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        probe = os.path.join(args.out_dir, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        _fail(EXIT_IO, f"output directory not writable: {exc}")
    counts = {t: d[t] for t in ("understanding", "perception", "reasoning", "decision")}
    records = generate_dataset(
        args.out_dir, seed,
        engines=d["engines"], cycles=d["cycles"], channels=d["channels"],
        length=d["length"], noise_scale=d["noise_scale"], counts=counts,
    )
    try:
        train, test = split_records(records, d["train_fraction"], seed)
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    write_manifest(os.path.join(args.out_dir, "train.jsonl"), train)
    write_manifest(os.path.join(args.out_dir, "test.jsonl"), test)
    build_vocabulary(records).save(os.path.join(args.out_dir, "vocab.txt"))
    cfg.seed = seed
    cfg.save(os.path.join(args.out_dir, "config.cfg"))
    print(f"wrote {len(records)} records ({len(train)} train, {len(test)} test) "
          f"to {args.out_dir}")


def _build_model(cfg, vocab, seed):
    from .model import QaModel

    return QaModel(model_config_from(cfg), vocab, seed)


def _load_vocab(path, pad_to=0):
    from .lm import Vocabulary

    vocab = Vocabulary.load(path)
    if pad_to > len(vocab):
        extra = [f"<filler_{i}>" for i in range(pad_to - len(vocab))]
        vocab = Vocabulary(vocab.tokens[5:] + extra)
    return vocab


def cmd_train(args):
    from .data import read_manifest
    from .train import TrainConfig, train

    seed = _require_seed(args)
    cfg = _load(args)
    manifest = os.path.join(args.data, "train.jsonl")
    vocab_path = os.path.join(args.data, "vocab.txt")
    for path in (manifest, vocab_path):
        if not os.path.exists(path):
            _fail(EXIT_IO, f"missing input file: {path}")
    records = read_manifest(manifest)
    vocab = _load_vocab(vocab_path, cfg["model"]["vocab_pad"])
    try:
        model = _build_model(cfg, vocab, seed)
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    t = cfg["train"]
    tc = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                     learning_rate=t["learning_rate"], grad_clip=t["grad_clip"],
                     seed=seed)
    os.makedirs(args.out, exist_ok=True)
    cfg.seed = seed
    cfg.save(os.path.join(args.out, "config.cfg"))
    vocab.save(os.path.join(args.out, "vocab.txt"))
    trainable, frozen, ratio = model.param_budget()
    print(f"parameters: trainable={trainable} frozen={frozen} ratio={ratio:.6f}")

    def progress(report):
        if report.step % 10 == 0 or not report.frozen_ok:
            print(f"step {report.step} epoch {report.epoch} "
                  f"loss {report.loss:.4f} grad_norm {report.grad_norm:.4f}")
        if not report.frozen_ok:
            _fail(EXIT_INTERNAL, "frozen parameters changed during training")

    reports = train(model, records, args.data, tc, args.out, progress=progress)
    if reports:
        print(f"final loss {reports[-1].loss:.6f} after {reports[-1].step} steps")
    print(f"checkpoint written to {os.path.join(args.out, 'checkpoint.itck')}")


def _restore(checkpoint_dir, seed):
    from .tensor import load_checkpoint

    cfg_path = os.path.join(checkpoint_dir, "config.cfg")
    ckpt_path = os.path.join(checkpoint_dir, "checkpoint.itck")
    vocab_path = os.path.join(checkpoint_dir, "vocab.txt")
    for path in (cfg_path, ckpt_path, vocab_path):
        if not os.path.exists(path):
            _fail(EXIT_IO, f"missing checkpoint file: {path}")
    cfg = load_config(cfg_path, seed=seed)
    vocab = _load_vocab(vocab_path)
    model = _build_model(cfg, vocab, cfg.seed or 0)
    try:
        model.load_state(load_checkpoint(ckpt_path))
    except (KeyError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    return cfg, model


def cmd_eval(args):
    from .data import read_manifest
    from .metrics import evaluate

    cfg, model = _restore(args.checkpoint, args.seed)
    manifest = os.path.join(args.data, "test.jsonl")
    if not os.path.exists(manifest):
        _fail(EXIT_IO, f"missing input file: {manifest}")
    records = read_manifest(manifest)
    limit = cfg["eval"]["limit"]
    if limit:
        records = records[:limit]
    report = evaluate(model, records, args.data,
                      max_answer_len=cfg["eval"]["max_answer_len"])
    print(report.to_table())
    print(report.to_json())


def cmd_bench(args):
    from .bench import run_grid, write_csv, write_plot_script

    cfg = _load(args)
    b = cfg["bench"]
    grids = {k: cfg.int_list("bench", k) for k in ("v_grid", "l_grid", "lq_grid")}
    if args.grid == "small":
        grids = {"v_grid": [4, 8], "l_grid": [10, 25], "lq_grid": [16, 64]}
    os.makedirs(args.out, exist_ok=True)
    points = run_grid(
        grids["v_grid"], grids["l_grid"], grids["lq_grid"],
        n=cfg["model"]["lit_length"], d=cfg["model"]["d"], heads=cfg["model"]["heads"],
        reps=b["reps"], warmup=b["warmup"], seed=args.seed or 0,
    )
    csv_path = os.path.join(args.out, "efficiency.csv")
    write_csv(csv_path, points)
    write_plot_script(os.path.join(args.out, "efficiency.gp"), csv_path,
                      grids["v_grid"], grids["l_grid"], grids["lq_grid"])
    largest = points[-1]
    print(f"wrote {len(points)} benchmark points to {csv_path}")
    print(f"largest point V={largest.v} Lp={largest.l_p}: "
          f"two-stage {largest.ita_time_ms:.3f} ms vs "
          f"flattened {largest.cross_time_ms:.3f} ms "
          f"(speedup {largest.speedup:.2f}x)")


def cmd_inspect(args):
    from .train import analytic_param_counts

    if args.checkpoint:
        cfg, model = _restore(args.checkpoint, args.seed)
    else:
        cfg = _load(args)
        vocab = _make_synthetic_vocab(cfg["model"]["vocab_pad"])
        model = _build_model(cfg, vocab, args.seed or 0)
    trainable, frozen, ratio = model.param_budget()
    expected_t, expected_f = analytic_param_counts(model.cfg, len(model.vocab.tokens))
    print(f"trainable parameters: {trainable}")
    print(f"frozen parameters:    {frozen}")
    print(f"trainable ratio:      {ratio:.6f}")
    if (trainable, frozen) != (expected_t, expected_f):
        _fail(EXIT_INTERNAL,
              f"parameter count mismatch: got {(trainable, frozen)}, "
              f"formula says {(expected_t, expected_f)}")
    print("module shapes:")
    for prefix in ("psi", "enc", "lm"):
        group = [(k, v.shape) for k, v in sorted(model.params.items())
                 if k.startswith(prefix + ".")]
        total = sum(model.params[k].size for k, _ in group)
        print(f"  {prefix}: {len(group)} tensors, {total} values")
        for name, shape in group[:4]:
            print(f"    {name} {tuple(shape)}")
        if len(group) > 4:
            print(f"    ... {len(group) - 4} more")


def _make_synthetic_vocab(pad_to):
    from .lm import Vocabulary

    base = [f"word{i}" for i in range(max(pad_to - 5, 32))]
    return Vocabulary(base)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tsqa",
        description="Temporal-textual QA pipeline: synthetic data, alignment "
                    "training, evaluation, and attention benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", help="configuration file (key=value sections)")
            p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a single configuration value")
        p.add_argument("--seed", type=int, help="global random seed")

    p = sub.add_parser("gen-data", help="generate the synthetic QA corpus")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run alignment-only fine-tuning")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory for the checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(p, needs_config=False)
    p.add_argument("--checkpoint", required=True, help="directory written by train")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="attention efficiency sweep")
    common(p)
    p.add_argument("--grid", choices=["small", "default"], default="default")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="parameter budget and module shapes")
    common(p)
    p.add_argument("--checkpoint", help="directory written by train")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except SystemExit:
        raise
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except AssertionError as exc:
        _fail(EXIT_INTERNAL, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
