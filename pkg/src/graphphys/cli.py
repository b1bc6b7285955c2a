"""Command-line entry point: generate, train, eval, inverse-sample, gradcheck.

Exit status is 0 on success, 1 when a command fails at run time and 2 for
usage errors (bad flags, unreadable or invalid config files).
"""

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset as ds
from . import evaluate as ev
from . import fdsuite
from . import model as M
from . import sim
from . import train as tr
from .errors import ConfigError

MODEL_KEYS = ("k", "hidden", "layers", "edge_hidden", "decoder_hidden", "flow_layers",
              "flow_components", "bilinear_channels", "invdec_hidden")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- #
# config files

def _coerce(raw, default, key):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except ValueError:
        raise UsageError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None


def parse_config(text, source="<config>"):
    """Parse ``key = value`` lines into (TrainConfig kwargs, model kwargs).

    Blank lines and ``#`` comments are ignored; unknown or repeated keys are
    errors.
    """
    train_defaults = tr.TrainConfig()
    model_defaults = M.ModelConfig()
    train_kw, model_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in train_kw or key in model_kw:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        if key in tr.TrainConfig.field_names():
            train_kw[key] = _coerce(value, getattr(train_defaults, key), key)
        elif key in MODEL_KEYS:
            model_kw[key] = _coerce(value, getattr(model_defaults, key), key)
        else:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
    return train_kw, model_kw


def read_config(path):
    if path is None:
        return {}, {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path)


# --------------------------------------------------------------------------- #
# subcommands

def cmd_generate(args):
    seeds = np.random.SeedSequence(args.seed).generate_state(args.sims, dtype=np.uint32)
    names = []
    for i, s in enumerate(seeds):
        cfg = sim.SimConfig(system=args.system, force_exponent=args.force_exponent, fps=args.fps,
                            steps=args.steps, n_particles=args.particles, seed=int(s))
        bundle = sim.run(cfg)
        name = f"sim_{i:03d}"
        sim.save_bundle(bundle, os.path.join(args.out, name))
        names.append(name)
        print(f"generated {name} ({cfg.system}, {cfg.n_particles} particles, {cfg.steps} steps @ {cfg.fps} fps)")
    if args.sims >= 2:
        train, test = ds.split(names, args.split_ratio, args.seed)
        ds.write_split(args.out, train, test, args.split_ratio, args.seed)
        print(f"split: {len(train)} train / {len(test)} test -> {os.path.join(args.out, 'split.json')}")
    return 0


def cmd_train(args):
    train_kw, model_kw = read_config(args.config)
    try:
        tcfg = tr.TrainConfig(**train_kw)
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    data = ds.Dataset.from_dir(args.data, k=model_kw.get("k", ds.DEFAULT_K))
    try:
        cfg = tr.model_config_for(data, tcfg, model_kw)
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    os.makedirs(args.out, exist_ok=True)
    extra = {"train_config": dataclasses.asdict(tcfg), "norm": data.stats.to_dict(),
             "fps": data.train_bundles[0].config.fps}

    def save(params, history):
        buffers = {}
        if cfg.use_inverse:
            buffers["cond_bank"] = tr.condition_bank(data, params, cfg)
        M.save_checkpoint(args.out, params, cfg, extra=dict(extra, epochs_done=len(history)),
                          buffers=buffers)
        tr.write_history(os.path.join(args.out, "history.csv"), history)

    def on_epoch(epoch, params, history):
        if tcfg.checkpoint_every > 0 and epoch % tcfg.checkpoint_every == 0:
            save(params, history)

    epochs = tcfg.resolved_epochs(cfg.system)
    per_epoch = tcfg.resolved_samples(cfg.system, len(data.index("train")))
    print(f"training {cfg.system}: {epochs} epochs x {per_epoch} samples, batch {tcfg.batch_size}")
    params, cfg, history = tr.train(data, tcfg, cfg, on_epoch=on_epoch, log=print)
    save(params, history)
    print(f"wrote checkpoint and history to {args.out}")
    return 0


def load_model(path):
    params, cfg, extra, buffers = M.load_checkpoint(path)
    return params, cfg, extra, buffers


def cmd_eval(args):
    params, cfg, extra, _ = load_model(args.model)
    stats = ds.NormStats.from_dict(extra["norm"]) if "norm" in extra else None
    data = ds.Dataset.from_dir(args.data, k=cfg.k, stats=stats)
    if data.system != cfg.system:
        raise ConfigError(f"model was trained on {cfg.system} but data holds {data.system}")
    ev.evaluate(params, cfg, data, args.out, seed=args.seed, log=print)
    print(f"wrote reports to {args.out}")
    return 0


def sample_masses_from_bank(params, cfg, bank, count, seed):
    """Draw ``count`` masses: each from the flow conditioned on a random bank row."""
    rng = np.random.default_rng(seed)
    rows = bank[rng.integers(0, bank.shape[0], size=count)]
    layers = M.flow_layers(M.ad.constant(rows), M.frozen(params), cfg)
    z_k = M.flow_sample(layers, rng.standard_normal((count, 1)))
    return M.destandardize_mass(z_k.data[:, 0], cfg)


def cmd_inverse_sample(args):
    params, cfg, _, buffers = load_model(args.model)
    if not cfg.use_inverse or "cond_bank" not in buffers:
        raise ConfigError("checkpoint has no inverse model")
    masses = sample_masses_from_bank(params, cfg, buffers["cond_bank"], args.count, args.seed)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mass"])
        for m in masses:
            w.writerow([repr(float(m))])
    print(f"wrote {args.count} posterior mass samples to {args.out}")
    return 0


def cmd_gradcheck(args):
    results = fdsuite.run_suite(seeds=args.seeds, log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# --------------------------------------------------------------------------- #

def _positive(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="graphphys", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=_positive, default=1,
                        help="BLAS threads (default 1; results may differ by float reordering)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate trajectories and write a train/test split")
    g.add_argument("--system", required=True, choices=sim.SYSTEMS)
    g.add_argument("--force-exponent", type=int, choices=(1, 2), default=2)
    g.add_argument("--sims", type=_positive, default=10)
    g.add_argument("--steps", type=_positive, default=1000)
    g.add_argument("--fps", type=_positive, default=10)
    g.add_argument("--particles", type=int, default=0, help="0 picks the system default")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split-ratio", type=float, default=0.8, help="training fraction of simulations")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model to a generated data directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value file (optional; defaults otherwise)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the held-out split")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("inverse-sample", help="draw masses from the trained posterior")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=_positive, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_inverse_sample)

    c = sub.add_parser("gradcheck", help="finite-difference check of autodiff and every loss path")
    c.add_argument("--seeds", type=_positive, default=fdsuite.DEFAULT_SEEDS)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError, ArithmeticError, RuntimeError, ValueError, IndexError) as exc:
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
