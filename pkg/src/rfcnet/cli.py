"""Command-line entry point: ``rfcnet {analyze,chains,gradcheck,train,eval,predict}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .autodiff import INIT_SCHEMES, Tensor, grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSpec, gen_synthetic, load_dataset, load_directory, save_mask
from .errors import CheckpointFormatError, ConfigError, DataLoadError
from .ldcs import MERGE_MODES
from .net import PRESETS, RfcConfig, build_rfc_net, enumerate_chains, receptive_field
from .training import RECIPES, TrainConfig, evaluate, ohem_ce, predict_masks, train_loop

log = logging.getLogger("rfcnet")

SEED_ENV = "RFCNET_SEED"


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


def _kernels(text: str) -> tuple:
    try:
        return tuple(int(k) for k in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"kernels must be comma-separated integers, got {text!r}") from None


def _pair(text: str) -> tuple:
    return _kernels(text)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network")
    g.add_argument("--preset", choices=sorted(PRESETS), help="variant shortcut pinning m and kernels")
    g.add_argument("--m", type=int, help="branching factor")
    g.add_argument("--kernels", type=_kernels, help="comma-separated strong kernel sizes, one per branch")
    g.add_argument("--depth", type=int, default=3)
    g.add_argument("--width", type=int, default=16, help="channels per tree group")
    g.add_argument("--stem", type=_pair, default=None, help="c1,c2 stem widths (default width,width)")
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--merge", choices=MERGE_MODES, default="concat")
    g.add_argument("--init", choices=INIT_SCHEMES, default="he")
    g.add_argument("--no-bias", action="store_true")
    g.add_argument("--seed", type=int, default=int(os.environ.get(SEED_ENV, "0")))


def _config(args, parser: argparse.ArgumentParser) -> RfcConfig:
    if args.preset and (args.m is not None or args.kernels is not None):
        parser.error("--preset cannot be combined with --m/--kernels")
    if args.preset:
        m, kernels = PRESETS[args.preset]
    else:
        if args.m is None or args.kernels is None:
            parser.error("give either --preset or both --m and --kernels")
        m, kernels = args.m, args.kernels
    try:
        return RfcConfig(m=m, kernels=kernels, depth=args.depth, width=args.width,
                         stem_widths=args.stem, num_classes=args.classes, merge=args.merge,
                         seed=args.seed, include_bias=not args.no_bias, init=args.init)
    except ConfigError as e:
        parser.error(str(e))


def _add_data_flags(p: argparse.ArgumentParser, default_samples: int = 200) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--synthetic", action="store_true", help="use generated blob images")
    g.add_argument("--samples", type=int, default=default_samples)
    g.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    g.add_argument("--data-seed", type=int, default=None, help="defaults to --seed")
    g.add_argument("--data", type=Path, help="directory with images/ and masks/ (optional manifest.txt)")
    g.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"), help="resize target for --data")
    g.add_argument("--recipe", choices=sorted(RECIPES), help="dataset recipe (resize and schedule)")
    g.add_argument("--threads", type=int, default=1, help="parallel file loading")


def _datasets(args, parser) -> tuple:
    if args.synthetic == bool(args.data):
        parser.error("choose exactly one of --synthetic and --data")
    seed = args.seed if args.data_seed is None else args.data_seed
    if args.synthetic:
        n_train = int(round(args.samples * 0.8))
        spec = DatasetSpec("synthetic", tuple(args.size), (n_train, args.samples - n_train), seed)
        return load_dataset(spec)
    if not args.data.is_dir():
        raise CliError(f"data directory not found: {args.data}")
    resize = args.resize or (RECIPES[args.recipe].resize if args.recipe else None)
    if resize is None:
        parser.error("--data needs --resize or --recipe")
    return load_dataset(DatasetSpec("directory", tuple(resize), seed=seed, path=str(args.data)),
                        threads=args.threads)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_analyze(args, parser) -> int:
    config = _config(args, parser)
    h, w = args.input_size
    if h % 4 or w % 4:
        parser.error("--input-size must be divisible by 4")
    report = analysis.count_flops(build_rfc_net(config), h, w)
    if args.csv:
        sys.stdout.write(report.to_csv())
        return 0
    ks = ",".join(map(str, config.kernels))
    print(f"RFC-Net m={config.m} kernels={ks} depth={config.depth} width={config.width} "
          f"stem={config.stem_widths[0]},{config.stem_widths[1]} merge={config.merge} "
          f"bias={'on' if config.include_bias else 'off'}")
    print(report.to_text())
    print()
    print("analytic vs enumerated (weights only, biases excluded):")
    for name, analytic, corr, enumerated, ok in report.reconciliation():
        extra = f" + concat correction {corr}" if corr else ""
        print(f"  {name:<10} analytic {analytic}{extra} = {analytic + corr}  enumerated {enumerated}  "
              f"{'OK' if ok else 'MISMATCH'}")
    if config.merge == "concat":
        total_corr = sum(r.correction for r in report.rows)
        print(f"  concat merge: fuse convs see 2c inputs, adding d_next^2/n_next per layer "
              f"({total_corr} weights in total) beyond the closed form; use --merge add for an exact match")
    print(f"  LDCS tree weights {analysis.ldcs_tree_params(config)} vs strongly-connected tree "
          f"{analysis.sdcs_tree_params(config)}")
    print()
    print(report.conventions)
    print()
    print(analysis.published_reference(args.preset))
    return 0


def cmd_chains(args, parser) -> int:
    config = _config(args, parser)
    print(f"{'leaf':>6}  {'kernels':<24}{'rf':>6}")
    for chain in enumerate_chains(config):
        seq = ",".join(map(str, chain.kernel_sequence))
        print(f"{chain.leaf_index:>6}  {seq:<24}{receptive_field(chain, config):>6}")
    return 0


def cmd_gradcheck(args, parser) -> int:
    config = _config(args, parser)
    if args.tiny:
        config = RfcConfig(m=config.m, kernels=config.kernels, depth=min(config.depth, 2), width=2,
                           stem_widths=(2, 2), num_classes=config.num_classes, merge=config.merge,
                           seed=config.seed, include_bias=config.include_bias, init=config.init)
        size = 8
    else:
        size = args.input_size
    model = build_rfc_net(config, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    x = Tensor(rng.standard_normal((1, 3, size, size)), dtype=np.float64)
    target = rng.integers(0, config.num_classes, size=(1, size, size))

    def loss(tensors):
        return ohem_ce(model(tensors[0]), target, threshold=0.7, min_kept=max(1, target.size // 16))

    err = grad_check(loss, [x] + model.parameters(), eps=args.eps, max_coords=args.max_coords,
                     seed=config.seed)
    print(f"parameters: {sum(p.size for p in model.parameters())}  input: 1x3x{size}x{size}")
    print(f"max relative error: {err:.3e}  (tolerance {args.tol:.0e})")
    ok = err <= args.tol
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _train_config(args) -> TrainConfig:
    kw = {}
    if args.recipe:
        r = RECIPES[args.recipe]
        kw.update(step_size=r.step_size, epochs=r.epochs, batch_size=r.batch_size)
    for flag, field in (("epochs", "epochs"), ("lr", "base_lr"), ("batch_size", "batch_size"),
                        ("step_size", "step_size"), ("gamma", "gamma"), ("momentum", "momentum"),
                        ("weight_decay", "weight_decay"), ("ohem_threshold", "ohem_threshold"),
                        ("ohem_min_kept", "ohem_min_kept")):
        value = getattr(args, flag)
        if value is not None:
            kw[field] = value
    return TrainConfig(seed=args.seed, num_classes=args.classes, **kw)


def cmd_train(args, parser) -> int:
    config = _config(args, parser)
    try:
        tcfg = _train_config(args)
    except ValueError as e:
        parser.error(str(e))
    train_set, val_set = _datasets(args, parser)
    if not train_set or not val_set:
        raise CliError("training needs non-empty training and validation splits")
    if tcfg.batch_size > len(train_set):
        parser.error(f"--batch-size {tcfg.batch_size} exceeds {len(train_set)} training samples")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    model = build_rfc_net(config)
    best_path = out / "best.ckpt"
    save_checkpoint(model, out / "init.ckpt")

    with open(out / "train.log", "w") as fh:
        def emit(line: str) -> None:
            print(line, flush=True)
            fh.write(line + "\n")
            fh.flush()

        emit(f"train {len(train_set)} val {len(val_set)} image {train_set[0].mask.shape}")
        history = train_loop(model, train_set, val_set, tcfg, log=emit,
                             on_best=lambda m, rec: save_checkpoint(m, best_path))
        emit(f"best val_miou {history.best_miou:.6f} at epoch {history.converged_epoch}")
    save_checkpoint(model, out / "last.ckpt")
    (out / "history.csv").write_text(history.to_csv())
    print(f"checkpoint: {best_path}")
    return 0


def _load(path: Path):
    if path is None or not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args, parser) -> int:
    model = _load(args.checkpoint)
    _, val_set = _datasets(args, parser)
    if not val_set:
        raise CliError("evaluation set is empty")
    score = evaluate(model, val_set, model.config.num_classes, per_image=args.per_image)
    print(f"mIoU: {score:.6f}  ({len(val_set)} images, {'per-image' if args.per_image else 'pooled'})")
    return 0


def cmd_predict(args, parser) -> int:
    model = _load(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        samples = gen_synthetic(args.samples, *args.size, seed=args.seed if args.data_seed is None
                                else args.data_seed)
    else:
        if args.data is None or not args.data.is_dir():
            raise CliError(f"data directory not found: {args.data}")
        if args.resize is None:
            parser.error("--data needs --resize")
        samples = load_directory(args.data, tuple(args.resize), threads=args.threads)
    for sample, mask in zip(samples, predict_masks(model, samples)):
        save_mask(mask, args.out / f"{sample.name}.png")
    print(f"wrote {len(samples)} masks to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfcnet", description="RFC-Net analysis, verification and training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter / FLOP report")
    _add_model_flags(p)
    p.add_argument("--input-size", type=int, nargs=2, default=(224, 224), metavar=("H", "W"))
    p.add_argument("--csv", action="store_true", help="emit per-layer CSV instead of text")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("chains", help="list receptive-field chains")
    _add_model_flags(p)
    p.set_defaults(func=cmd_chains)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model + OHEM loss")
    _add_model_flags(p)
    p.add_argument("--tiny", action="store_true", help="width 2, depth <= 2, 8x8 input")
    p.add_argument("--input-size", type=int, default=16)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=None, help="probe at most this many coords per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train with SGD + OHEM cross-entropy")
    _add_model_flags(p)
    _add_data_flags(p)
    t = p.add_argument_group("optimisation")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, help="base learning rate (default 0.01)")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--step-size", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--ohem-threshold", type=float)
    t.add_argument("--ohem-min-kept", type=float, help="fraction of batch pixels always kept")
    p.add_argument("--out", type=Path, default=Path("runs/latest"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU of a checkpoint on a validation split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--seed", type=int, default=int(os.environ.get(SEED_ENV, "0")))
    p.add_argument("--per-image", action="store_true")
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted mask rasters")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--seed", type=int, default=int(os.environ.get(SEED_ENV, "0")))
    p.add_argument("--out", type=Path, required=True)
    _add_data_flags(p, default_samples=4)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return args.func(args, sub)
    except (CliError, CheckpointFormatError, ConfigError, DataLoadError, OSError) as e:
        print(f"rfcnet {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
