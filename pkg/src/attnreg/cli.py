"""Command-line interface.

JSON goes to stdout (indented when --pretty), logs to stderr (verbosity
via the ACR_LOG environment variable: debug, info, warning, error).

Exit codes: 0 success; 1 validation or contract error (bad flags, bad
files, bad shapes); 2 numerical failure (non-finite values, an
inversion-equivalence or finite-difference check exceeding tolerance).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gridtransform as gt
from . import localization as lc
from . import netpbm
from . import regularizer as reg
from . import synthdata as sd
from . import trainer as tr
from . import vit
from .autodiff import Tape, Tensor
from .errors import AttnRegError, ContractError, NumericalError

log = logging.getLogger("attnreg")

_EXIT_CODE_DOC = ("exit codes: 0 success, 1 validation/contract error, "
                  "2 numerical failure (non-finite values or a failed "
                  "equivalence/gradient check)")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; our contract says 1."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(payload, pretty: bool) -> None:
    print(json.dumps(payload, indent=2 if pretty else None, sort_keys=True))


def _parse_layers(text: str) -> tuple[int, int] | None:
    text = text.strip().lower()
    if text in ("all", "default"):
        return None
    sep = ".." if ".." in text else ":"
    lo, _, hi = text.partition(sep)
    try:
        return int(lo), int(hi)
    except ValueError as exc:
        raise ContractError(f"bad layer range {text!r}; expected A..B") from exc


def _load_train_config(path: str | None) -> tr.TrainConfig:
    if path is None:
        return tr.TrainConfig()
    return tr.parse_train_config(Path(path).read_text())


def _apply_overrides(config: tr.TrainConfig, args) -> tr.TrainConfig:
    weights = config.weights
    if args.alpha is not None:
        weights = replace(weights, alpha=args.alpha)
    if args.beta is not None:
        weights = replace(weights, beta=args.beta)
    if args.distance is not None:
        weights = replace(weights, distance=args.distance)
    config = replace(config, weights=weights)
    if args.aug is not None:
        augs = tuple(gt.SpatialTransform.parse(p) for p in args.aug.split(",") if p.strip())
        config = replace(config, augmentations=augs)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    if args.lr is not None:
        config = replace(config, learning_rate=args.lr)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


# -- subcommand bodies ---------------------------------------------------------

def _cmd_gen_data(args) -> int:
    config = sd.DatasetConfig(num_samples=args.samples, num_classes=args.classes,
                              height=args.height, width=args.width,
                              channels=args.channels, seed=args.seed,
                              min_shapes=args.min_shapes, max_shapes=args.max_shapes)
    samples = sd.generate(config)
    sd.save_dataset(args.out, samples, config)
    log.info("wrote %d samples to %s", len(samples), args.out)
    _emit({"out": str(args.out), **config.to_dict()}, args.pretty)
    return 0


def _cmd_train(args) -> int:
    config = _apply_overrides(_load_train_config(args.config), args)
    samples, _ = sd.load_dataset(args.data)
    log.info("training on %d samples for %d epochs", len(samples), config.epochs)
    result = tr.train(config, samples, out_dir=args.out)
    _emit({"checkpoint": str(result.checkpoint_path), "log": str(result.log_path),
           "epochs": config.epochs, "final": result.log[-1]}, args.pretty)
    return 0


def _cmd_eval(args) -> int:
    params, cfg = vit.load_checkpoint(args.checkpoint)
    samples, _ = sd.load_dataset(args.data)
    summary = tr.evaluate(params, cfg, samples, map_layers=_parse_layers(args.layers),
                          jobs=args.jobs, sweep_layers=args.sweep_layers)
    selected = dict(summary)
    if args.refined == "on":
        selected.pop("unrefined", None)
    else:
        selected.pop("refined", None)
    _emit(selected, args.pretty)
    return 0


def _cmd_seeds(args) -> int:
    params, cfg = vit.load_checkpoint(args.checkpoint)
    raw = netpbm.read_netpbm(args.image)
    if raw.ndim == 2:
        raw = raw[None, :, :]
    if raw.shape[0] != cfg.in_channels:
        raise ContractError(f"image has {raw.shape[0]} channels, model wants "
                            f"{cfg.in_channels}")
    image = raw.astype(np.float64) / 255.0
    if not 0 <= args.class_index < cfg.num_classes:
        raise ContractError(f"--class {args.class_index} out of range "
                            f"0..{cfg.num_classes - 1}")
    frozen = {k: Tensor(p.data, requires_grad=False) for k, p in params.items()}
    with Tape() as tape:
        res = vit.forward(image, frozen, cfg)
        y = vit.class_logit(res, args.class_index)
    tape.backward(y)
    adjoints = vit.attention_adjoints(res, args.class_index)
    attentions = [rec.matrix.data for rec in res.attentions]
    layers = _parse_layers(args.layers)
    plain = lc.grad_localization(adjoints, res.grid, args.class_index, layers)
    refined = lc.affinity_refine(plain, attentions, layers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    written = []
    for tag, m in (("unrefined", plain), ("refined", refined)):
        base = out / f"{stem}_class{args.class_index}_{tag}"
        for path in lc.export_map(base, m):
            written.append(str(path))
    log.info("wrote %d files to %s", len(written), out)
    _emit({"written": written, "class": args.class_index,
           "layers_fused": list(plain.layers_fused)}, args.pretty)
    return 0


def _cmd_check_inversion(args) -> int:
    grid = gt.GridShape.parse(args.grid)
    transform = gt.SpatialTransform.parse(args.transform)
    rng = np.random.default_rng(args.seed)
    n = grid.n
    worst_roundtrip = 0.0
    worst_oracle = None
    idx = np.concatenate(([0], gt.token_permutation(transform, grid).sigma + 1))
    for _ in range(args.trials):
        a = rng.random(size=(n + 1, n + 1))
        a /= a.sum(axis=1, keepdims=True)
        forwarded = a[np.ix_(idx, idx)]  # attention as the transformed view sees it
        back = gt.invert_attention_fast(Tensor(forwarded), transform, grid)
        worst_roundtrip = max(worst_roundtrip, float(np.max(np.abs(back.data - a))))
        if args.oracle:
            kron = gt.invert_attention_kronecker(forwarded[1:, 1:], transform, grid)
            err = float(np.max(np.abs(kron - back.data[1:, 1:])))
            worst_oracle = err if worst_oracle is None else max(worst_oracle, err)
    payload = {"grid": str(grid), "transform": str(transform), "trials": args.trials,
               "roundtrip_error": worst_roundtrip, "tolerance": args.tolerance}
    if args.oracle:
        payload["fast_vs_kronecker_error"] = worst_oracle
    _emit(payload, args.pretty)
    failed = worst_roundtrip > args.tolerance or \
        (worst_oracle is not None and worst_oracle > args.tolerance)
    return 2 if failed else 0


def _cmd_ablate(args) -> int:
    config = _load_train_config(args.config)
    samples, _ = sd.load_dataset(args.data)
    eval_samples = None
    if args.eval_data is not None:
        eval_samples, _ = sd.load_dataset(args.eval_data)
    log.info("ablations on %d samples", len(samples))
    tables = {
        "regularizer_grid": tr.run_regularizer_grid(config, samples, eval_samples,
                                                    jobs=args.jobs),
        "distance_sweep": tr.run_distance_sweep(config, samples, eval_samples,
                                                jobs=args.jobs),
        "augmentation_sweep": tr.run_augmentation_sweep(config, samples,
                                                        eval_samples=eval_samples,
                                                        jobs=args.jobs),
    }
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in tables.items():
            (out / f"{name}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    _emit(tables, args.pretty)
    return 0


def _cmd_grad_check(args) -> int:
    config = _load_train_config(args.config)
    cfg = config.vit
    rng = np.random.default_rng(args.seed)
    params = vit.init_params(cfg, rng)
    image = rng.random(size=(cfg.in_channels, cfg.grid.h * cfg.patch_size,
                             cfg.grid.w * cfg.patch_size))
    view = sd.augment(image, gt.FLIP_H)
    targets = Tensor((rng.random(cfg.num_classes) < 0.5).astype(np.float64))

    def with_param(name, build):
        def f(probe):
            patched = dict(params)
            patched[name] = probe
            return build(patched)
        err = ad.grad_check(f, Tensor(params[name].data.copy()), step=args.step,
                            max_coords=args.max_coords,
                            rng=np.random.default_rng(args.seed + 1))
        return float(err)

    def logit(patched):
        return vit.class_logit(vit.forward(image, patched, cfg), 0)

    def activation(patched):
        ra, rb = vit.forward(image, patched, cfg), vit.forward(view, patched, cfg)
        return reg.region_activation_loss([r.matrix for r in ra.attentions],
                                          [r.matrix for r in rb.attentions],
                                          gt.FLIP_H, cfg.grid, config.weights.distance)

    def affinity(patched):
        ra, rb = vit.forward(image, patched, cfg), vit.forward(view, patched, cfg)
        return reg.region_affinity_loss([r.matrix for r in ra.attentions],
                                        [r.matrix for r in rb.attentions],
                                        gt.FLIP_H, cfg.grid, config.weights.distance)

    def total(patched):
        ra, rb = vit.forward(image, patched, cfg), vit.forward(view, patched, cfg)
        a = [r.matrix for r in ra.attentions]
        b = [r.matrix for r in rb.attentions]
        act = reg.region_activation_loss(a, b, gt.FLIP_H, cfg.grid, config.weights.distance)
        aff = reg.region_affinity_loss(a, b, gt.FLIP_H, cfg.grid, config.weights.distance)
        return reg.total_loss(ra.logits, rb.logits, targets, act, aff, config.weights).total

    checks = {
        "class_logit/patch_embed.weight": with_param("patch_embed.weight", logit),
        "class_logit/blocks.0.attn.wq": with_param("blocks.0.attn.wq", logit),
        "activation_loss/blocks.0.attn.wk": with_param("blocks.0.attn.wk", activation),
        "affinity_loss/blocks.0.attn.wq": with_param("blocks.0.attn.wq", affinity),
        "total_loss/blocks.0.mlp.w1": with_param("blocks.0.mlp.w1", total),
    }
    worst = max(checks.values())
    _emit({"checks": checks, "max_relative_error": worst,
           "tolerance": args.tolerance, "passed": worst < args.tolerance}, args.pretty)
    if not worst < args.tolerance:
        log.error("gradient check failed: %.3e >= %.3e", worst, args.tolerance)
        return 2
    return 0


# -- wiring ---------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="attnreg",
                     description="Attention-consistency training, localization "
                                 "maps, and the matrix machinery behind them.",
                     epilog=_EXIT_CODE_DOC)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, epilog=_EXIT_CODE_DOC)
        p.set_defaults(func=func)
        p.add_argument("--pretty", action="store_true",
                       help="indent JSON output for humans")
        return p

    p = add("gen-data", _cmd_gen_data, "synthesize a shape dataset with pixel masks")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--min-shapes", type=int, default=1)
    p.add_argument("--max-shapes", type=int, default=3)

    p = add("train", _cmd_train, "run the two-view consistency training loop")
    p.add_argument("--config", help="plain-text key=value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--distance", choices=list(reg.DISTANCES))
    p.add_argument("--aug", help="comma list, e.g. fliph,rot90")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)

    p = add("eval", _cmd_eval, "seed quality metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--refined", choices=["on", "off"], default="on")
    p.add_argument("--layers", default="default", help="A..B, or 'default' (last two)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--sweep-layers", action="store_true")

    p = add("seeds", _cmd_seeds, "localization maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM/PGM image path")
    p.add_argument("--class", dest="class_index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", default="default")

    p = add("check-inversion", _cmd_check_inversion,
            "verify attention inversion (optionally against the Kronecker oracle)")
    p.add_argument("--grid", required=True, help="HxW patch grid")
    p.add_argument("--transform", required=True,
                   help="identity|fliph|flipv|fliphv|rot90|rot180|rot270")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-12)

    p = add("ablate", _cmd_ablate, "regularizer 2x2 grid + distance and "
                                   "augmentation sweeps")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)

    p = add("grad-check", _cmd_grad_check, "finite-difference gradient audit")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=24,
                   help="random coordinates probed per parameter")
    return parser


def _setup_logging() -> None:
    """Point the package logger at the current stderr; ACR_LOG picks the
    level (debug/info/warning/error; anything else means warning)."""
    level = os.environ.get("ACR_LOG", "warning").upper()
    log.setLevel(getattr(logging, level, logging.WARNING))
    for handler in list(log.handlers):
        log.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.propagate = False


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        print(f"attnreg: numerical failure: {exc}", file=sys.stderr)
        return 2
    except AttnRegError as exc:
        print(f"attnreg: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"attnreg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
