"""Siamese two-view training loop and seed evaluation.

Each step draws one sample and one augmentation, runs both views
through the shared parameters on a fresh tape, backpropagates the
weighted objective, and accumulates gradients across the batch before
one (optionally momentum / polynomial-decay / norm-clipped) SGD update.
Determinism: all randomness flows from two seed-derived generators, one
for init and one for the sampling loop.

Evaluation builds per-class localization maps (fresh forward + backward
per class so adjoints never mix), sweeps background thresholds, and can
fan image processing out over threads: parameters are wrapped in
no-grad views, so worker tapes never write shared state.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import localization as lc
from . import metrics as mt
from . import regularizer as reg
from . import synthdata as sd
from . import vit
from .autodiff import Tape, Tensor
from .errors import ContractError, NumericalError
from .gridtransform import FLIP_H, SpatialTransform
from .regularizer import LossWeights
from .vit import ViTConfig

DEFAULT_AUGMENTATIONS = (FLIP_H,)


@dataclass(frozen=True)
class TrainConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    augmentations: tuple[SpatialTransform, ...] = DEFAULT_AUGMENTATIONS
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.0
    poly_power: float | None = None   # None = constant learning rate
    clip_norm: float | None = 5.0
    seed: int = 0
    loss_layers: tuple[int, int] | None = None  # None = all layers
    map_layers: tuple[int, int] | None = None   # None = last two layers
    eval_every: int = 0          # epochs between held-out evaluations (0 = off)
    holdout_fraction: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.poly_power is not None and self.poly_power <= 0:
            raise ContractError("poly_power must be positive (or omitted)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive (or omitted)")
        if not self.augmentations:
            raise ContractError("need at least one augmentation choice")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ContractError("holdout_fraction must lie in [0, 1)")
        if self.eval_every < 0:
            raise ContractError("eval_every must be >= 0")


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    config: TrainConfig
    log: list[dict]
    checkpoint_path: Path | None
    log_path: Path | None


# -- plain-text config files ---------------------------------------------------

def _parse_layers(value: str, all_token: str) -> tuple[int, int] | None:
    if value == all_token:
        return None
    lo, _, hi = value.partition(":")
    return (int(lo), int(hi))


def _parse_bool(value: str) -> bool:
    if value in ("true", "yes", "1"):
        return True
    if value in ("false", "no", "0"):
        return False
    raise ContractError(f"expected a boolean, got {value!r}")


def parse_train_config(text: str) -> TrainConfig:
    """Parse `key = value` lines (# comments, blank lines ignored).
    Dotted keys set nested fields: vit.*, weights.*. Unknown keys are
    rejected so typos cannot silently fall back to defaults."""
    from .gridtransform import GridShape

    vit_kw: dict = {}
    weight_kw: dict = {}
    top: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        vkey = key.lower()
        value = value.strip()
        try:
            if vkey.startswith("vit."):
                name = vkey[4:]
                if name == "grid":
                    vit_kw[name] = GridShape.parse(value)
                elif name == "mlp_ratio":
                    vit_kw[name] = float(value)
                elif name == "use_positional_embedding":
                    vit_kw[name] = _parse_bool(value)
                elif name in ("patch_size", "embed_dim", "num_layers", "num_heads",
                              "num_classes", "in_channels"):
                    vit_kw[name] = int(value)
                else:
                    raise ContractError(f"unknown key vit.{name}")
            elif vkey.startswith("weights."):
                name = vkey[8:]
                if name in ("alpha", "beta"):
                    weight_kw[name] = float(value)
                elif name == "distance":
                    weight_kw[name] = value
                else:
                    raise ContractError(f"unknown key weights.{name}")
            elif vkey == "augmentations":
                top[vkey] = tuple(SpatialTransform.parse(p)
                                  for p in value.split(",") if p.strip())
            elif vkey in ("epochs", "batch_size", "seed", "eval_every"):
                top[vkey] = int(value)
            elif vkey in ("learning_rate", "momentum", "holdout_fraction"):
                top[vkey] = float(value)
            elif vkey in ("poly_power", "clip_norm"):
                top[vkey] = None if value.lower() == "none" else float(value)
            elif vkey == "loss_layers":
                top[vkey] = _parse_layers(value, "all")
            elif vkey == "map_layers":
                top[vkey] = _parse_layers(value, "default")
            else:
                raise ContractError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ContractError(f"config line {lineno}: bad value {value!r} "
                                f"for {key}") from exc
    return TrainConfig(vit=ViTConfig(**vit_kw), weights=LossWeights(**weight_kw), **top)


def format_train_config(config: TrainConfig) -> str:
    """Inverse of parse_train_config (round-trips exactly)."""
    lines = []
    v = config.vit
    lines += [f"vit.patch_size = {v.patch_size}", f"vit.grid = {v.grid}",
              f"vit.embed_dim = {v.embed_dim}", f"vit.num_layers = {v.num_layers}",
              f"vit.num_heads = {v.num_heads}", f"vit.mlp_ratio = {v.mlp_ratio}",
              f"vit.num_classes = {v.num_classes}",
              f"vit.use_positional_embedding = {'true' if v.use_positional_embedding else 'false'}",
              f"vit.in_channels = {v.in_channels}"]
    w = config.weights
    lines += [f"weights.alpha = {w.alpha}", f"weights.beta = {w.beta}",
              f"weights.distance = {w.distance}"]
    lines += [f"augmentations = {','.join(str(t) for t in config.augmentations)}",
              f"epochs = {config.epochs}", f"batch_size = {config.batch_size}",
              f"learning_rate = {config.learning_rate}", f"momentum = {config.momentum}",
              f"poly_power = {'none' if config.poly_power is None else config.poly_power}",
              f"clip_norm = {'none' if config.clip_norm is None else config.clip_norm}",
              f"seed = {config.seed}",
              "loss_layers = " + ("all" if config.loss_layers is None
                                  else f"{config.loss_layers[0]}:{config.loss_layers[1]}"),
              "map_layers = " + ("default" if config.map_layers is None
                                 else f"{config.map_layers[0]}:{config.map_layers[1]}"),
              f"eval_every = {config.eval_every}",
              f"holdout_fraction = {config.holdout_fraction}"]
    return "\n".join(lines) + "\n"


# -- the optimization loop -----------------------------------------------------

def _loss_layer_slice(config: TrainConfig):
    if config.loss_layers is None:
        return 0, config.vit.num_layers
    lo, hi = config.loss_layers
    if not 0 <= lo < hi <= config.vit.num_layers:
        raise ContractError(f"loss_layers {config.loss_layers} invalid for "
                            f"{config.vit.num_layers} layers")
    return lo, hi


def _two_view_loss(sample: sd.SyntheticSample, transform: SpatialTransform,
                   params: dict[str, Tensor], config: TrainConfig,
                   snapshot: dict | None = None) -> reg.LossBreakdown:
    cfg = config.vit
    view_b = sd.augment(sample.image, transform, cell_pixels=cfg.patch_size)
    if snapshot is not None:
        snapshot["view_a"], snapshot["view_b"] = sample.image, view_b
    res_a = vit.forward(sample.image, params, cfg)
    if snapshot is not None:
        snapshot.update({f"attention_a_{r.layer}": r.matrix.data for r in res_a.attentions})
    res_b = vit.forward(view_b, params, cfg)
    if snapshot is not None:
        snapshot.update({f"attention_b_{r.layer}": r.matrix.data for r in res_b.attentions})
    lo, hi = _loss_layer_slice(config)
    zero = Tensor(0.0)
    act = aff = zero
    if config.weights.alpha != 0.0 or config.weights.beta != 0.0:
        a = [rec.matrix for rec in res_a.attentions[lo:hi]]
        ap = [rec.matrix for rec in res_b.attentions[lo:hi]]
        if config.weights.alpha != 0.0:
            act = reg.region_activation_loss(a, ap, transform, res_a.grid,
                                             config.weights.distance)
        if config.weights.beta != 0.0:
            aff = reg.region_affinity_loss(a, ap, transform, res_a.grid,
                                           config.weights.distance)
    return reg.total_loss(res_a.logits, res_b.logits, sample.labels, act, aff,
                          config.weights)


def _dump_divergence(out_dir: Path | None, epoch: int, step: int,
                     sample: sd.SyntheticSample, snapshot: dict) -> str:
    """Write whatever the failing step produced before blowing up: both
    views, labels, mask, and any attention matrices already recorded."""
    if out_dir is None:
        return "no output directory, nothing dumped"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"divergence_epoch{epoch}_step{step}.npz"
    np.savez(path, labels=sample.labels, mask=sample.mask, **snapshot)
    return str(path)


def _global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def train(config: TrainConfig, samples: list[sd.SyntheticSample],
          out_dir=None) -> TrainResult:
    """Run the Siamese loop; returns trained parameters and the per-epoch
    log. With out_dir set, writes checkpoint.ckpt and log.jsonl there."""
    if not samples:
        raise ContractError("training needs a nonempty dataset")
    if any(s.labels.shape != (config.vit.num_classes,) for s in samples):
        raise ContractError("sample labels do not match vit.num_classes")
    out_path = Path(out_dir) if out_dir is not None else None

    holdout: list[sd.SyntheticSample] = []
    train_set = samples
    if config.holdout_fraction > 0.0:
        cut = max(1, int(round(config.holdout_fraction * len(samples))))
        if cut >= len(samples):
            raise ContractError("holdout fraction leaves no training data")
        train_set, holdout = samples[:-cut], samples[-cut:]

    init_rng = np.random.default_rng([config.seed, 0])
    loop_rng = np.random.default_rng([config.seed, 1])
    params = vit.init_params(config.vit, init_rng)
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    n = len(train_set)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_updates = config.epochs * steps_per_epoch
    update_index = 0
    log: list[dict] = []

    for epoch in range(config.epochs):
        order = loop_rng.permutation(n)
        sums = {"l_cls": 0.0, "l_act": 0.0, "l_aff": 0.0, "total": 0.0}
        lr_this_epoch = config.learning_rate
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            for name in params:
                params[name].zero_grad()
            for step, idx in enumerate(batch):
                sample = train_set[int(idx)]
                transform = config.augmentations[int(loop_rng.integers(len(config.augmentations)))]
                snapshot: dict = {}
                try:
                    with Tape() as tape:
                        breakdown = _two_view_loss(sample, transform, params, config,
                                                   snapshot)
                    tape.backward(breakdown.total)
                except NumericalError as exc:
                    where = _dump_divergence(out_path, epoch, start + step, sample,
                                             snapshot)
                    raise NumericalError(f"non-finite loss at epoch {epoch}, "
                                         f"step {start + step}: {exc} "
                                         f"(diagnostics: {where})") from exc
                for key, value in breakdown.to_floats().items():
                    sums[key] += value
            # mean-gradient SGD update over the batch
            lr = config.learning_rate
            if config.poly_power is not None:
                lr *= (1.0 - update_index / total_updates) ** config.poly_power
            lr_this_epoch = lr
            names = [name for name in params if params[name].grad is not None]
            grads = [params[name].grad / len(batch) for name in names]
            if config.clip_norm is not None:
                norm = _global_norm(grads)
                if norm > config.clip_norm:
                    grads = [g * (config.clip_norm / norm) for g in grads]
            for name, g in zip(names, grads):
                v = velocity[name]
                v *= config.momentum
                v += g
                params[name].data -= lr * v
            update_index += 1

        record = {"epoch": epoch, "lr": lr_this_epoch,
                  **{k: v / n for k, v in sums.items()}}
        if holdout and config.eval_every and (epoch + 1) % config.eval_every == 0:
            summary = evaluate(params, config.vit, holdout,
                               map_layers=config.map_layers)
            record["holdout_miou"] = summary["refined"]["miou"]
        log.append(record)

    checkpoint_path = log_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_path / "checkpoint.ckpt"
        log_path = out_path / "log.jsonl"
        vit.save_checkpoint(checkpoint_path, params, config.vit)
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
        (out_path / "train_config.txt").write_text(format_train_config(config))
    return TrainResult(params=params, config=config, log=log,
                       checkpoint_path=checkpoint_path, log_path=log_path)


# -- evaluation -----------------------------------------------------------------

def _image_localization_data(sample: sd.SyntheticSample, params: dict[str, Tensor],
                             cfg: ViTConfig) -> lc.ImageLocalizationData:
    """Fresh forward + backward per present class; parameters are wrapped
    as no-grad views so nothing shared is written."""
    frozen = {name: Tensor(p.data, requires_grad=False) for name, p in params.items()}
    present = [k for k in range(cfg.num_classes) if sample.labels[k]]
    adjoints_by_class: dict[int, list[np.ndarray]] = {}
    attentions: list[np.ndarray] | None = None
    for k in present:
        with Tape() as tape:
            res = vit.forward(sample.image, frozen, cfg)
            y = vit.class_logit(res, k)
        tape.backward(y)
        adjoints_by_class[k] = vit.attention_adjoints(res, k)
        if attentions is None:
            attentions = [rec.matrix.data.copy() for rec in res.attentions]
    return lc.ImageLocalizationData(adjoints_by_class=adjoints_by_class,
                                    attentions=attentions or [], gt_mask=sample.mask)


def evaluate(params: dict[str, Tensor], cfg: ViTConfig,
             samples: list[sd.SyntheticSample], map_layers=None,
             thresholds=None, jobs: int = 1, sweep_layers: bool = False) -> dict:
    """Seed quality of gradient maps against pixel ground truth: best
    background threshold, mIoU, FP/FN rates, for both unrefined and
    affinity-refined maps; optionally the start-layer sweep table."""
    if not samples:
        raise ContractError("evaluation needs a nonempty dataset")
    if jobs < 1:
        raise ContractError("jobs must be >= 1")
    grid = cfg.grid
    if jobs == 1:
        data = [_image_localization_data(s, params, cfg) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            data = list(pool.map(lambda s: _image_localization_data(s, params, cfg),
                                 samples))

    gt = [d.gt_mask for d in data]
    result: dict = {"num_images": len(samples), "num_classes": cfg.num_classes}
    for refine, key in ((False, "unrefined"), (True, "refined")):
        maps_per_image = [lc.build_maps(d, grid, map_layers, refine) for d in data]
        theta, best = mt.best_threshold_miou(maps_per_image, gt, cfg.num_classes + 1,
                                             thresholds)
        entry: dict = {"threshold": theta, "miou": best}
        if theta is not None:
            acc = mt.ConfusionAccumulator(cfg.num_classes + 1)
            for maps, mask in zip(maps_per_image, gt):
                seed = lc.seed_from_maps(maps, theta)
                pred = lc.upsample_nearest(seed.labels, mask.shape[0], mask.shape[1])
                acc.add(pred, mask)
            entry.update({"fp_rate": acc.fp_rate(), "fn_rate": acc.fn_rate(),
                          "per_class_iou": acc.per_class_iou()})
        result[key] = entry
    if sweep_layers:
        result["layer_sweep"] = lc.layer_sweep(data, grid, cfg.num_layers,
                                               cfg.num_classes, thresholds=thresholds)
    return result


# -- ablation harness ------------------------------------------------------------

REGULARIZER_GRID = (("baseline", 0.0, 0.0), ("act_only", 1.0, 0.0),
                    ("aff_only", 0.0, 1.0), ("full", 1.0, 1.0))


def run_regularizer_grid(config: TrainConfig, samples: list[sd.SyntheticSample],
                         eval_samples: list[sd.SyntheticSample] | None = None,
                         jobs: int = 1) -> list[dict]:
    """The 2x2 {activation on/off} x {affinity on/off} table. Cells reuse
    config's alpha/beta as the 'on' magnitudes."""
    rows = []
    for name, act_on, aff_on in REGULARIZER_GRID:
        weights = replace(config.weights, alpha=config.weights.alpha * act_on,
                          beta=config.weights.beta * aff_on)
        cell_cfg = replace(config, weights=weights)
        result = train(cell_cfg, samples)
        summary = evaluate(result.params, config.vit, eval_samples or samples,
                           map_layers=config.map_layers, jobs=jobs)
        rows.append({"cell": name, "alpha": weights.alpha, "beta": weights.beta,
                     "unrefined_miou": summary["unrefined"]["miou"],
                     "refined_miou": summary["refined"]["miou"],
                     "threshold": summary["refined"]["threshold"],
                     "final_loss": result.log[-1]["total"]})
    return rows


def run_distance_sweep(config: TrainConfig, samples: list[sd.SyntheticSample],
                       eval_samples: list[sd.SyntheticSample] | None = None,
                       jobs: int = 1) -> list[dict]:
    rows = []
    for distance in reg.DISTANCES:
        cell_cfg = replace(config, weights=replace(config.weights, distance=distance))
        result = train(cell_cfg, samples)
        summary = evaluate(result.params, config.vit, eval_samples or samples,
                           map_layers=config.map_layers, jobs=jobs)
        rows.append({"distance": distance, "refined_miou": summary["refined"]["miou"],
                     "unrefined_miou": summary["unrefined"]["miou"],
                     "final_loss": result.log[-1]["total"]})
    return rows


def run_augmentation_sweep(config: TrainConfig, samples: list[sd.SyntheticSample],
                           choices: tuple[tuple[str, tuple[SpatialTransform, ...]], ...] | None = None,
                           eval_samples: list[sd.SyntheticSample] | None = None,
                           jobs: int = 1) -> list[dict]:
    from .gridtransform import FLIP_V, ROT90, ROT180, ROT270
    if choices is None:
        choices = (("fliph", (FLIP_H,)), ("flipv", (FLIP_V,)),
                   ("rot", (ROT90, ROT180, ROT270)),
                   ("fliph+rot", (FLIP_H, ROT90, ROT180, ROT270)))
    rows = []
    for name, augs in choices:
        cell_cfg = replace(config, augmentations=tuple(augs))
        result = train(cell_cfg, samples)
        summary = evaluate(result.params, config.vit, eval_samples or samples,
                           map_layers=config.map_layers, jobs=jobs)
        rows.append({"augmentation": name, "refined_miou": summary["refined"]["miou"],
                     "unrefined_miou": summary["unrefined"]["miou"],
                     "final_loss": result.log[-1]["total"]})
    return rows
