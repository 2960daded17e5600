"""Training regimes: standard training, pre-training, partial/full
fine-tuning, adversarial training at either stage, and steepness-regularized
(discrepancy-mitigating) fine-tuning.

Every regime is a pure function of (datasets, config, seed): batch order,
initialization and attack randomness all derive from the config seed, so two
runs with the same arguments produce bitwise identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time

import numpy as np

from . import models as models_mod
from .attacks import PIXEL_UNIT, AttackConfig, pgd
from .autodiff import NonFiniteError, sgd_step
from .data import batch_iter, normalization_stats
from .metrics import _push_apart

MODES = ("standard", "partial_finetune", "full_finetune", "adversarial",
         "dm_finetune")


@dataclasses.dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 64
    lr_f: float = 0.01
    lr_g: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    mode: str = "standard"
    attack: AttackConfig | None = None      # inner attack for adversarial mode
    steepness_weight: float = 500.0         # lambda for dm_finetune
    steepness_eps: float = 0.5              # LL ball radius, 1/255 units
    steepness_steps: int = 5                # inner PGD steps for dm_finetune
    snapshot_every: int | None = None       # batches; None disables snapshots
    log_every: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")
        if self.mode == "full_finetune" and self.lr_f > self.lr_g:
            raise ValueError("full fine-tuning requires lr_f <= lr_g")
        if self.steepness_weight < 0:
            raise ValueError("steepness weight must be >= 0")
        if self.mode == "adversarial" and self.attack is None:
            raise ValueError("adversarial mode requires an attack config")


@dataclasses.dataclass
class TrainLogRecord:
    epoch: int
    batch: int               # global batch counter
    loss: float
    accuracy: float          # train-batch accuracy
    wall_clock: float
    ce_loss: float | None = None
    reg_loss: float | None = None
    snapshot: str | None = None


@dataclasses.dataclass
class TrainLog:
    records: list
    snapshots: list          # (global batch index, Model copy)
    diverged: bool = False

    def snapshot_batches(self):
        return [b for b, _ in self.snapshots]


def _steepness_inner_max(model, x, eps, steps, step_size, rng):
    """PGD ascent on the feature steepness ratio; returns the perturbed batch."""
    eps_pix = eps * PIXEL_UNIT
    step_pix = step_size * PIXEL_UNIT
    corner = rng.choice([-1.0, 1.0], size=x.shape).astype(np.float32)
    xp = np.clip(x + eps_pix * corner, 0.0, 1.0)
    _push_apart(x, xp, eps_pix)
    lo, hi = np.clip(x - eps_pix, 0.0, 1.0), np.clip(x + eps_pix, 0.0, 1.0)
    graph = model.graph("steepness")
    for _ in range(steps):
        graph.forward({"x": x, "xp": xp})
        graph.backward("ratio_sum")
        g = graph.input_grad("xp")
        xp = np.clip(xp + step_pix * np.sign(g, dtype=np.float32), lo, hi)
        _push_apart(x, xp, eps_pix)
    return xp


def _write_log(out_dir, log):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "train_log.jsonl"), "w") as fh:
        for rec in log.records:
            fh.write(json.dumps(dataclasses.asdict(rec)) + "\n")


def _run(model, dataset, config, update_f, adversarial=False, dm=False,
         out_dir=None):
    log = TrainLog(records=[], snapshots=[])
    velocity = {}
    t0 = time.time()
    global_batch = 0
    last_good = {k: v.copy() for k, v in model.params.items()}

    def snapshot(batch_idx):
        snap = model.copy()
        path = None
        if out_dir is not None:
            path = os.path.join(out_dir, "snapshots", f"batch_{batch_idx:06d}")
            models_mod.save_checkpoint(snap, path)
        log.snapshots.append((batch_idx, snap))
        return path

    if config.snapshot_every is not None:
        snapshot(0)

    lam = config.steepness_weight
    for epoch in range(config.epochs):
        for xb, yb in batch_iter(dataset, config.batch_size,
                                 shuffle_seed=config.seed, epoch=epoch):
            if adversarial and config.attack is not None:
                atk = dataclasses.replace(
                    config.attack, seed=config.seed * 100_003 + global_batch)
                xb = pgd(model, xb, yb, atk)
            graph = model.graph("train")
            try:
                out = graph.forward({"x": xb, "y": yb})
            except NonFiniteError:
                model.set_params(last_good)
                log.diverged = True
                if out_dir is not None:
                    _write_log(out_dir, log)
                return model, log
            ce = float(out["loss"])
            acc = float((out["logits"].argmax(axis=1) == yb).mean())
            grads = graph.backward("loss")
            reg = None
            if dm and lam > 0:
                rng = np.random.default_rng(
                    [config.seed, global_batch, 43])
                step_size = 1.25 * config.steepness_eps / config.steepness_steps
                xp = _steepness_inner_max(model, xb, config.steepness_eps,
                                          config.steepness_steps, step_size,
                                          rng)
                sgraph = model.graph("steepness")
                sout = sgraph.forward({"x": xb, "xp": xp})
                reg = float(sout["ratio_mean"])
                ll_grads = sgraph.backward("ratio_mean")
                for k, g in ll_grads.items():
                    grads[k] = grads[k] + lam * g
            loss = ce if reg is None else ce + lam * reg
            if not np.isfinite(loss):
                model.set_params(last_good)
                log.diverged = True
                if out_dir is not None:
                    _write_log(out_dir, log)
                return model, log
            f_grads = {k: v for k, v in grads.items()
                       if k.startswith("f.") and update_f}
            g_grads = {k: v for k, v in grads.items() if k.startswith("g.")}
            sgd_step(model.params, f_grads, config.lr_f, config.momentum,
                     velocity)
            sgd_step(model.params, g_grads, config.lr_g, config.momentum,
                     velocity)
            global_batch += 1
            took_snapshot = None
            if (config.snapshot_every is not None
                    and global_batch % config.snapshot_every == 0):
                took_snapshot = snapshot(global_batch)
            if (global_batch % config.log_every == 0
                    or took_snapshot is not None):
                log.records.append(TrainLogRecord(
                    epoch=epoch, batch=global_batch, loss=loss, accuracy=acc,
                    wall_clock=time.time() - t0, ce_loss=ce, reg_loss=reg,
                    snapshot=took_snapshot))
        last_good = {k: v.copy() for k, v in model.params.items()}
    if out_dir is not None:
        _write_log(out_dir, log)
    return model, log


def train_standard(dataset, config: TrainConfig, model_config, out_dir=None):
    """Train from scratch on the target dataset (all parameters updated)."""
    if config.mode != "standard":
        raise ValueError("train_standard requires mode='standard'")
    mean, std = normalization_stats(dataset)
    model = models_mod.build_model(
        model_config, config.seed, norm_mean=mean, norm_std=std,
        provenance={"regime": "standard",
                    "dataset": dataset.provenance.get("generator"),
                    "train_seed": config.seed})
    return _run(model, dataset, config, update_f=True, out_dir=out_dir)


def pretrain(source_dataset, config: TrainConfig, model_config, out_dir=None):
    """Same mechanics as standard training; provenance marks the source."""
    if config.mode != "standard":
        raise ValueError("pretrain requires mode='standard'")
    mean, std = normalization_stats(source_dataset)
    model = models_mod.build_model(
        model_config, config.seed, norm_mean=mean, norm_std=std,
        provenance={"regime": "pretrained",
                    "source": source_dataset.provenance.get("generator"),
                    "source_provenance": dict(source_dataset.provenance),
                    "train_seed": config.seed})
    model, log = _run(model, source_dataset, config, update_f=True,
                      out_dir=out_dir)
    return model, log


def finetune(pretrained, target_dataset, config: TrainConfig, out_dir=None):
    """Partial (classifier only) or full (both, lr_f for features) fine-tune.

    The classifier is reinitialized for the target class count; input
    normalization constants stay those of the pre-training source, matching
    common fine-tuning practice.
    """
    if config.mode not in ("partial_finetune", "full_finetune"):
        raise ValueError("finetune requires a *_finetune mode")
    model = models_mod.reinit_classifier(
        pretrained, target_dataset.num_classes, config.seed)
    model.provenance.update({
        "regime": config.mode,
        "target": target_dataset.provenance.get("generator"),
        "train_seed": config.seed,
    })
    update_f = config.mode == "full_finetune"
    return _run(model, target_dataset, config, update_f=update_f,
                out_dir=out_dir)


def train_adversarial(dataset, config: TrainConfig, model_config=None,
                      pretrained=None, finetune_mode="full_finetune",
                      out_dir=None):
    """Min-max adversarial training: each batch is replaced by PGD examples.

    Stage-1 use: pass `model_config` to adversarially train from scratch on a
    source or target dataset.  Stage-2 use: pass `pretrained` to adversarially
    fine-tune (partial or full per `finetune_mode`).
    """
    if config.mode != "adversarial":
        raise ValueError("train_adversarial requires mode='adversarial'")
    if (model_config is None) == (pretrained is None):
        raise ValueError("pass exactly one of model_config or pretrained")
    if pretrained is None:
        mean, std = normalization_stats(dataset)
        model = models_mod.build_model(
            model_config, config.seed, norm_mean=mean, norm_std=std,
            provenance={"regime": "adversarial",
                        "dataset": dataset.provenance.get("generator"),
                        "train_seed": config.seed})
        update_f = True
    else:
        model = models_mod.reinit_classifier(
            pretrained, dataset.num_classes, config.seed)
        model.provenance.update({
            "regime": f"adversarial_{finetune_mode}",
            "target": dataset.provenance.get("generator"),
            "train_seed": config.seed,
        })
        update_f = finetune_mode == "full_finetune"
    return _run(model, dataset, config, update_f=update_f, adversarial=True,
                out_dir=out_dir)


def finetune_dm(pretrained, target_dataset, config: TrainConfig,
                out_dir=None):
    """Full fine-tune with the steepness regularizer added to cross-entropy.

    Loss per batch is CE + lambda * mean Lipschitz ratio at PGD-found worst
    points; lambda=0 reduces bitwise to plain full fine-tuning.
    """
    if config.mode != "dm_finetune":
        raise ValueError("finetune_dm requires mode='dm_finetune'")
    model = models_mod.reinit_classifier(
        pretrained, target_dataset.num_classes, config.seed)
    model.provenance.update({
        "regime": "dm_finetune",
        "target": target_dataset.provenance.get("generator"),
        "steepness_weight": config.steepness_weight,
        "steepness_eps": config.steepness_eps,
        "steepness_steps": config.steepness_steps,
        "train_seed": config.seed,
    })
    return _run(model, target_dataset, config, update_f=True, dm=True,
                out_dir=out_dir)
