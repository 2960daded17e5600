"""Declarative experiment harness: each experiment kind reproduces one
table/figure analog, driven by a serializable spec.

A run is a pure function of its spec: datasets regenerate from their
parameters and every trained model is content-addressed in a cache directory
(keyed by the digest of everything that determines it), so experiments that
share a pre-training config train it exactly once.  Per-cell failures are
recorded in the report and the remaining cells still run.
"""

from __future__ import annotations

import csv
import dataclasses
import glob
import hashlib
import json
import os
import time

import numpy as np
import scipy.stats
from filelock import FileLock

from . import attacks, data, metrics, models, training
from .attacks import AttackConfig

EXPERIMENT_KINDS = (
    "robustness_table",     # Table 1 analog
    "criteria_sweep",       # Table 2 analog
    "cca_compare",          # Fig 3 analog
    "uap_checkpoint_probe",  # Fig 4(a) analog
    "uap_transfer_probe",   # Fig 4(b) analog
    "mmd_vs_dr",            # Fig 6 analog
    "capacity_sweep",       # Table 3 analog
    "difficulty_sweep",     # Table 4 analog
    "defense_compare",      # Table 5 analog
)

DEFAULT_SOURCE = {"generator": "synth_source", "num_classes": 10,
                  "difficulty": 3, "train_per_class": 500,
                  "test_per_class": 100, "seed": 0}
DEFAULT_TARGET = {"generator": "alphabet", "seed": 0,
                  "train_per_class": 1000, "test_per_class": 200}
DEFAULT_MODEL = {"blocks": 3, "base_width": 16}
DEFAULT_TRAIN = {"epochs": 3, "batch_size": 64, "lr_g": 0.1, "lr_f": 0.01,
                 "momentum": 0.9}
DEFAULT_ATTACK = {"eps": 0.5, "steps": 10}


@dataclasses.dataclass
class ExperimentSpec:
    kind: str
    out_dir: str
    seed: int = 0
    source: dict = None
    target: dict = None
    model: dict = None
    train: dict = None
    attack: dict = None
    extra: dict = None
    cache_dir: str = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"kind must be one of {EXPERIMENT_KINDS}")
        self.source = dict(DEFAULT_SOURCE, **(self.source or {}))
        self.target = dict(DEFAULT_TARGET, **(self.target or {}))
        self.model = dict(DEFAULT_MODEL, **(self.model or {}))
        self.train = dict(DEFAULT_TRAIN, **(self.train or {}))
        self.attack = dict(DEFAULT_ATTACK, **(self.attack or {}))
        self.extra = dict(self.extra or {})

    def cache_path(self):
        return self.cache_dir or os.path.join(self.out_dir, "cache")

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        payload = {k: v for k, v in self.to_dict().items()
                   if k not in ("out_dir", "cache_dir")}
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            payload = json.load(fh)
        payload.update({k: v for k, v in overrides.items() if v is not None})
        payload.setdefault("out_dir", "out")
        return cls(**payload)


@dataclasses.dataclass
class ExperimentReport:
    spec: ExperimentSpec
    digest: str
    cells: list
    wall_clock: float
    artifacts: dict

    def completed_cells(self):
        return [c for c in self.cells if c.get("status") == "ok"]

    def failed_cells(self):
        return [c for c in self.cells if c.get("status") != "ok"]


# ---------------------------------------------------------------------------
# Building blocks: datasets, configs, cached training
# ---------------------------------------------------------------------------

def build_datasets(spec_dict):
    """(train, test) pair from a dataset spec dict."""
    d = dict(spec_dict)
    gen = d.pop("generator")
    if gen == "alphabet":
        return data.gen_alphabet(d.pop("seed", 0), **d)
    if gen == "synth_source":
        return data.gen_synth_source(data.SynthSourceSpec(**d))
    raise ValueError(f"unknown dataset generator {gen!r}")


def dataset_name(spec_dict):
    if spec_dict["generator"] == "alphabet":
        return "alphabet"
    return (f"synth_d{spec_dict.get('difficulty', 1)}"
            f"_c{spec_dict.get('num_classes', 4)}"
            f"_s{spec_dict.get('seed', 0)}")


def _model_config(model_dict, dataset):
    return models.ModelConfig(blocks=model_dict["blocks"],
                              base_width=model_dict["base_width"],
                              input_shape=dataset.image_shape,
                              num_classes=dataset.num_classes)


def _attack_config(attack_dict, **overrides):
    d = dict(attack_dict, **overrides)
    return AttackConfig(**d)


def _train_config(train_dict, mode, seed, lr_g=None, **overrides):
    d = {k: v for k, v in train_dict.items()
         if k not in ("lr_sweep", "attack")}
    if lr_g is not None:
        d["lr_g"] = lr_g
        d["lr_f"] = lr_g / 10.0
    d.update(overrides)
    return training.TrainConfig(mode=mode, seed=seed, **d)


def _lr_candidates(spec):
    sweep = spec.train.get("lr_sweep")
    return list(sweep) if sweep else [spec.train["lr_g"]]


def _train_attack(spec):
    """Inner attack for adversarial training: the train section may declare
    its own (typically cheaper) attack; otherwise reuse the evaluation one."""
    return _attack_config(spec.train.get("attack", spec.attack))


def _cached_model(cache_dir, key, build_fn):
    digest = hashlib.sha256(
        json.dumps(key, sort_keys=True).encode()).hexdigest()
    path = os.path.join(cache_dir, "models", digest[:24])
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with FileLock(path + ".lock"):
        if os.path.exists(os.path.join(path, "manifest.json")):
            return models.load_checkpoint(path)
        model = build_fn()
        models.save_checkpoint(model, path)
        return model


def _cached_snapshot_run(cache_dir, key, run_fn):
    """Training run that also persists batch snapshots; returns
    (final model, [(batch index, checkpoint path), ...])."""
    digest = hashlib.sha256(
        json.dumps(key, sort_keys=True).encode()).hexdigest()
    path = os.path.join(cache_dir, "runs", digest[:24])
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with FileLock(path + ".lock"):
        final_dir = os.path.join(path, "final")
        if not os.path.exists(os.path.join(final_dir, "manifest.json")):
            model = run_fn(path)
            models.save_checkpoint(model, final_dir)
        final = models.load_checkpoint(final_dir)
    snaps = sorted(
        (int(os.path.basename(p).split("_")[1]), p)
        for p in glob.glob(os.path.join(path, "snapshots", "batch_*")))
    return final, snaps


# ---------------------------------------------------------------------------
# Regime getters (all cached)
# ---------------------------------------------------------------------------

def _get_pretrained(spec, source=None, model=None, adversarial=False):
    src = source or spec.source
    model_dict = model or spec.model
    strain, stest = build_datasets(src)
    mcfg = _model_config(model_dict, strain)

    def candidate(lr_g):
        key = {"role": "pretrain", "source": src, "model": model_dict,
               "train": spec.train, "seed": spec.seed, "lr_g": lr_g,
               "adversarial": bool(adversarial),
               "attack": spec.attack if adversarial else None}

        def build():
            if adversarial:
                cfg = _train_config(spec.train, "adversarial", spec.seed,
                                    lr_g=lr_g, lr_f=lr_g,
                                    attack=_train_attack(spec))
                m, _ = training.train_adversarial(strain, cfg,
                                                  model_config=mcfg)
            else:
                cfg = _train_config(spec.train, "standard", spec.seed,
                                    lr_g=lr_g, lr_f=lr_g)
                m, _ = training.pretrain(strain, cfg, mcfg)
            return m
        return _cached_model(spec.cache_path(), key, build)
    return _best_over_lrs(spec, stest,
                          [candidate(lr) for lr in _lr_candidates(spec)])


def _best_over_lrs(spec, test_set, candidates):
    """§3.2 convention: sweep learning rates, report the max-AOI model."""
    best, best_aoi = None, -1.0
    for model in candidates:
        aoi = metrics.evaluate_accuracy(model, test_set)
        if aoi > best_aoi:
            best, best_aoi = model, aoi
    return best


def _get_standard(spec, target=None, model=None):
    tgt = target or spec.target
    model_dict = model or spec.model
    ttrain, ttest = build_datasets(tgt)
    mcfg = _model_config(model_dict, ttrain)

    def candidate(lr_g):
        key = {"role": "standard", "target": tgt, "model": model_dict,
               "train": spec.train, "seed": spec.seed, "lr_g": lr_g}

        def build():
            # from-scratch training uses one rate for both partitions
            cfg = _train_config(spec.train, "standard", spec.seed,
                                lr_g=lr_g, lr_f=lr_g)
            m, _ = training.train_standard(ttrain, cfg, mcfg)
            return m
        return _cached_model(spec.cache_path(), key, build)
    return _best_over_lrs(spec, ttest,
                          [candidate(lr) for lr in _lr_candidates(spec)])


def _get_finetuned(spec, mode, target=None, source=None, model=None,
                   adv_pretrain=False, adv_finetune=False, dm=False):
    """Fine-tuned model for any defense combination, via the shared cache."""
    tgt = target or spec.target
    ttrain, ttest = build_datasets(tgt)
    pre = _get_pretrained(spec, source=source, model=model,
                          adversarial=adv_pretrain)

    def candidate(lr_g):
        key = {"role": "finetune", "mode": mode, "target": tgt,
               "source": source or spec.source, "model": model or spec.model,
               "train": spec.train, "seed": spec.seed, "lr_g": lr_g,
               "adv_pretrain": bool(adv_pretrain),
               "adv_finetune": bool(adv_finetune), "dm": bool(dm),
               "attack": spec.attack if (adv_pretrain or adv_finetune)
               else None}

        def build():
            if dm:
                cfg = _train_config(spec.train, "dm_finetune", spec.seed,
                                    lr_g=lr_g)
                m, _ = training.finetune_dm(pre, ttrain, cfg)
            elif adv_finetune:
                cfg = _train_config(spec.train, "adversarial", spec.seed,
                                    lr_g=lr_g,
                                    attack=_train_attack(spec))
                m, _ = training.train_adversarial(ttrain, cfg, pretrained=pre,
                                                  finetune_mode=mode)
            else:
                cfg = _train_config(spec.train, mode, spec.seed, lr_g=lr_g)
                m, _ = training.finetune(pre, ttrain, cfg)
            return m
        return _cached_model(spec.cache_path(), key, build)
    # Adversarial / DM fine-tuning runs at the recipe's base rate; sweeping
    # the (expensive) inner-maximization variants buys nothing the plain
    # sweep has not already established.
    lrs = ([spec.train["lr_g"]] if (adv_finetune or dm)
           else _lr_candidates(spec))
    return _best_over_lrs(spec, ttest, [candidate(lr) for lr in lrs])


# ---------------------------------------------------------------------------
# Experiment kinds
# ---------------------------------------------------------------------------

def _cell(cells, meta, fn):
    try:
        cells.append(dict(meta, status="ok", **fn()))
    except Exception as exc:  # record per-cell failure, keep going
        cells.append(dict(meta, status="failed",
                          error=f"{type(exc).__name__}: {exc}"))


def _triple_values(trip):
    return {"aoi": trip.aoi, "aai": trip.aai, "dr": trip.dr}


def _run_robustness_table(spec, cells, artifacts):
    _, ttest = build_datasets(spec.target)
    atk = _attack_config(spec.attack)
    name = dataset_name(spec.target)
    regimes = {
        "standard": lambda: _get_standard(spec),
        "partial_finetune": lambda: _get_finetuned(spec, "partial_finetune"),
        "full_finetune": lambda: _get_finetuned(spec, "full_finetune"),
    }
    for regime, get in regimes.items():
        _cell(cells, {"experiment": spec.kind, "dataset": name,
                      "regime": regime, "seed": spec.seed},
              lambda get=get: _triple_values(
                  metrics.robustness_triple(get(), ttest, atk)))


def _run_criteria_sweep(spec, cells, artifacts):
    _, ttest = build_datasets(spec.target)
    name = dataset_name(spec.target)
    criteria = spec.extra.get("criteria") or [
        {"attack": "fgsm", "eps": 0.5},
        {"attack": "fgsm", "eps": 2.0},
        {"attack": "pgd", "eps": 2.0, "steps": 10},
    ]
    regimes = {
        "standard": lambda: _get_standard(spec),
        "full_finetune": lambda: _get_finetuned(spec, "full_finetune"),
    }
    for regime, get in regimes.items():
        for crit in criteria:
            kind = crit.get("attack", "pgd")
            if kind == "fgsm":
                atk = AttackConfig(eps=crit["eps"], steps=1,
                                   step_size=crit["eps"])
            else:
                atk = AttackConfig(eps=crit["eps"],
                                   steps=crit.get("steps", 10))
            label = f"{kind}_eps{crit['eps']}"
            _cell(cells, {"experiment": spec.kind, "dataset": name,
                          "regime": regime, "seed": spec.seed,
                          "criterion": label},
                  lambda get=get, atk=atk: _triple_values(
                      metrics.robustness_triple(get(), ttest, atk)))


def _run_cca_compare(spec, cells, artifacts):
    _, ttest = build_datasets(spec.target)
    name = dataset_name(spec.target)
    n = int(spec.extra.get("num_images", 256))
    x = ttest.images[:n]
    pre = _get_pretrained(spec)
    std = _get_standard(spec)
    ft = _get_finetuned(spec, "full_finetune")
    pairs = [
        ("ft_vs_pretrained", ft, pre, "all"),
        ("ft_vs_standard", ft, std, "all"),
        ("ft_vs_standard", ft, std, 1),
        ("ft_vs_pretrained", ft, pre, 1),
    ]
    for comparison, m1, m2, depth in pairs:
        _cell(cells, {"experiment": spec.kind, "dataset": name,
                      "regime": comparison, "seed": spec.seed,
                      "depth": str(depth)},
              lambda m1=m1, m2=m2, depth=depth: {
                  "cca": metrics.cca_similarity(
                      m1.layer_activations(x, depth=depth),
                      m2.layer_activations(x, depth=depth))})


def _run_uap_checkpoint_probe(spec, cells, artifacts):
    ttrain, ttest = build_datasets(spec.target)
    name = dataset_name(spec.target)
    mcfg = _model_config(spec.model, ttrain)
    snap_every = int(spec.extra.get("snapshot_every", 20))
    mode = spec.extra.get("finetune_mode", "full_finetune")
    uap_eps = float(spec.extra.get("uap_eps", 10.0))
    uap_steps = int(spec.extra.get("uap_steps", 200))
    target_class = int(spec.extra.get("target_class", 0))
    cache = spec.cache_path()

    def run_standard(out_dir):
        # from-scratch training uses one rate for both partitions
        cfg = _train_config(spec.train, "standard", spec.seed,
                            lr_g=spec.train["lr_g"],
                            lr_f=spec.train["lr_g"],
                            snapshot_every=snap_every)
        m, _ = training.train_standard(ttrain, cfg, mcfg, out_dir=out_dir)
        return m

    def run_finetuned(out_dir):
        pre = _get_pretrained(spec)
        cfg = _train_config(spec.train, mode, spec.seed,
                            snapshot_every=snap_every)
        m, _ = training.finetune(pre, ttrain, cfg, out_dir=out_dir)
        return m

    runs = {
        "standard": ({"role": "probe_standard", "target": spec.target,
                      "model": spec.model, "train": spec.train,
                      "seed": spec.seed, "snapshot_every": snap_every},
                     run_standard),
        mode: ({"role": "probe_finetune", "mode": mode,
                "target": spec.target, "source": spec.source,
                "model": spec.model, "train": spec.train, "seed": spec.seed,
                "snapshot_every": snap_every},
               run_finetuned),
    }
    for regime, (key, run_fn) in runs.items():
        try:
            final, snaps = _cached_snapshot_run(cache, key, run_fn)
            uap = attacks.uap_train(final, ttrain, target_class, eps=uap_eps,
                                    steps=uap_steps, seed=spec.seed)
            uap_path = os.path.join(spec.out_dir, f"uap_{regime}")
            attacks.save_uap(uap, uap_path)
            artifacts[f"uap_{regime}"] = uap_path
        except Exception as exc:
            cells.append({"experiment": spec.kind, "dataset": name,
                          "regime": regime, "seed": spec.seed,
                          "status": "failed",
                          "error": f"{type(exc).__name__}: {exc}"})
            continue
        if not snaps:
            cells.append({"experiment": spec.kind, "dataset": name,
                          "regime": regime, "seed": spec.seed,
                          "status": "failed",
                          "error": "no checkpoints at declared cadence"})
            continue
        for batch, path in snaps:
            _cell(cells, {"experiment": spec.kind, "dataset": name,
                          "regime": regime, "seed": spec.seed,
                          "batch": batch},
                  lambda path=path: {"uap_success": metrics.uap_success_rate(
                      models.load_checkpoint(path), uap, ttest)})


def _run_uap_transfer_probe(spec, cells, artifacts):
    strain, _ = build_datasets(spec.source)
    _, ttest = build_datasets(spec.target)
    name = dataset_name(spec.target)
    pre = _get_pretrained(spec)
    uap = attacks.uap_train(
        pre, strain, int(spec.extra.get("target_class", 0)),
        eps=float(spec.extra.get("uap_eps", 10.0)),
        steps=int(spec.extra.get("uap_steps", 200)), seed=spec.seed)
    uap_path = os.path.join(spec.out_dir, "uap_pretrained")
    attacks.save_uap(uap, uap_path)
    artifacts["uap_pretrained"] = uap_path
    regimes = {
        "full_finetune": lambda: _get_finetuned(spec, "full_finetune"),
        "standard": lambda: _get_standard(spec),
    }
    for regime, get in regimes.items():
        _cell(cells, {"experiment": spec.kind, "dataset": name,
                      "regime": regime, "seed": spec.seed},
              lambda get=get: _triple_values(
                  metrics.uap_robustness_triple(get(), uap, ttest)))


def _default_mmd_targets(spec):
    base = {"generator": "synth_source",
            "train_per_class": spec.source.get("train_per_class", 500),
            "test_per_class": spec.source.get("test_per_class", 100),
            "seed": spec.source.get("seed", 0) + 1}
    return [dict(base, difficulty=d, num_classes=min(4, 4 ** d))
            for d in (1, 2, 3, 4)]


def _run_mmd_vs_dr(spec, cells, artifacts):
    _, stest = build_datasets(spec.source)
    pre = _get_pretrained(spec)
    atk = _attack_config(spec.attack)
    n = int(spec.extra.get("mmd_samples", 200))
    src_emb = pre.embed(stest.images[:n])
    targets = spec.extra.get("targets") or _default_mmd_targets(spec)
    pairs = []
    for tgt in targets:
        name = dataset_name(tgt)

        def one(tgt=tgt):
            _, ttest = build_datasets(tgt)
            ft = _get_finetuned(spec, "full_finetune", target=tgt)
            trip = metrics.robustness_triple(ft, ttest, atk)
            mmd = metrics.mmd_distance(src_emb, pre.embed(ttest.images[:n]))
            pairs.append((mmd, trip.dr))
            return dict(_triple_values(trip), mmd=mmd)
        _cell(cells, {"experiment": spec.kind, "dataset": name,
                      "regime": "full_finetune", "seed": spec.seed}, one)
    if len(pairs) >= 2:
        import warnings
        with warnings.catch_warnings():
            # degenerate desk-scale cells can have constant DR; report NaN
            warnings.simplefilter("ignore", scipy.stats.ConstantInputWarning)
            rho = scipy.stats.spearmanr([p[0] for p in pairs],
                                        [p[1] for p in pairs]).statistic
        cells.append({"experiment": spec.kind, "dataset": "summary",
                      "regime": "spearman", "seed": spec.seed,
                      "status": "ok", "spearman": float(rho),
                      "n_targets": len(pairs)})


def _run_capacity_sweep(spec, cells, artifacts):
    _, ttest = build_datasets(spec.target)
    name = dataset_name(spec.target)
    atk = _attack_config(spec.attack)
    capacities = spec.extra.get("capacities") or [
        {"blocks": 2, "base_width": 8},
        {"blocks": 3, "base_width": 16},
        {"blocks": 4, "base_width": 32},
    ]
    for model_dict in capacities:
        def one(model_dict=model_dict):
            ft = _get_finetuned(spec, "full_finetune", model=model_dict)
            tag = ft.config.capacity_tag
            return dict(_triple_values(
                metrics.robustness_triple(ft, ttest, atk)), capacity=tag)
        _cell(cells, {"experiment": spec.kind, "dataset": name,
                      "regime": "full_finetune", "seed": spec.seed,
                      "blocks": model_dict["blocks"],
                      "base_width": model_dict["base_width"]}, one)


def _run_difficulty_sweep(spec, cells, artifacts):
    _, ttest = build_datasets(spec.target)
    name = dataset_name(spec.target)
    atk = _attack_config(spec.attack)
    difficulties = spec.extra.get("difficulties") or [1, 2, 3, 4]
    for d in difficulties:
        src = dict(spec.source, difficulty=int(d),
                   num_classes=min(spec.source["num_classes"], 4 ** int(d)))

        def one(src=src):
            ft = _get_finetuned(spec, "full_finetune", source=src)
            return _triple_values(metrics.robustness_triple(ft, ttest, atk))
        _cell(cells, {"experiment": spec.kind, "dataset": name,
                      "regime": "full_finetune", "seed": spec.seed,
                      "difficulty": int(d)}, one)


def _run_defense_compare(spec, cells, artifacts):
    _, ttest = build_datasets(spec.target)
    name = dataset_name(spec.target)
    atk = _attack_config(spec.attack)
    methods = {
        "standard": lambda: _get_standard(spec),
        "full_finetune": lambda: _get_finetuned(spec, "full_finetune"),
        "at_stage1": lambda: _get_finetuned(spec, "full_finetune",
                                            adv_pretrain=True),
        "at_stage2": lambda: _get_finetuned(spec, "full_finetune",
                                            adv_finetune=True),
        "at_stage1and2": lambda: _get_finetuned(spec, "full_finetune",
                                                adv_pretrain=True,
                                                adv_finetune=True),
        "dm_stage1and2": lambda: _get_finetuned(spec, "full_finetune",
                                                adv_pretrain=True, dm=True),
    }
    for regime, get in methods.items():
        _cell(cells, {"experiment": spec.kind, "dataset": name,
                      "regime": regime, "seed": spec.seed},
              lambda get=get: _triple_values(
                  metrics.robustness_triple(get(), ttest, atk)))


_RUNNERS = {
    "robustness_table": _run_robustness_table,
    "criteria_sweep": _run_criteria_sweep,
    "cca_compare": _run_cca_compare,
    "uap_checkpoint_probe": _run_uap_checkpoint_probe,
    "uap_transfer_probe": _run_uap_transfer_probe,
    "mmd_vs_dr": _run_mmd_vs_dr,
    "capacity_sweep": _run_capacity_sweep,
    "difficulty_sweep": _run_difficulty_sweep,
    "defense_compare": _run_defense_compare,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """Execute every cell of the experiment; failures are per-cell records."""
    t0 = time.time()
    os.makedirs(spec.out_dir, exist_ok=True)
    cells, artifacts = [], {}
    try:
        _RUNNERS[spec.kind](spec, cells, artifacts)
    except Exception as exc:  # setup failure: record, keep partial cells
        cells.append({"experiment": spec.kind, "dataset": "setup",
                      "regime": "setup", "seed": spec.seed,
                      "status": "failed",
                      "error": f"{type(exc).__name__}: {exc}"})
    report = ExperimentReport(spec=spec, digest=spec.digest(), cells=cells,
                              wall_clock=time.time() - t0,
                              artifacts=artifacts)
    with open(os.path.join(spec.out_dir, "report.json"), "w") as fh:
        json.dump({"spec": spec.to_dict(), "digest": report.digest,
                   "cells": report.cells, "wall_clock": report.wall_clock,
                   "artifacts": report.artifacts}, fh, indent=2,
                  sort_keys=True)
    with open(os.path.join(spec.out_dir, "records.jsonl"), "w") as fh:
        for cell in cells:
            fh.write(json.dumps(cell, sort_keys=True) + "\n")
    return report


def load_report(out_dir) -> ExperimentReport:
    with open(os.path.join(out_dir, "report.json")) as fh:
        payload = json.load(fh)
    spec = ExperimentSpec(**payload["spec"])
    return ExperimentReport(spec=spec, digest=payload["digest"],
                            cells=payload["cells"],
                            wall_clock=payload["wall_clock"],
                            artifacts=payload["artifacts"])


# ---------------------------------------------------------------------------
# Report emission: CSV tables + deterministic SVG figures
# ---------------------------------------------------------------------------

_BASE_COLUMNS = ["experiment", "dataset", "regime", "seed",
                 "aoi", "aai", "dr"]
_META_KEYS = {"status", "error"}


def _format_value(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def emit_report(report: ExperimentReport, formats=("csv", "svg")):
    """CSV (one row per completed cell) and, where meaningful, SVG plots.

    Emission is deterministic: re-emitting the same report produces
    byte-identical files.
    """
    out_dir = report.spec.out_dir
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    completed = report.completed_cells()
    if "csv" in formats:
        extras = sorted({k for c in completed for k in c}
                        - set(_BASE_COLUMNS) - _META_KEYS)
        columns = _BASE_COLUMNS + extras
        csv_path = os.path.join(out_dir, "report.csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for cell in completed:
                writer.writerow([_format_value(cell.get(k)) for k in columns])
        paths.append(csv_path)
    if "svg" in formats:
        paths.extend(_render_figures(report, completed, out_dir))
    return paths


def _render_figures(report, completed, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "robustlab"
    kind = report.spec.kind
    made = []

    def save(fig, name):
        path = os.path.join(out_dir, name)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        made.append(path)

    if kind == "uap_checkpoint_probe":
        fig, ax = plt.subplots(figsize=(5, 3.5))
        regimes = sorted({c["regime"] for c in completed})
        for regime in regimes:
            pts = sorted((c["batch"], c["uap_success"]) for c in completed
                         if c["regime"] == regime)
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", label=regime)
        ax.set_xlabel("training batch")
        ax.set_ylabel("UAP success rate (%)")
        ax.legend()
        fig.tight_layout()
        save(fig, "uap_checkpoint_probe.svg")
    elif kind == "mmd_vs_dr":
        pts = [(c["mmd"], c["dr"], c["dataset"]) for c in completed
               if "mmd" in c]
        if pts:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.scatter([p[0] for p in pts], [p[1] for p in pts])
            for mmd, dr, label in pts:
                ax.annotate(label, (mmd, dr), fontsize=7)
            ax.set_xlabel("MMD distance")
            ax.set_ylabel("decline ratio (%)")
            fig.tight_layout()
            save(fig, "mmd_vs_dr.svg")
    elif kind in ("capacity_sweep", "difficulty_sweep"):
        xkey = "capacity" if kind == "capacity_sweep" else "difficulty"
        pts = sorted((c[xkey], c["dr"]) for c in completed if xkey in c)
        if pts:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
            ax.set_xlabel(xkey)
            ax.set_ylabel("decline ratio (%)")
            if kind == "capacity_sweep":
                ax.set_xscale("log")
            fig.tight_layout()
            save(fig, f"{kind}.svg")
    return made
