"""Linf evasion attacks (FGSM, PGD) and targeted universal perturbations.

Budgets are expressed in 1/255 pixel units throughout (an `eps` of 0.5 means
0.5/255 on [0,1] images), matching how perturbation sizes are reported in the
experiment tables.  Attacks never mutate model parameters and always return
inputs clamped to [0,1] within the requested ball.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile

import numpy as np

from . import data as data_mod
from .data import batch_iter

PIXEL_UNIT = 1.0 / 255.0


@dataclasses.dataclass
class AttackConfig:
    """Shared contract for FGSM / PGD / UAP / LL inner maximization."""

    eps: float                 # linf budget, 1/255 units
    steps: int = 1
    step_size: float | None = None  # 1/255 units; default 1.25 * eps / steps
    targeted: bool = False
    target_class: int | None = None
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.targeted and self.target_class is None:
            raise ValueError("targeted attack requires target_class")
        if self.step_size is None:
            self.step_size = 1.25 * self.eps / self.steps
        elif self.eps > 0 and self.steps > 1 and self.step_size <= 0:
            raise ValueError("step_size must be > 0 for multi-step attacks")


@dataclasses.dataclass
class Uap:
    """Image-independent perturbation pushing inputs toward a target class."""

    v: np.ndarray              # input-shaped, ||v||inf <= eps (pixel space)
    target_class: int
    eps: float                 # 1/255 units
    provenance: dict

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float32)
        if np.abs(self.v).max() > self.eps * PIXEL_UNIT + 1e-6:
            raise ValueError("perturbation exceeds its linf budget")


def _attack_labels(model, y, cfg):
    if cfg.targeted:
        if not 0 <= cfg.target_class < model.config.num_classes:
            raise ValueError(
                f"target_class {cfg.target_class} invalid for "
                f"{model.config.num_classes}-class model")
        return np.full(len(y), cfg.target_class, dtype=np.int64)
    return np.asarray(y, dtype=np.int64)


def fgsm(model, x, y, eps):
    """One signed-gradient step: clamp(x + eps*sign(grad_x L))."""
    return pgd(model, x, y, AttackConfig(eps=eps, steps=1, step_size=eps,
                                         random_start=False))


def pgd(model, x, y, cfg: AttackConfig):
    """Iterative signed-gradient ascent projected onto the eps-ball and [0,1].

    Untargeted maximizes the loss at the true labels; targeted minimizes the
    loss at `cfg.target_class`.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise ValueError(f"labels {y.shape} do not match batch {x.shape}")
    labels = _attack_labels(model, y, cfg)
    eps = cfg.eps * PIXEL_UNIT
    step = cfg.step_size * PIXEL_UNIT
    sign = -1.0 if cfg.targeted else 1.0
    lo, hi = np.clip(x - eps, 0.0, 1.0), np.clip(x + eps, 0.0, 1.0)
    if cfg.random_start and cfg.eps > 0:
        rng = np.random.default_rng([cfg.seed, 31])
        xa = x + rng.uniform(-eps, eps, size=x.shape).astype(np.float32)
        xa = np.clip(xa, lo, hi)
    else:
        xa = x.copy()
    for _ in range(cfg.steps):
        _, g = model.loss_and_input_grad(xa, labels)
        xa = xa + sign * step * np.sign(g, dtype=np.float32)
        xa = np.clip(xa, lo, hi)
    return xa


def uap_train(model, dataset, target_class, eps=10.0, steps=200,
              step_size=None, batch_size=128, seed=0):
    """Optimize one perturbation so clamp(x+v) lands in `target_class`.

    Direct signed-gradient descent on the batch-averaged targeted
    cross-entropy, projecting ||v||inf <= eps after every step.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train a UAP on an empty dataset")
    if not 0 <= target_class < model.config.num_classes:
        raise ValueError(f"target_class {target_class} out of range")
    eps_pix = eps * PIXEL_UNIT
    if step_size is None:
        step_size = 1.25 * eps / max(steps, 1)
    step_pix = step_size * PIXEL_UNIT
    v = np.zeros(dataset.image_shape, dtype=np.float32)
    done = 0
    epoch = 0
    while done < steps:
        for xb, _ in batch_iter(dataset, batch_size, shuffle_seed=seed,
                                epoch=epoch):
            if done >= steps:
                break
            labels = np.full(len(xb), target_class, dtype=np.int64)
            xa = np.clip(xb + v, 0.0, 1.0)
            _, g = model.loss_and_input_grad(xa, labels)
            v = v - step_pix * np.sign(g.sum(axis=0), dtype=np.float32)
            v = np.clip(v, -eps_pix, eps_pix)
            done += 1
        epoch += 1
    uap = Uap(v, int(target_class), float(eps), {
        "model_checksum": model.params_checksum(),
        "dataset": dataset.provenance.get("generator", "unknown"),
        "steps": int(steps),
        "step_size": float(step_size),
        "batch_size": int(batch_size),
        "seed": int(seed),
    })
    uap.provenance["success_rate"] = _success_rate(model, uap, dataset)
    return uap


def _success_rate(model, uap, dataset, chunk=512):
    hits = 0
    for i in range(0, len(dataset), chunk):
        xa = np.clip(dataset.images[i:i + chunk] + uap.v, 0.0, 1.0)
        _, pred = model.classify(xa)
        hits += int((pred == uap.target_class).sum())
    return 100.0 * hits / len(dataset)


def apply_uap(uap: Uap, dataset):
    """Perturbed view of a dataset: every image clamp(x+v), labels untouched."""
    if dataset.image_shape != uap.v.shape:
        raise ValueError(
            f"uap shape {uap.v.shape} does not match images "
            f"{dataset.image_shape}")
    images = np.clip(dataset.images + uap.v, 0.0, 1.0)
    prov = dict(dataset.provenance, uap_target=uap.target_class,
                uap_eps=uap.eps)
    return data_mod.Dataset(images, dataset.labels.copy(),
                            dataset.num_classes, dataset.split, prov)


def save_uap(uap: Uap, path):
    """Same manifest + little-endian blob convention as model checkpoints."""
    path = str(path)
    blob = np.ascontiguousarray(uap.v, dtype="<f4").tobytes()
    manifest = {
        "format_version": 1,
        "shape": list(uap.v.shape),
        "target_class": uap.target_class,
        "eps": uap.eps,
        "provenance": uap.provenance,
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".uap-")
    with open(os.path.join(tmp, "v.bin"), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(tmp, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if os.path.isdir(path):
        for name in ("manifest.json", "v.bin"):
            os.replace(os.path.join(tmp, name), os.path.join(path, name))
        os.rmdir(tmp)
    else:
        os.replace(tmp, path)


def load_uap(path) -> Uap:
    path = str(path)
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise data_mod.ManifestError(f"bad uap manifest in {path}: {e}") from e
    with open(os.path.join(path, "v.bin"), "rb") as fh:
        blob = fh.read()
    want = int(np.prod(manifest["shape"])) * 4
    if len(blob) < want:
        raise data_mod.TruncatedPayloadError(
            f"v.bin truncated: {len(blob)}/{want} bytes")
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise data_mod.ChecksumError("v.bin checksum mismatch")
    v = np.frombuffer(blob, dtype="<f4").reshape(manifest["shape"]).copy()
    return Uap(v, manifest["target_class"], manifest["eps"],
               manifest["provenance"])
