"""Measurement instruments: AOI/AAI/DR, CCA similarity, kernel MMD,
local Lipschitzness of the feature map, and UAP probes.

All metrics are pure and read-only over models and datasets.  Accuracies are
percentages; DR = 100*(AOI-AAI)/AOI.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .attacks import PIXEL_UNIT, AttackConfig, apply_uap, pgd


@dataclasses.dataclass
class RobustnessTriple:
    aoi: float
    aai: float
    dr: float

    def as_dict(self):
        return {"aoi": self.aoi, "aai": self.aai, "dr": self.dr}


def evaluate_accuracy(model, dataset, chunk=512):
    """Percentage of images whose predicted label matches the true label."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for i in range(0, len(dataset), chunk):
        _, pred = model.classify(dataset.images[i:i + chunk])
        hits += int((pred == dataset.labels[i:i + chunk]).sum())
    return 100.0 * hits / len(dataset)


def evaluate_adversarial(model, dataset, attack: AttackConfig, chunk=256):
    """White-box accuracy on per-sample attacked inputs."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for i in range(0, len(dataset), chunk):
        xb = dataset.images[i:i + chunk]
        yb = dataset.labels[i:i + chunk]
        cfg = dataclasses.replace(attack, seed=attack.seed + i)
        xa = pgd(model, xb, yb, cfg)
        _, pred = model.classify(xa)
        hits += int((pred == yb).sum())
    return 100.0 * hits / len(dataset)


def decline_ratio(aoi, aai):
    """DR = 100*(AOI-AAI)/AOI, reported to two decimals."""
    if aoi <= 0:
        raise ValueError("decline ratio undefined for AOI <= 0")
    return round(100.0 * (aoi - aai) / aoi, 2)


def robustness_triple(model, dataset, attack: AttackConfig):
    aoi = evaluate_accuracy(model, dataset)
    aai = evaluate_adversarial(model, dataset, attack)
    return RobustnessTriple(aoi=aoi, aai=aai, dr=decline_ratio(aoi, aai))


# ---------------------------------------------------------------------------
# CCA similarity between activation matrices
# ---------------------------------------------------------------------------

def _inv_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.maximum(vals, 1e-30)
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T


def cca_similarity(acts1, acts2, ridge_scale=1e-6):
    """Mean canonical correlation between two (images x neurons) matrices.

    Whitening + SVD with a ridge of `ridge_scale * trace/dim` on each
    covariance; k = min(j1, j2, n-1) correlations are averaged and the result
    clipped to [0, 1].
    """
    a = np.asarray(acts1, dtype=np.float64)
    b = np.asarray(acts2, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"activation shapes {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least two images")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    saa = a.T @ a / (n - 1)
    sbb = b.T @ b / (n - 1)
    if np.trace(saa) <= 0 or np.trace(sbb) <= 0:
        raise ValueError("rank-0 activations (all columns constant)")
    saa += np.eye(a.shape[1]) * (ridge_scale * np.trace(saa) / a.shape[1])
    sbb += np.eye(b.shape[1]) * (ridge_scale * np.trace(sbb) / b.shape[1])
    sab = a.T @ b / (n - 1)
    m = _inv_sqrt(saa) @ sab @ _inv_sqrt(sbb)
    rho = np.linalg.svd(m, compute_uv=False)
    k = min(a.shape[1], b.shape[1], n - 1)
    return float(np.clip(rho[:k].mean(), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Kernel MMD between embedding samples
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class MmdConfig:
    """RBF kernel MMD; bandwidth defaults to the median pairwise distance."""

    sigma: float | None = None

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be > 0")


def _sq_dists(x, y):
    xx = (x * x).sum(axis=1, keepdims=True)
    yy = (y * y).sum(axis=1, keepdims=True)
    return np.maximum(xx + yy.T - 2.0 * x @ y.T, 0.0)


def mmd_distance(emb1, emb2, config: MmdConfig | None = None):
    """Biased V-statistic kernel MMD (nonnegative by construction)."""
    a = np.asarray(emb1, dtype=np.float64)
    b = np.asarray(emb2, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding shapes {a.shape} vs {b.shape}")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("need at least one sample per side")
    config = config or MmdConfig()
    daa, dbb, dab = _sq_dists(a, a), _sq_dists(b, b), _sq_dists(a, b)
    if config.sigma is None:
        pooled = np.concatenate([np.concatenate([daa, dab], axis=1),
                                 np.concatenate([dab.T, dbb], axis=1)], axis=0)
        positive = pooled[pooled > 0]
        sigma = float(np.sqrt(np.median(positive))) if positive.size else 1.0
    else:
        sigma = config.sigma
    s2 = 2.0 * sigma * sigma
    mmd2 = (np.exp(-daa / s2).mean() + np.exp(-dbb / s2).mean()
            - 2.0 * np.exp(-dab / s2).mean())
    return float(np.sqrt(max(mmd2, 0.0)))


# ---------------------------------------------------------------------------
# Local Lipschitzness of the feature map
# ---------------------------------------------------------------------------

def _push_apart(x, xp, eps_pix):
    """Keep ||x-xp||inf > 0 so the steepness ratio never divides by zero."""
    flat_x = x.reshape(len(x), -1)
    flat_xp = xp.reshape(len(xp), -1)
    same = np.abs(flat_xp - flat_x).max(axis=1) == 0
    for r in np.where(same)[0]:
        if flat_x[r, 0] + eps_pix <= 1.0:
            flat_xp[r, 0] = flat_x[r, 0] + eps_pix
        else:
            flat_xp[r, 0] = flat_x[r, 0] - eps_pix


def local_lipschitz(model, images, eps, steps=10, step_size=None, seed=0,
                    chunk=256, restarts=1):
    """Average worst-case ||f(x)-f(x')||_1 / ||x-x'||_inf over linf balls.

    The inner maximization is PGD ascent on the ratio, starting from a random
    corner of the ball surface (avoiding the 0/0 singularity at x'=x); the
    per-image maximum over all visited points of all `restarts` trajectories
    is kept, so the estimate is non-decreasing in `steps` and `restarts`.
    `eps` is in 1/255 units.
    """
    if eps <= 0:
        raise ValueError("local Lipschitzness requires eps > 0")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    images = np.asarray(images, dtype=np.float32)
    if step_size is None:
        step_size = 1.25 * eps / steps
    eps_pix = eps * PIXEL_UNIT
    step_pix = step_size * PIXEL_UNIT
    graph = model.graph("steepness")
    rng = np.random.default_rng([seed, 41])
    best_all = []
    for i in range(0, len(images), chunk):
        x = images[i:i + chunk]
        lo, hi = np.clip(x - eps_pix, 0.0, 1.0), np.clip(x + eps_pix, 0.0, 1.0)
        best = np.zeros(len(x), dtype=np.float64)
        for _ in range(restarts):
            corner = rng.choice([-1.0, 1.0], size=x.shape).astype(np.float32)
            xp = np.clip(x + eps_pix * corner, 0.0, 1.0)
            _push_apart(x, xp, eps_pix)
            for it in range(steps + 1):
                out = graph.forward({"x": x, "xp": xp})
                best = np.maximum(best, out["ratio"])
                if it == steps:
                    break
                graph.backward("ratio_sum")
                g = graph.input_grad("xp")
                xp = np.clip(xp + step_pix * np.sign(g, dtype=np.float32),
                             lo, hi)
                _push_apart(x, xp, eps_pix)
        best_all.append(best)
    return float(np.concatenate(best_all).mean())


def batch_feature_steepness(model, x, xp):
    """Ratio vector ||f(x)-f(x')||_1 / ||x-x'||_inf for paired batches."""
    out = model.graph("steepness").forward({"x": x, "xp": xp})
    return out["ratio"]


# ---------------------------------------------------------------------------
# UAP probes
# ---------------------------------------------------------------------------

def uap_success_rate(model, uap, dataset, chunk=512):
    """Targeted probe: percentage of images classified as the UAP target."""
    if dataset.image_shape != uap.v.shape:
        raise ValueError(
            f"uap shape {uap.v.shape} vs images {dataset.image_shape}")
    if not 0 <= uap.target_class < model.config.num_classes:
        raise ValueError(
            f"uap target {uap.target_class} invalid for this model")
    hits = 0
    for i in range(0, len(dataset), chunk):
        xa = np.clip(dataset.images[i:i + chunk] + uap.v, 0.0, 1.0)
        _, pred = model.classify(xa)
        hits += int((pred == uap.target_class).sum())
    return 100.0 * hits / len(dataset)


def uap_robustness_triple(model, uap, dataset):
    """Untargeted probe for cross-label-space transfer: accuracy decline
    under the fixed perturbation, as a RobustnessTriple."""
    aoi = evaluate_accuracy(model, dataset)
    perturbed = apply_uap(uap, dataset)
    aai = evaluate_accuracy(model, perturbed)
    return RobustnessTriple(aoi=aoi, aai=aai, dr=decline_ratio(aoi, aai))
