"""Small convolutional model family with an explicit f/g parameter split.

The feature extractor f is a stack of conv3x3 -> relu -> maxpool blocks with
channel count doubling per block, followed by global average pooling, so the
embedding dimension equals the last block's channel count.  The classifier g
is a single fully connected layer.  Parameters are namespaced "f.*" / "g.*"
and the two sets partition the registry exactly.

Input normalization constants (train-split mean/std) live inside the model so
attacks always operate in raw [0,1] pixel space.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class VersionMismatchError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclasses.dataclass
class ModelConfig:
    blocks: int
    base_width: int
    input_shape: tuple  # (c, h, w)
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if not 2 <= self.blocks <= 5:
            raise ValueError("blocks must be in 2..5")
        if self.base_width < 1 or self.num_classes < 1:
            raise ValueError("base_width and num_classes must be >= 1")
        c, h, w = self.input_shape
        if h % (2 ** self.blocks) or w % (2 ** self.blocks):
            raise ValueError(
                f"input {h}x{w} not divisible by 2^{self.blocks} pooling")
        if h // (2 ** self.blocks) < 1:
            raise ValueError("input smaller than the pooled receptive field")

    @property
    def widths(self):
        return [self.base_width * (2 ** i) for i in range(self.blocks)]

    @property
    def embedding_dim(self):
        return self.widths[-1]

    @property
    def capacity_tag(self):
        c = self.input_shape[0]
        total = 0
        for width in self.widths:
            total += width * c * 9 + width
            c = width
        total += self.embedding_dim * self.num_classes + self.num_classes
        return total


class Model:
    """A feature extractor / classifier pair over the autodiff Graph."""

    def __init__(self, config, params, norm_mean, norm_std, provenance=None):
        self.config = config
        self.params = params  # name -> float32 np.ndarray, shared with graphs
        self.norm_mean = np.asarray(norm_mean, dtype=np.float32)
        self.norm_std = np.asarray(norm_std, dtype=np.float32)
        self.provenance = dict(provenance or {})
        self._graphs = {}

    # -- parameter bookkeeping ----------------------------------------------

    def feature_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("f.")}

    def classifier_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("g.")}

    def params_checksum(self, prefix=""):
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def copy(self):
        m = Model(self.config, {k: v.copy() for k, v in self.params.items()},
                  self.norm_mean.copy(), self.norm_std.copy(),
                  dict(self.provenance))
        return m

    def set_params(self, params):
        """Overwrite parameter values in place (keeps graph sharing intact)."""
        for k, v in params.items():
            self.params[k][...] = v

    # -- graph construction --------------------------------------------------

    def _norm_coeffs(self):
        c = self.config.input_shape[0]
        mul = (1.0 / self.norm_std).reshape(1, c, 1, 1)
        shift = (-self.norm_mean / self.norm_std).reshape(1, c, 1, 1)
        return mul, shift

    def _add_pipeline(self, g, input_name, prefix=""):
        """Append norm -> blocks -> embedding -> logits nodes reading shared
        parameters; returns (embedding node, logits node)."""
        mul, shift = self._norm_coeffs()
        for name in self.params:
            if name not in g.params:
                g.add_param(name, self.params[name])
        g.affine(prefix + "norm", input_name, mul, shift)
        src = prefix + "norm"
        for i in range(self.config.blocks):
            g.conv2d(f"{prefix}f.b{i}.conv", src, f"f.b{i}.w", f"f.b{i}.b")
            g.relu(f"{prefix}f.b{i}.relu", f"{prefix}f.b{i}.conv")
            g.max_pool(f"{prefix}f.b{i}.pool", f"{prefix}f.b{i}.relu")
            src = f"{prefix}f.b{i}.pool"
        g.global_avg_pool(prefix + "embedding", src)
        g.dense(prefix + "logits", prefix + "embedding", "g.w", "g.b")
        return prefix + "embedding", prefix + "logits"

    def graph(self, kind="train", dtype=np.float32):
        """Lazily built graphs sharing this model's parameter arrays.

        kinds: 'train' (loss over x,y), 'attack' (loss, x differentiable),
        'infer' (no loss), 'steepness' (two-branch Lipschitz ratio).

        float32 graphs share this model's parameter storage, so optimizer
        updates are visible to every cached graph; other dtypes get casted
        copies (used for verification only).
        """
        key = (kind, np.dtype(dtype).name)
        if key in self._graphs:
            return self._graphs[key]
        c, h, w = self.config.input_shape
        g = ad.Graph(dtype=dtype)
        if kind == "infer":
            g.add_input("x", (None, c, h, w), differentiable=False)
            self._add_pipeline(g, "x")
        elif kind in ("train", "attack"):
            g.add_input("x", (None, c, h, w),
                        differentiable=(kind == "attack"))
            g.add_input("y", (None,), integer=True)
            _, logits = self._add_pipeline(g, "x")
            g.softmax_cross_entropy("loss", logits, "y")
        elif kind == "steepness":
            g.add_input("x", (None, c, h, w), differentiable=False)
            g.add_input("xp", (None, c, h, w), differentiable=True)
            emb_a, _ = self._add_pipeline(g, "x", prefix="a.")
            emb_b, _ = self._add_pipeline(g, "xp", prefix="b.")
            g.sub("featdiff", emb_a, emb_b)
            g.l1_norm("num", "featdiff")
            g.sub("inputdiff", "xp", "x")
            g.linf_norm("den", "inputdiff")
            g.div("ratio", "num", "den")
            g.sum_all("ratio_sum", "ratio")
            g.batch_mean("ratio_mean", "ratio")
        else:
            raise ValueError(f"unknown graph kind {kind!r}")
        self._graphs[key] = g
        return g

    def invalidate_graphs(self):
        self._graphs = {}

    # -- inference ------------------------------------------------------------

    def _check_pixels(self, x):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ad.ShapeError(
                f"expected (n,{','.join(map(str, self.config.input_shape))}), "
                f"got {x.shape}")
        return x

    def embed(self, x, chunk=512):
        """Embedding e_x for a [0,1] image batch."""
        x = self._check_pixels(x)
        g = self.graph("infer")
        outs = [g.forward({"x": x[i:i + chunk]})["embedding"]
                for i in range(0, len(x), chunk)]
        return np.concatenate(outs) if outs else np.zeros(
            (0, self.config.embedding_dim), dtype=np.float32)

    def logits(self, x, chunk=512):
        x = self._check_pixels(x)
        g = self.graph("infer")
        outs = [g.forward({"x": x[i:i + chunk]})["logits"]
                for i in range(0, len(x), chunk)]
        return np.concatenate(outs) if outs else np.zeros(
            (0, self.config.num_classes), dtype=np.float32)

    def classify(self, x, chunk=512):
        """Returns (logits, predicted labels); argmax ties break low-index."""
        z = self.logits(x, chunk=chunk)
        return z, z.argmax(axis=1)

    def layer_activations(self, x, depth="all", chunk=512):
        """Spatially averaged activations at block `depth` (1-based) or the
        concatenation over all blocks."""
        x = self._check_pixels(x)
        if depth != "all":
            if not 1 <= int(depth) <= self.config.blocks:
                raise ValueError(
                    f"depth {depth} out of range 1..{self.config.blocks}")
            wanted = [int(depth) - 1]
        else:
            wanted = list(range(self.config.blocks))
        g = self.graph("infer")
        rows = []
        for i in range(0, len(x), chunk):
            out = g.forward({"x": x[i:i + chunk]})
            rows.append(np.concatenate(
                [out[f"f.b{b}.pool"].mean(axis=(2, 3)) for b in wanted],
                axis=1))
        return np.concatenate(rows)

    def loss_and_input_grad(self, x, y):
        """Mean cross-entropy and its gradient w.r.t. the raw input batch."""
        g = self.graph("attack")
        out = g.forward({"x": x, "y": y})
        g.backward("loss")
        return float(out["loss"]), g.input_grad("x")


def _init_params(config, rng, include_features=True, include_classifier=True):
    params = {}
    c = config.input_shape[0]
    for i, width in enumerate(config.widths):
        bound = 1.0 / np.sqrt(c * 9)
        if include_features:
            params[f"f.b{i}.w"] = rng.uniform(
                -bound, bound, size=(width, c, 3, 3)).astype(np.float32)
            params[f"f.b{i}.b"] = rng.uniform(
                -bound, bound, size=width).astype(np.float32)
        c = width
    if include_classifier:
        bound = 1.0 / np.sqrt(config.embedding_dim)
        params["g.w"] = rng.uniform(
            -bound, bound,
            size=(config.embedding_dim, config.num_classes)).astype(np.float32)
        params["g.b"] = rng.uniform(
            -bound, bound, size=config.num_classes).astype(np.float32)
    return params


def build_model(config: ModelConfig, seed, norm_mean=None, norm_std=None,
                provenance=None) -> Model:
    """Fan-in-scaled uniform initialization, deterministic in `seed`."""
    rng = np.random.default_rng([seed, 17])
    params = _init_params(config, rng)
    c = config.input_shape[0]
    mean = np.zeros(c, dtype=np.float32) if norm_mean is None else norm_mean
    std = np.ones(c, dtype=np.float32) if norm_std is None else norm_std
    prov = dict(provenance or {}, init_seed=int(seed))
    return Model(config, params, mean, std, prov)


def reinit_classifier(model: Model, new_num_classes, seed) -> Model:
    """Fresh zero-initialized classifier head; f untouched bitwise.

    Zero init keeps the first fine-tuning steps well-scaled regardless of
    the feature magnitude the pre-trained extractor produces on the target
    domain (the head's gradient, not its starting point, sets the scale).
    """
    cfg = dataclasses.replace(model.config, num_classes=int(new_num_classes))
    params = {k: v.copy() for k, v in model.params.items()
              if k.startswith("f.")}
    params["g.w"] = np.zeros((cfg.embedding_dim, cfg.num_classes),
                             dtype=np.float32)
    params["g.b"] = np.zeros(cfg.num_classes, dtype=np.float32)
    prov = dict(model.provenance, classifier_reinit_seed=int(seed))
    return Model(cfg, params, model.norm_mean.copy(), model.norm_std.copy(),
                 prov)


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path):
    """manifest.json + params.bin (little-endian float32, manifest order)."""
    path = str(path)
    order = sorted(model.params)
    blob = b"".join(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes()
                    for k in order)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": {
            "blocks": model.config.blocks,
            "base_width": model.config.base_width,
            "input_shape": list(model.config.input_shape),
            "num_classes": model.config.num_classes,
        },
        "provenance": model.provenance,
        "norm_mean": [float(v) for v in model.norm_mean],
        "norm_std": [float(v) for v in model.norm_std],
        "params": [[k, list(model.params[k].shape)] for k in order],
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".ckpt-")
    with open(os.path.join(tmp, "params.bin"), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(tmp, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if os.path.isdir(path):
        for name in ("manifest.json", "params.bin"):
            os.replace(os.path.join(tmp, name), os.path.join(path, name))
        os.rmdir(tmp)
    else:
        os.replace(tmp, path)


def load_checkpoint(path) -> Model:
    path = str(path)
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint manifest in {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {manifest.get('format_version')} != "
            f"{CHECKPOINT_VERSION}")
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        blob = fh.read()
    want = sum(int(np.prod(shape)) for _, shape in manifest["params"]) * 4
    if len(blob) < want:
        raise TruncatedCheckpointError(
            f"params.bin truncated: {len(blob)}/{want} bytes")
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise CheckpointChecksumError("params.bin checksum mismatch")
    params = {}
    offset = 0
    for name, shape in manifest["params"]:
        size = int(np.prod(shape)) * 4
        params[name] = np.frombuffer(
            blob[offset:offset + size], dtype="<f4").reshape(shape).copy()
        offset += size
    cfg = ModelConfig(**dict(manifest["config"],
                             input_shape=tuple(manifest["config"]["input_shape"])))
    return Model(cfg, params,
                 np.array(manifest["norm_mean"], dtype=np.float32),
                 np.array(manifest["norm_std"], dtype=np.float32),
                 manifest["provenance"])
