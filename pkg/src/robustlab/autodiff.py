"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

The engine is a define-by-run tape (`Tensor` plus op functions) wrapped in a
named-node `Graph` that models build on.  Layer set is exactly what the model
zoo needs: conv2d, dense, relu, 2x2 max-pool, flatten, global average pool,
add/sub/scale/affine/div, batch-mean, softmax cross-entropy and the l1/linf
norms used by the Lipschitz machinery.

Training runs at float32; gradient verification (`finite_diff_check`) requires
float64.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    """Operand shapes incompatible with the op."""


class NonFiniteError(AutodiffError):
    """A completed op produced NaN or Inf."""


class GraphStateError(AutodiffError):
    """Graph used out of order (e.g. backward before forward)."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tensor:
    """A numpy array with an optional gradient accumulator and tape hooks."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse sweep from this (scalar) tensor through the tape."""
        if self.data.size != 1:
            raise GraphStateError(
                f"backward requires a scalar, got shape {self.data.shape}")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  parents=[p for p in parents if p.requires_grad],
                  backward=backward if needs else None)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; supports a trailing-axes broadcast for biases."""
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _result(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))
    return _result(out, (a, b), bw)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * factor

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * factor)
    return _result(out, (a,), bw)


def affine(a: Tensor, mul, shift) -> Tensor:
    """x * mul + shift with constant (non-trainable) coefficients."""
    mul = np.asarray(mul, dtype=a.data.dtype)
    shift = np.asarray(shift, dtype=a.data.dtype)
    try:
        out = a.data * mul + shift
    except ValueError as e:
        raise ShapeError(f"affine: {a.shape} vs {mul.shape}") from e

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * mul, a.shape))
    return _result(out, (a,), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: {a.shape} vs {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * a.data / (b.data * b.data))
    return _result(out, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 fixed to 0
    mask = a.data > 0
    out = np.where(mask, a.data, 0)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * mask)
    return _result(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return _result(out, (a, b), bw)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x of shape (n, in), w (in, out), b (out,)."""
    return add(matmul(x, w), b)


def flatten(a: Tensor) -> Tensor:
    n = a.shape[0]
    out = a.data.reshape(n, -1)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))
    return _result(out, (a,), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int = 1) -> Tensor:
    """2D convolution, stride 1.  x: (n,c,h,w), w: (f,c,kh,kw), b: (f,)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    n, c, h, ww = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, ww + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = out + b.data[:, None, None]

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if b.requires_grad:
            b._accumulate(gmat.sum(axis=0))
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            # full correlation of upstream grad with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = np.lib.stride_tricks.sliding_window_view(
                gp, (kh, kw), axis=(2, 3))
            gcols = gwin.transpose(0, 2, 3, 1, 4, 5).reshape(-1, f * kh * kw)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            hp, wp = h + 2 * pad, ww + 2 * pad
            dxp = (gcols @ wflip.T).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, pad:pad + h, pad:pad + ww]
                          if pad else dxp)
    return _result(out, (x, w, b), bw)


def max_pool2(a: Tensor) -> Tensor:
    """2x2 max pool, stride 2; ties broken toward the first row-major element."""
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: odd spatial dims {(h, w)}")
    win = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(
        0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if not a.requires_grad:
            return
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        a._accumulate(gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(
            0, 1, 2, 4, 3, 5).reshape(a.shape))
    return _result(out, (a,), bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """(n,c,h,w) -> (n,c) spatial mean; the embedding head of the model zoo."""
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4d, got {a.shape}")
    n, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3))

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(
                g[:, :, None, None] / (h * w), a.shape))
    return _result(out, (a,), bw)


def batch_mean(a: Tensor) -> Tensor:
    """Mean over all elements -> scalar."""
    out = np.asarray(a.data.mean())

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / a.data.size, a.shape))
    return _result(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape))
    return _result(out, (a,), bw)


def l1_norm(a: Tensor) -> Tensor:
    """Per-row l1 norm: sum of |x| over all non-batch axes -> (n,)."""
    flat = a.data.reshape(a.shape[0], -1)
    out = np.abs(flat).sum(axis=1)

    def bw(g):
        if a.requires_grad:
            a._accumulate((np.sign(flat) * g[:, None]).reshape(a.shape))
    return _result(out, (a,), bw)


def linf_norm(a: Tensor) -> Tensor:
    """Per-row linf norm -> (n,); gradient routed to the first maximal |x|."""
    flat = a.data.reshape(a.shape[0], -1)
    absf = np.abs(flat)
    idx = absf.argmax(axis=1)
    rows = np.arange(flat.shape[0])
    out = absf[rows, idx]

    def bw(g):
        if a.requires_grad:
            gf = np.zeros_like(flat)
            gf[rows, idx] = g * np.sign(flat[rows, idx])
            a._accumulate(gf.reshape(a.shape))
    return _result(out, (a,), bw)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of logits (n,k) against integer labels (n,)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    n = z.shape[0]
    out = np.asarray((logsumexp[:, 0] - z[np.arange(n), labels]).mean())

    def bw(g):
        if logits.requires_grad:
            p = np.exp(z - logsumexp)
            p[np.arange(n), labels] -= 1
            logits._accumulate(g * p / n)
    return _result(out, (logits,), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (no tape)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

class Graph:
    """Ordered named ops over a parameter registry.

    Nodes are appended via the builder methods and executed in insertion
    order; every node output is cached by `forward` so `backward` can be run
    from any scalar node.  A Graph instance is single-writer: forward and
    backward on one instance must not interleave across threads.
    """

    def __init__(self, dtype=np.float32, check_finite=True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.inputs = {}         # name -> (shape with None batch, differentiable)
        self.params = {}         # name -> np.ndarray
        self._nodes = []         # (name, fn(env) -> Tensor)
        self._names = set()
        self._cache = None       # name -> Tensor after forward
        self._input_grads = {}

    # -- construction -------------------------------------------------------

    def _claim(self, name):
        if name in self._names:
            raise AutodiffError(f"duplicate node/input/param name {name!r}")
        self._names.add(name)

    def add_input(self, name, shape, differentiable=False, integer=False):
        self._claim(name)
        self.inputs[name] = {"shape": tuple(shape),
                             "differentiable": differentiable,
                             "integer": integer}

    def add_param(self, name, value):
        self._claim(name)
        self.params[name] = np.asarray(value, dtype=self.dtype)

    def _node(self, name, fn):
        self._claim(name)
        self._nodes.append((name, fn))

    def identity(self, name, src):
        self._node(name, lambda env: _result(
            env[src].data, (env[src],),
            lambda g: env[src]._accumulate(g) if env[src].requires_grad else None))

    def conv2d(self, name, src, w, b, pad=1):
        self._node(name, lambda env: conv2d(env[src], env[w], env[b], pad=pad))

    def dense(self, name, src, w, b):
        self._node(name, lambda env: dense(env[src], env[w], env[b]))

    def relu(self, name, src):
        self._node(name, lambda env: relu(env[src]))

    def max_pool(self, name, src):
        self._node(name, lambda env: max_pool2(env[src]))

    def flatten(self, name, src):
        self._node(name, lambda env: flatten(env[src]))

    def global_avg_pool(self, name, src):
        self._node(name, lambda env: global_avg_pool(env[src]))

    def add(self, name, a, b):
        self._node(name, lambda env: add(env[a], env[b]))

    def sub(self, name, a, b):
        self._node(name, lambda env: sub(env[a], env[b]))

    def div(self, name, a, b):
        self._node(name, lambda env: div(env[a], env[b]))

    def scale(self, name, src, factor):
        self._node(name, lambda env: scale(env[src], factor))

    def affine(self, name, src, mul, shift):
        self._node(name, lambda env: affine(env[src], mul, shift))

    def batch_mean(self, name, src):
        self._node(name, lambda env: batch_mean(env[src]))

    def sum_all(self, name, src):
        self._node(name, lambda env: sum_all(env[src]))

    def l1_norm(self, name, src):
        self._node(name, lambda env: l1_norm(env[src]))

    def linf_norm(self, name, src):
        self._node(name, lambda env: linf_norm(env[src]))

    def softmax_cross_entropy(self, name, logits, labels):
        self._node(name, lambda env: softmax_cross_entropy(
            env[logits], env[labels].data))

    # -- execution ----------------------------------------------------------

    def forward(self, inputs):
        """Run all nodes; returns {node name: np.ndarray} and caches tensors."""
        env = {}
        for name, sig in self.inputs.items():
            if name not in inputs:
                raise ShapeError(f"missing input {name!r}")
            arr = np.asarray(inputs[name])
            want = sig["shape"]
            got = arr.shape
            ok = len(want) == len(got) and all(
                w is None or w == g for w, g in zip(want, got))
            if not ok:
                raise ShapeError(f"input {name!r}: expected {want}, got {got}")
            if sig["integer"]:
                arr = arr.astype(np.int64)
            else:
                arr = arr.astype(self.dtype)
            env[name] = Tensor(arr, requires_grad=sig["differentiable"])
        for name, value in self.params.items():
            env[name] = Tensor(value, requires_grad=True)
        for name, fn in self._nodes:
            try:
                t = fn(env)
            except ShapeError as e:
                raise ShapeError(f"node {name!r}: {e}") from e
            if self.check_finite and not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"node {name!r} produced non-finite values")
            env[name] = t
        self._cache = env
        self._input_grads = {}
        return {name: env[name].data for name, _ in self._nodes}

    def backward(self, loss_node):
        """Backprop from `loss_node`; returns {param name: gradient array}."""
        if self._cache is None:
            raise GraphStateError("backward called before forward")
        if loss_node not in self._cache:
            raise GraphStateError(f"unknown node {loss_node!r}")
        loss = self._cache[loss_node]
        loss.backward()
        grads = {}
        for name in self.params:
            g = self._cache[name].grad
            grads[name] = g if g is not None else np.zeros_like(self.params[name])
        for name, sig in self.inputs.items():
            if sig["differentiable"]:
                g = self._cache[name].grad
                self._input_grads[name] = (
                    g if g is not None
                    else np.zeros(self._cache[name].shape, dtype=self.dtype))
        self._cache = None
        return grads

    def input_grad(self, name):
        if name not in self._input_grads:
            raise GraphStateError(f"no gradient recorded for input {name!r}")
        return self._input_grads[name]


# ---------------------------------------------------------------------------
# Verification and optimization
# ---------------------------------------------------------------------------

def finite_diff_check(graph, inputs, loss_node, h=1e-4, tol=1e-4):
    """Compare backward gradients against central finite differences.

    Returns a report dict with per-parameter max relative error, the worst
    offender, and a pass flag at `tol`.  Requires a float64 graph.
    """
    if graph.dtype != np.float64:
        raise AutodiffError("finite_diff_check requires a float64 graph")
    graph.forward(inputs)
    analytic = graph.backward(loss_node)

    def loss_at():
        return float(graph.forward(inputs)[loss_node])

    per_param = {}
    worst = ("", 0.0)
    for pname, value in graph.params.items():
        an = analytic[pname]
        max_err = 0.0
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at()
            flat[i] = orig - h
            lm = loss_at()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            diff = abs(an.reshape(-1)[i] - fd)
            if diff < 1e-12:
                err = 0.0
            else:
                err = diff / max(abs(fd), 1e-10)
            max_err = max(max_err, err)
        per_param[pname] = max_err
        if max_err >= worst[1]:
            worst = (pname, max_err)
    # restore cache state for callers that forward afterwards
    graph.forward(inputs)
    return {
        "per_param": per_param,
        "worst_param": worst[0],
        "max_rel_error": worst[1],
        "tol": tol,
        "passed": worst[1] < tol,
    }


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """In-place SGD with momentum: v <- momentum*v + g; p <- p - lr*v.

    Parameters absent from `grads` are untouched and get no velocity state
    (this is how partial fine-tuning freezes the feature extractor).  Returns
    the velocity dict for chaining.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    if velocity is None:
        velocity = {}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(
                f"grad shape {g.shape} != param shape {params[name].shape} "
                f"for {name!r}")
        v = velocity.get(name)
        v = g.copy() if v is None or momentum == 0.0 else momentum * v + g
        velocity[name] = v
        params[name] -= lr * v
    return velocity
