"""Minimal differentiable numeric core.

Dense layers, normalization, activations, a null-column softmax and a 3x3
convolution, each with an explicit backward pass recorded on a small reverse
tape.  The computation graphs in this engine are tiny and fixed, so there is
no general autodiff machinery: every op wires its own gradient closure.

All arithmetic runs in float64; checkpoints store float32 payloads.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Array value plus an optional gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse sweep from this node through its recorded tape."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # light operator sugar; heavy lifting lives in the module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    out._backward = backward
    return out


def linear(x, w, b=None) -> Tensor:
    """y = x @ w.T (+ b) with w laid out (out_features, in_features)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[-1]:
        raise ValueError(
            f"linear: inner dims disagree, x has {x.data.shape[-1]}, w expects {w.data.shape[-1]}"
        )
    y = x.data @ w.data.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
        parents = (x, w, b)
    out = Tensor(y, parents=parents)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ w.data)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            w.accumulate(g2.T @ x2)
        if b is not None and b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0.0))

    out._backward = backward
    return out


def _gelu_value(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU, not the tanh approximation."""
    x = as_tensor(x)
    out = Tensor(_gelu_value(x.data), parents=(x,))

    def backward(g):
        if x.requires_grad:
            z = x.data
            cdf = 0.5 * (1.0 + erf(z / _SQRT2))
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
            x.accumulate(g * (cdf + z * pdf))

    out._backward = backward
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s, parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * s * (1.0 - s))

    out._backward = backward
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    out = Tensor(e, parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * e)

    out._backward = backward
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g / x.data)

    out._backward = backward
    return out


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    r = np.sqrt(x.data)
    out = Tensor(r, parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * 0.5 / r)

    out._backward = backward
    return out


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    inv = 1.0 / x.data
    out = Tensor(inv, parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(-g * inv * inv)

    out._backward = backward
    return out


def clip(x, lo, hi) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only inside the interval."""
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * ((x.data >= lo) & (x.data <= hi)))

    out._backward = backward
    return out


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), parents=(x,))

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate(np.full_like(x.data, float(g)))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.data.shape).copy())

    out._backward = backward
    return out


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(x, axis) -> Tensor:
    """Max along one axis; gradient routes to the first argmax."""
    x = as_tensor(x)
    m = x.data.max(axis=axis)
    out = Tensor(m, parents=(x,))

    def backward(g):
        if not x.requires_grad:
            return
        idx = x.data.argmax(axis=axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        x.accumulate(gx)

    out._backward = backward
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))

    out._backward = backward
    return out


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes), parents=(x,))
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.transpose(g, inverse))

    out._backward = backward
    return out


def take(x, key) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data[key], parents=(x,))

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)
            x.accumulate(gx)

    out._backward = backward
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + n)
                t.accumulate(g[tuple(sl)])
            offset += n

    out._backward = backward
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tuple(tensors))

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate(part.reshape(t.data.shape))

    out._backward = backward
    return out


def softmax_null(logits) -> Tensor:
    """Append one zero logit per row, then row-wise softmax.

    Input is an R x C matrix of finite logits (C may be 0); output is
    R x (C+1) and row-stochastic.  The appended last column is the
    probability of matching nothing.
    """
    x = as_tensor(logits)
    if x.data.ndim != 2:
        raise ValueError("softmax_null expects a 2-d logit matrix")
    rows, cols = x.data.shape
    z = np.concatenate([x.data, np.zeros((rows, 1))], axis=1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    out = Tensor(probs, parents=(x,))

    def backward(g):
        if not x.requires_grad or cols == 0:
            return
        dot = (g * probs).sum(axis=1, keepdims=True)
        dz = probs * (g - dot)
        x.accumulate(dz[:, :cols])

    out._backward = backward
    return out


def layer_norm(x, gain=None, bias=None, eps=LN_EPS) -> Tensor:
    """Normalize over the last dim to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    n = x.data.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs at least 2 features in the last dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    parents = [x]
    gdata = None if gain is None else as_tensor(gain)
    bdata = None if bias is None else as_tensor(bias)
    y = xhat
    if gdata is not None:
        y = y * gdata.data
        parents.append(gdata)
    if bdata is not None:
        y = y + bdata.data
        parents.append(bdata)
    out = Tensor(y, parents=tuple(parents))

    def backward(g):
        gy = g if gdata is None else g * gdata.data
        if x.requires_grad:
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gy - m1 - xhat * m2))
        if gdata is not None and gdata.requires_grad:
            gdata.accumulate(_unbroadcast(g * xhat, gdata.data.shape))
        if bdata is not None and bdata.requires_grad:
            bdata.accumulate(_unbroadcast(g, bdata.data.shape))

    out._backward = backward
    return out


def layer_norm_degenerate(x, eps=LN_EPS) -> bool:
    """True when some row's variance is too small for a stable gradient check."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return bool((data.var(axis=-1) < 10.0 * eps).any())


def ffn(x, w1, b1, w2, b2) -> Tensor:
    """Position-wise feed-forward block: linear -> GELU -> linear."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def conv3x3(x, w, b=None) -> Tensor:
    """Same-padded stride-1 3x3 cross-correlation.

    x: (C_in, H, W) or (N, C_in, H, W); w: (C_out, C_in, 3, 3); b: (C_out,).
    """
    x = as_tensor(x)
    w = as_tensor(w)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError("conv3x3 expects a 3-d or 4-d input")
    if xd.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv3x3: input has {xd.shape[1]} channels, kernel expects {w.data.shape[1]}"
        )
    n, _, h, wd_ = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((n, w.data.shape[0], h, wd_))
    for dy in range(3):
        for dx in range(3):
            y += np.einsum(
                "oi,nihw->nohw", w.data[:, :, dy, dx], xp[:, :, dy : dy + h, dx : dx + wd_]
            )
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[None, :, None, None]
        parents.append(b)
    out = Tensor(y[0] if squeeze else y, parents=tuple(parents))

    def backward(g):
        gy = g[None] if squeeze else g
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for dy in range(3):
                for dx in range(3):
                    gp[:, :, dy : dy + h, dx : dx + wd_] += np.einsum(
                        "oi,nohw->nihw", w.data[:, :, dy, dx], gy
                    )
            gx = gp[:, :, 1 : 1 + h, 1 : 1 + wd_]
            x.accumulate(gx[0] if squeeze else gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for dy in range(3):
                for dx in range(3):
                    gw[:, :, dy, dx] = np.einsum(
                        "nohw,nihw->oi", gy, xp[:, :, dy : dy + h, dx : dx + wd_]
                    )
            w.accumulate(gw)
        if b is not None and b.requires_grad:
            b.accumulate(gy.sum(axis=(0, 2, 3)))

    out._backward = backward
    return out


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2 needs even spatial dims")
    y = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(y[0] if squeeze else y, parents=(x,))

    def backward(g):
        if not x.requires_grad:
            return
        gy = g[None] if squeeze else g
        gx = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3) * 0.25
        x.accumulate(gx[0] if squeeze else gx)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# parameter store and checkpoints

class ParamStore:
    """Named parameter tensors with gradient slots.

    Every learned tensor in the engine lives here exactly once, which keeps
    checkpointing and optimizer state straightforward.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def create(self, name: str, shape, rng: np.random.Generator, init="fan_in") -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        shape = tuple(shape)
        if isinstance(init, np.ndarray):
            data = np.asarray(init, dtype=np.float64).reshape(shape)
        elif init == "fan_in":
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init kind: {init!r}")
        t = Tensor(data, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._tensors) - set(state)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
        for name, t in self._tensors.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: {arr.shape} vs {t.data.shape}"
                )
            t.data = arr

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    def load(self, path):
        self.load_state(load_checkpoint(path))


CHECKPOINT_MAGIC = b"NTC1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named: dict[str, np.ndarray]):
    """Named-tensor container: versioned header + row-major float32 payloads."""
    header = {
        "version": CHECKPOINT_VERSION,
        "tensors": [{"name": k, "shape": list(np.asarray(v).shape)} for k, v in named.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for v in named.values():
            f.write(np.ascontiguousarray(v, dtype=np.float32).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        out = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError("checkpoint payload truncated")
            out[entry["name"]] = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            )
    return out


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckResult:
    max_rel_error: float
    skipped: bool = False
    reason: str = ""

    def ok(self, tol=1e-4) -> bool:
        return self.skipped or self.max_rel_error <= tol


def grad_check(fn, inputs, h=1e-5, rng=None, skip_if=None) -> GradCheckResult:
    """Compare analytic gradients of fn(*inputs) with central differences.

    fn maps Tensors to one Tensor (any shape); the check contracts the output
    with a fixed random weighting so flat directions (e.g. row-stochastic
    outputs) still exercise every input component.
    """
    if skip_if is not None:
        reason = skip_if(inputs)
        if reason:
            return GradCheckResult(0.0, skipped=True, reason=reason)
    rng = rng or np.random.default_rng(0)
    probe_weights = None

    def objective() -> float:
        nonlocal probe_weights
        out = fn(*inputs)
        if probe_weights is None:
            probe_weights = rng.standard_normal(out.data.shape)
        return float((out.data * probe_weights).sum()), out

    base, out = objective()
    for t in inputs:
        t.grad = None
    out.backward(probe_weights)

    max_err = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus, _ = objective()
            flat[i] = orig - h
            minus, _ = objective()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a) + abs(numeric), 1e-6)
            max_err = max(max_err, abs(a - numeric) / denom)
    return GradCheckResult(max_err)
