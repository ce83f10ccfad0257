"""Small float64 neural-network toolkit: layers with explicit forward/backward,
an Adam optimiser and a checkpoint format.

Every layer's ``forward`` returns ``(output, cache)`` and ``backward(cache,
grad_out)`` accumulates parameter gradients into the shared :class:`Params`
and returns the gradient with respect to the input(s).
"""
from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from .errors import NonFinite, ParseError, SchemaMismatch, ShapeMismatch

__all__ = [
    "Params", "Linear", "Conv1d", "Mish", "FiLM", "MaxPool", "Adam",
    "sinusoidal_embedding", "save_checkpoint", "load_checkpoint", "check_finite",
]


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFinite(f"non-finite values in {what}")
    return x


class Params:
    """Named parameter arrays with matching gradient buffers."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> str:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name}")
        self.values[name] = np.ascontiguousarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.values[name])
        return name

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "Params":
        out = Params()
        for k, v in self.values.items():
            out.add(k, v.copy())
        return out

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def shapes(self) -> list:
        return [[k, list(v.shape)] for k, v in self.values.items()]

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.values.items():
            h.update(k.encode())
            h.update(v.astype("<f8").tobytes())
        return h.hexdigest()[:16]


# ------------------------------------------------------------------ #
# layers
# ------------------------------------------------------------------ #
class Linear:
    """Affine map over the last axis; works on any leading shape."""

    def __init__(self, params: Params, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator | None = None, init: str = "default"):
        self.p, self.n_in, self.n_out = params, n_in, n_out
        if init == "zero" or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.uniform(-1.0, 1.0, size=(n_in, n_out)) / math.sqrt(n_in)
        self.w = params.add(name + ".w", w)
        self.b = params.add(name + ".b", np.zeros(n_out))

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"linear expects last dim {self.n_in}, got {x.shape}")
        y = x @ self.p[self.w] + self.p[self.b]
        return check_finite(y, "linear output"), x

    def backward(self, cache, gy):
        x = cache
        x2 = x.reshape(-1, self.n_in)
        g2 = gy.reshape(-1, self.n_out)
        self.p.grads[self.w] += x2.T @ g2
        self.p.grads[self.b] += g2.sum(axis=0)
        return gy @ self.p[self.w].T


class Conv1d:
    """Temporal convolution over ``(batch, length, channels)`` with 'same'
    zero padding (odd kernel).  Weights are ``(kernel, c_in, c_out)``."""

    def __init__(self, params: Params, name: str, c_in: int, c_out: int, kernel: int = 3,
                 rng: np.random.Generator | None = None, init: str = "default"):
        if kernel % 2 != 1:
            raise ShapeMismatch("kernel size must be odd")
        self.p, self.c_in, self.c_out, self.k = params, c_in, c_out, kernel
        if init == "identity":
            if c_in != c_out:
                raise ShapeMismatch("identity init needs c_in == c_out")
            w = np.zeros((kernel, c_in, c_out))
            w[kernel // 2] = np.eye(c_in)
        elif init == "zero" or rng is None:
            w = np.zeros((kernel, c_in, c_out))
        else:
            w = rng.uniform(-1.0, 1.0, size=(kernel, c_in, c_out)) / math.sqrt(c_in * kernel)
        self.w = params.add(name + ".w", w)
        self.b = params.add(name + ".b", np.zeros(c_out))

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.c_in:
            raise ShapeMismatch(f"conv1d expects (B, L, {self.c_in}), got {x.shape}")
        cols = _im2col(x, self.k)
        y = cols @ self.p[self.w].reshape(-1, self.c_out) + self.p[self.b]
        return check_finite(y, "conv1d output"), cols

    def backward(self, cache, gy):
        cols = cache
        k, ci, co = self.k, self.c_in, self.c_out
        self.p.grads[self.w] += np.tensordot(cols, gy, axes=([0, 1], [0, 1])).reshape(k, ci, co)
        self.p.grads[self.b] += gy.sum(axis=(0, 1))
        # input gradient: 'same' convolution of gy with the flipped kernel
        wf = self.p[self.w][::-1].transpose(0, 2, 1).reshape(-1, ci)
        return _im2col(gy, k) @ wf


def _im2col(x, k):
    """``(B, L, C)`` -> ``(B, L, k*C)`` shifted copies with zero padding."""
    b, length, c = x.shape
    pad = k // 2
    out = np.zeros((b, length, k * c))
    for j in range(k):
        s = j - pad
        lo, hi = max(0, -s), min(length, length - s)
        out[:, lo:hi, j * c:(j + 1) * c] = x[:, lo + s:hi + s]
    return out


class Mish:
    """Smooth self-gated activation ``x * tanh(softplus(x))``."""

    def forward(self, x):
        # tanh(log(1 + e)) = e (e + 2) / (e (e + 2) + 2); saturated past x = 20
        e = np.exp(np.minimum(x, 20.0))
        n = e * (e + 2.0)
        t = n / (n + 2.0)
        return x * t, (x, t, e)

    def backward(self, cache, gy):
        x, t, e = cache
        sig = e / (1.0 + e)
        return gy * (t + x * (1.0 - t * t) * sig)


class FiLM:
    """Feature-wise modulation ``x * (1 + gamma) + beta``.

    ``x`` is ``(B, C)`` or ``(B, L, C)``; ``gamma`` and ``beta`` are ``(B, C)``.
    """

    def forward(self, x, gamma, beta):
        want = (x.shape[0], x.shape[-1])
        if gamma.shape != want or beta.shape != want:
            raise ShapeMismatch(f"FiLM shapes {x.shape} vs {gamma.shape}/{beta.shape}")
        if x.ndim == 3:
            g, b = gamma[:, None, :], beta[:, None, :]
        else:
            g, b = gamma, beta
        return x * (1.0 + g) + b, (x, g)

    def backward(self, cache, gy):
        x, g = cache
        gx = gy * (1.0 + g)
        if x.ndim == 3:
            return gx, (gy * x).sum(axis=1), gy.sum(axis=1)
        return gx, gy * x, gy


class MaxPool:
    """Max over an axis (the point axis of a cloud)."""

    def __init__(self, axis: int = 1):
        self.axis = axis

    def forward(self, x):
        idx = np.argmax(x, axis=self.axis)
        y = np.take_along_axis(x, np.expand_dims(idx, self.axis), self.axis)
        return np.squeeze(y, self.axis), (idx, x.shape)

    def backward(self, cache, gy):
        idx, shape = cache
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(idx, self.axis), np.expand_dims(gy, self.axis), self.axis)
        return gx


def sinusoidal_embedding(t, dim: int = 32, max_period: float = 10000.0) -> np.ndarray:
    """``(len(t), dim)`` sin/cos features of integer diffusion steps."""
    t = np.asarray(t, dtype=float).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ------------------------------------------------------------------ #
# optimiser
# ------------------------------------------------------------------ #
class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, grad_clip: float | None = None):
        self.params, self.lr, self.beta1, self.beta2, self.eps = params, lr, beta1, beta2, eps
        self.grad_clip = grad_clip
        self.m = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.t = 0

    def step(self) -> None:
        """Bias-corrected update, then zero the gradients."""
        self.t += 1
        scale = 1.0
        if self.grad_clip is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in self.params.grads.values()))
            if total > self.grad_clip:
                scale = self.grad_clip / total
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.values.items():
            g = self.params.grads[k] * scale
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.params.zero_grad()


# ------------------------------------------------------------------ #
# checkpoints
# ------------------------------------------------------------------ #
CKPT_MAGIC = b"LADLECKPT1\n"


def spec_digest(spec: dict) -> str:
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def save_checkpoint(path, params: Params, spec: dict) -> None:
    """Header line (spec, its digest, tensor shapes) then raw little-endian
    float64 payload in parameter order."""
    header = {"spec": spec, "spec_digest": spec_digest(spec), "tensors": params.shapes()}
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for v in params.values.values():
            fh.write(v.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(spec, {name: array})`` in stored order."""
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: bad checkpoint header: {exc}") from None
        payload = fh.read()
    if spec_digest(header["spec"]) != header["spec_digest"]:
        raise SchemaMismatch(f"{path}: spec digest mismatch")
    arrays = {}
    off = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[off:off + 8 * n]
        if len(chunk) != 8 * n:
            raise ParseError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(payload):
        raise ParseError(f"{path}: {len(payload) - off} trailing bytes")
    return header["spec"], arrays
