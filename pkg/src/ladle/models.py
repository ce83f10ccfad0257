"""Network architectures built on :mod:`ladle.nn`.

* :class:`MLPDenoiser` - noise predictor for low-dimensional samples
  (the pre-scoop generator and the toy diffusion tasks).
* :class:`ConvDenoiser` - temporal-convolution noise predictor over an
  action sequence, conditioned on an observation history.
* :class:`PointNetLite` - shared per-point layers, max pooling and a head.

Conditioning goes through a small embedding of ``(condition, timestep)``
whose output modulates hidden activations feature-wise.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .nn import FiLM, Linear, MaxPool, Mish, Params, Conv1d, check_finite, sinusoidal_embedding

TEMB_DIM = 32


class _CondEmbed:
    """``(condition, timestep)`` -> FiLM coefficients for ``n_blocks`` blocks
    of ``width`` features."""

    def __init__(self, params, name, cond_dim, emb_width, n_blocks, width, rng):
        self.cond_dim, self.n_blocks, self.width = cond_dim, n_blocks, width
        self.l1 = Linear(params, name + ".embed", cond_dim + TEMB_DIM, emb_width, rng)
        self.act = Mish()
        # zero-initialised so every block starts as the identity modulation
        self.l2 = Linear(params, name + ".film", emb_width, 2 * n_blocks * width, rng, init="zero")

    def forward(self, cond, t):
        if cond.shape[1] != self.cond_dim:
            raise ShapeMismatch(f"condition dim {cond.shape[1]} != {self.cond_dim}")
        z = np.concatenate([cond, sinusoidal_embedding(t, TEMB_DIM)], axis=1)
        a, c1 = self.l1.forward(z)
        a2, c2 = self.act.forward(a)
        f, c3 = self.l2.forward(a2)
        w = self.width
        coeffs = [(f[:, (2 * k) * w:(2 * k + 1) * w], f[:, (2 * k + 1) * w:(2 * k + 2) * w])
                  for k in range(self.n_blocks)]
        return coeffs, (c1, c2, c3)

    def backward(self, cache, gcoeffs):
        c1, c2, c3 = cache
        gf = np.concatenate([g for pair in gcoeffs for g in pair], axis=1)
        g = self.l2.backward(c3, gf)
        g = self.act.backward(c2, g)
        return self.l1.backward(c1, g)[:, :self.cond_dim]


class MLPDenoiser:
    """Three-layer modulated perceptron over a flat sample."""

    def __init__(self, x_dim: int, cond_dim: int, width: int = 64, emb_width: int = 64,
                 rng: np.random.Generator | None = None):
        self.spec = {"type": "mlp", "x_dim": x_dim, "cond_dim": cond_dim, "width": width,
                     "emb_width": emb_width}
        self.params = p = Params()
        self.cond = _CondEmbed(p, "cond", cond_dim, emb_width, 2, width, rng)
        self.l1 = Linear(p, "l1", x_dim, width, rng)
        self.l2 = Linear(p, "l2", width, width, rng)
        self.l3 = Linear(p, "l3", width, x_dim, rng)
        self.film, self.act = FiLM(), Mish()

    def forward(self, x, cond, t):
        coeffs, cc = self.cond.forward(cond, t)
        (g1, b1), (g2, b2) = coeffs
        h, k1 = self.l1.forward(x)
        h, f1 = self.film.forward(h, g1, b1)
        h, a1 = self.act.forward(h)
        h, k2 = self.l2.forward(h)
        h, f2 = self.film.forward(h, g2, b2)
        h, a2 = self.act.forward(h)
        y, k3 = self.l3.forward(h)
        return y, (cc, k1, f1, a1, k2, f2, a2, k3)

    def backward(self, cache, gy):
        cc, k1, f1, a1, k2, f2, a2, k3 = cache
        g = self.l3.backward(k3, gy)
        g = self.act.backward(a2, g)
        g, gg2, gb2 = self.film.backward(f2, g)
        g = self.l2.backward(k2, g)
        g = self.act.backward(a1, g)
        g, gg1, gb1 = self.film.backward(f1, g)
        gx = self.l1.backward(k1, g)
        gc = self.cond.backward(cc, [(gg1, gb1), (gg2, gb2)])
        return gx, gc


class ConvDenoiser:
    """Noise predictor over ``(batch, horizon, act_dim)`` action sequences.

    Two modulated temporal-convolution blocks (the second residual) between
    an input and an output convolution.
    """

    def __init__(self, act_dim: int, horizon: int, cond_dim: int, width: int = 128,
                 emb_width: int = 64, kernel: int = 3, rng: np.random.Generator | None = None):
        self.spec = {"type": "conv", "act_dim": act_dim, "horizon": horizon, "cond_dim": cond_dim,
                     "width": width, "emb_width": emb_width, "kernel": kernel}
        self.params = p = Params()
        self.cond = _CondEmbed(p, "cond", cond_dim, emb_width, 2, width, rng)
        self.c1 = Conv1d(p, "c1", act_dim, width, kernel, rng)
        self.c2 = Conv1d(p, "c2", width, width, kernel, rng)
        self.c3 = Conv1d(p, "c3", width, act_dim, kernel, rng)
        self.film, self.act = FiLM(), Mish()

    def forward(self, x, cond, t):
        coeffs, cc = self.cond.forward(cond, t)
        (g1, b1), (g2, b2) = coeffs
        h, k1 = self.c1.forward(x)
        h, f1 = self.film.forward(h, g1, b1)
        h1, a1 = self.act.forward(h)
        h, k2 = self.c2.forward(h1)
        h, f2 = self.film.forward(h, g2, b2)
        h, a2 = self.act.forward(h)
        y, k3 = self.c3.forward(h + h1)
        return y, (cc, k1, f1, a1, k2, f2, a2, k3)

    def backward(self, cache, gy):
        cc, k1, f1, a1, k2, f2, a2, k3 = cache
        gsum = self.c3.backward(k3, gy)
        g = self.act.backward(a2, gsum)
        g, gg2, gb2 = self.film.backward(f2, g)
        g = self.c2.backward(k2, g) + gsum
        g = self.act.backward(a1, g)
        g, gg1, gb1 = self.film.backward(f1, g)
        gx = self.c1.backward(k1, g)
        gc = self.cond.backward(cc, [(gg1, gb1), (gg2, gb2)])
        return gx, gc


class PointNetLite:
    """Shared per-point layers 3->64->128, max pool, head 128->64->4."""

    def __init__(self, widths=(64, 128), head: int = 64, out_dim: int = 4,
                 rng: np.random.Generator | None = None):
        w1, w2 = widths
        self.spec = {"type": "pointnet", "widths": [w1, w2], "head": head, "out_dim": out_dim}
        self.params = p = Params()
        self.s1 = Linear(p, "s1", 3, w1, rng)
        self.s2 = Linear(p, "s2", w1, w2, rng)
        self.h1 = Linear(p, "h1", w2, head, rng)
        self.h2 = Linear(p, "h2", head, out_dim, rng)
        self.act, self.pool = Mish(), MaxPool(axis=1)

    def forward(self, pts):
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ShapeMismatch(f"expected (B, N, 3) points, got {pts.shape}")
        h, k1 = self.s1.forward(pts)
        h, a1 = self.act.forward(h)
        h, k2 = self.s2.forward(h)
        h, a2 = self.act.forward(h)
        g, pc = self.pool.forward(h)
        h, k3 = self.h1.forward(g)
        h, a3 = self.act.forward(h)
        y, k4 = self.h2.forward(h)
        return check_finite(y, "pointnet output"), (k1, a1, k2, a2, pc, k3, a3, k4)

    def backward(self, cache, gy):
        k1, a1, k2, a2, pc, k3, a3, k4 = cache
        g = self.h2.backward(k4, gy)
        g = self.act.backward(a3, g)
        g = self.h1.backward(k3, g)
        g = self.pool.backward(pc, g)
        g = self.act.backward(a2, g)
        g = self.s2.backward(k2, g)
        g = self.act.backward(a1, g)
        return self.s1.backward(k1, g)


def build_net(spec: dict, rng: np.random.Generator | None = None):
    kind = spec["type"]
    if kind == "mlp":
        return MLPDenoiser(spec["x_dim"], spec["cond_dim"], spec["width"], spec["emb_width"], rng)
    if kind == "conv":
        return ConvDenoiser(spec["act_dim"], spec["horizon"], spec["cond_dim"], spec["width"],
                            spec["emb_width"], spec["kernel"], rng)
    if kind == "pointnet":
        return PointNetLite(tuple(spec["widths"]), spec["head"], spec["out_dim"], rng)
    raise ValueError(f"unknown network type {kind!r}")


def load_into(net, arrays: dict) -> None:
    if list(arrays) != list(net.params.values):
        raise ShapeMismatch("checkpoint tensors do not match the network")
    for k, v in arrays.items():
        if v.shape != net.params[k].shape:
            raise ShapeMismatch(f"{k}: {v.shape} vs {net.params[k].shape}")
        net.params.values[k][...] = v
