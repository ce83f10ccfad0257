"""Conditional denoising diffusion with epsilon prediction, plus the two
heads used by the scooping pipeline:

* :class:`PrescoopGenerator` samples ``(h, v)`` given ``(r_target, rho)``;
* :class:`DiffusionPolicy` samples a 3-step action sequence given the last
  two observations.

Samples and conditions live in a normalised space (per-field mean/std taken
from the training data); the constants travel with the checkpoint in a
plain-text sidecar file.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRange, NonFinite, ParseError, ShapeMismatch
from .models import build_net, load_into
from .nn import Adam, load_checkpoint, save_checkpoint
from .vectors import ACT_DIM, OBS_DIM, ActionVec, ObservationVec

log = logging.getLogger(__name__)

OBS_HORIZON = 2
ACT_HORIZON = 3


# ------------------------------------------------------------------ #
# schedule and forward process
# ------------------------------------------------------------------ #
@dataclass
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.alpha_bar is None:
            self.alpha_bar = np.cumprod(1.0 - self.beta)
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=float)

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas; ``alpha_bar[t]`` is the running product of ``1 - beta``."""
    if T < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRange(f"need T >= 1 and 0 < beta_start <= beta_end < 1, got {T}, "
                           f"{beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return NoiseSchedule(beta)


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`` with ``t`` a 0-based step index
    (scalar or one per batch row)."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bar[np.asarray(t)]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ------------------------------------------------------------------ #
# normalisation
# ------------------------------------------------------------------ #
@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data, floor: float = 1e-9) -> "Normalizer":
        data = np.asarray(data, dtype=float)
        data = data.reshape(-1, data.shape[-1])
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), floor))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean


# ------------------------------------------------------------------ #
# generic model
# ------------------------------------------------------------------ #
@dataclass
class DiffusionModel:
    """Noise schedule + denoiser network.  ``x_shape`` is the per-sample
    shape the network sees (``(dim,)`` or ``(length, channels)``)."""

    schedule: NoiseSchedule
    net: object
    x_shape: tuple
    cond_dim: int
    clip_x0: float | None = 5.0
    optimizer: Adam | None = field(default=None, repr=False)

    @property
    def params(self):
        return self.net.params

    def predict_eps(self, xt, cond, t):
        return self.net.forward(xt, cond, np.broadcast_to(np.asarray(t), (len(xt),)))[0]


def make_diffusion(spec: dict, seed: int = 0, T: int = 50, beta_start: float = 1e-4,
                   beta_end: float = 0.02, lr: float = 1e-3) -> DiffusionModel:
    net = build_net(spec, np.random.default_rng(seed))
    if spec["type"] == "mlp":
        x_shape, cond_dim = (spec["x_dim"],), spec["cond_dim"]
    else:
        x_shape, cond_dim = (spec["horizon"], spec["act_dim"]), spec["cond_dim"]
    model = DiffusionModel(make_schedule(T, beta_start, beta_end), net, x_shape, cond_dim)
    model.optimizer = Adam(net.params, lr=lr, grad_clip=1.0)
    return model


def train_step(model: DiffusionModel, x0, cond, rng: np.random.Generator) -> float:
    """One epsilon-prediction MSE step on a batch; returns the loss."""
    x0 = np.asarray(x0, dtype=float)
    cond = np.asarray(cond, dtype=float)
    if len(x0) == 0:
        raise ShapeMismatch("empty batch")
    t = rng.integers(0, model.schedule.T, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    xt = q_sample(x0, t, eps, model.schedule)
    pred, cache = model.net.forward(xt, cond, t)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        raise NonFinite(f"loss became {loss}")
    model.net.backward(cache, 2.0 * diff / diff.size)
    if model.optimizer is None:
        model.optimizer = Adam(model.net.params)
    model.optimizer.step()
    return loss


def _row_noise(rngs, shape):
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal(shape)
    return np.stack([g.standard_normal(shape[1:]) for g in rngs])


def sample(model: DiffusionModel, cond, rng) -> np.ndarray:
    """Ancestral sampling from ``t = T-1`` down to 0 (no noise on the last
    step).  ``rng`` is a generator or one generator per batch row, so rows
    are reproducible independently of how they are batched."""
    cond = np.asarray(cond, dtype=float)
    if cond.ndim == 1:
        cond = cond[None]
    sch = model.schedule
    shape = (len(cond),) + tuple(model.x_shape)
    x = _row_noise(rng, shape)
    for t in range(sch.T - 1, -1, -1):
        eps = model.predict_eps(x, cond, t)
        ab = sch.alpha_bar[t]
        ab_prev = sch.alpha_bar[t - 1] if t > 0 else 1.0
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if model.clip_x0 is not None:
            x0 = np.clip(x0, -model.clip_x0, model.clip_x0)
        beta = sch.beta[t]
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = math.sqrt(sch.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
        mean = c0 * x0 + ct * x
        if t > 0:
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            x = mean + math.sqrt(var) * _row_noise(rng, shape)
        else:
            x = mean
    return x


def fit(model: DiffusionModel, x0, cond, epochs: int, batch_size: int, seed: int,
        patience: int | None = None, min_delta: float = 0.01, max_epochs: int | None = None,
        log_every: int = 0):
    """Mini-batch training.  Returns ``(epoch_losses, stop_epoch)``.

    With ``patience`` set, training stops once the epoch loss has not
    improved on the best so far by ``min_delta`` (relative) for that many
    epochs, or at ``max_epochs``.
    """
    x0 = np.asarray(x0, dtype=float)
    cond = np.asarray(cond, dtype=float)
    rng = np.random.default_rng(seed)
    n = len(x0)
    losses = []
    best, since = math.inf, 0
    limit = max_epochs if (patience is not None and max_epochs is not None) else epochs
    for ep in range(limit):
        order = rng.permutation(n)
        tot = 0.0
        for k in range(0, n, batch_size):
            idx = order[k:k + batch_size]
            tot += train_step(model, x0[idx], cond[idx], rng) * len(idx)
        loss = tot / n
        losses.append(loss)
        if log_every and (ep + 1) % log_every == 0:
            log.info("epoch %d loss %.5f", ep + 1, loss)
        if patience is not None:
            if loss < best * (1.0 - min_delta):
                best, since = loss, 0
            else:
                since += 1
                if since >= patience:
                    log.info("loss plateaued; stopping after epoch %d", ep + 1)
                    break
    return losses, len(losses)


# ------------------------------------------------------------------ #
# persistence
# ------------------------------------------------------------------ #
def _write_sidecar(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(entries):
            v = np.atleast_1d(np.asarray(entries[k], dtype=float))
            fh.write(k + "=" + ",".join(repr(float(x)) for x in v) + "\n")


def _read_sidecar(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            try:
                out[k.strip()] = np.array([float(x) for x in v.split(",")])
            except ValueError:
                raise ParseError(f"{path}:{n}: bad number list") from None
    return out


def _save_model(path, model: DiffusionModel, head: str, sidecar: dict) -> None:
    sch = model.schedule
    spec = {"head": head, "net": model.net.spec, "T": sch.T,
            "beta": [repr(float(b)) for b in sch.beta],
            "clip_x0": model.clip_x0}
    save_checkpoint(path, model.params, spec)
    _write_sidecar(str(path) + ".norm", sidecar)


def _load_model(path, head: str):
    spec, arrays = load_checkpoint(path)
    if spec.get("head") != head:
        raise ParseError(f"{path}: checkpoint holds a {spec.get('head')!r} model, not {head!r}")
    net = build_net(spec["net"])
    load_into(net, arrays)
    ns = spec["net"]
    x_shape = (ns["x_dim"],) if ns["type"] == "mlp" else (ns["horizon"], ns["act_dim"])
    sch = NoiseSchedule(np.array([float(b) for b in spec["beta"]]))
    model = DiffusionModel(sch, net, x_shape, ns["cond_dim"], spec.get("clip_x0"))
    return model, _read_sidecar(str(path) + ".norm")


# ------------------------------------------------------------------ #
# pre-scoop pose generator
# ------------------------------------------------------------------ #
@dataclass
class PrescoopGenerator:
    """Samples ``(h, v)`` for a target of radius ``r_target`` approached from
    horizontal distance ``rho``; outputs are clamped to the sampling box."""

    model: DiffusionModel
    x_norm: Normalizer
    c_norm: Normalizer
    bowl_radius: float = 0.045
    h_min: float = 0.004
    h_fit: float = 0.9
    v_range: tuple = (0.0, 0.05)

    def h_bounds(self, r_target):
        hi = np.maximum(self.h_min, self.h_fit * (self.bowl_radius - np.asarray(r_target, dtype=float)))
        return self.h_min, hi

    def generate_batch(self, r_target, rho, rng) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r_target, dtype=float))
        rho = np.broadcast_to(np.atleast_1d(np.asarray(rho, dtype=float)), r.shape)
        cond = self.c_norm.apply(np.stack([r, rho], axis=1))
        x = self.x_norm.invert(sample(self.model, cond, rng))
        lo, hi = self.h_bounds(r)
        h = np.clip(x[:, 0], lo, hi)
        v = np.clip(x[:, 1], self.v_range[0], self.v_range[1])
        return np.stack([h, v], axis=1)

    def generate(self, r_target: float, rho: float, rng) -> tuple:
        h, v = self.generate_batch([r_target], [rho], rng)[0]
        return float(h), float(v)

    @property
    def digest(self) -> str:
        return self.model.params.digest()

    def save(self, path) -> None:
        side = {"x_mean": self.x_norm.mean, "x_std": self.x_norm.std,
                "c_mean": self.c_norm.mean, "c_std": self.c_norm.std,
                "bowl_radius": self.bowl_radius, "h_min": self.h_min, "h_fit": self.h_fit,
                "v_range": self.v_range}
        _save_model(path, self.model, "prescoop", side)

    @classmethod
    def load(cls, path) -> "PrescoopGenerator":
        model, side = _load_model(path, "prescoop")
        return cls(model, Normalizer(side["x_mean"], side["x_std"]),
                   Normalizer(side["c_mean"], side["c_std"]), float(side["bowl_radius"][0]),
                   float(side["h_min"][0]), float(side["h_fit"][0]), tuple(side["v_range"]))


def train_fphi(records, epochs: int = 1000, seed: int = 0, batch_size: int = 32,
               width: int = 64, lr: float = 1e-3, bowl_radius: float = 0.045,
               h_min: float = 0.004, h_fit: float = 0.9, v_range=(0.0, 0.05)):
    """Fit the pre-scoop generator on ``(r_target, rho, h, v)`` rows.

    Returns ``(generator, epoch_losses)``."""
    data = np.array([[r.r_target, r.rho, r.h, r.v] for r in records], dtype=float) \
        if not isinstance(records, np.ndarray) else records
    cond, x = data[:, :2], data[:, 2:]
    c_norm, x_norm = Normalizer.fit(cond), Normalizer.fit(x)
    model = make_diffusion({"type": "mlp", "x_dim": 2, "cond_dim": 2, "width": width,
                            "emb_width": width}, seed=seed, lr=lr)
    losses, _ = fit(model, x_norm.apply(x), c_norm.apply(cond), epochs, batch_size, seed + 1)
    gen = PrescoopGenerator(model, x_norm, c_norm, bowl_radius, h_min, h_fit, tuple(v_range))
    return gen, losses


# ------------------------------------------------------------------ #
# action-sequence policy
# ------------------------------------------------------------------ #
def canonical_action_array(a: np.ndarray) -> np.ndarray:
    """Flip quaternion signs so ``w >= 0`` (rows of 10-vectors)."""
    a = np.array(a, dtype=float)
    flip = a[..., 6] < 0
    a[..., 3:7][flip] *= -1.0
    return a


def policy_windows(episodes) -> tuple:
    """Training pairs from trajectories.

    ``episodes`` is an iterable of record lists.  Returns ``(obs, act)`` of
    shapes ``(n, 2, 10)`` and ``(n, 3, 10)``; histories are padded by
    repeating the first observation, action chunks by repeating the last
    action.
    """
    obs_out, act_out = [], []
    for recs in episodes:
        o = np.array([r.observation.to_array() for r in recs])
        a = canonical_action_array(np.array([r.action.to_array() for r in recs]))
        n = len(recs)
        for t in range(n):
            hist = [o[max(t - k, 0)] for k in range(OBS_HORIZON - 1, -1, -1)]
            chunk = [a[min(t + k, n - 1)] for k in range(ACT_HORIZON)]
            obs_out.append(hist)
            act_out.append(chunk)
    return (np.array(obs_out).reshape(-1, OBS_HORIZON, OBS_DIM),
            np.array(act_out).reshape(-1, ACT_HORIZON, ACT_DIM))


def postprocess_actions(raw: np.ndarray) -> list:
    """Raw ``(3, 10)`` rows -> post-processed :class:`ActionVec` list."""
    return [ActionVec.from_array(row).postprocess() for row in raw]


@dataclass
class DiffusionPolicy:
    model: DiffusionModel
    obs_norm: Normalizer
    act_norm: Normalizer

    def predict_raw(self, obs_hist, rng) -> np.ndarray:
        """``(B, 2, 10)`` observation histories -> ``(B, 3, 10)`` raw actions."""
        obs_hist = np.asarray(obs_hist, dtype=float).reshape(-1, OBS_HORIZON, OBS_DIM)
        cond = self.obs_norm.apply(obs_hist).reshape(len(obs_hist), -1)
        return self.act_norm.invert(sample(self.model, cond, rng))

    def predict(self, obs_history, rng) -> list:
        """Two observations (oldest first) -> three post-processed actions."""
        hist = np.array([o.to_array() if isinstance(o, ObservationVec) else o
                         for o in obs_history], dtype=float)
        if hist.shape != (OBS_HORIZON, OBS_DIM):
            raise ShapeMismatch(f"expected {OBS_HORIZON} observations, got {hist.shape}")
        return postprocess_actions(self.predict_raw(hist[None], rng)[0])

    @property
    def digest(self) -> str:
        return self.model.params.digest()

    def save(self, path) -> None:
        side = {"obs_mean": self.obs_norm.mean, "obs_std": self.obs_norm.std,
                "act_mean": self.act_norm.mean, "act_std": self.act_norm.std}
        _save_model(path, self.model, "policy", side)

    @classmethod
    def load(cls, path) -> "DiffusionPolicy":
        model, side = _load_model(path, "policy")
        return cls(model, Normalizer(side["obs_mean"], side["obs_std"]),
                   Normalizer(side["act_mean"], side["act_std"]))


def pi_theta_predict(policy: DiffusionPolicy, obs_history, rng) -> list:
    return policy.predict(obs_history, rng)


def f_phi_generate(generator: PrescoopGenerator, r_target: float, rho: float, rng) -> tuple:
    return generator.generate(r_target, rho, rng)


def train_pi(episodes, seed: int = 0, max_epochs: int = 300, patience: int = 100,
             min_delta: float = 0.01, batch_size: int = 256, width: int = 128,
             emb_width: int = 64, lr: float = 1e-3, log_every: int = 0):
    """Fit the action-sequence policy on demonstration trajectories.

    Stops when the epoch loss has not improved by ``min_delta`` (relative)
    for ``patience`` epochs, or after ``max_epochs``.  Returns
    ``(policy, epoch_losses, stop_epoch)``.
    """
    obs, act = policy_windows(episodes)
    obs_norm = Normalizer.fit(obs)
    act_norm = Normalizer.fit(act)
    cond = obs_norm.apply(obs).reshape(len(obs), -1)
    x0 = act_norm.apply(act)
    spec = {"type": "conv", "act_dim": ACT_DIM, "horizon": ACT_HORIZON,
            "cond_dim": OBS_HORIZON * OBS_DIM, "width": width, "emb_width": emb_width, "kernel": 3}
    model = make_diffusion(spec, seed=seed, lr=lr)
    losses, stop = fit(model, x0, cond, max_epochs, batch_size, seed + 1, patience=patience,
                       min_delta=min_delta, max_epochs=max_epochs, log_every=log_every)
    return DiffusionPolicy(model, obs_norm, act_norm), losses, stop
