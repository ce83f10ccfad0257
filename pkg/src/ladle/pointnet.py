"""Centre / longest-radius regression from partial point clouds.

Synthetic training clouds come from analytic primitives (sphere, box,
ellipsoid, capsule).  A point is visible when its outward normal faces the
camera (``normal . view_dir < 0``).  The regressor only ever sees a cloud
that has been centred on its centroid and scaled to unit extent; its
outputs are mapped back through the same transform, which makes the
prediction translation-equivariant by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCloud, InfeasibleView, ParseError, ShapeMismatch
from .geometry import quat_normalize, quat_to_matrix
from .models import PointNetLite, build_net, load_into
from .nn import Adam, load_checkpoint, save_checkpoint

SHAPE_KINDS = ("sphere", "box", "ellipsoid", "capsule")
MIN_POINTS = 32


@dataclass
class ShapeSpec:
    """``dims``: sphere (R,), box half-extents (a, b, c), ellipsoid semi-axes
    (a, b, c), capsule (radius, half length of the straight part)."""

    kind: str
    center: np.ndarray
    dims: tuple
    orientation: np.ndarray = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape {self.kind!r}")
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        q = np.array([0.0, 0.0, 0.0, 1.0]) if self.orientation is None else self.orientation
        self.orientation = quat_normalize(q)

    @property
    def longest_radius(self) -> float:
        d = self.dims
        if self.kind == "sphere":
            return float(d[0])
        if self.kind == "box":
            return float(math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2))
        if self.kind == "ellipsoid":
            return float(max(d))
        return float(d[0] + d[1])


@dataclass
class ShapeSample:
    kind: str
    true_center: np.ndarray
    true_longest_radius: float
    cloud: np.ndarray


@dataclass
class GeomPrediction:
    center: np.ndarray
    longest_radius: float


def _unit_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _surface_local(spec: ShapeSpec, rng, n: int):
    """``n`` uniform surface points and outward normals in the shape frame."""
    d = spec.dims
    if spec.kind == "sphere":
        nrm = _unit_sphere(rng, n)
        return nrm * d[0], nrm
    if spec.kind == "ellipsoid":
        a, b, c = d
        pts, nrms = [], []
        cap = max(b * c, a * c, a * b)
        got = 0
        while got < n:
            u = _unit_sphere(rng, 2 * n)
            w = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
            keep = rng.random(2 * n) < w / cap
            u = u[keep]
            pts.append(u * np.array([a, b, c]))
            g = u / np.array([a, b, c])
            nrms.append(g / np.linalg.norm(g, axis=1, keepdims=True))
            got += len(u)
        return np.concatenate(pts)[:n], np.concatenate(nrms)[:n]
    if spec.kind == "box":
        a, b, c = d
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 3))
        pts = uv * np.array([a, b, c])
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * np.array([a, b, c])[axis]
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        return pts, nrm
    # capsule along local z
    rad, half = d
    side = 2.0 * math.pi * rad * 2.0 * half
    caps = 4.0 * math.pi * rad * rad
    on_side = rng.random(n) < side / (side + caps)
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    k = int(on_side.sum())
    ang = rng.uniform(0.0, 2.0 * math.pi, k)
    nrm[on_side] = np.stack([np.cos(ang), np.sin(ang), np.zeros(k)], axis=1)
    pts[on_side] = nrm[on_side] * rad
    pts[on_side, 2] = rng.uniform(-half, half, k)
    m = n - k
    u = _unit_sphere(rng, m)
    nrm[~on_side] = u
    pts[~on_side] = u * rad + np.where(u[:, 2:3] >= 0, half, -half) * np.array([0.0, 0.0, 1.0])
    return pts, nrm


def synth_partial_cloud(spec: ShapeSpec, view_dir, n_points: int, noise_std: float,
                        rng: np.random.Generator, full: bool = False,
                        max_rounds: int = 200) -> ShapeSample:
    """Surface points facing a camera looking along ``view_dir``.

    ``full=True`` keeps every surface point (an unoccluded cloud).
    """
    view = np.asarray(view_dir, dtype=float)
    nv = float(np.linalg.norm(view))
    if not full and abs(nv - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit vector")
    rot = quat_to_matrix(spec.orientation)
    kept = []
    got = 0
    for _ in range(max_rounds):
        p, nrm = _surface_local(spec, rng, max(2 * n_points, 64))
        p, nrm = p @ rot.T, nrm @ rot.T
        if not full:
            vis = nrm @ view < 0.0
            p = p[vis]
        kept.append(p)
        got += len(p)
        if got >= n_points:
            break
    else:
        raise InfeasibleView(f"only {got} visible points after {max_rounds} rounds")
    pts = np.concatenate(kept)[:n_points] + spec.center
    if noise_std > 0:
        pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
    return ShapeSample(spec.kind, spec.center.copy(), spec.longest_radius, pts)


def random_shape(rng: np.random.Generator, radius_range=(0.015, 0.05), aspect=(0.6, 1.0),
                 center_box: float = 0.2, kind: str | None = None) -> ShapeSpec:
    kind = kind or SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    big = float(rng.uniform(*radius_range))
    center = rng.uniform(-center_box, center_box, size=3)
    q = quat_normalize(rng.standard_normal(4))
    if kind == "sphere":
        return ShapeSpec(kind, center, (big,), q)
    if kind == "capsule":
        frac = float(rng.uniform(0.3, 0.6))   # share of the length that is straight
        rad = big * (1.0 - frac)
        return ShapeSpec(kind, center, (rad, big - rad), q)
    axes = big * np.concatenate([[1.0], rng.uniform(*aspect, size=2)])
    rng.shuffle(axes)
    if kind == "box":
        axes = axes / math.sqrt(float((axes ** 2).sum())) * big
    return ShapeSpec(kind, center, tuple(float(x) for x in axes), q)


def make_shape_dataset(n: int, seed: int, n_points: int = 128, noise_std: float = 0.0005,
                       partial_frac: float = 0.5) -> list:
    """Mixed full and single-view clouds over all primitive kinds."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spec = random_shape(rng, kind=SHAPE_KINDS[i % len(SHAPE_KINDS)])
        full = rng.random() >= partial_frac
        view = _unit_sphere(rng, 1)[0]
        out.append(synth_partial_cloud(spec, view, n_points, noise_std, rng, full=full))
    return out


# ------------------------------------------------------------------ #
# normalisation
# ------------------------------------------------------------------ #
@dataclass
class CloudTransform:
    centroid: np.ndarray
    scale: float

    def apply(self, pts):
        return (np.asarray(pts, dtype=float) - self.centroid) / self.scale

    def invert(self, pts):
        return np.asarray(pts, dtype=float) * self.scale + self.centroid


def _canonical_order(pts: np.ndarray) -> np.ndarray:
    # a fixed point order makes every reduction below order-independent
    return pts[np.lexsort(pts.T[::-1])]


def normalize_cloud(pts):
    """Centre on the centroid and scale the farthest point to distance 1."""
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
        raise ShapeMismatch(f"expected (N, 3) points, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise DegenerateCloud("cloud contains non-finite points")
    c = pts.mean(axis=0)
    scale = float(np.sqrt(((pts - c) ** 2).sum(axis=1)).max())
    if scale < 1e-12:
        raise DegenerateCloud("all points coincide")
    tf = CloudTransform(c, scale)
    return tf.apply(pts), tf


# ------------------------------------------------------------------ #
# regressor
# ------------------------------------------------------------------ #
@dataclass
class GeomRegressor:
    net: PointNetLite

    def predict_normalized(self, batch: np.ndarray) -> np.ndarray:
        return self.net.forward(batch)[0]

    def save(self, path) -> None:
        save_checkpoint(path, self.net.params, {"head": "gpsi", "net": self.net.spec})

    @classmethod
    def load(cls, path) -> "GeomRegressor":
        spec, arrays = load_checkpoint(path)
        if spec.get("head") != "gpsi":
            raise ParseError(f"{path}: not a point-cloud regressor checkpoint")
        net = build_net(spec["net"])
        load_into(net, arrays)
        return cls(net)

    @property
    def digest(self) -> str:
        return self.net.params.digest()


def gpsi_predict(model: GeomRegressor, cloud) -> GeomPrediction:
    pts = np.asarray(cloud, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"expected (N, 3) points, got {pts.shape}")
    if len(pts) < MIN_POINTS:
        raise DegenerateCloud(f"need at least {MIN_POINTS} points, got {len(pts)}")
    norm, tf = normalize_cloud(_canonical_order(pts))
    out = model.predict_normalized(norm[None])[0]
    center = tf.centroid + tf.scale * out[:3]
    return GeomPrediction(center, float(tf.scale * math.exp(out[3])))


def _targets(samples):
    xs, ys = [], []
    for s in samples:
        norm, tf = normalize_cloud(_canonical_order(s.cloud))
        xs.append(norm)
        ys.append(np.concatenate([(s.true_center - tf.centroid) / tf.scale,
                                  [math.log(s.true_longest_radius / tf.scale)]]))
    return np.stack(xs), np.array(ys)


def train_gpsi(samples, epochs: int = 60, seed: int = 0, batch_size: int = 32,
               lr: float = 2e-3):
    """MSE on (centre offset / scale, log radius ratio).  Returns
    ``(model, epoch_losses)``.  Clouds must share one point count."""
    sizes = {len(s.cloud) for s in samples}
    if len(sizes) != 1:
        raise ShapeMismatch("training clouds must have equal point counts")
    x, y = _targets(samples)
    rng = np.random.default_rng(seed)
    net = PointNetLite(rng=rng)
    opt = Adam(net.params, lr=lr)
    losses = []
    n = len(x)
    for ep in range(epochs):
        order = rng.permutation(n)
        tot = 0.0
        for k in range(0, n, batch_size):
            idx = order[k:k + batch_size]
            pred, cache = net.forward(x[idx])
            diff = pred - y[idx]
            tot += float((diff * diff).sum())
            net.backward(cache, 2.0 * diff / diff.size)
            opt.step()
        losses.append(tot / y.size)
        opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * (ep + 1) / epochs))
    return GeomRegressor(net), losses


def evaluate_gpsi(model: GeomRegressor, samples) -> dict:
    """Median centre error relative to the true longest radius and median
    relative radius error."""
    c_err, r_err = [], []
    for s in samples:
        p = gpsi_predict(model, s.cloud)
        c_err.append(float(np.linalg.norm(p.center - s.true_center)) / s.true_longest_radius)
        r_err.append(abs(p.longest_radius - s.true_longest_radius) / s.true_longest_radius)
    return {"center_rel": float(np.median(c_err)), "radius_rel": float(np.median(r_err))}


# ------------------------------------------------------------------ #
# cloud files
# ------------------------------------------------------------------ #
def write_cloud(path, pts) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in np.asarray(pts, dtype=float):
            fh.write(f"{float(x)!r},{float(y)!r},{float(z)!r}\n")


def read_cloud(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"{path}:{n}: expected x,y,z")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"{path}:{n}: bad number") from None
    return np.array(rows, dtype=float).reshape(-1, 3)
