"""Demonstration datasets: collection with success filtering and a
line-delimited text format.

Each episode draws its scene and sampler streams from ``(seed, episode)`` so
results do not depend on how episodes are spread over workers.  Episodes are
consumed in index order until enough have been kept.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .demonstrator import DemoMode, HeuristicConfig, run_demo, sample_prescoop_candidate, _pose_collides
from .errors import BudgetExhausted, ParseError, SamplingExhausted, SchemaMismatch
from .geometry import Pose, ScoopParams, prescoop_pose
from .sim import ContainerSpec, LadleSpec, SceneConfig, SimConfig, WorldState, scoop_success, spawn_scene, step
from .vectors import ACT_FIELDS, OBS_FIELDS, ActionVec, ObservationVec, compose_motion

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAGIC = "#ladle-dataset "
BUDGET_FACTOR = 50

PRESCOOP_FIELDS = ("r_target", "rho", "h", "v")
POLICY_FIELDS = (("episode", "tick") + OBS_FIELDS + ACT_FIELDS
                 + ("ladle_x", "ladle_y", "ladle_z", "ladle_qx", "ladle_qy", "ladle_qz", "ladle_qw",
                    "target_x", "target_y", "target_z", "azimuth", "contact", "wall_contact",
                    "contained"))


@dataclass(frozen=True)
class PrescoopRecord:
    r_target: float
    rho: float
    h: float
    v: float

    def to_row(self) -> list:
        return [self.r_target, self.rho, self.h, self.v]


@dataclass
class DemoRecord:
    episode: int
    tick: int
    observation: ObservationVec
    action: ActionVec
    ladle: Pose
    target_pos: np.ndarray
    azimuth: float = 0.0
    contact: bool = False
    wall_contact: bool = False
    contained: bool = False

    def to_row(self) -> list:
        return ([self.episode, self.tick] + list(self.observation.to_array())
                + list(self.action.to_array()) + list(self.ladle.position)
                + list(self.ladle.orientation) + list(self.target_pos)
                + [self.azimuth, int(self.contact), int(self.wall_contact), int(self.contained)])

    @classmethod
    def from_row(cls, row: list) -> "DemoRecord":
        f = [float(x) for x in row]
        ladle = Pose(f[22:25], f[25:29])
        ladle.orientation = np.array(f[25:29])  # keep stored bits, no renormalising
        return cls(int(row[0]), int(row[1]), ObservationVec.from_array(f[2:12]),
                   ActionVec.from_array(f[12:22]), ladle, np.array(f[29:32]), f[32],
                   bool(int(row[33])), bool(int(row[34])), bool(int(row[35])))

    def __eq__(self, other):
        if not isinstance(other, DemoRecord):
            return NotImplemented
        return self.to_row() == other.to_row()


@dataclass
class Dataset:
    kind: str                      # "prescoop" or "policy"
    seed: int
    config: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    acceptance_rate: float | None = None
    attempts: int = 0

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.kind == other.kind and self.seed == other.seed
                and self.config == other.config
                and [r.to_row() for r in self.records] == [r.to_row() for r in other.records])

    def episodes(self) -> dict:
        """Policy records grouped by episode index, in file order."""
        out: dict = {}
        for r in self.records:
            out.setdefault(r.episode, []).append(r)
        return out

    def as_array(self) -> np.ndarray:
        if self.kind == "prescoop":
            return np.array([r.to_row() for r in self.records], dtype=float).reshape(-1, 4)
        return np.array([r.to_row() for r in self.records], dtype=float).reshape(-1, len(POLICY_FIELDS))


# ------------------------------------------------------------------ #
# collection
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class CollectSettings:
    sim: SimConfig = SimConfig()
    heuristic: HeuristicConfig = HeuristicConfig()
    scene: SceneConfig = SceneConfig()
    container: ContainerSpec = ContainerSpec()
    ladle_size: str = "standard"
    severity: str = "normal"
    max_collisions: int = 2

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def episode_rng(seed: int, episode: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(episode), int(stream)])


def episode_world(seed: int, episode: int, settings: CollectSettings, n_targets: int = 1) -> WorldState:
    return spawn_scene(settings.container, LadleSpec.of_size(settings.ladle_size), n_targets,
                       settings.severity, [int(seed), int(episode), 0], settings.scene)


def _prescoop_episode(args):
    seed, idx, settings = args
    world = episode_world(seed, idx, settings)
    tid = world.target_ids()[0]
    try:
        params = sample_prescoop_candidate(world, tid, episode_rng(seed, idx, 1), settings.heuristic)
    except SamplingExhausted:
        return idx, None, False, -1
    r = float(world.radius[world.index_of(tid)])
    _, report, collisions = run_demo(world, tid, params, DemoMode("prescoop_collection"),
                                     settings.sim, settings.heuristic)
    return idx, PrescoopRecord(r, params.rho, params.h, params.v), report.success, collisions


def _policy_params(world, tid, rng, settings: CollectSettings, source):
    if source is None or source == "sampler":
        return sample_prescoop_candidate(world, tid, rng, settings.heuristic)
    i = world.index_of(tid)
    r = float(world.radius[i])
    lo, hi = settings.heuristic.rho_range(r, world.ladle_spec.bowl_radius)
    for _ in range(settings.heuristic.sample_attempts):
        rho = float(rng.uniform(lo, hi))
        h, v = source.generate(r, rho, rng)
        params = ScoopParams(rho, h, v, float(rng.uniform(0.0, 2.0 * math.pi)))
        if not _pose_collides(world, prescoop_pose(world.pos[i], params)):
            return params
    raise SamplingExhausted(f"no collision-free generated pose for object {tid}")


def _policy_episode(args):
    seed, idx, settings, source = args
    world = episode_world(seed, idx, settings)
    tid = world.target_ids()[0]
    try:
        params = _policy_params(world, tid, episode_rng(seed, idx, 1), settings, source)
    except SamplingExhausted:
        return idx, None, False
    traj, report, _ = run_demo(world, tid, params, DemoMode("policy_collection"),
                               settings.sim, settings.heuristic)
    recs = [DemoRecord(idx, k, s.observation, s.action, s.ladle, s.target_pos, params.azimuth,
                       s.contact, s.wall_contact, s.contained)
            for k, s in enumerate(traj[:settings.sim.max_steps])]
    return idx, recs, report.success


def _run_batches(fn, make_args, n_keep, budget, workers, accept, batch=None):
    """Evaluate episodes in index order and feed them to ``accept`` until it
    reports ``n_keep`` kept; returns the number of attempts consumed."""
    batch = batch or max(8, 4 * max(1, workers))
    kept = attempts = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        idx = 0
        while kept < n_keep:
            if idx >= budget:
                raise BudgetExhausted(f"kept {kept}/{n_keep} after {attempts} attempts")
            chunk = [make_args(i) for i in range(idx, min(idx + batch, budget))]
            results = list(pool.map(fn, chunk)) if pool else [fn(a) for a in chunk]
            idx += len(chunk)
            for res in results:
                attempts += 1
                if accept(res):
                    kept += 1
                    if kept == n_keep:
                        break
    finally:
        if pool:
            pool.shutdown()
    return attempts


def collect_prescoop(n_keep: int, seed: int, settings: CollectSettings | None = None,
                     workers: int = 1) -> Dataset:
    """Keep (r_target, rho, h, v) from successful low-collision demos.

    ``acceptance_rate`` on the returned dataset is kept / attempted.
    """
    if n_keep < 1:
        raise ValueError("n_keep must be >= 1")
    settings = settings or CollectSettings()
    records = []

    def accept(res):
        _, rec, success, collisions = res
        if rec is not None and success and 0 <= collisions <= settings.max_collisions:
            records.append(rec)
            return True
        return False

    attempts = _run_batches(_prescoop_episode, lambda i: (seed, i, settings), n_keep,
                            BUDGET_FACTOR * n_keep, workers, accept)
    rate = len(records) / attempts
    log.info("pre-scoop collection kept %d of %d attempts (%.3f)", len(records), attempts, rate)
    cfg = {"collect": settings.to_dict()}
    return Dataset("prescoop", seed, cfg, records, rate, attempts)


def collect_policy_demos(n_keep: int, seed: int, prescoop_source=None,
                         settings: CollectSettings | None = None, workers: int = 1) -> Dataset:
    """Successful policy-collection trajectories (offset recovery enabled).

    ``prescoop_source`` is ``None``/``"sampler"`` for the rejection sampler,
    or any object with ``generate(r_target, rho, rng) -> (h, v)`` such as a
    trained pre-scoop generator.
    """
    if n_keep < 1:
        raise ValueError("n_keep must be >= 1")
    settings = settings or CollectSettings()
    records = []

    def accept(res):
        _, recs, success = res
        if recs is not None and success:
            records.extend(recs)
            return True
        return False

    source = None if prescoop_source in (None, "sampler") else prescoop_source
    attempts = _run_batches(_policy_episode, lambda i: (seed, i, settings, source), n_keep,
                            BUDGET_FACTOR * n_keep, workers, accept)
    kept = len({r.episode for r in records})
    rate = kept / attempts
    log.info("policy collection kept %d of %d attempts (%.3f)", kept, attempts, rate)
    cfg = {"collect": settings.to_dict(),
           "prescoop_source": "sampler" if source is None else getattr(source, "digest", "model")}
    return Dataset("policy", seed, cfg, records, rate, attempts)


def replay_episode(records: list, seed: int, settings: CollectSettings | None = None) -> WorldState:
    """Re-simulate one stored trajectory from its initial scene.

    Commands are rebuilt from the stored observation/action pairs with
    :func:`compose_motion`, so this also checks the row layout.
    """
    settings = settings or CollectSettings()
    first = records[0]
    world = episode_world(seed, first.episode, settings)
    tid = world.target_ids()[0]
    pre = first.observation.prescoop
    params = ScoopParams(float(pre[0]), float(pre[1]), float(pre[2]), first.azimuth)
    world.ladle = prescoop_pose(world.position_of(tid), params)
    s = settings.sim.step_length_s
    for rec in records:
        motion = compose_motion(rec.action, rec.observation.v_target, s)
        step(world, motion, rec.action.q_ladle, settings.sim)
    return world


def replay_success(records: list, seed: int, settings: CollectSettings | None = None) -> bool:
    settings = settings or CollectSettings()
    world = replay_episode(records, seed, settings)
    return scoop_success(world, world.target_ids(), settings.heuristic.success_height(world)).success


# ------------------------------------------------------------------ #
# file format
# ------------------------------------------------------------------ #
def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_dataset(dataset: Dataset, path) -> None:
    fields = PRESCOOP_FIELDS if dataset.kind == "prescoop" else POLICY_FIELDS
    header = {"schema_version": SCHEMA_VERSION, "kind": dataset.kind, "count": len(dataset.records),
              "seed": int(dataset.seed), "digest": config_digest(dataset.config),
              "fields": list(fields), "config": dataset.config}
    if dataset.acceptance_rate is not None:
        header["acceptance_rate"] = dataset.acceptance_rate
        header["attempts"] = dataset.attempts
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MAGIC + json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in dataset.records:
            fh.write(",".join(_fmt(x) for x in rec.to_row()) + "\n")


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise ParseError(f"{path}: missing dataset header")
    try:
        header = json.loads(lines[0][len(MAGIC):])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad header: {exc}") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
    config = header.get("config", {})
    if config_digest(config) != header.get("digest"):
        raise SchemaMismatch(f"{path}: config digest mismatch")
    kind = header.get("kind")
    fields = PRESCOOP_FIELDS if kind == "prescoop" else POLICY_FIELDS
    if kind not in ("prescoop", "policy") or header.get("fields") != list(fields):
        raise SchemaMismatch(f"{path}: unexpected kind/fields")
    body = lines[1:]
    if len(body) != header.get("count"):
        raise SchemaMismatch(f"{path}: header count {header.get('count')} but {len(body)} rows")
    records = []
    for n, line in enumerate(body, start=2):
        row = line.split(",")
        if len(row) != len(fields):
            raise ParseError(f"{path}:{n}: expected {len(fields)} fields, got {len(row)}")
        try:
            if kind == "prescoop":
                records.append(PrescoopRecord(*(float(x) for x in row)))
            else:
                records.append(DemoRecord.from_row(row))
        except ValueError as exc:
            raise ParseError(f"{path}:{n}: {exc}") from None
    return Dataset(kind, int(header["seed"]), config, records,
                   header.get("acceptance_rate"), int(header.get("attempts", 0)))
