"""Command-line entry point: collect, train, evaluate, roll out.

Settings come from an optional flat ``key=value`` file (``--config``) and
are overridden by command-line flags.  Keys prefixed with ``sim.``,
``heuristic.``, ``scene.``, ``container.`` or ``rollout.`` set fields of the
corresponding settings object, e.g. ``sim.noise_sigma=0.002``.  Every command
writes ``<command>.config`` with the resolved settings next to its outputs.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 acceptance gate
failed.  ``LADLE_OUT`` sets the default output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .ddpm import DiffusionPolicy, PrescoopGenerator, train_fphi, train_pi
from .demonstrator import HeuristicConfig
from .errors import LadleError, ParseError
from .evaluation import (CLASS_PROFILES, EnvSettings, TrialSuite, check_gates, emit_report,
                         run_suite, trial_world)
from .pointnet import GeomRegressor, evaluate_gpsi, make_shape_dataset, train_gpsi
from .runtime import Models, RolloutConfig, run_lockstep, write_trace_csv, write_trace_svg
from .sim import ContainerSpec, SceneConfig, SimConfig

log = logging.getLogger("ladle")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GATE = 0, 1, 2, 3
OUT_ENV = "LADLE_OUT"

_SECTIONS = {"sim": SimConfig, "heuristic": HeuristicConfig, "scene": SceneConfig,
             "container": ContainerSpec, "rollout": RolloutConfig}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ #
# config handling
# ------------------------------------------------------------------ #
def read_kv(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _coerce(text: str, current):
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(type(c)(p) if isinstance(c, (int, float)) else float(p)
                     for p, c in zip(parts, current or [0.0] * len(parts)))
    if current is None:
        if text.lower() == "none":
            return None
        try:
            return float(text)
        except ValueError:
            return text
    return text


def build_section(name: str, cfg: dict, **extra):
    cls = _SECTIONS[name]
    base = cls(**extra)
    changes = {}
    for k, v in cfg.items():
        if k.startswith(name + "."):
            fld = k[len(name) + 1:]
            if fld not in cls.__dataclass_fields__:
                raise UsageError(f"unknown setting {k}")
            changes[fld] = _coerce(v, getattr(base, fld))
    return dataclasses.replace(base, **changes) if changes else base


def collect_settings(cfg: dict, severity: str) -> ds.CollectSettings:
    return ds.CollectSettings(sim=build_section("sim", cfg), heuristic=build_section("heuristic", cfg),
                              scene=build_section("scene", cfg),
                              container=build_section("container", cfg),
                              ladle_size=cfg.get("ladle_size", "standard"), severity=severity)


def rollout_config(cfg: dict, exec_horizon: int, state_source: str = "privileged") -> RolloutConfig:
    return build_section("rollout", cfg, exec_horizon=exec_horizon, state_source=state_source,
                         sim=build_section("sim", cfg), heuristic=build_section("heuristic", cfg))


def resolve(args, keys) -> dict:
    """File settings overridden by explicitly given flags."""
    cfg = read_kv(args.config) if getattr(args, "config", None) else {}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = str(v)
    return cfg


# settings that cannot change any output byte stay out of the snapshot
_NOT_SNAPSHOT = {"workers"}


def write_snapshot(out: Path, command: str, cfg: dict) -> None:
    with open(out / f"{command}.config", "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(set(cfg) - _NOT_SNAPSHOT):
            fh.write(f"{k}={cfg[k]}\n")


def _get(cfg, key, default, conv=str):
    return conv(cfg[key]) if key in cfg and cfg[key] != "None" else default


def _outdir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV, "ladle-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what):
    if path is None or not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_losses(path: Path, losses) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for i, x in enumerate(losses, start=1):
            fh.write(f"{i},{float(x)!r}\n")


# ------------------------------------------------------------------ #
# commands
# ------------------------------------------------------------------ #
def cmd_collect_prescoop(args) -> int:
    cfg = resolve(args, ["n", "seed", "workers", "severity"])
    n = _get(cfg, "n", 150, int)
    if n < 1:
        raise UsageError("--n must be at least 1")
    out = _outdir(args)
    settings = collect_settings(cfg, _get(cfg, "severity", "normal"))
    data = ds.collect_prescoop(n, _get(cfg, "seed", 0, int), settings,
                               workers=_get(cfg, "workers", 1, int))
    path = out / _get(cfg, "name", "prescoop.txt")
    ds.write_dataset(data, path)
    write_snapshot(out, "collect-prescoop", cfg)
    print(f"wrote {len(data)} records to {path}; acceptance rate {data.acceptance_rate:.4f}")
    return EXIT_OK


def _load_fphi(spec):
    if spec in (None, "sampler"):
        return "sampler"
    return PrescoopGenerator.load(_require(spec, "f_phi checkpoint"))


def cmd_collect_demos(args) -> int:
    cfg = resolve(args, ["n", "seed", "workers", "severity", "fphi"])
    n = _get(cfg, "n", 600, int)
    if n < 1:
        raise UsageError("--n must be at least 1")
    out = _outdir(args)
    source = _load_fphi(cfg.get("fphi", "sampler"))
    settings = collect_settings(cfg, _get(cfg, "severity", "normal"))
    data = ds.collect_policy_demos(n, _get(cfg, "seed", 0, int), source, settings,
                                   workers=_get(cfg, "workers", 1, int))
    path = out / _get(cfg, "name", "demos.txt")
    ds.write_dataset(data, path)
    write_snapshot(out, "collect-demos", cfg)
    print(f"wrote {len(data.episodes())} demonstrations ({len(data)} rows) to {path}; "
          f"acceptance rate {data.acceptance_rate:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args, ["data", "epochs", "seed", "patience"])
    seed = _get(cfg, "seed", 0, int)
    out = _outdir(args)
    head = args.head
    if head == "fphi":
        data = ds.read_dataset(_require(cfg.get("data"), "dataset"))
        gen, losses = train_fphi(data.records, epochs=_get(cfg, "epochs", 1000, int), seed=seed)
        gen.save(out / "fphi.ckpt")
        digest = gen.digest
    elif head == "pi":
        data = ds.read_dataset(_require(cfg.get("data"), "dataset"))
        epochs = _get(cfg, "epochs", 300, int)
        pol, losses, stop = train_pi(list(data.episodes().values()), seed=seed, max_epochs=epochs,
                                     patience=_get(cfg, "patience", 100, int))
        log.info("pi training stopped at epoch %d", stop)
        print(f"stop epoch {stop}")
        pol.save(out / "pi.ckpt")
        digest = pol.digest
    else:
        n = _get(cfg, "gpsi_samples", 3000, int)
        samples = make_shape_dataset(n, seed, n_points=128, partial_frac=_get(cfg, "partial_frac", 0.7, float))
        model, losses = train_gpsi(samples, epochs=_get(cfg, "epochs", 60, int), seed=seed)
        model.save(out / "gpsi.ckpt")
        held = make_shape_dataset(500, seed + 1, n_points=256)
        print(f"held-out {evaluate_gpsi(model, held)}")
        digest = model.digest
    _write_losses(out / f"{head}_loss.csv", losses)
    write_snapshot(out, f"train-{head}", cfg)
    print(f"{head} checkpoint digest {digest}; final loss {losses[-1]:.6f}")
    return EXIT_OK


def _models(cfg) -> Models:
    fphi = PrescoopGenerator.load(_require(cfg.get("fphi"), "f_phi checkpoint"))
    pi = DiffusionPolicy.load(_require(cfg.get("pi"), "pi checkpoint"))
    gpsi = GeomRegressor.load(_require(cfg["gpsi"], "g_psi checkpoint")) if cfg.get("gpsi") else None
    return Models(fphi, pi, gpsi)


def _env(cfg) -> EnvSettings:
    return EnvSettings(build_section("container", cfg), cfg.get("ladle_size", "standard"),
                       build_section("scene", cfg))


def cmd_eval(args) -> int:
    cfg = resolve(args, ["suite", "fphi", "pi", "gpsi", "exec_horizon", "workers"])
    kv = read_kv(_require(cfg.get("suite"), "suite file"))
    if "exec_horizon" in cfg:
        kv["exec_horizon"] = cfg["exec_horizon"]
    suite = TrialSuite.from_mapping(kv)
    models = _models(cfg)
    out = _outdir(args)
    rc = rollout_config(cfg, suite.exec_horizon, "gpsi" if models.gpsi else "privileged")
    report = run_suite(suite, models, rc, _env(cfg), workers=_get(cfg, "workers", 1, int))
    path = out / f"{suite.name}_h{suite.exec_horizon}.csv"
    emit_report(report, path)
    write_snapshot(out, "eval", {**cfg, **{f"suite.{k}": v for k, v in kv.items()}})
    print(f"{suite.name} exec_horizon={suite.exec_horizon}: average rate {report.average_rate:.4f} "
          f"-> {path}")
    failures = check_gates(suite, report)
    for f in failures:
        print(f"gate failed: {f}", file=sys.stderr)
    return EXIT_GATE if failures else EXIT_OK


def cmd_rollout(args) -> int:
    cfg = resolve(args, ["seed", "fphi", "pi", "gpsi", "exec_horizon", "severity", "object_class",
                         "trace"])
    models = _models(cfg)
    seed = _get(cfg, "seed", 0, int)
    suite = TrialSuite("rollout", 1, _get(cfg, "severity", "normal"),
                       (_get(cfg, "object_class", "poolball"),), _get(cfg, "exec_horizon", 1, int),
                       seed_base=seed)
    world = trial_world(suite, suite.classes[0], 0, _env(cfg))
    rc = rollout_config(cfg, suite.exec_horizon, "gpsi" if models.gpsi else "privileged")
    (outcome, trace), = run_lockstep([(world, world.target_ids(), np.random.default_rng([seed, 2]),
                                       True)], models, rc)
    print(f"success={outcome.success} termination={outcome.termination} "
          f"ticks={outcome.ticks_used} targets={outcome.n_targets_scooped} "
          f"obstacles={outcome.n_obstacles_scooped}")
    if cfg.get("trace"):
        out = _outdir(args)
        prefix = out / cfg["trace"]
        write_trace_csv(trace, f"{prefix}.csv")
        write_trace_svg(world, trace, f"{prefix}.svg")
        write_snapshot(out, "rollout", cfg)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """collect pre-scoop -> train f_phi -> collect demos -> train pi -> eval."""
    cfg = resolve(args, ["seed", "workers", "severity", "n_prescoop", "n_demos", "epochs_fphi",
                         "epochs_pi", "n_trials"])
    seed = _get(cfg, "seed", 0, int)
    workers = _get(cfg, "workers", 1, int)
    severity = _get(cfg, "severity", "normal")
    out = _outdir(args)
    settings = collect_settings(cfg, severity)
    pre = ds.collect_prescoop(_get(cfg, "n_prescoop", 150, int), seed, settings, workers=workers)
    ds.write_dataset(pre, out / "prescoop.txt")
    fphi, fl = train_fphi(pre.records, epochs=_get(cfg, "epochs_fphi", 1000, int), seed=seed)
    fphi.save(out / "fphi.ckpt")
    _write_losses(out / "fphi_loss.csv", fl)
    demos = ds.collect_policy_demos(_get(cfg, "n_demos", 600, int), seed + 1, fphi, settings,
                                    workers=workers)
    ds.write_dataset(demos, out / "demos.txt")
    pol, pl, stop = train_pi(list(demos.episodes().values()), seed=seed,
                             max_epochs=_get(cfg, "epochs_pi", 300, int),
                             patience=_get(cfg, "patience", 100, int))
    log.info("pi training stopped at epoch %d", stop)
    pol.save(out / "pi.ckpt")
    _write_losses(out / "pi_loss.csv", pl)
    suite = TrialSuite("pipeline", _get(cfg, "n_trials", 20, int), severity,
                       seed_base=seed + 10_000, gate_min_rate=_get(cfg, "gate_min_rate", None, float))
    report = run_suite(suite, Models(fphi, pol), rollout_config(cfg, 1), _env(cfg), workers=workers)
    emit_report(report, out / "pipeline_report.csv")
    write_snapshot(out, "pipeline", cfg)
    print(f"pipeline average rate {report.average_rate:.4f}")
    return EXIT_GATE if check_gates(suite, report) else EXIT_OK


# ------------------------------------------------------------------ #
# parser
# ------------------------------------------------------------------ #
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ladle", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, workers=False):
        sp.add_argument("--config", help="key=value settings file")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./ladle-out)")
        sp.add_argument("--seed", type=int)
        if workers:
            sp.add_argument("--workers", type=int, default=None,
                            help="worker processes (default: available CPUs)")

    sp = sub.add_parser("collect-prescoop", help="collect successful pre-scoop samples")
    common(sp, workers=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--severity", choices=["normal", "severe"])
    sp.set_defaults(func=cmd_collect_prescoop)

    sp = sub.add_parser("collect-demos", help="collect policy demonstrations")
    common(sp, workers=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--fphi", help="f_phi checkpoint, or 'sampler' for sampled pre-scoop poses")
    sp.add_argument("--severity", choices=["normal", "severe"])
    sp.set_defaults(func=cmd_collect_demos)

    sp = sub.add_parser("train", help="train f_phi, pi or g_psi")
    common(sp)
    sp.add_argument("head", choices=["fphi", "pi", "gpsi"])
    sp.add_argument("--data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--patience", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="run a trial suite")
    common(sp, workers=True)
    sp.add_argument("--suite", required=True)
    sp.add_argument("--fphi", required=True)
    sp.add_argument("--pi", required=True)
    sp.add_argument("--gpsi")
    sp.add_argument("--exec-horizon", dest="exec_horizon", type=int, choices=[1, 2, 3])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rollout", help="run one episode and optionally export a trace")
    common(sp)
    sp.add_argument("--fphi", required=True)
    sp.add_argument("--pi", required=True)
    sp.add_argument("--gpsi")
    sp.add_argument("--exec-horizon", dest="exec_horizon", type=int, choices=[1, 2, 3])
    sp.add_argument("--severity", choices=["normal", "severe"])
    sp.add_argument("--class", dest="object_class", choices=sorted(CLASS_PROFILES))
    sp.add_argument("--trace", help="file prefix for <prefix>.csv and <prefix>.svg")
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("pipeline", help="collect, train and evaluate end to end")
    common(sp, workers=True)
    sp.add_argument("--severity", choices=["normal", "severe"])
    sp.add_argument("--n-prescoop", dest="n_prescoop", type=int)
    sp.add_argument("--n-demos", dest="n_demos", type=int)
    sp.add_argument("--epochs-fphi", dest="epochs_fphi", type=int)
    sp.add_argument("--epochs-pi", dest="epochs_pi", type=int)
    sp.add_argument("--n-trials", dest="n_trials", type=int)
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is None and hasattr(args, "workers"):
        args.workers = os.cpu_count() or 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LadleError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
