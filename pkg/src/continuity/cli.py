"""Command-line entry point: generate, train, test, discover, sindy, theory.

Every command reads an optional JSON config, applies ``--key value``
overrides on top, and writes a manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, convergence, odenet, sindy, systems, theory
from .integrators import AlignmentError, DivergenceError, SchemeKind
from .trajectory import Trajectory, TrajectoryError, read_csv, write_csv, write_metadata

log = logging.getLogger("continuity")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_EXHAUSTED = 0, 1, 2, 3, 4
SEED_ENV = "CONTINUITY_SEED"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class ExperimentConfig:
    system: str = "HarmonicOscillator"
    system_params: dict = field(default_factory=dict)
    x0: list = field(default_factory=lambda: [[1.0, 0.0]])
    dt: float = 0.1
    n_points: int = 200
    jitter_frac: float = 0.0
    skip_prob: float = 0.0
    model_kind: str = "shallow"
    scheme: str = "RK4"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 5000
    batch_size: int | None = None
    hidden_dim: int = 50
    m: int = 24
    epsilon: float = 0.5
    metric: str = "mean"
    stride: int = 5
    degree: int = 3
    threshold: float = 0.05
    fd_order: int = 4
    ridge: float = 1e-10
    output_dir: str = "runs"
    seed: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        return int(os.environ.get(SEED_ENV, 0))

    def system_spec(self) -> systems.SystemSpec:
        return systems.SystemSpec(self.system, dict(self.system_params))

    def initial_conditions(self) -> list:
        x0 = np.asarray(self.x0, dtype=np.float64)
        return [row for row in np.atleast_2d(x0)]

    def train_config(self) -> odenet.TrainConfig:
        return odenet.TrainConfig(
            scheme=self.scheme, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.resolved_seed(),
            model_kind=self.model_kind, hidden_dim=self.hidden_dim,
        )

    def test_config(self) -> convergence.TestConfig:
        return convergence.TestConfig(m=self.m, epsilon=self.epsilon,
                                      metric=self.metric, stride=self.stride)


# flag parsing for config overrides: dict/list fields take JSON
def _flag_type(f):
    if f.name in ("system_params", "x0"):
        return json.loads
    if f.name in ("batch_size", "seed"):
        return int
    return type(f.default)


def _add_config_flags(p):
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(ExperimentConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name,
                       type=_flag_type(f), default=None, metavar=f.name.upper())


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    for key in d:
        val = getattr(args, "cfg_" + key, None)
        if val is not None:
            d[key] = val
    return ExperimentConfig.from_dict(d)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command, cfg, inputs, outputs, extra=None) -> Path:
    manifest = {
        "command": command,
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": cfg.resolved_seed() if cfg is not None else None,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "versions": {
            "continuity": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _check_overwrite(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {existing[0]} (use --force)")


def _load_trajs(paths) -> list[Trajectory]:
    if not paths:
        raise UsageError("no data files given")
    out = []
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"data file not found: {p}")
        try:
            out.append(read_csv(p))
        except (TrajectoryError, ValueError, KeyError, IndexError) as exc:
            raise DataError(f"cannot read {p}: {exc}")
    return out


def _out_dir(args, cfg) -> Path:
    d = Path(args.out or cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_generate(args, cfg) -> int:
    out = _out_dir(args, cfg)
    spec = cfg.system_spec()
    seed = cfg.resolved_seed()
    ics = cfg.initial_conditions()
    targets = [out / f"traj{i}.csv" for i in range(len(ics))]
    _check_overwrite(targets, args.force)
    written = []
    for i, (x0, path) in enumerate(zip(ics, targets)):
        if cfg.jitter_frac > 0 or cfg.skip_prob > 0:
            sampling = systems.SamplingSpec(cfg.dt, cfg.n_points, cfg.jitter_frac,
                                            cfg.skip_prob, seed + i)
            tr = systems.irregular_trajectory(spec, x0, sampling)
        else:
            tr = systems.reference_trajectory(spec, x0, cfg.dt, cfg.n_points)
        write_csv(tr, path)
        written += [path, write_metadata(tr, path)]
    write_manifest(out, "generate", cfg, [], written)
    print(f"wrote {len(targets)} trajectories to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    trajs = _load_trajs(args.data)
    out = _out_dir(args, cfg)
    ckpt = out / "checkpoint.json"
    _check_overwrite([ckpt], args.force)
    model = odenet.train(odenet.make_pairs(trajs), cfg.train_config())
    odenet.save_checkpoint(model, ckpt)
    write_manifest(out, "train", cfg, args.data, [ckpt])
    print(f"{model.scheme_used.tag}-Net final loss {model.final_loss:.6g} -> {ckpt}")
    if model.diverged:
        print("training diverged; best finite snapshot saved", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _report_outputs(out, report):
    return convergence.write_report(report, out / "report.json", out)


def cmd_test(args, cfg) -> int:
    sources = [bool(args.checkpoint), bool(args.sindy_model), args.exact_field]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --checkpoint, --sindy-model, --exact-field")
    vals = _load_trajs(args.val)
    out = _out_dir(args, cfg)
    _check_overwrite([out / "report.json"], args.force)
    inputs = list(args.val)
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        model = odenet.load_checkpoint(args.checkpoint)
        fld, scheme = odenet.as_field(model), model.scheme_used
        inputs.append(args.checkpoint)
    elif args.sindy_model:
        if not Path(args.sindy_model).is_file():
            raise UsageError(f"model not found: {args.sindy_model}")
        model = sindy.load_model(args.sindy_model)
        fld, scheme = sindy.model_field(model), model.scheme
        inputs.append(args.sindy_model)
    else:
        fld, scheme = systems.field(cfg.system_spec()), SchemeKind.parse(cfg.scheme)
    if args.infer_scheme:
        scheme = SchemeKind.parse(args.infer_scheme)
    report = convergence.run_convergence_test(fld, scheme, vals, cfg.test_config(),
                                              jobs=args.jobs)
    written = _report_outputs(out, report)
    write_manifest(out, "test", cfg, inputs, written)
    verdict = "Pass" if report.verdict else "Fail"
    print(f"{scheme.tag}: Error(dt)={report.error_at_dt:.4g} plateau={report.plateau_b:.4g} "
          f"verdict={verdict}")
    return EXIT_OK


def cmd_discover(args, cfg) -> int:
    trajs = _load_trajs(args.data)
    vals = _load_trajs(args.val)
    out = _out_dir(args, cfg)
    _check_overwrite([out / "checkpoint.json", out / "report.json"], args.force)
    result = convergence.discover(trajs, vals, cfg.train_config(), cfg.test_config(),
                                  quit_order=args.quit_order, jobs=args.jobs)
    written = []
    if result.model is not None:
        odenet.save_checkpoint(result.model, out / "checkpoint.json")
        written.append(out / "checkpoint.json")
    if result.report is not None:
        written += _report_outputs(out, result.report)
    history = [{"order": o, "verdict": "Pass" if v else "Fail"} for o, v in result.history]
    write_manifest(out, "discover", cfg, list(args.data) + list(args.val), written,
                   {"history": history, "notes": result.notes})
    for note in result.notes:
        print(note)
    if result.converged:
        print(f"converged at order {result.order_used}")
        return EXIT_OK
    if result.model is None:
        return EXIT_DIVERGED
    return EXIT_EXHAUSTED


def cmd_sindy(args, cfg) -> int:
    trajs = _load_trajs(args.data)
    out = _out_dir(args, cfg)
    path = out / "sindy_model.json"
    _check_overwrite([path], args.force)
    basis = sindy.PolyBasis.build(trajs[0].dim, cfg.degree)
    model = sindy.fit(trajs, basis, cfg.fd_order, cfg.threshold, cfg.ridge)
    sindy.save_model(model, path)
    write_manifest(out, "sindy", cfg, args.data, [path])
    for line in model.describe():
        print(line)
    return EXIT_OK


def cmd_theory(args, cfg) -> int:
    setting = theory.LinearSetting(args.lam, args.dt, args.p, args.q, args.eps, args.k)
    h_max = args.h_max if args.h_max is not None else 10 * args.dt
    h_min = args.h_min if args.h_min is not None else args.dt / 100
    if not 0 < h_min < h_max:
        raise UsageError("need 0 < h-min < h-max")
    out = _out_dir(args, cfg)
    path = out / "theory.csv"
    _check_overwrite([path], args.force)
    hs = theory.h_range(h_min, h_max, args.n)
    try:
        errs = theory.error_curve(setting, hs)
    except theory.NoRootError as exc:
        raise DataError(str(exc))
    convergence.write_curve_csv(hs, errs, path)
    extra = {"theory": dataclasses.asdict(setting),
             "w": theory.learned_rate(setting), "plateau_b": theory.plateau_b(setting)}
    write_manifest(out, "theory", cfg, [], [path], extra)
    print(f"w={extra['w']:.10g} plateau={extra['plateau_b']:.6g} -> {path}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(common)

    parser = _Parser(prog="continuity", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="simulate trajectories")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train an ODE-Net")
    p.add_argument("--data", nargs="+", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("test", parents=[common], help="run the convergence test")
    p.add_argument("--checkpoint")
    p.add_argument("--sindy-model")
    p.add_argument("--exact-field", action="store_true",
                   help="test the analytic system field instead of a model")
    p.add_argument("--infer-scheme", help="inference integrator (default: training one)")
    p.add_argument("--val", nargs="+", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("discover", parents=[common], help="escalate order until continuous")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--val", nargs="+", required=True)
    p.add_argument("--quit-order", type=int, default=4)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("sindy", parents=[common], help="fit a SINDy model")
    p.add_argument("--data", nargs="+", required=True)
    p.set_defaults(func=cmd_sindy)

    p = sub.add_parser("theory", parents=[common], help="analytic error curve")
    p.add_argument("--lam", type=float, required=True)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--q", type=int, default=None)
    p.add_argument("--eps", type=float, default=0.0, help="optimisation error")
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--h-min", type=float, default=None)
    p.add_argument("--h-max", type=float, default=None)
    p.add_argument("--n", type=int, default=200)
    p.set_defaults(func=cmd_theory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "theory":
            args.dt = cfg.dt
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, TrajectoryError, AlignmentError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
