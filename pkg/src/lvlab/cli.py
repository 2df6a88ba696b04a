"""Command-line entry point: ``lvlab <command> [options]``.

Every command reads an optional TOML config, applies ``--set key=value``
overrides, validates the whole run configuration and only then computes.
Artifacts are plain CSV/JSON; ``manifest.json`` is written last.

Exit codes: 0 success, 1 invalid input, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy
import tomli
from threadpoolctl import threadpool_limits

from . import __version__
from . import analysis as A
from . import losses as L
from . import model as M
from . import reference as R
from . import training as T
from .autodiff import DomainError, StructuralError
from .dynamics import LVParams, classify_regime, dispersion_relation

NUMERIC_ERRORS = (FloatingPointError, R.StiffnessError, R.DivergenceError, DomainError)
INPUT_ERRORS = (ValueError, KeyError, TypeError, FileNotFoundError, StructuralError, tomli.TOMLDecodeError)


# ---------------------------------------------------------------------- config


@dataclass
class DomainConfig:
    t_end: float = 20.0
    length: float = 20.0
    grid: int = 128
    boundary: str = "periodic"
    snapshots: int = 5


@dataclass
class ICConfig:
    u0: float = 2.0
    v0: float = 1.0


@dataclass
class NetworkConfig:
    embed_dim: int = 128
    hidden_layers: tuple = (64, 64, 64)
    seed: int | None = None  # defaults to the run seed


@dataclass
class EvalConfig:
    mae_gate: float = 0.05
    n_times: int = 2001
    threshold_fraction: float = 0.3
    bins: int = 32
    repeats: int = 10


@dataclass
class RunConfig:
    """Everything a run needs; every field has a default."""

    mode: str = "ode1d"
    seed: int = 0
    out: str = "runs"
    n_data: int | None = None
    params: LVParams = field(default_factory=LVParams)
    domain: DomainConfig = field(default_factory=DomainConfig)
    ic: ICConfig = field(default_factory=ICConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: T.TrainingConfig = field(default_factory=lambda: T.TrainingConfig(epochs=20000))
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    collocation: L.CollocationCounts | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.mode not in ("ode1d", "pde2d"):
            raise M.ConfigError(f"mode must be ode1d or pde2d, got {self.mode!r}")
        self.params.validate()
        d = self.domain
        if not d.t_end > 0 or not d.length > 0 or d.grid < 8 or d.snapshots < 2:
            raise M.ConfigError("domain needs t_end > 0, length > 0, grid >= 8, snapshots >= 2")
        if d.boundary not in ("periodic", "neumann"):
            raise M.ConfigError(f"unknown boundary {d.boundary!r}")
        if self.ic.u0 <= 0 or self.ic.v0 <= 0:
            raise M.ConfigError("initial densities must be positive")
        self.training.validate()
        self.network_spec().validate()
        c = self.counts()
        if c.interior < 1 or c.ic < 0 or c.bc < 0 or c.data < 0:
            raise M.ConfigError("collocation counts must be positive")
        if not 0 < self.eval.threshold_fraction < 1 or self.eval.repeats < 10:
            raise M.ConfigError("eval needs threshold_fraction in (0,1) and repeats >= 10")
        return self

    def counts(self) -> L.CollocationCounts:
        c = self.collocation or L.CollocationCounts.default(self.mode)
        return replace(c, data=self.n_data) if self.n_data is not None else c

    def domain_spec(self) -> L.Domain:
        return L.Domain(self.mode, (0.0, self.domain.t_end), self.domain.length)

    def network_spec(self) -> M.NetworkSpec:
        lo, hi = self.domain_spec().bounds()
        n = self.network
        return M.NetworkSpec(
            input_dim=1 if self.mode == "ode1d" else 3,
            embed_dim=n.embed_dim,
            hidden_layers=tuple(n.hidden_layers),
            seed=self.seed if n.seed is None else n.seed,
            input_lo=lo,
            input_hi=hi,
        )

    def snapshot(self) -> dict:
        d = asdict(self)
        d["collocation"] = asdict(self.counts())
        return d


_SECTIONS = {
    "params": LVParams,
    "domain": DomainConfig,
    "ic": ICConfig,
    "network": NetworkConfig,
    "training": T.TrainingConfig,
    "weights": L.LossWeights,
    "collocation": L.CollocationCounts,
    "eval": EvalConfig,
}


def _build(cls, data: dict, where: str):
    names = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise M.ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**kw)


def config_from_dict(raw: dict) -> RunConfig:
    top = {k: v for k, v in raw.items() if k not in _SECTIONS}
    unknown = set(top) - {"mode", "seed", "out", "n_data"}
    if unknown:
        raise M.ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kw = dict(top)
    seed = int(raw.get("seed", 0))
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}))
        if name == "training":
            section.setdefault("epochs", 20000)
            section.setdefault("seed", seed)
        if name == "collocation" and not section:
            continue
        if name == "collocation":
            base = asdict(L.CollocationCounts.default(raw.get("mode", "ode1d")))
            section = {**base, **section}
        kw[name] = _build(cls, section, name)
    return RunConfig(**kw)


def parse_override(text: str) -> tuple[list, object]:
    if "=" not in text:
        raise M.ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        val = tomli.loads(f"x = {value}")["x"]
    except tomli.TOMLDecodeError:
        val = value
    return key.strip().split("."), val


def load_config(path: str | None, overrides=(), seed: int | None = None) -> RunConfig:
    raw = {}
    if path:
        raw = tomli.loads(Path(path).read_text())
    for text in overrides:
        keys, val = parse_override(text)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = val
    if seed is not None:
        raw["seed"] = seed
        raw.setdefault("training", {})["seed"] = seed
    return config_from_dict(raw)


# --------------------------------------------------------------------- outputs


@dataclass
class RunManifest:
    command: str
    config: dict
    files: list = field(default_factory=list)
    versions: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0


class Outputs:
    """Tracks produced files and their roles for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files = []

    def path(self, name: str, role: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        self.files.append({"path": name, "role": role})
        return self.root / name

    def add(self, path: Path, role: str):
        self.files.append({"path": str(Path(path).relative_to(self.root)), "role": role})


def output_dir(cfg: RunConfig, cli_out: str | None, command: str) -> Path:
    if cli_out:
        return Path(cli_out)
    env = os.environ.get("USPIL_OUT")
    return Path(env) if env else Path(cfg.out) / command


# -------------------------------------------------------------------- pipeline


def _reference_1d(cfg: RunConfig) -> R.ReferenceSolution1D:
    return R.integrate_ode(cfg.params, (cfg.ic.u0, cfg.ic.v0), (0.0, cfg.domain.t_end),
                           n_times=cfg.eval.n_times)


def _reference_2d(cfg: RunConfig) -> R.ReferenceSolution2D:
    d = cfg.domain
    u0, v0 = R.spiral_seed_ic(cfg.params, d.grid, d.length)
    snaps = np.linspace(0.0, d.t_end, d.snapshots)
    return R.simulate_fdm(cfg.params, u0, v0, length=d.length, t_end=d.t_end,
                          boundary=d.boundary, snapshot_times=snaps)


def _problem(cfg: RunConfig, ref):
    counts = cfg.counts()
    if cfg.mode == "ode1d":
        return T.problem_1d(ref, counts.data, cfg.seed, counts)
    d = cfg.domain
    ic = lambda x, y: R.spiral_seed_at(cfg.params, x, y, d.length, 2 * d.length / d.grid)  # noqa: E731
    return T.problem_2d(ref, ic, counts.data, cfg.seed, counts)


def _sampler(ckpt):
    return lambda X: M.predict(ckpt, np.asarray(X, dtype=float).reshape(len(X), -1))


def cmd_reference(cfg, args, out: Outputs):
    if cfg.mode == "ode1d":
        ref = _reference_1d(cfg)
        for p in R.export_reference(ref, out.root):
            out.add(p, "reference")
        return {"points": len(ref.times), "t_end": float(ref.times[-1])}
    ref = _reference_2d(cfg)
    for p in R.export_reference(ref, out.root):
        out.add(p, "reference")
    return {"grid": ref.u.shape[1:], "snapshots": ref.times.tolist(), "dt": ref.meta["dt"]}


def _train(cfg, out: Outputs, quiet=False):
    ref = _reference_1d(cfg) if cfg.mode == "ode1d" else _reference_2d(cfg)
    problem = _problem(cfg, ref)
    training = cfg.training
    if training.checkpoint_every:
        training = replace(training, checkpoint_dir=str(out.root / "checkpoints"))

    def progress(b):
        if not quiet:
            print(f"epoch {b.epoch:6d}  total {b.total:.4e}", file=sys.stderr)

    try:
        ckpt, log = T.train(training, cfg.network_spec(), problem, cfg.weights, progress=progress)
    except T.TrainingDivergedError as exc:
        M.save(exc.checkpoint, out.path("last_good.json", "checkpoint"))
        raise
    log.write_csv(out.path("loss_history.csv", "loss-history"))
    M.save(ckpt, out.path("checkpoint.json", "checkpoint"))
    A.write_json({"final_weights": log.final_weights.as_dict(),
                  "normalized_weights": log.final_weights.normalized(),
                  "final_total": log.totals[-1] if log.records else None,
                  "epochs_run": log.epochs_run}, out.path("training_summary.json", "summary"))
    return ckpt, log, ref


def cmd_train(cfg, args, out: Outputs):
    ckpt, log, _ = _train(cfg, out, args.quiet)
    return {"epochs": log.epochs_run, "final_total": float(log.totals[-1]) if log.records else None}


def _evaluate(cfg, ckpt, ref, out: Outputs):
    if cfg.mode == "ode1d":
        rep = A.evaluate_1d(lambda t: M.predict(ckpt, t[:, None]), ref, cfg.params)
        A.write_json(rep, out.path("evaluation_1d.json", "report"))
        A.write_report_1d(rep, out.path("evaluation_1d.csv", "table"))
        return {"r2": rep.r2, "mae_combined": rep.mae_combined,
                "gate_passed": bool(rep.mae_combined <= cfg.eval.mae_gate)}
    rep = A.evaluate_2d(_sampler(ckpt), ref)
    A.write_json(rep, out.path("evaluation_2d.json", "report"))
    A.write_table(rep.rows + [rep.average], out.path("evaluation_2d.csv", "table"))
    mae = 0.5 * (rep.average.mae_u + rep.average.mae_v)
    return {"pattern_similarity": rep.average.pattern_similarity, "mae": mae,
            "gate_passed": bool(mae <= cfg.eval.mae_gate)}


def cmd_eval(cfg, args, out: Outputs):
    ckpt = M.load(args.checkpoint)
    ref = _reference_1d(cfg) if cfg.mode == "ode1d" else _reference_2d(cfg)
    return _evaluate(cfg, ckpt, ref, out)


def _series(cfg, args):
    if cfg.mode != "ode1d":
        raise M.ConfigError("this command analyses temporal series; use mode = 'ode1d'")
    ref = _reference_1d(cfg)
    pred = M.predict(M.load(args.checkpoint), ref.times[:, None]) if args.checkpoint else None
    return ref, pred


def cmd_spectrum(cfg, args, out: Outputs):
    ref, pred = _series(cfg, args)
    dt = float(ref.times[1] - ref.times[0])
    nfft = 16 * len(ref.times)
    if pred is None:
        rep = A.power_spectrum(ref.u, dt, nfft=nfft)
    else:
        rep = A.compare_spectra(ref.u, pred[:, 0], dt, nfft=nfft)
    A.write_spectrum(rep, out.path("spectrum.csv", "spectrum"))
    summary = {"f_true": rep.f_true, "f_pred": rep.f_pred, "rmse_psd": rep.rmse_psd}
    A.write_json(summary, out.path("spectrum.json", "report"))
    return summary


def cmd_recurrence(cfg, args, out: Outputs):
    ref, pred = _series(cfg, args)
    e = cfg.eval
    summary = {}
    series = {"reference": (ref.u, ref.v)}
    if pred is not None:
        series["prediction"] = (pred[:, 0], pred[:, 1])
    for name, (u, v) in series.items():
        rep = A.recurrence_analysis(u, v, e.threshold_fraction, e.bins)
        A.write_matrix(rep.matrix, out.path(f"recurrence_{name}.csv", "recurrence-matrix"))
        summary[name] = {"recurrence_rate": rep.recurrence_rate, "threshold": rep.threshold,
                         "shannon_entropy_u": rep.shannon_entropy_u,
                         "shannon_entropy_v": rep.shannon_entropy_v}
    A.write_json(summary, out.path("recurrence.json", "report"))
    return summary


def cmd_turing(cfg, args, out: Outputs):
    res = dispersion_relation(cfg.params, np.linspace(0.0, args.k_max, args.k_points))
    A.write_table(list(res.as_rows()), out.path("dispersion.csv", "dispersion"))
    summary = {"k_star": res.k_star, "max_growth": res.max_growth,
               "diffusion_ratio_flag": res.critical_ratio_flag,
               "jacobian": res.jacobian, "regime": classify_regime(cfg.params, cfg.domain.length)}
    A.write_json(summary, out.path("turing.json", "report"))
    return summary


def bench_methods(ckpt, p: LVParams, ic, times):
    """Network inference against fresh solves at the same query times."""
    span = (float(times[0]), float(times[-1]))

    def solve(method, **tol):
        def run():
            sol = R.integrate(lambda t, y: np.array([p.alpha * y[0] - p.beta * y[0] * y[1],
                                                     p.delta * y[0] * y[1] - p.gamma * y[1]]),
                              ic, span, t_eval=times, method=method, **tol)
            return sol.y.T
        return run

    return {
        "network inference": lambda: M.predict(ckpt, times[:, None]),
        "RK45 (default tolerances)": solve("RK45", rtol=1e-3, atol=1e-6),
        "RK45 (rtol 1e-6)": solve("RK45", rtol=1e-6, atol=1e-9),
        "DOP853 (rtol 1e-10)": solve("DOP853", rtol=1e-10, atol=1e-12),
    }


def cmd_bench(cfg, args, out: Outputs):
    if cfg.mode != "ode1d":
        raise M.ConfigError("bench times the temporal problem; use mode = 'ode1d'")
    ckpt = M.load(args.checkpoint)
    times = np.linspace(0.0, cfg.domain.t_end, 2000)
    ic = (cfg.ic.u0, cfg.ic.v0)
    truth = R.integrate_ode(cfg.params, ic, (0.0, cfg.domain.t_end), times=times)
    truth = np.column_stack([truth.u, truth.v])
    rows = A.benchmark(bench_methods(ckpt, cfg.params, ic, times), truth,
                       baseline="RK45 (default tolerances)", repeats=cfg.eval.repeats)
    A.write_table(rows, out.path("benchmark.csv", "table"))
    A.write_json(rows, out.path("benchmark.json", "report"))
    return {r.method: {"time_ms": r.time_ms, "mae": r.mae} for r in rows}


DEMO_DEFAULTS = {
    "training": {"epochs": 300, "log_every": 10},
    "collocation": {"interior": 200, "ic": 2, "data": 50},
    "network": {"embed_dim": 32, "hidden_layers": [32, 32]},
}


def cmd_demo(cfg, args, out: Outputs):
    ckpt, log, ref = _train(cfg, out, args.quiet)
    summary = _evaluate(cfg, ckpt, ref, out)
    summary["epochs"] = log.epochs_run
    return summary


COMMANDS = {
    "reference": cmd_reference,
    "train": cmd_train,
    "eval": cmd_eval,
    "spectrum": cmd_spectrum,
    "recurrence": cmd_recurrence,
    "turing": cmd_turing,
    "bench": cmd_bench,
    "demo": cmd_demo,
}


# ------------------------------------------------------------------------ argv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. training.epochs=500")
    common.add_argument("--seed", type=int, help="run seed (all randomness derives from it)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap; 1 gives fixed-order reductions")
    common.add_argument("--out", help="output directory (else $USPIL_OUT, else <out>/<command>)")
    common.add_argument("--mode", choices=["ode1d", "pde2d"])
    common.add_argument("--t-end", type=float, dest="t_end")
    common.add_argument("--quiet", action="store_true")
    parser = _Parser(prog="lvlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("eval", "bench"):
            sp.add_argument("--checkpoint", required=True)
        if name in ("spectrum", "recurrence"):
            sp.add_argument("--checkpoint")
        if name == "turing":
            sp.add_argument("--k-max", type=float, default=5.0, dest="k_max")
            sp.add_argument("--k-points", type=int, default=501, dest="k_points")
    return parser


def _overrides(args) -> list:
    extra = []
    if args.command == "demo":
        for sec, vals in DEMO_DEFAULTS.items():
            for k, v in vals.items():
                extra.append(f"{sec}.{k}={json.dumps(v)}")
    if args.mode:
        extra.append(f'mode="{args.mode}"')
    if args.t_end is not None:
        extra.append(f"domain.t_end={args.t_end}")
    return extra + list(args.overrides)


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    t0 = time.perf_counter()
    out = None
    try:
        cfg = load_config(args.config, _overrides(args), args.seed).validate()
        if args.threads is not None and args.threads < 1:
            raise M.ConfigError("--threads must be at least 1")
        out = Outputs(output_dir(cfg, args.out, args.command))
    except INPUT_ERRORS as exc:
        _reject(args, exc)
        return 1
    try:
        with threadpool_limits(limits=args.threads):
            summary = COMMANDS[args.command](cfg, args, out)
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 1
    manifest = RunManifest(
        command=args.command,
        config=cfg.snapshot(),
        files=out.files,
        versions={"lvlab": __version__, "python": platform.python_version(),
                  "numpy": np.__version__, "scipy": scipy.__version__},
        seeds={"run": cfg.seed, "training": cfg.training.seed, "network": cfg.network_spec().seed},
        wall_clock_s=time.perf_counter() - t0,
    )
    A.write_json(manifest, out.root / "manifest.json")
    if not args.quiet:
        print(json.dumps(A._plain(summary), indent=2))
    return 0


def _reject(args, exc):
    print(f"invalid configuration: {exc}", file=sys.stderr)
    target = args.out or os.environ.get("USPIL_OUT")
    if target:
        Path(target).mkdir(parents=True, exist_ok=True)
        (Path(target) / "rejected.txt").write_text(f"configuration rejected: {exc}\n")


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
