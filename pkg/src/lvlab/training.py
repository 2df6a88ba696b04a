"""Adam training loop with curriculum phases and adaptive loss weights."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .dynamics import LVParams
from .model import ConfigError, NetworkCheckpoint, NetworkField, NetworkSpec, init, save, to_tape
from .reference import InsufficientDataError, ReferenceSolution1D, ReferenceSolution2D


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class TrainingDivergedError(FloatingPointError):
    """Loss became NaN/inf; ``checkpoint`` holds the last finite parameters."""

    def __init__(self, epoch, checkpoint, path=None):
        where = f", last good checkpoint saved to {path}" if path else ""
        super().__init__(f"non-finite loss at epoch {epoch}{where}")
        self.epoch = epoch
        self.checkpoint = checkpoint
        self.path = path


@dataclass
class TrainingConfig:
    epochs: int = 50000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    phase_fractions: tuple = (0.1, 0.2, 0.4, 0.3)
    weight_update_every: int = 100
    weight_ratio_limit: float = 10.0  # adapted weights stay within this factor of their start
    log_every: int = 100
    early_stop: bool = False
    patience: int = 2000
    min_rel_improvement: float = 1e-6
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    fused: bool = True

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam constants")
        if not self.weight_ratio_limit >= 1:
            raise ConfigError("weight_ratio_limit must be at least 1")
        if self.weight_update_every < 1 or self.log_every < 1 or self.patience < 1:
            raise ConfigError("cadences must be at least 1")


@dataclass
class Problem:
    """What to fit: equations, domain, initial state and measurements.

    ``ic`` is a ``(u0, v0)`` pair, or for 2D a callable ``(x, y) -> (u, v)``.
    """

    mode: str
    params: LVParams
    domain: L.Domain
    ic: object
    data_points: np.ndarray
    data_targets: np.ndarray
    boundary: str = "periodic"
    counts: L.CollocationCounts = field(default_factory=L.CollocationCounts)

    def __post_init__(self):
        if self.mode != self.domain.mode:
            raise ConfigError("problem mode and domain mode differ")
        if len(self.data_points) != len(self.data_targets):
            raise ConfigError("data points and targets differ in length")


def problem_1d(ref: ReferenceSolution1D, n_data: int = 50, seed: int = 0,
               counts: L.CollocationCounts | None = None) -> Problem:
    """Temporal problem whose measurements are ``n_data`` random reference samples."""
    if n_data > len(ref.times):
        raise InsufficientDataError(f"asked for {n_data} data points, reference has {len(ref.times)}")
    rng = np.random.default_rng([seed, 1])
    idx = np.sort(rng.choice(len(ref.times), size=n_data, replace=False))
    counts = counts or L.CollocationCounts(data=n_data)
    return Problem(
        mode="ode1d",
        params=ref.params,
        domain=L.Domain("ode1d", (float(ref.times[0]), float(ref.times[-1]))),
        ic=(float(ref.u[0]), float(ref.v[0])),
        data_points=ref.times[idx, None],
        data_targets=np.column_stack([ref.u[idx], ref.v[idx]]),
        counts=counts,
    )


def problem_2d(ref: ReferenceSolution2D, ic: Callable, n_data: int = 500, seed: int = 0,
               counts: L.CollocationCounts | None = None) -> Problem:
    """Spatiotemporal problem sampling measurements from the reference snapshots."""
    n_t, ny, nx = ref.u.shape
    if n_data > n_t * ny * nx:
        raise InsufficientDataError("more data points requested than reference samples")
    rng = np.random.default_rng([seed, 2])
    flat = rng.choice(n_t * ny * nx, size=n_data, replace=False)
    it, iy, ix = np.unravel_index(flat, (n_t, ny, nx))
    pts = np.column_stack([ref.x[ix], ref.y[iy], ref.times[it]])
    tgt = np.column_stack([ref.u[it, iy, ix], ref.v[it, iy, ix]])
    counts = counts or replace(L.CollocationCounts.default("pde2d"), data=n_data)
    return Problem(
        mode="pde2d",
        params=ref.params,
        domain=L.Domain("pde2d", (float(ref.times[0]), float(ref.times[-1])), ref.length),
        ic=ic,
        data_points=pts,
        data_targets=tgt,
        boundary=ref.boundary,
        counts=counts,
    )


def default_spec(problem: Problem, **kw) -> NetworkSpec:
    """Network spec with input scaling matched to the problem domain."""
    lo, hi = problem.domain.bounds()
    return NetworkSpec(input_dim=problem.domain.input_dim, input_lo=lo, input_hi=hi, **kw)


# ------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new params and state."""
    missing = set(params) - set(grads)
    if missing:
        raise ConfigError(f"gradients missing for {sorted(missing)}")
    for k in params:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradientError(k)
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ------------------------------------------------------------------------- log


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)  # LossBreakdown per logged epoch
    wall: list = field(default_factory=list)  # seconds per logged epoch
    phases: list = field(default_factory=list)
    final_weights: L.LossWeights | None = None
    checkpoint_path: str | None = None
    stopped_early: bool = False
    epochs_run: int = 0

    @property
    def epochs(self) -> np.ndarray:
        return np.array([r.epoch for r in self.records])

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(L.HISTORY_HEADER)
        for r in self.records:
            w.writerow([r.epoch] + [format(x, ".17g") for x in r.row()[1:]])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())


# ----------------------------------------------------------------------- train


def epoch_components(model, batch: L.CollocationBatch, problem: Problem, phase: L.Phase,
                     weights: L.LossWeights) -> dict:
    """Loss components active in ``phase`` with a non-zero weight."""
    w = weights.as_dict()
    want = {k for k in phase.active if w[k] > 0}
    comps = {}
    if "data" in want:
        comps["data"] = L.data_loss(model, batch)
    inner = tuple(k for k in ("pde", "cons", "reg") if k in want)
    if inner:
        comps.update(L.interior_terms(model, batch, problem.params, problem.mode,
                                      diffusion=phase.diffusion, want=inner))
    if "ic" in want or "bc" in want:
        l_ic, l_bc = L.icbc_loss(model, batch, problem.ic if not callable(problem.ic) else None,
                                 problem.boundary, problem.mode)
        if "ic" in want:
            comps["ic"] = l_ic
        if "bc" in want and problem.mode == "pde2d":
            comps["bc"] = l_bc
    return comps


def make_batch(problem: Problem, phase: L.Phase, seed, epoch: int) -> L.CollocationBatch:
    rng = np.random.default_rng([seed, 0, epoch])
    counts = problem.counts
    if problem.mode == "ode1d" or "bc" not in phase.active:
        counts = replace(counts, bc=0)
    batch = L.sample_collocation(problem.domain, counts, rng, phase.interior_fraction)
    batch.data = problem.data_points
    batch.data_targets = problem.data_targets
    if callable(problem.ic):
        u0, v0 = problem.ic(batch.ic[:, 0], batch.ic[:, 1])
        batch.ic_targets = np.column_stack([u0, v0])
    return batch


def train(config: TrainingConfig, spec: NetworkSpec, problem: Problem,
          weights: L.LossWeights | None = None, ckpt: NetworkCheckpoint | None = None,
          progress: Callable | None = None):
    """Full-batch Adam over freshly sampled collocation points each epoch.

    Returns the final checkpoint and the training log.  With
    ``epochs == 0`` the initial checkpoint comes back unchanged.
    """
    config.validate()
    spec.validate()
    if len(problem.data_points) == 0 and (weights or L.LossWeights()).data > 0:
        raise InsufficientDataError("the data term needs at least one reference sample")
    weights = weights or L.LossWeights()
    ckpt = ckpt or init(spec)
    log = TrainingLog(final_weights=weights)
    if config.epochs == 0:
        return ckpt, log
    schedule = L.CurriculumSchedule.from_fractions(config.epochs, problem.mode, config.phase_fractions)
    params = ckpt.params()
    state = AdamState.zeros(params)
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    r = config.weight_ratio_limit
    limits = {k: (v / r, v * r) for k, v in weights.as_dict().items()}
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        phase = L.curriculum_phase(epoch, schedule)
        batch = make_batch(problem, phase, config.seed, epoch)
        tape = ad.Tape()
        model = NetworkField(spec, to_tape(tape, params), fused=config.fused)
        comps = epoch_components(model, batch, problem, phase, weights)
        total, brk = L.total_loss(comps, weights, epoch, phase.active)
        if not math.isfinite(brk.total):
            good = ckpt.with_params(params, {"epoch": epoch})
            path = None
            if ckdir:
                path = str(ckdir / "last_good.json")
                save(good, path)
            raise TrainingDivergedError(epoch, good, path)
        grads = ad.param_grad(total)
        tape.clear()
        params, state = adam_step(params, grads, state, config.lr,
                                  config.beta1, config.beta2, config.eps)
        if phase.adapt and epoch % config.weight_update_every == 0:
            # only terms evaluated this epoch take part (the 1D boundary term never is)
            weights = L.update_weights(weights, brk, set(comps), limits=limits)
        dt = time.perf_counter() - t0
        history.append(brk.total)
        last = epoch == config.epochs - 1
        if epoch % config.log_every == 0 or last:
            log.records.append(brk)
            log.wall.append(dt)
            log.phases.append(phase.index)
            if progress:
                progress(brk)
        if ckdir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save(ckpt.with_params(params, {"epoch": epoch + 1}), ckdir / f"epoch_{epoch + 1:06d}.json")
        if config.early_stop and _stalled(history, config):
            log.stopped_early = True
            if not last:
                log.records.append(brk)
                log.wall.append(dt)
                log.phases.append(phase.index)
            break
    log.epochs_run = len(history)
    log.final_weights = weights
    meta = {"epochs": log.epochs_run, "final_total": history[-1], "seed": config.seed,
            "weights": weights.as_dict()}
    final = ckpt.with_params(params, meta)
    if ckdir:
        log.checkpoint_path = str(ckdir / "final.json")
        save(final, log.checkpoint_path)
    return final, log


def _stalled(history, config: TrainingConfig) -> bool:
    n = len(history)
    if n <= config.patience:
        return False
    before = history[n - 1 - config.patience]
    rel = (before - history[-1]) / max(abs(before), 1e-300)
    return rel < config.min_rel_improvement
