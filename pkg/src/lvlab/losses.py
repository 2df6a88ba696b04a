"""Composite training loss: six components, collocation sampling, weight adaptation.

Loss functions take a *field model*: any callable ``model(X, dirs)``
returning a packed jet of shape ``(1 + 2m, N, 2)`` (values, first and second
derivatives along the input axes listed in ``dirs``).  The network adapter
:class:`lvlab.model.NetworkField` returns tape variables; hand-written test
fields may return plain arrays.  Either way the arithmetic below is shared.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .dynamics import LVParams, hamiltonian_rate, mass_balance, residual_ode, residual_pde
from .model import ConfigError

COMPONENTS = ("data", "pde", "ic", "bc", "cons", "reg")
CLAMP_FLOOR = 1e-6


@dataclass
class LossWeights:
    data: float = 1.0
    pde: float = 1.0
    ic: float = 1.0
    bc: float = 1.0
    cons: float = 0.1
    reg: float = 1e-4
    adapt_exponent: float = 0.5

    def __post_init__(self):
        vals = [getattr(self, k) for k in COMPONENTS]
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ConfigError("loss weights must be finite and non-negative")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")
        if not 0.0 <= self.adapt_exponent <= 1.0:
            raise ConfigError("adapt_exponent must lie in [0, 1]")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in COMPONENTS}

    def normalized(self) -> dict:
        """Weights divided by their sum, the form used when reporting converged values."""
        d = self.as_dict()
        s = sum(d.values())
        return {k: v / s for k, v in d.items()}


@dataclass
class LossBreakdown:
    components: dict
    weights: dict
    total: float
    epoch: int = 0

    def row(self) -> list:
        return ([self.epoch, self.total] + [self.components.get(k, 0.0) for k in COMPONENTS]
                + [self.weights.get(k, 0.0) for k in COMPONENTS])


HISTORY_HEADER = ["epoch", "total"] + list(COMPONENTS) + [f"w_{k}" for k in COMPONENTS]


# ------------------------------------------------------------------ sampling


@dataclass(frozen=True)
class Domain:
    """``ode1d``: inputs ``(t,)``; ``pde2d``: inputs ``(x, y, t)`` on ``[0, L]^2``."""

    mode: str = "ode1d"
    t_span: tuple = (0.0, 20.0)
    length: float = 20.0

    def __post_init__(self):
        if self.mode not in ("ode1d", "pde2d"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.t_span[1] > self.t_span[0]:
            raise ConfigError("empty time interval")
        if self.mode == "pde2d" and not self.length > 0:
            raise ConfigError("domain length must be positive")

    @property
    def input_dim(self) -> int:
        return 1 if self.mode == "ode1d" else 3

    @property
    def t_axis(self) -> int:
        return self.input_dim - 1

    def bounds(self):
        if self.mode == "ode1d":
            return (self.t_span[0],), (self.t_span[1],)
        return (0.0, 0.0, self.t_span[0]), (self.length, self.length, self.t_span[1])


@dataclass(frozen=True)
class CollocationCounts:
    interior: int = 2000
    ic: int = 2
    bc: int = 0
    data: int = 50
    slice_size: int = 80  # 2D: interior points share a time value in groups of this size

    @classmethod
    def default(cls, mode: str) -> "CollocationCounts":
        if mode == "ode1d":
            return cls()
        return cls(interior=8000, ic=500, bc=1000, data=500)


@dataclass
class CollocationBatch:
    interior: np.ndarray
    ic: np.ndarray
    bc_lo: np.ndarray
    bc_hi: np.ndarray
    bc_axis: np.ndarray
    data: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    data_targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ic_targets: np.ndarray | None = None
    slice_size: int = 1

    @property
    def bc_points(self) -> np.ndarray:
        return np.concatenate([self.bc_lo, self.bc_hi])


def sample_collocation(domain: Domain, counts: CollocationCounts, seed, interior_fraction=1.0):
    """Uniform random points per region, deterministic in ``seed``.

    In 2D the interior is drawn as time slices: each group of
    ``counts.slice_size`` points shares one time value (needed by the
    domain-mean mass term) while x, y and the slice times are all uniform.
    Boundary points come in matched pairs on opposite edges.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = domain.bounds()
    n_int = max(1, int(round(counts.interior * interior_fraction)))
    if counts.interior <= 0 or counts.ic < 0 or counts.bc < 0:
        raise ConfigError("collocation counts must be positive")
    t0, t1 = domain.t_span
    if domain.mode == "ode1d":
        interior = rng.uniform(t0, t1, size=(n_int, 1))
        ic = np.full((counts.ic, 1), t0)
        empty = np.zeros((0, 1))
        return CollocationBatch(interior, ic, empty, empty, np.zeros(0, dtype=int), slice_size=1)
    L = domain.length
    size = max(1, min(counts.slice_size, n_int))
    n_slices = max(1, n_int // size)
    ts = np.repeat(rng.uniform(t0, t1, size=n_slices), size)
    xy = rng.uniform(0.0, L, size=(n_slices * size, 2))
    interior = np.column_stack([xy, ts])
    ic = np.column_stack([rng.uniform(0.0, L, size=(counts.ic, 2)), np.full(counts.ic, t0)])
    n_pairs = counts.bc // 2
    axis = rng.integers(0, 2, size=n_pairs)
    other = rng.uniform(0.0, L, size=n_pairs)
    tb = rng.uniform(t0, t1, size=n_pairs)
    bc_lo = np.zeros((n_pairs, 3))
    bc_lo[:, 2] = tb
    bc_lo[np.arange(n_pairs), 1 - axis] = other
    bc_hi = bc_lo.copy()
    bc_hi[np.arange(n_pairs), axis] = L
    return CollocationBatch(interior, ic, bc_lo, bc_hi, axis, slice_size=size)


# ------------------------------------------------------------------ components


def _u(P, k=0):
    return P[k, :, 0]


def _v(P, k=0):
    return P[k, :, 1]


def data_loss(model, batch: CollocationBatch):
    """Mean over data points of ``(u_hat - u)^2 + (v_hat - v)^2``."""
    if len(batch.data) == 0:
        warnings.warn("no data points: data loss defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    P = model(batch.data, ())
    du = _u(P) - batch.data_targets[:, 0]
    dv = _v(P) - batch.data_targets[:, 1]
    return ad.vmean(ad.square(du) + ad.square(dv))


def _interior_dirs(mode: str, diffusion: bool):
    if mode == "ode1d":
        return (0,)
    return (0, 1, 2) if diffusion else (2,)


def interior_terms(model, batch: CollocationBatch, p: LVParams, mode: str,
                   diffusion: bool = True, want=("pde", "cons", "reg")) -> dict:
    """Physics, conservation and smoothness terms from one shared forward pass.

    ``diffusion=False`` drops the Laplacian terms and evaluates only time
    jets, which is the temporal-only curriculum phase in 2D.
    """
    dirs = _interior_dirs(mode, diffusion)
    m = len(dirs)
    P = model(batch.interior, dirs)
    t_slot = dirs.index(dirs[-1])  # time is always the last seeded axis
    u, v = _u(P), _v(P)
    u_t, v_t = _u(P, 1 + t_slot), _v(P, 1 + t_slot)
    if mode == "pde2d" and diffusion:
        lap_u = _u(P, 1 + m) + _u(P, 2 + m)
        lap_v = _v(P, 1 + m) + _v(P, 2 + m)
    else:
        lap_u = lap_v = 0.0
    out = {}
    if "pde" in want:
        if mode == "ode1d":
            fu, fv = residual_ode(p, u, v, u_t, v_t)
        else:
            fu, fv = residual_pde(p, u, v, u_t, v_t, lap_u, lap_v)
        out["pde"] = ad.vmean(ad.square(fu) + ad.square(fv))
    if "cons" in want:
        out["cons"] = _conservation(p, u, v, u_t, v_t, lap_u, lap_v, mode, batch.slice_size)
    if "reg" in want:
        u_tt, v_tt = _u(P, 1 + m + t_slot), _v(P, 1 + m + t_slot)
        out["reg"] = ad.vmean(ad.square(u_tt) + ad.square(v_tt))
    return out


def _conservation(p, u, v, u_t, v_t, lap_u, lap_v, mode, slice_size):
    uc = ad.maximum(u, CLAMP_FLOOR)
    vc = ad.maximum(v, CLAMP_FLOOR)
    h_res = hamiltonian_rate(p, uc, vc, u_t, v_t)
    if mode == "pde2d":
        # dH/dt carries a diffusive production term; subtract what the PDE implies
        h_res = h_res - ((p.delta - p.gamma / uc) * (p.d_u * lap_u)
                         + (p.beta - p.alpha / vc) * (p.d_v * lap_v))
    m_res = (u_t + v_t) - mass_balance(p, u, v)
    if mode == "pde2d":
        # pointwise mass is not conserved under diffusion: balance domain means per slice
        m_res = ad.vmean(_reshape(m_res, (-1, slice_size)), axis=1)
    return ad.vmean(ad.square(h_res)) + ad.vmean(ad.square(m_res))


def _reshape(x, shape):
    if isinstance(x, ad.Var):
        return x.reshape(shape)
    return np.reshape(x, shape)


def physics_loss(model, batch, p: LVParams, mode: str = "ode1d", diffusion: bool = True):
    """Mean squared residual of the governing equations at interior points."""
    return interior_terms(model, batch, p, mode, diffusion, want=("pde",))["pde"]


def conservation_loss(model, batch, p: LVParams, mode: str = "ode1d"):
    """Hamiltonian-rate and mass-balance penalty.

    The H term is ``dH/dt`` (plus, in 2D, minus its diffusive production);
    the M term is ``d(u+v)/dt`` minus the birth-death balance, taken over
    domain means per time slice in 2D.
    """
    return interior_terms(model, batch, p, mode, want=("cons",))["cons"]


def temporal_reg_loss(model, batch, mode: str = "ode1d"):
    return interior_terms(model, batch, LVParams(), mode, want=("reg",))["reg"]


def icbc_loss(model, batch: CollocationBatch, ic_values, boundary: str = "periodic",
              mode: str = "ode1d"):
    """``(L_ic, L_bc)``; ``L_bc`` is identically zero for the temporal problem."""
    if batch.ic_targets is not None:
        target = np.asarray(batch.ic_targets)
    else:
        target = np.broadcast_to(np.asarray(ic_values, dtype=float), (len(batch.ic), 2))
    if len(batch.ic):
        P = model(batch.ic, ())
        l_ic = ad.vmean(ad.square(_u(P) - target[:, 0]) + ad.square(_v(P) - target[:, 1]))
    else:
        l_ic = 0.0
    if mode == "ode1d" or len(batch.bc_lo) == 0:
        return l_ic, 0.0
    if boundary == "periodic":
        P = model(batch.bc_points, ())
        n = len(batch.bc_lo)
        du = P[0, :n, 0] - P[0, n:, 0]
        dv = P[0, :n, 1] - P[0, n:, 1]
        l_bc = ad.vmean(ad.square(du) + ad.square(dv))
    elif boundary == "neumann":
        P = model(batch.bc_points, (0, 1))
        ax = np.concatenate([batch.bc_axis, batch.bc_axis])
        mx = (ax == 0).astype(float)
        my = 1.0 - mx
        dn_u = _u(P, 1) * mx + _u(P, 2) * my
        dn_v = _v(P, 1) * mx + _v(P, 2) * my
        l_bc = ad.vmean(ad.square(dn_u) + ad.square(dn_v))
    else:
        raise ConfigError(f"unknown boundary mode {boundary!r}")
    return l_ic, l_bc


# ------------------------------------------------------------- total and weights


def total_loss(components: dict, weights: LossWeights, epoch: int = 0, active=None):
    """Weighted sum; components outside ``active`` contribute nothing."""
    w = weights.as_dict()
    total = 0.0
    raw = {}
    used = {}
    for k in COMPONENTS:
        val = components.get(k, 0.0)
        raw[k] = float(np.asarray(ad._val(val)))
        on = active is None or k in active
        used[k] = w[k] if on else 0.0
        if on and w[k] != 0.0 and k in components:
            total = total + w[k] * val
    tv = float(np.asarray(ad._val(total)))
    return total, LossBreakdown(raw, used, tv, epoch)


def update_weights(weights: LossWeights, breakdown: LossBreakdown, active=None,
                   floor: float = 1e-12, normalize: bool = True, limits=None) -> LossWeights:
    """Steer each weighted term ``lambda_k L_k`` toward their geometric mean.

    ``lambda_k <- lambda_k * (G / (lambda_k L_k)) ** adapt_exponent`` with
    ``G`` the geometric mean of the active weighted terms and each ``L_k``
    floored at ``floor``.  For fixed losses the log-spread of the weighted
    terms shrinks by ``1 - adapt_exponent`` per update; with unit weights
    this is the plain ``(Lbar / L_k) ** adapt_exponent`` rule.  With
    ``normalize`` the active weights are rescaled to keep their sum.
    ``limits`` maps a component to ``(lo, hi)`` bounds applied last; a term
    that can be driven to zero would otherwise attract unbounded weight.
    """
    w = weights.as_dict()
    keys = [k for k in COMPONENTS if w[k] > 0 and (active is None or k in active)]
    if not keys:
        return weights
    logs = {k: math.log(w[k]) + math.log(max(float(breakdown.components.get(k, 0.0)), floor))
            for k in keys}
    log_mean = sum(logs.values()) / len(keys)
    g = weights.adapt_exponent
    new = dict(w)
    for k in keys:
        new[k] = w[k] * math.exp(g * (log_mean - logs[k]))
    if normalize:
        s_old = sum(w[k] for k in keys)
        s_new = sum(new[k] for k in keys)
        for k in keys:
            new[k] *= s_old / s_new
    for k, (lo, hi) in (limits or {}).items():
        if k in keys:
            new[k] = min(max(new[k], lo), hi)
    return replace(weights, **new)


# ------------------------------------------------------------------- curriculum


@dataclass(frozen=True)
class Phase:
    index: int
    active: frozenset
    interior_fraction: float
    diffusion: bool
    adapt: bool


PHASES_2D = {
    1: Phase(1, frozenset({"data", "pde", "ic"}), 1.0, False, False),
    2: Phase(2, frozenset({"data", "pde", "ic", "bc"}), 0.25, True, False),
    3: Phase(3, frozenset({"data", "pde", "ic", "bc"}), 1.0, True, False),
    4: Phase(4, frozenset(COMPONENTS), 1.0, True, True),
}
PHASES_1D = {
    1: Phase(1, frozenset({"data", "pde", "ic"}), 1.0, False, False),
    4: Phase(4, frozenset(COMPONENTS), 1.0, False, True),
}


@dataclass(frozen=True)
class CurriculumSchedule:
    """Epoch at which phases 2, 3 and 4 begin.

    For the temporal problem phases 2 and 3 have nothing to add and the
    schedule collapses to phase 1 followed by phase 4 at ``starts[2]``.
    """

    starts: tuple = (0, 0, 0)
    mode: str = "ode1d"

    def __post_init__(self):
        if list(self.starts) != sorted(self.starts) or self.starts[0] < 0:
            raise ConfigError("curriculum boundaries must be non-decreasing and non-negative")

    @classmethod
    def from_fractions(cls, epochs: int, mode: str, fractions=(0.1, 0.2, 0.4, 0.3)):
        if len(fractions) != 4 or any(f < 0 for f in fractions):
            raise ConfigError("need four non-negative phase fractions")
        total = sum(fractions)
        c = np.cumsum(fractions)[:3] / total
        return cls(tuple(int(round(epochs * x)) for x in c), mode)


def curriculum_phase(epoch: int, schedule: CurriculumSchedule) -> Phase:
    s2, s3, s4 = schedule.starts
    if schedule.mode == "ode1d":
        return PHASES_1D[1] if epoch < s4 else PHASES_1D[4]
    if epoch < s2:
        return PHASES_2D[1]
    if epoch < s3:
        return PHASES_2D[2]
    if epoch < s4:
        return PHASES_2D[3]
    return PHASES_2D[4]


def weights_from_dict(d: dict) -> LossWeights:
    names = {f.name for f in fields(LossWeights)}
    return LossWeights(**{k: float(v) for k, v in d.items() if k in names})
