"""Ground-truth generators: adaptive Runge-Kutta for the ODE, explicit FDM for the PDE."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .dynamics import LVParams, rhs_ode
from .model import ConfigError


class StiffnessError(RuntimeError):
    def __init__(self, t_fail, message=""):
        super().__init__(f"integration failed at t={t_fail:.6g}: {message}")
        self.t_fail = t_fail


class DivergenceError(RuntimeError):
    def __init__(self, step, message="non-finite values"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class InsufficientDataError(ValueError):
    pass


@dataclass
class ReferenceSolution1D:
    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    params: LVParams
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if not (self.times.shape == self.u.shape == self.v.shape):
            raise ValueError("times, u and v must have equal lengths")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(self.u <= 0) or np.any(self.v <= 0):
            raise ValueError("densities must be positive")


@dataclass
class ReferenceSolution2D:
    x: np.ndarray  # cell-centre coordinates along x (length nx)
    y: np.ndarray
    times: np.ndarray
    u: np.ndarray  # (n_snapshots, ny, nx)
    v: np.ndarray
    params: LVParams
    boundary: str = "periodic"
    meta: dict = field(default_factory=dict)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def length(self) -> float:
        return float(self.x.size * self.dx)

    def snapshot(self, t, atol=1e-9):
        idx = np.flatnonzero(np.abs(self.times - t) <= atol)
        if idx.size == 0:
            raise KeyError(f"no snapshot at t={t}")
        return self.u[idx[0]], self.v[idx[0]]


# ------------------------------------------------------------------------ ODE


def integrate(rhs, y0, t_span, rtol=1e-10, atol=1e-12, t_eval=None, method="DOP853"):
    """Adaptive embedded Runge-Kutta solve of ``y' = rhs(t, y)``.

    Returns the scipy solution object (with dense output).  Step-size
    collapse is reported as :class:`StiffnessError`.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    if not np.all(np.isfinite(t_span)):
        raise ValueError("t_span must be finite")
    sol = solve_ivp(
        rhs, t_span, np.asarray(y0, dtype=np.float64), method=method, rtol=rtol, atol=atol,
        t_eval=t_eval, dense_output=True,
    )
    if sol.status < 0:
        raise StiffnessError(float(sol.t[-1]), sol.message)
    return sol


def integrate_ode(p: LVParams, ic=(2.0, 1.0), t_span=(0.0, 20.0), rtol=1e-10, atol=1e-12,
                  times=None, n_times=2001) -> ReferenceSolution1D:
    """Dormand-Prince 8(5,3) reference trajectory sampled at ``times``."""
    if min(ic) <= 0:
        raise ValueError("initial densities must be positive")
    if times is None:
        times = np.linspace(t_span[0], t_span[1], n_times)

    def f(t, y):
        return rhs_ode(p, y[0], y[1])

    sol = integrate(f, ic, t_span, rtol=rtol, atol=atol, t_eval=times)
    return ReferenceSolution1D(
        sol.t, sol.y[0], sol.y[1], p,
        meta={"method": "DOP853", "rtol": rtol, "atol": atol, "nfev": int(sol.nfev),
              "steps": len(sol.sol.ts) - 1,
              "ic": list(map(float, ic)), "t_span": list(map(float, t_span))},
    )


def find_period(times, signal) -> tuple[float, float]:
    """Mean and spread of the period from upward crossings through the mean.

    Crossing instants are refined by linear interpolation between samples.
    """
    times = np.asarray(times, dtype=np.float64)
    x = np.asarray(signal, dtype=np.float64) - np.mean(signal)
    idx = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    if idx.size < 2:
        raise InsufficientDataError("need at least two upward mean crossings")
    frac = -x[idx] / (x[idx + 1] - x[idx])
    crossings = times[idx] + frac * (times[idx + 1] - times[idx])
    periods = np.diff(crossings)
    return float(periods.mean()), float(periods.std())


def solution_period(sol: ReferenceSolution1D) -> tuple[float, float]:
    return find_period(sol.times, sol.u)


# ------------------------------------------------------------------------ FDM


def laplacian(f: np.ndarray, dx: float, boundary: str = "periodic") -> np.ndarray:
    """Five-point Laplacian on a cell-centred grid.

    ``neumann`` mirrors the edge cell into the ghost cell (zero normal flux).
    """
    if boundary == "periodic":
        g = np.pad(f, 1, mode="wrap")
    elif boundary == "neumann":
        g = np.pad(f, 1, mode="edge")
    else:
        raise ConfigError(f"unknown boundary mode {boundary!r}")
    return (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * f) / (dx * dx)


def default_dt(p: LVParams, dx: float, cfl: float = 0.2) -> float:
    d_max = max(p.d_u, p.d_v)
    if d_max == 0:
        raise ConfigError("no diffusion: give dt explicitly")
    return cfl * dx * dx / d_max


def spiral_seed_at(p: LVParams, x, y, length: float = 20.0, width: float | None = None):
    """Equilibrium plus a half-domain bump in u along x and in v along y.

    The steps are tanh ramps of half-width ``width`` (default two cells of a
    128 grid), so the field is smooth and can be sampled anywhere.
    """
    if width is None:
        width = 2 * length / 128
    us, vs = p.equilibrium()
    step_x = 0.5 * (1.0 - np.tanh((np.asarray(x) - length / 2) / width))
    step_y = 0.5 * (1.0 - np.tanh((np.asarray(y) - length / 2) / width))
    return us + 0.5 * us * step_x, vs + 0.5 * vs * step_y


def spiral_seed_ic(p: LVParams, n: int = 128, length: float = 20.0, width: float | None = None):
    """:func:`spiral_seed_at` on the cell centres of an ``n x n`` grid."""
    dx = length / n
    centres = (np.arange(n) + 0.5) * dx
    X, Y = np.meshgrid(centres, centres)
    return spiral_seed_at(p, X, Y, length, 2 * dx if width is None else width)


def simulate_fdm(p: LVParams, u0, v0, length: float = 20.0, dt: float | None = None,
                 t_end: float = 10.0, boundary: str = "periodic", snapshot_times=None,
                 cfl_limit: float = 0.25) -> ReferenceSolution2D:
    """Forward-Euler reaction-diffusion stepping on a square cell-centred grid.

    The step is shrunk so that ``t_end`` is hit exactly; snapshots land on
    the nearest step.  Mass and extrema of each snapshot go into ``meta``.
    """
    u = np.array(u0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    if u.ndim != 2 or u.shape != v.shape or u.shape[0] != u.shape[1]:
        raise ConfigError("initial fields must be equal square 2-D arrays")
    if boundary not in ("periodic", "neumann"):
        raise ConfigError(f"unknown boundary mode {boundary!r}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ConfigError("initial fields must be finite")
    reacting = any(r > 0 for r in (p.alpha, p.beta, p.gamma, p.delta))
    if reacting and (np.any(u <= 0) or np.any(v <= 0)):
        raise ConfigError("initial densities must be positive when reactions are active")
    n = u.shape[0]
    dx = length / n
    if dt is None:
        dt = default_dt(p, dx)
    if dt <= 0 or t_end <= 0:
        raise ConfigError("dt and t_end must be positive")
    if max(p.d_u, p.d_v) * dt / (dx * dx) > cfl_limit:
        raise ConfigError(f"CFL number {max(p.d_u, p.d_v) * dt / dx**2:.4g} exceeds {cfl_limit}")
    n_steps = int(np.ceil(t_end / dt - 1e-12))
    dt = t_end / n_steps
    cfl = max(p.d_u, p.d_v) * dt / (dx * dx)
    if cfl > cfl_limit:
        raise ConfigError(f"CFL number {cfl:.4g} exceeds {cfl_limit}")
    if snapshot_times is None:
        snapshot_times = np.linspace(0.0, t_end, 11)
    snap_steps = sorted({int(round(t / dt)) for t in snapshot_times})
    if snap_steps[-1] > n_steps or snap_steps[0] < 0:
        raise ConfigError("snapshot times must lie in [0, t_end]")

    us, vs, ts, logs = [], [], [], []
    cell = dx * dx

    def record(step):
        us.append(u.copy())
        vs.append(v.copy())
        ts.append(step * dt)
        logs.append({"t": step * dt, "mass_u": float(u.sum() * cell), "mass_v": float(v.sum() * cell),
                     "u_min": float(u.min()), "u_max": float(u.max()),
                     "v_min": float(v.min()), "v_max": float(v.max())})

    targets = iter(snap_steps)
    nxt = next(targets)
    with np.errstate(over="ignore", invalid="ignore"):  # blow-up is reported below
        for step in range(n_steps + 1):
            if step == nxt:
                record(step)
                nxt = next(targets, -1)
            if step == n_steps:
                break
            uv = u * v
            du = p.alpha * u - p.beta * uv + p.d_u * laplacian(u, dx, boundary)
            dv = p.delta * uv - p.gamma * v + p.d_v * laplacian(v, dx, boundary)
            u = u + dt * du
            v = v + dt * dv
            if not (np.isfinite(u).all() and np.isfinite(v).all()):
                raise DivergenceError(step + 1)

    centres = (np.arange(n) + 0.5) * dx
    return ReferenceSolution2D(
        x=centres, y=centres.copy(), times=np.array(ts), u=np.array(us), v=np.array(vs),
        params=p, boundary=boundary,
        meta={"dt": dt, "steps": n_steps, "cfl": cfl, "dx": dx, "snapshots": logs},
    )


# --------------------------------------------------------------------- export


def _write_csv(path, header, cols):
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")


def export_reference(sol, out_dir, stem: str = "reference") -> list:
    """Write CSV (1D) or per-snapshot CSVs plus a JSON manifest (2D).

    Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    if isinstance(sol, ReferenceSolution1D):
        path = os.path.join(out_dir, f"{stem}_1d.csv")
        _write_csv(path, "t,u,v", [sol.times, sol.u, sol.v])
        return [path]
    files = []
    X, Y = np.meshgrid(sol.x, sol.y)
    for i, t in enumerate(sol.times):
        name = f"{stem}_2d_{i:04d}.csv"
        _write_csv(os.path.join(out_dir, name), "x,y,u,v",
                   [X.ravel(), Y.ravel(), sol.u[i].ravel(), sol.v[i].ravel()])
        files.append(name)
    manifest = {
        "grid": {"nx": int(sol.x.size), "ny": int(sol.y.size), "dx": sol.dx},
        "times": [float(t) for t in sol.times],
        "files": files,
        "params": sol.params.as_dict(),
        "boundary": sol.boundary,
    }
    mpath = os.path.join(out_dir, f"{stem}_2d_manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return [os.path.join(out_dir, f) for f in files] + [mpath]


def import_reference_1d(path, params: LVParams | None = None) -> ReferenceSolution1D:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ReferenceSolution1D(data[:, 0], data[:, 1], data[:, 2], params or LVParams())


def import_reference_2d(manifest_path) -> ReferenceSolution2D:
    base = os.path.dirname(manifest_path)
    with open(manifest_path) as fh:
        man = json.load(fh)
    nx, ny = man["grid"]["nx"], man["grid"]["ny"]
    us, vs = [], []
    x = y = None
    for name in man["files"]:
        data = np.loadtxt(os.path.join(base, name), delimiter=",", skiprows=1, ndmin=2)
        x = data[:nx, 0]
        y = data[::nx, 1]
        us.append(data[:, 2].reshape(ny, nx))
        vs.append(data[:, 3].reshape(ny, nx))
    return ReferenceSolution2D(x=x, y=y, times=np.array(man["times"]), u=np.array(us),
                               v=np.array(vs), params=LVParams(**man["params"]),
                               boundary=man["boundary"])
