"""Evaluation metrics, spectra, recurrence, pattern metrics, Lyapunov and timing."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage, signal

from .autodiff import StructuralError
from .dynamics import LVParams, hamiltonian, rhs_ode
from .reference import ReferenceSolution1D, ReferenceSolution2D, find_period, integrate


class MetricUndefinedError(ValueError):
    """A metric has no meaningful value for the given input (e.g. constant reference)."""


class ResampleRequiredError(ValueError):
    """Spectral analysis needs uniformly spaced samples."""


class SeparationUnderflowError(FloatingPointError):
    pass


# ---------------------------------------------------------------- basic metrics


def r_squared(pred: np.ndarray, truth: np.ndarray) -> float:
    """``1 - SS_res / SS_tot`` with ``SS_tot`` taken about each column's mean."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    ss_tot = float(np.sum((truth - truth.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        raise MetricUndefinedError("R^2 undefined for a constant reference")
    return 1.0 - float(np.sum((pred - truth) ** 2)) / ss_tot


def pearson(a, b) -> float:
    a = np.ravel(a) - np.mean(a)
    b = np.ravel(b) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        raise MetricUndefinedError("correlation undefined for a constant field")
    return float(a @ b) / den


def ssim(a, b, data_range=None, win: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with a ``win x win`` uniform window.

    ``data_range`` defaults to the dynamic range of ``a`` (the reference).
    Sample covariances are used and a border of ``win // 2`` is excluded from
    the mean, matching the usual implementation.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise StructuralError(f"field shapes differ: {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = float(a.max() - a.min())
    if data_range == 0.0:
        data_range = 1.0
    npix = win**2
    norm = npix / (npix - 1)
    f = lambda x: ndimage.uniform_filter(x, size=win, mode="reflect")  # noqa: E731
    ma, mb = f(a), f(b)
    va = norm * (f(a * a) - ma * ma)
    vb = norm * (f(b * b) - mb * mb)
    cab = norm * (f(a * b) - ma * mb)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    pad = (win - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean()) if pad else float(s.mean())


# --------------------------------------------------------------------- spectra


@dataclass
class SpectrumReport:
    freqs: np.ndarray
    power_true: np.ndarray
    f_true: float
    power_pred: np.ndarray | None = None
    f_pred: float | None = None
    rmse_psd: float | None = None

    @property
    def frequency_error_pct(self) -> float:
        if self.f_pred is None:
            raise MetricUndefinedError("single-signal spectrum has no comparison")
        return 100.0 * abs(self.f_pred - self.f_true) / self.f_true


def _check_uniform(times):
    d = np.diff(np.asarray(times, dtype=float))
    if d.size == 0 or np.any(d <= 0) or np.ptp(d) > 1e-9 * max(abs(d.mean()), 1e-300) + 1e-12:
        raise ResampleRequiredError("samples are not uniformly spaced; resample first")
    return float(d.mean())


def periodogram(series, dt: float, nfft: int | None = None):
    """One-sided power per bin of the mean-removed, Hann-windowed series.

    Scaled so that the bins sum to ``mean((x w)^2) / mean(w^2)``, the
    window-weighted variance, which for broadband or many-cycle signals is
    the plain variance to within a fraction of a percent.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 16:
        raise ValueError("need at least 16 samples")
    nfft = max(n, nfft or n)
    w = signal.windows.hann(n, sym=False)
    X = np.fft.rfft((x - x.mean()) * w, n=nfft)
    p = np.abs(X) ** 2 / (nfft * n * np.mean(w * w))
    p[1:] *= 2.0
    if nfft % 2 == 0:
        p[-1] /= 2.0
    return np.fft.rfftfreq(nfft, dt), p


def dominant_frequency(freqs, power) -> float:
    """Peak bin above DC refined by a parabola through the log-power neighbours."""
    k = 1 + int(np.argmax(power[1:]))
    if power[k] <= 0:
        return 0.0
    if 1 <= k < len(power) - 1:
        y0, y1, y2 = np.log(np.maximum(power[k - 1:k + 2], 1e-300))
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        return float(freqs[k] + shift * (freqs[1] - freqs[0]))
    return float(freqs[k])


def power_spectrum(series, dt: float | None = None, times=None, nfft: int | None = None) -> SpectrumReport:
    if times is not None:
        dt = _check_uniform(times)
    if dt is None or dt <= 0:
        raise ValueError("positive dt or uniform times required")
    f, p = periodogram(series, dt, nfft)
    return SpectrumReport(f, p, dominant_frequency(f, p))


def _normalized(p):
    m = p.max()
    return p / m if m > 0 else np.zeros_like(p)


def compare_spectra(truth, pred, dt: float | None = None, times=None, nfft: int | None = None) -> SpectrumReport:
    a = power_spectrum(truth, dt, times, nfft)
    b = power_spectrum(pred, dt, times, nfft)
    rmse = float(np.sqrt(np.mean((_normalized(a.power_true) - _normalized(b.power_true)) ** 2)))
    return SpectrumReport(a.freqs, a.power_true, a.f_true, b.power_true, b.f_true, rmse)


# ------------------------------------------------------------------ 1D report


@dataclass
class EvaluationReport1D:
    mae_u: float
    mae_v: float
    mae_combined: float
    rmse: float
    r2: float
    max_error: float
    phase_error_deg: float
    frequency_error_pct: float
    hamiltonian_drift_pct: float
    period_estimate: float


def phase_lag(a, b, dt: float, max_lag: float | None = None) -> float:
    """Delay of ``b`` relative to ``a`` from the normalized cross-correlation peak.

    Each lag is scored by the correlation over the overlapping part only, so
    long shifts are not penalised by shrinking overlap.
    """
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    n = a.size
    kmax = n // 2 if max_lag is None else min(n - 2, int(math.ceil(max_lag / dt)))
    lags = np.arange(-kmax, kmax + 1)
    score = np.empty(lags.size)
    for i, k in enumerate(lags):
        x, y = (a[: n - k], b[k:]) if k >= 0 else (a[-k:], b[: n + k])
        den = math.sqrt(float(x @ x) * float(y @ y))
        score[i] = float(x @ y) / den if den > 0 else -np.inf
    i = int(np.argmax(score))
    shift = 0.0
    if 0 < i < lags.size - 1 and np.all(np.isfinite(score[i - 1:i + 2])):
        y0, y1, y2 = score[i - 1:i + 2]
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
    return float((lags[i] + shift) * dt)


def hamiltonian_drift(p: LVParams, u, v) -> float:
    """Largest ``|H(t) - H(t0)| / |H(t0)|`` along a trajectory, as a fraction.

    Returns ``inf`` if the trajectory leaves the positive quadrant.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u <= 0) or np.any(v <= 0):
        return math.inf
    H = hamiltonian(p, u, v)
    return float(np.max(np.abs(H - H[0])) / abs(H[0]))


def _sample_1d(prediction, times):
    if callable(prediction):
        out = np.asarray(prediction(np.asarray(times)), dtype=float)
    else:
        out = np.asarray(prediction, dtype=float)
    if out.shape != (len(times), 2):
        raise StructuralError(f"prediction shape {out.shape}, expected {(len(times), 2)}")
    return out


def evaluate_1d(prediction, ref: ReferenceSolution1D, p: LVParams | None = None,
                nfft_factor: int = 16) -> EvaluationReport1D:
    """Compare a prediction (array or ``times -> (n, 2)`` callable) with a reference."""
    p = p or ref.params
    pred = _sample_1d(prediction, ref.times)
    truth = np.column_stack([ref.u, ref.v])
    err = np.abs(pred - truth)
    dt = _check_uniform(ref.times)
    n = len(ref.times)
    spec = compare_spectra(ref.u, pred[:, 0], dt, nfft=nfft_factor * n)
    period = 1.0 / spec.f_true if spec.f_true > 0 else math.inf
    lag = phase_lag(ref.u, pred[:, 0], dt, max_lag=0.5 * period if math.isfinite(period) else None)
    try:
        p_est = find_period(ref.times, pred[:, 0])[0]
    except ValueError:
        p_est = math.nan
    return EvaluationReport1D(
        mae_u=float(err[:, 0].mean()),
        mae_v=float(err[:, 1].mean()),
        mae_combined=float(err.mean()),
        rmse=float(np.sqrt(np.mean(err**2))),
        r2=r_squared(pred, truth),
        max_error=float(err.max()),
        phase_error_deg=float(abs(lag) * 360.0 / period) if math.isfinite(period) else math.nan,
        frequency_error_pct=spec.frequency_error_pct if spec.f_true > 0 else math.nan,
        hamiltonian_drift_pct=100.0 * hamiltonian_drift(p, pred[:, 0], pred[:, 1]),
        period_estimate=float(p_est),
    )


def orbit_radial_deviation(pred_uv, ref_uv, center) -> float:
    """RMS relative gap between two closed orbits, compared at equal polar angle.

    The reference orbit is turned into radius as a function of angle about
    ``center`` (it must wind around it once per cycle); each predicted point
    is compared with the reference radius at its own angle.
    """
    c = np.asarray(center, dtype=float)
    dr = np.asarray(ref_uv, dtype=float) - c
    dp = np.asarray(pred_uv, dtype=float) - c
    th_r = np.arctan2(dr[:, 1], dr[:, 0])
    r_r = np.hypot(dr[:, 0], dr[:, 1])
    order = np.argsort(th_r)
    th_s, r_s = th_r[order], r_r[order]
    th_s = np.concatenate([th_s[-1:] - 2 * np.pi, th_s, th_s[:1] + 2 * np.pi])
    r_s = np.concatenate([r_s[-1:], r_s, r_s[:1]])
    th_p = np.arctan2(dp[:, 1], dp[:, 0])
    r_ref = np.interp(th_p, th_s, r_s)
    r_p = np.hypot(dp[:, 0], dp[:, 1])
    return float(np.sqrt(np.mean(((r_p - r_ref) / r_ref) ** 2)))


# ------------------------------------------------------------------ 2D report


@dataclass
class SnapshotRow:
    time: float
    mae_u: float
    mae_v: float
    rmse: float
    ssim: float
    pattern_similarity: float


@dataclass
class EvaluationReport2D:
    rows: list
    average: SnapshotRow


def _fields_at(prediction, ref: ReferenceSolution2D, t: float):
    ny, nx = ref.u.shape[1:]
    if isinstance(prediction, ReferenceSolution2D):
        if prediction.u.shape[1:] != (ny, nx) or not np.allclose(prediction.x, ref.x):
            raise StructuralError("prediction grid differs from the reference grid")
        return prediction.snapshot(t)
    X, Y = np.meshgrid(ref.x, ref.y)
    pts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, t)])
    out = np.asarray(prediction(pts), dtype=float)
    if out.shape != (nx * ny, 2):
        raise StructuralError(f"prediction shape {out.shape}, expected {(nx * ny, 2)}")
    return out[:, 0].reshape(ny, nx), out[:, 1].reshape(ny, nx)


def evaluate_2d(prediction, ref: ReferenceSolution2D, times=None) -> EvaluationReport2D:
    """Per-snapshot errors; SSIM and pattern similarity use the prey field."""
    times = ref.times if times is None else times
    rows = []
    for t in times:
        tu, tv = ref.snapshot(t)
        pu, pv = _fields_at(prediction, ref, t)
        rows.append(SnapshotRow(
            time=float(t),
            mae_u=float(np.mean(np.abs(pu - tu))),
            mae_v=float(np.mean(np.abs(pv - tv))),
            rmse=float(np.sqrt(0.5 * (np.mean((pu - tu) ** 2) + np.mean((pv - tv) ** 2)))),
            ssim=ssim(tu, pu),
            pattern_similarity=pearson(tu, pu),
        ))
    avg = SnapshotRow(math.nan, *(float(np.mean([getattr(r, k) for r in rows]))
                                  for k in ("mae_u", "mae_v", "rmse", "ssim", "pattern_similarity")))
    return EvaluationReport2D(rows, avg)


# ----------------------------------------------------------------- recurrence


@dataclass
class RecurrenceReport:
    matrix: np.ndarray
    threshold: float
    recurrence_rate: float
    shannon_entropy_u: float
    shannon_entropy_v: float

    def diagonal_rate(self, lag: int) -> float:
        """Fraction of recurrent pairs ``(i, i + lag)``."""
        return float(np.mean(np.diagonal(self.matrix, offset=lag)))


def shannon_entropy(x, bins: int = 32) -> float:
    counts, _ = np.histogram(np.asarray(x, dtype=float), bins=bins)
    q = counts[counts > 0] / counts.sum()
    return float(-(q * np.log2(q)).sum())


def recurrence_analysis(u, v, threshold_fraction: float = 0.1, bins: int = 32) -> RecurrenceReport:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.size < 10 or u.shape != v.shape:
        raise ValueError("need two equal-length series of at least 10 samples")
    if not 0.0 < threshold_fraction < 1.0:
        raise ValueError("threshold fraction must lie in (0, 1)")
    du = u[:, None] - u[None, :]
    dv = v[:, None] - v[None, :]
    d = np.sqrt(du * du + dv * dv)
    eps = threshold_fraction * float(d.max())
    R = d <= eps
    return RecurrenceReport(R, eps, float(R.mean()), shannon_entropy(u, bins), shannon_entropy(v, bins))


# ------------------------------------------------------------------- Lyapunov


def estimate_lyapunov(rhs: Callable, y0, t_total: float = 200.0, interval: float = 1.0,
                      delta0: float = 1e-8, rtol: float = 1e-10, atol: float = 1e-12,
                      seed: int = 0) -> float:
    """Largest Lyapunov exponent by the two-trajectory renormalization method.

    Both states are advanced by the reference integrator for ``interval``,
    the log growth of their separation is accumulated and the perturbed
    state is pulled back to distance ``delta0`` along the current direction.
    """
    y = np.asarray(y0, dtype=float)
    direction = np.random.default_rng(seed).standard_normal(y.size)
    yp = y + delta0 * direction / np.linalg.norm(direction)
    n = max(1, int(round(t_total / interval)))
    acc = 0.0
    for i in range(n):
        span = (i * interval, (i + 1) * interval)
        y = integrate(rhs, y, span, rtol=rtol, atol=atol).y[:, -1]
        yp = integrate(rhs, yp, span, rtol=rtol, atol=atol).y[:, -1]
        d = float(np.linalg.norm(yp - y))
        if not (d > 0 and math.isfinite(d)):
            raise SeparationUnderflowError(f"separation {d} after {span[1]} time units")
        acc += math.log(d / delta0)
        yp = y + (yp - y) * (delta0 / d)
    return acc / (n * interval)


def lyapunov_lv(p: LVParams, ic=(2.0, 1.0), **kw) -> float:
    return estimate_lyapunov(lambda t, y: np.array(rhs_ode(p, y[0], y[1])), ic, **kw)


# ----------------------------------------------------------------- wave metrics


@dataclass
class WaveMetrics:
    speed: float
    wavelength: float
    rotation_period: float
    defined: bool
    note: str = ""


def _circular_lag(a, b) -> float:
    """Shift (in samples) that best maps ``a`` onto ``b``, with sub-sample refinement.

    A periodic pattern matches itself one wavelength away, so the search is
    limited to half the dominant wavelength of ``a``.
    """
    a = a - a.mean()
    b = b - b.mean()
    fa = np.fft.rfft(a)
    c = np.fft.irfft(np.conj(fa) * np.fft.rfft(b), n=a.size)
    kdom = 1 + int(np.argmax(np.abs(fa[1:])))
    reach = max(1, int(a.size / (2 * kdom)))
    lags = np.arange(a.size)
    lags = np.where(lags > a.size // 2, lags - a.size, lags)
    c = np.where(np.abs(lags) <= reach, c, -np.inf)
    k = int(np.argmax(c))
    y0, y1, y2 = c[k - 1], c[k], c[(k + 1) % a.size]
    den = y0 - 2 * y1 + y2
    shift = 0.5 * (y0 - y2) / den if np.isfinite(den) and den != 0 else 0.0
    lag = k + shift
    return lag - a.size if lag > a.size / 2 else lag


def wave_metrics(fields, dx: float, times, probe=None, row: int | None = None,
                 min_shift: float = 0.05) -> WaveMetrics:
    """Front speed, dominant wavelength and local oscillation period of a field.

    ``fields`` has shape ``(n_t, ny, nx)``.  Speed comes from circular
    cross-correlation of one row between consecutive snapshots; motion below
    ``min_shift`` cells per snapshot counts as no motion.
    """
    F = np.asarray(fields, dtype=float)
    times = np.asarray(times, dtype=float)
    if F.ndim != 3 or F.shape[0] < 3:
        raise ValueError("need at least three snapshots of a 2D field")
    n_t, ny, nx = F.shape
    r = ny // 2 if row is None else row
    speeds, moved = [], False
    for i in range(n_t - 1):
        a, b = F[i, r], F[i + 1, r]
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        lag = _circular_lag(a, b)
        moved |= abs(lag) >= min_shift
        speeds.append(abs(lag) * dx / (times[i + 1] - times[i]))
    last = F[-1] - F[-1].mean()
    spec = np.abs(np.fft.fft2(last)) ** 2
    ky = np.fft.fftfreq(ny) * ny
    kx = np.fft.fftfreq(nx) * nx
    kr = np.rint(np.hypot(*np.meshgrid(kx, ky))).astype(int)
    radial = np.bincount(kr.ravel(), weights=spec.ravel())
    if radial[1:].max() > 0:
        kstar = dominant_frequency(np.arange(radial.size, dtype=float), radial)
        wavelength = nx * dx / kstar if kstar > 0 else math.nan
    else:
        wavelength = math.nan
    py, px = (ny // 2, nx // 2) if probe is None else probe
    period = math.nan
    if n_t >= 16:
        # snapshots sit on solver steps, so their spacing jitters slightly: resample
        grid = np.linspace(times[0], times[-1], n_t)
        rep = power_spectrum(np.interp(grid, times, F[:, py, px]), times=grid)
        period = 1.0 / rep.f_true if rep.f_true > 0 else math.nan
    if not speeds or not moved:
        return WaveMetrics(math.nan, wavelength, period, False, "no detectable front motion")
    return WaveMetrics(float(np.median(speeds)), wavelength, period, True)


# ------------------------------------------------------------------- benchmark


@dataclass
class BenchmarkRow:
    method: str
    mae: float
    r2: float
    time_ms: float
    speedup: float = 1.0


def time_call(fn: Callable, repeats: int = 10) -> tuple[float, object]:
    """Median wall time in seconds over ``repeats`` calls, plus the last result."""
    out, ts = None, []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts)), out


def benchmark(methods: dict, truth: np.ndarray, baseline: str | None = None,
              repeats: int = 10) -> list:
    """Time each zero-argument method and score its ``(n, 2)`` output.

    ``speedup`` of a row is ``time(baseline) / time(row)``; the baseline
    defaults to the first method.
    """
    if repeats < 10:
        raise ValueError("use at least 10 repetitions")
    rows = []
    for name, fn in methods.items():
        t, out = time_call(fn, repeats)
        out = np.asarray(out, dtype=float)
        rows.append(BenchmarkRow(name, float(np.mean(np.abs(out - truth))), r_squared(out, truth), 1e3 * t))
    base = next(r for r in rows if r.method == (baseline or rows[0].method))
    for r in rows:
        r.speedup = base.time_ms / r.time_ms
    return rows


def speedup(solver_ms: float, inference_ms: float) -> float:
    return solver_ms / inference_ms


# -------------------------------------------------------------------- writers


def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), indent=2) + "\n")
    return path


def write_table(rows: list, path, columns=None) -> Path:
    """Flat CSV of dataclass rows (or dicts)."""
    path = Path(path)
    dicts = [asdict(r) if is_dataclass(r) else dict(r) for r in rows]
    columns = columns or list(dicts[0])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for d in dicts:
            w.writerow([d[c] for c in columns])
    return path


def write_report_1d(rep: EvaluationReport1D, path) -> Path:
    return write_table([{"metric": k, "value": v} for k, v in asdict(rep).items()], path)


def write_spectrum(rep: SpectrumReport, path) -> Path:
    cols = [rep.freqs, rep.power_true] + ([rep.power_pred] if rep.power_pred is not None else [])
    header = "frequency,power_true" + (",power_pred" if rep.power_pred is not None else "")
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.10g")
    return Path(path)


def write_matrix(mat: np.ndarray, path) -> Path:
    np.savetxt(path, np.asarray(mat, dtype=int), delimiter=",", fmt="%d")
    return Path(path)
