"""Lotka-Volterra mathematics shared by the solvers, the losses and the analyses.

Every function is written with plain arithmetic so it accepts floats, numpy
arrays, :class:`~lvlab.autodiff.Jet2` values and tape variables alike.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError


@dataclass(frozen=True)
class LVParams:
    """Reaction rates and diffusion coefficients.

    alpha: prey growth, beta: predation, delta: predator gain per prey eaten,
    gamma: predator death, d_u / d_v: prey / predator diffusion.
    """

    alpha: float = 1.0
    beta: float = 1.0
    delta: float = 1.0
    gamma: float = 1.0
    d_u: float = 0.12
    d_v: float = 0.05

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {val}")

    def validate(self):
        """Strict check used for run configurations: all six rates positive."""
        bad = [k for k, v in asdict(self).items() if v <= 0]
        if bad:
            raise ValueError(f"parameters must be strictly positive: {', '.join(bad)}")

    def equilibrium(self) -> tuple[float, float]:
        """Coexistence point ``(gamma/delta, alpha/beta)``."""
        return self.gamma / self.delta, self.alpha / self.beta

    def as_dict(self) -> dict:
        return asdict(self)


def rhs_ode(p: LVParams, u, v):
    return p.alpha * u - p.beta * u * v, p.delta * u * v - p.gamma * v


def rhs_reaction_2d(p: LVParams, u, v, lap_u, lap_v):
    ru, rv = rhs_ode(p, u, v)
    return ru + p.d_u * lap_u, rv + p.d_v * lap_v


def residual_ode(p: LVParams, u, v, du_dt, dv_dt):
    ru, rv = rhs_ode(p, u, v)
    return du_dt - ru, dv_dt - rv


def residual_pde(p: LVParams, u, v, u_t, v_t, lap_u, lap_v):
    ru, rv = rhs_reaction_2d(p, u, v, lap_u, lap_v)
    return u_t - ru, v_t - rv


def hamiltonian(p: LVParams, u, v):
    """First integral ``delta u - gamma ln u + beta v - alpha ln v``."""
    if np.any(np.asarray(u) <= 0) or np.any(np.asarray(v) <= 0):
        raise DomainError("Hamiltonian needs strictly positive densities")
    return p.delta * u - p.gamma * np.log(u) + p.beta * v - p.alpha * np.log(v)


def hamiltonian_rate(p: LVParams, u, v, u_t, v_t):
    """dH/dt by the chain rule: ``(delta - gamma/u) u_t + (beta - alpha/v) v_t``."""
    return (p.delta - p.gamma / u) * u_t + (p.beta - p.alpha / v) * v_t


def mass_balance(p: LVParams, u, v):
    """d(u+v)/dt implied by the ODE: sum of the two reaction terms."""
    ru, rv = rhs_ode(p, u, v)
    return ru + rv


def mass_balance_grouped(p: LVParams, u, v):
    """Same quantity regrouped as ``alpha u - gamma v + (delta - beta) u v``."""
    return p.alpha * u - p.gamma * v + (p.delta - p.beta) * u * v


# ----------------------------------------------------------------- linear stability


@dataclass
class TuringAnalysis:
    jacobian: np.ndarray
    wavenumbers: np.ndarray
    growth_rates: np.ndarray
    eigenvalues: np.ndarray  # complex, shape (len(k), 2)
    closed_form: np.ndarray  # diagnostic only, shape (len(k), 2)
    critical_ratio_flag: bool
    k_star: float
    max_growth: float

    def as_rows(self):
        for k, g, cf in zip(self.wavenumbers, self.growth_rates, self.closed_form):
            yield {"k": k, "growth_rate": g, "closed_form_plus": cf[0], "closed_form_minus": cf[1]}


def reaction_jacobian(p: LVParams, u=None, v=None) -> np.ndarray:
    if u is None:
        u, v = p.equilibrium()
    return np.array(
        [
            [p.alpha - p.beta * v, -p.beta * u],
            [p.delta * v, p.delta * u - p.gamma],
        ]
    )


def dispersion_relation(p: LVParams, k=None, critical_ratio: float = 2.3) -> TuringAnalysis:
    """Growth rates of Fourier modes about the coexistence equilibrium.

    Solves ``det(J - k^2 diag(d_u, d_v) - lambda I) = 0`` exactly for every
    wavenumber.  The three-term closed form with ``D_eff = (d_u + d_v)/2`` and
    ``D_diff = d_u J22 + d_v J11`` (the k^2 cross term of the exact
    determinant) is returned alongside for comparison only.
    """
    if k is None:
        k = np.linspace(0.0, 5.0, 501)
    k = np.asarray(k, dtype=np.float64)
    J = reaction_jacobian(p)
    D = np.diag([p.d_u, p.d_v])
    eig = np.empty((k.size, 2), dtype=complex)
    for i, kk in enumerate(k):
        vals = np.linalg.eigvals(J - kk * kk * D)
        eig[i] = vals[np.argsort(-vals.real, kind="stable")]
    growth = eig.real.max(axis=1)
    tr, det = np.trace(J), np.linalg.det(J)
    d_eff = 0.5 * (p.d_u + p.d_v)
    d_diff = p.d_u * J[1, 1] + p.d_v * J[0, 0]
    disc = np.sqrt((tr * tr - 4.0 * (det - d_diff * k * k)).astype(complex))
    base = tr - d_eff * k * k
    closed = np.stack([(base + disc).real, (base - disc).real], axis=1)
    i_star = int(np.argmax(growth))
    ratio = p.d_u / p.d_v if p.d_v > 0 else np.inf
    return TuringAnalysis(
        jacobian=J,
        wavenumbers=k,
        growth_rates=growth,
        eigenvalues=eig,
        closed_form=closed,
        critical_ratio_flag=bool(ratio > critical_ratio),
        k_star=float(k[i_star]),
        max_growth=float(growth[i_star]),
    )


def classify_regime(p: LVParams, length: float) -> str:
    """Compare diffusion time ``L^2/max(D)`` with reaction time ``1/max(rate)``.

    Ratio above 10 is reaction-dominated, below 0.1 diffusion-dominated;
    anything in ``[0.1, 10]`` (boundaries included) is mixed.
    """
    if length <= 0:
        raise ValueError("domain length must be positive")
    d_max = max(p.d_u, p.d_v)
    rate = max(p.alpha, p.beta, p.gamma, p.delta)
    tau_d = np.inf if d_max == 0 else length**2 / d_max
    tau_r = np.inf if rate == 0 else 1.0 / rate
    ratio = tau_d / tau_r
    if ratio > 10.0:
        return "reaction-dominated"
    if ratio < 0.1:
        return "diffusion-dominated"
    return "mixed"


def clamp_positive(x, floor: float = 1e-6):
    return ad.maximum(x, floor)
