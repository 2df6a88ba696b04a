import math
import warnings

import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from lvlab import losses as L
from lvlab import training as T
from lvlab.dynamics import LVParams
from lvlab.model import ConfigError, NetworkField, NetworkSpec, init


class AnalyticField:
    """Field model from closed-form value and derivative functions.

    ``val(X)``, ``d1(X, axis)`` and ``d2(X, axis)`` each return ``(N, 2)``.
    """

    def __init__(self, val, d1=None, d2=None):
        self.val = val
        self.d1 = d1 or (lambda X, a: np.zeros((len(X), 2)))
        self.d2 = d2 or (lambda X, a: np.zeros((len(X), 2)))

    def __call__(self, X, dirs=()):
        X = np.asarray(X, dtype=float)
        m = len(dirs)
        P = np.zeros((1 + 2 * m, len(X), 2))
        P[0] = self.val(X)
        for j, a in enumerate(dirs):
            P[1 + j] = self.d1(X, a)
            P[1 + m + j] = self.d2(X, a)
        return P


def constant_field(u, v):
    return AnalyticField(lambda X: np.tile([u, v], (len(X), 1)))


def batch_1d(ts, data=None, targets=None, n_ic=2):
    ts = np.asarray(ts, dtype=float).reshape(-1, 1)
    empty = np.zeros((0, 1))
    b = L.CollocationBatch(ts, np.zeros((n_ic, 1)), empty, empty, np.zeros(0, dtype=int))
    if data is not None:
        b.data = np.asarray(data, dtype=float).reshape(-1, 1)
        b.data_targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    return b


# ------------------------------------------------------------------- sampling


def test_sampling_1d_in_range():
    b = L.sample_collocation(L.Domain("ode1d", (0.0, 20.0)), L.CollocationCounts(interior=1000), 3)
    assert b.interior.shape == (1000, 1)
    assert b.interior.min() >= 0.0 and b.interior.max() <= 20.0
    assert np.all(b.ic == 0.0)


def test_sampling_deterministic():
    d = L.Domain("pde2d", (0.0, 5.0), 20.0)
    c = L.CollocationCounts.default("pde2d")
    a, b = L.sample_collocation(d, c, 11), L.sample_collocation(d, c, 11)
    for name in ("interior", "ic", "bc_lo", "bc_hi", "bc_axis"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    other = L.sample_collocation(d, c, 12)
    assert not np.array_equal(a.interior, other.interior)


def test_sampling_2d_boundary_and_counts():
    d = L.Domain("pde2d", (0.0, 5.0), 20.0)
    c = L.CollocationCounts(interior=8000, ic=500, bc=1000, slice_size=80)
    b = L.sample_collocation(d, c, 0)
    assert b.interior.shape == (8000, 3) and b.ic.shape == (500, 3)
    assert b.bc_points.shape == (1000, 3)
    lo, hi = np.array(d.bounds()[0]), np.array(d.bounds()[1])
    for pts in (b.interior, b.ic, b.bc_points):
        assert np.all(pts >= lo) and np.all(pts <= hi)
    xy = b.bc_points[:, :2]
    on_edge = np.any((xy == 0.0) | (xy == 20.0), axis=1)
    assert np.all(on_edge)
    # paired points sit on opposite edges of the same axis
    ax = b.bc_axis
    idx = np.arange(len(ax))
    assert np.all(b.bc_lo[idx, ax] == 0.0) and np.all(b.bc_hi[idx, ax] == 20.0)
    # interior comes in time slices
    t = b.interior[:, 2].reshape(-1, 80)
    assert np.all(t == t[:, :1])


def test_sampling_empty_domain():
    with pytest.raises(ConfigError):
        L.Domain("ode1d", (1.0, 1.0))
    with pytest.raises(ConfigError):
        L.Domain("pde2d", (0.0, 1.0), 0.0)
    with pytest.raises(ConfigError):
        L.sample_collocation(L.Domain(), L.CollocationCounts(interior=0), 0)


# ------------------------------------------------------------------ data loss


def test_data_loss_examples():
    b = batch_1d([0.5], data=[1.0], targets=[[0.0, 0.0]])
    assert L.data_loss(constant_field(1.0, 1.0), b) == pytest.approx(2.0)
    b2 = batch_1d([0.5], data=[1.0, 1.0], targets=[[0.0, 0.0], [0.0, 0.0]])
    assert L.data_loss(constant_field(1.0, 1.0), b2) == pytest.approx(2.0)
    exact = batch_1d([0.5], data=[1.0, 2.0], targets=[[0.3, 0.7], [0.3, 0.7]])
    assert L.data_loss(constant_field(0.3, 0.7), exact) == 0.0


def test_data_loss_empty_warns():
    b = batch_1d([0.5])
    with pytest.warns(RuntimeWarning):
        assert L.data_loss(constant_field(1.0, 1.0), b) == 0.0


# --------------------------------------------------------------- physics loss


def _equilibrium_network(p, seed, hidden):
    spec = NetworkSpec(input_dim=1, embed_dim=8, hidden_layers=hidden, seed=seed,
                       input_lo=(0.0,), input_hi=(20.0,))
    ck = init(spec)
    params = ck.params()
    params["out.w"] = np.zeros_like(params["out.w"])
    params["out.b"] = np.array(p.equilibrium())
    return NetworkField(spec, params)


@pytest.mark.parametrize("seed,hidden", [(0, (4,)), (1, (16, 8)), (2, (5, 7, 3))])
def test_physics_zero_for_constant_equilibrium_network(seed, hidden):
    p = LVParams(alpha=1.3, beta=0.7, gamma=0.9, delta=1.1)
    model = _equilibrium_network(p, seed, hidden)
    b = batch_1d(np.linspace(0, 20, 50))
    assert L.physics_loss(model, b, p, "ode1d") == pytest.approx(0.0, abs=1e-28)
    assert L.conservation_loss(model, b, p, "ode1d") == pytest.approx(0.0, abs=1e-28)


def test_physics_positive_for_random_network(unit_params):
    spec = NetworkSpec(input_dim=1, embed_dim=8, hidden_layers=(16,), seed=5)
    model = NetworkField(spec, init(spec).params())
    b = batch_1d(np.linspace(0, 20, 50))
    assert L.physics_loss(model, b, unit_params, "ode1d") > 0.0


def test_physics_2d_matches_hand_residual():
    # u = 1 + 0.1 x^2, v = 1 + t: hand residual of the reaction-diffusion system
    p = LVParams(d_u=0.5, d_v=0.2)

    def val(X):
        return np.column_stack([1 + 0.1 * X[:, 0] ** 2, 1 + X[:, 2]])

    def d1(X, a):
        out = np.zeros((len(X), 2))
        if a == 0:
            out[:, 0] = 0.2 * X[:, 0]
        if a == 2:
            out[:, 1] = 1.0
        return out

    def d2(X, a):
        out = np.zeros((len(X), 2))
        if a == 0:
            out[:, 0] = 0.2
        return out

    X = np.array([[1.0, 2.0, 0.5], [3.0, 0.0, 1.5]])
    b = L.CollocationBatch(X, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int))
    u, v = val(X).T
    fu = 0.0 - (p.alpha * u - p.beta * u * v + p.d_u * 0.2)
    fv = 1.0 - (p.delta * u * v - p.gamma * v)
    expect = np.mean(fu**2 + fv**2)
    assert L.physics_loss(AnalyticField(val, d1, d2), b, p, "pde2d") == pytest.approx(expect, rel=1e-14)
    # without diffusion the Laplacian drops out
    fu0 = -(p.alpha * u - p.beta * u * v)
    expect0 = np.mean(fu0**2 + fv**2)
    got = L.physics_loss(AnalyticField(val, d1, d2), b, p, "pde2d", diffusion=False)
    assert got == pytest.approx(expect0, rel=1e-14)


def test_physics_two_stage_regression_then_physics(unit_params):
    """A pure regression fit leaves a small residual that physics training reduces."""
    from lvlab.reference import integrate_ode

    ref = integrate_ode(unit_params, (2.0, 1.0), (0.0, 10.0), n_times=401)
    prob = T.problem_1d(ref, n_data=200, seed=0, counts=L.CollocationCounts(interior=200))
    spec = T.default_spec(prob, embed_dim=16, hidden_layers=(32, 32), seed=0)
    evalb = batch_1d(np.linspace(0.0, 10.0, 400))

    def l_pde(ck):
        return float(L.physics_loss(NetworkField(spec, ck.params()), evalb, unit_params))

    untrained = l_pde(init(spec))
    cfg = T.TrainingConfig(epochs=2000, lr=3e-3, log_every=500, phase_fractions=(1, 0, 0, 0))
    regress = L.LossWeights(data=1.0, pde=0.0, ic=0.0, cons=0.0, reg=0.0)
    ck1, _ = T.train(cfg, spec, prob, weights=regress)
    stage1 = l_pde(ck1)
    assert 0.0 < stage1 < untrained
    physics = L.LossWeights(data=1.0, pde=1.0, ic=1.0, cons=0.0, reg=0.0)
    ck2, _ = T.train(T.TrainingConfig(epochs=500, lr=1e-3, log_every=500, phase_fractions=(1, 0, 0, 0)),
                     spec, prob, weights=physics, ckpt=ck1)
    assert l_pde(ck2) < stage1


# ----------------------------------------------------------------------- IC/BC


def test_ic_exact_and_1d_bc():
    b = batch_1d([1.0], n_ic=2)
    l_ic, l_bc = L.icbc_loss(constant_field(2.0, 1.0), b, (2.0, 1.0), "periodic", "ode1d")
    assert l_ic == 0.0 and l_bc == 0.0
    l_ic, l_bc = L.icbc_loss(constant_field(3.0, 1.0), b, (2.0, 1.0), "neumann", "ode1d")
    assert l_ic == pytest.approx(1.0) and l_bc == 0.0


def _sine_x(length):
    k = 2 * math.pi / length

    def val(X):
        return np.column_stack([np.sin(k * X[:, 0]), np.zeros(len(X))])

    def d1(X, a):
        out = np.zeros((len(X), 2))
        if a == 0:
            out[:, 0] = k * np.cos(k * X[:, 0])
        return out

    return AnalyticField(val, d1), k


def test_bc_sine_periodic_and_neumann():
    length = 20.0
    model, k = _sine_x(length)
    rng = np.random.default_rng(0)
    n = 40
    lo = np.column_stack([np.zeros(n), rng.uniform(0, length, n), rng.uniform(0, 5, n)])
    hi = lo.copy()
    hi[:, 0] = length
    b = L.CollocationBatch(np.zeros((1, 3)), np.zeros((0, 3)), lo, hi, np.zeros(n, dtype=int))
    _, per = L.icbc_loss(model, b, (1.0, 1.0), "periodic", "pde2d")
    assert per == pytest.approx(0.0, abs=1e-28)
    _, neu = L.icbc_loss(model, b, (1.0, 1.0), "neumann", "pde2d")
    assert neu == pytest.approx(k**2, rel=1e-12)


def test_bc_unknown_mode():
    model, _ = _sine_x(20.0)
    lo = np.zeros((1, 3))
    b = L.CollocationBatch(np.zeros((1, 3)), np.zeros((0, 3)), lo, lo + [20, 0, 0], np.zeros(1, int))
    with pytest.raises(ConfigError):
        L.icbc_loss(model, b, (1.0, 1.0), "dirichlet", "pde2d")


# ---------------------------------------------------------------- conservation


def test_conservation_equilibrium_zero(unit_params):
    b = batch_1d(np.linspace(0, 20, 30))
    assert L.conservation_loss(constant_field(1.0, 1.0), b, unit_params) == 0.0


def test_conservation_hand_example(unit_params):
    # u = 2 + t, v = 1: dH/dt = 1 - 1/(2 + t), mass residual = 1 - (u - v) = -t
    model = AnalyticField(
        lambda X: np.column_stack([2 + X[:, 0], np.ones(len(X))]),
        lambda X, a: np.column_stack([np.ones(len(X)), np.zeros(len(X))]),
    )
    ts = np.array([0.0, 1.0, 2.5])
    expect = np.mean(ts**2 + (1 - 1 / (2 + ts)) ** 2)
    assert L.conservation_loss(model, batch_1d(ts), unit_params) == pytest.approx(expect, rel=1e-14)


def test_conservation_on_reference_trajectory(lv_reference, unit_params):
    ref = lv_reference
    su, sv = CubicSpline(ref.times, ref.u), CubicSpline(ref.times, ref.v)
    model = AnalyticField(
        lambda X: np.column_stack([su(X[:, 0]), sv(X[:, 0])]),
        lambda X, a: np.column_stack([su(X[:, 0], 1), sv(X[:, 0], 1)]),
        lambda X, a: np.column_stack([su(X[:, 0], 2), sv(X[:, 0], 2)]),
    )
    b = L.sample_collocation(L.Domain(), L.CollocationCounts(interior=2000), 0)
    assert L.conservation_loss(model, b, unit_params) < 1e-4
    assert L.physics_loss(model, b, unit_params) < 1e-4


def test_conservation_2d_uses_slice_means():
    # a zero-mean spatial ripple in u changes no slice total: the mass term stays at its
    # uniform value while the pointwise form would not
    p = LVParams(alpha=0.0, beta=0.0, gamma=0.0, delta=0.0, d_u=0.0, d_v=0.0)
    xs = np.linspace(0, 20, 80, endpoint=False)
    X = np.column_stack([xs, np.zeros(80), np.full(80, 1.0)])
    model = AnalyticField(
        lambda X: np.column_stack([1.5 + 0.0 * X[:, 0], np.ones(len(X))]),
        lambda X, a: (np.column_stack([np.sin(2 * np.pi * X[:, 0] / 20), np.zeros(len(X))])
                      if a == 2 else np.zeros((len(X), 2))),
    )
    b = L.CollocationBatch(X, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                           np.zeros(0, int), slice_size=80)
    h = np.sin(2 * np.pi * xs / 20) * (0 - 0 / 1.5)
    assert L.conservation_loss(model, b, p, "pde2d") == pytest.approx(np.mean(h**2), abs=1e-20)


# ------------------------------------------------------------------ smoothness


def _poly_field(c0, c1, c2, scale=1.0):
    """u = scale * (c0 + c1 t + c2 t^2), v = 0."""
    return AnalyticField(
        lambda X: np.column_stack([scale * (c0 + c1 * X[:, 0] + c2 * X[:, 0] ** 2), np.zeros(len(X))]),
        lambda X, a: np.column_stack([scale * (c1 + 2 * c2 * X[:, 0]), np.zeros(len(X))]),
        lambda X, a: np.column_stack([np.full(len(X), scale * 2 * c2), np.zeros(len(X))]),
    )


def test_reg_examples():
    b = batch_1d(np.linspace(0, 20, 25))
    assert L.temporal_reg_loss(_poly_field(1.0, 3.0, 0.0), b) == 0.0
    assert L.temporal_reg_loss(_poly_field(0.0, 0.0, 1.0), b) == pytest.approx(4.0)
    base = L.temporal_reg_loss(_poly_field(0.5, 0.2, 0.7), b)
    for c in (0.5, 3.0):
        assert L.temporal_reg_loss(_poly_field(0.5, 0.2, 0.7, c), b) == pytest.approx(c * c * base)


# ------------------------------------------------------------- total & weights


def test_total_loss_examples():
    comps = {"data": 3.0, "pde": 4.0, "ic": 5.0, "bc": 6.0, "cons": 7.0, "reg": 8.0}
    w = L.LossWeights(data=1, pde=2, ic=0, bc=0, cons=0, reg=0)
    total, brk = L.total_loss(comps, w)
    assert total == 11.0 and brk.total == 11.0
    only_data = L.LossWeights(data=1, pde=0, ic=0, bc=0, cons=0, reg=0)
    assert L.total_loss(comps, only_data)[0] == 3.0
    zero = {k: 0.0 for k in L.COMPONENTS}
    assert L.total_loss(zero, L.LossWeights())[0] == 0.0


def test_total_loss_breakdown_identity_and_linearity(rng):
    for _ in range(20):
        vals = rng.uniform(0, 5, 6)
        wts = rng.uniform(0, 2, 6)
        comps = dict(zip(L.COMPONENTS, vals))
        w = L.LossWeights(**dict(zip(L.COMPONENTS, wts)))
        total, brk = L.total_loss(comps, w)
        assert brk.total == pytest.approx(sum(brk.weights[k] * brk.components[k] for k in L.COMPONENTS),
                                          abs=1e-12)
        k = L.COMPONENTS[rng.integers(6)]
        bumped = dict(comps, **{k: comps[k] + 1.0})
        assert L.total_loss(bumped, w)[0] == pytest.approx(total + w.as_dict()[k], abs=1e-12)


def test_total_loss_inactive_components_excluded():
    comps = {"data": 1.0, "cons": 5.0}
    total, brk = L.total_loss(comps, L.LossWeights(), active={"data"})
    assert total == 1.0 and brk.weights["cons"] == 0.0


def _brk(**c):
    return L.LossBreakdown(c, {}, 0.0)


def test_update_weights_examples():
    w = L.LossWeights(data=1, pde=1, ic=0, bc=0, cons=0, reg=0, adapt_exponent=1.0)
    new = L.update_weights(w, _brk(data=1.0, pde=4.0), normalize=False)
    assert (new.data, new.pde) == pytest.approx((2.0, 0.5))
    norm = L.update_weights(w, _brk(data=1.0, pde=4.0))
    assert norm.data + norm.pde == pytest.approx(2.0)
    assert norm.data / norm.pde == pytest.approx(4.0)
    unit = L.LossWeights(data=1, pde=1, ic=1, bc=1, cons=1, reg=1)
    same = L.update_weights(unit, _brk(**{k: 0.3 for k in L.COMPONENTS}))
    assert same.as_dict() == pytest.approx(unit.as_dict())
    # unequal weights already balanced against their losses also stay put
    w2 = L.LossWeights(data=2.0, pde=0.5, ic=0, bc=0, cons=0, reg=0)
    held = L.update_weights(w2, _brk(data=1.0, pde=4.0))
    assert (held.data, held.pde) == pytest.approx((2.0, 0.5))


def test_update_weights_exponent_zero_constant(rng):
    w = L.LossWeights(data=0.7, pde=1.3, cons=0.2, adapt_exponent=0.0)
    comps = {k: float(x) for k, x in zip(L.COMPONENTS, rng.uniform(1e-3, 10, 6))}
    assert L.update_weights(w, _brk(**comps)).as_dict() == pytest.approx(w.as_dict())


def test_update_weights_balance_property(rng):
    def spread(w, comps, keys):
        x = [math.log(w.as_dict()[k] * comps[k]) for k in keys]
        return max(x) - min(x)

    for _ in range(50):
        wts = dict(zip(L.COMPONENTS, rng.uniform(0.05, 3, 6)))
        w = L.LossWeights(**wts, adapt_exponent=float(rng.uniform(0.1, 1.0)))
        comps = {k: float(10 ** rng.uniform(-6, 2)) for k in L.COMPONENTS}
        new = L.update_weights(w, _brk(**comps))
        assert all(math.isfinite(v) and v > 0 for v in new.as_dict().values())
        assert spread(new, comps, L.COMPONENTS) < spread(w, comps, L.COMPONENTS)


def test_update_weights_inactive_and_floor():
    w = L.LossWeights(data=1, pde=1, ic=1, bc=0, cons=0, reg=0, adapt_exponent=1.0)
    new = L.update_weights(w, _brk(data=1.0, pde=1.0, ic=0.0), active={"data", "pde"}, normalize=False)
    assert new.ic == 1.0 and new.bc == 0.0
    floored = L.update_weights(w, _brk(data=1.0, pde=1.0, ic=0.0), normalize=False)
    assert math.isfinite(floored.ic) and floored.ic > 1.0
    limited = L.update_weights(w, _brk(data=1.0, pde=1.0, ic=0.0), normalize=False,
                               limits={"ic": (0.1, 10.0)})
    assert limited.ic == 10.0


def test_converged_weight_report_format():
    # reported converged weights are the normalized active weights (data, pde, cons)
    w = L.LossWeights(data=0.34, pde=0.58, ic=0, bc=0, cons=0.08, reg=0)
    rep = {k: v for k, v in w.normalized().items() if v > 0}
    assert list(rep) == ["data", "pde", "cons"]
    assert sum(rep.values()) == pytest.approx(1.0)
    assert rep == pytest.approx({"data": 0.34, "pde": 0.58, "cons": 0.08})


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        L.LossWeights(data=-1)
    with pytest.raises(ConfigError):
        L.LossWeights(data=0, pde=0, ic=0, bc=0, cons=0, reg=0)
    with pytest.raises(ConfigError):
        L.LossWeights(adapt_exponent=1.5)
    with pytest.raises(ConfigError):
        L.LossWeights(pde=float("nan"))


# ------------------------------------------------------------------ curriculum


def test_curriculum_2d():
    s = L.CurriculumSchedule.from_fractions(1000, "pde2d")
    assert s.starts == (100, 300, 700)
    assert L.curriculum_phase(0, s).index == 1
    assert L.curriculum_phase(150, s).index == 2
    assert L.curriculum_phase(500, s).index == 3
    assert L.curriculum_phase(999, s).index == 4
    assert L.curriculum_phase(10**6, s).index == 4
    p1, p2 = L.curriculum_phase(0, s), L.curriculum_phase(150, s)
    assert "bc" not in p1.active and not p1.diffusion
    assert "bc" in p2.active and p2.interior_fraction < 1.0
    p4 = L.curriculum_phase(999, s)
    assert p4.active == frozenset(L.COMPONENTS) and p4.adapt


def test_curriculum_1d_collapses():
    s = L.CurriculumSchedule.from_fractions(1000, "ode1d")
    phases = {L.curriculum_phase(e, s).index for e in range(1000)}
    assert phases == {1, 4}
    assert L.curriculum_phase(699, s).index == 1 and L.curriculum_phase(700, s).index == 4


def test_curriculum_rejects_bad_schedule():
    with pytest.raises(ConfigError):
        L.CurriculumSchedule((5, 3, 8))
    with pytest.raises(ConfigError):
        L.CurriculumSchedule.from_fractions(100, "ode1d", (0.5, 0.5))


def test_weights_from_dict_ignores_unknown():
    w = L.weights_from_dict({"data": "2", "pde": 0.5, "bogus": 9})
    assert w.data == 2.0 and w.pde == 0.5
