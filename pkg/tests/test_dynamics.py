import dataclasses

import numpy as np
import pytest

from cispgm.dynamics import (
    DegenerateStateError,
    SynodicState,
    SystemParams,
    cr3bp_accel,
    jacobi_constant,
    propagate,
)
from cispgm.scenario import NRHO_92_PERIOD, NRHO_92_STATE


def collinear_equilibrium_x(p: SystemParams, lo: float, hi: float) -> float:
    """Bisection on the x-axis force balance (independent oracle)."""

    def fx(x):
        r1 = abs(x + p.mu)
        r2 = abs(x - 1.0 + p.mu)
        return (x - (1.0 - p.mu) * (x + p.mu) / r1**3
                - p.mu * (x - 1.0 + p.mu) / r2**3)

    flo, fhi = fx(lo), fx(hi)
    assert flo * fhi < 0, "bracketing failure"
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = fx(mid)
        if flo * fm <= 0:
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


class TestAccel:
    def test_planar_motion_stays_planar(self, params):
        s = np.array([0.4, -0.2, 0.0, 0.05, 0.01, 0.0])
        a = cr3bp_accel(s, params)
        assert a[2] == 0.0

    def test_unit_circular_balance_small_mu(self, params):
        # mu -> 0 limit: centrifugal balances gravity at unit radius.
        p0 = dataclasses.replace(params, mu=1e-300)
        a = cr3bp_accel(np.array([-1.0, 0, 0, 0, 0, 0]), p0)
        assert np.max(np.abs(a)) < 1e-12

    @pytest.mark.parametrize("lo,hi", [(0.5, 0.95), (1.01, 1.5), (-1.5, -0.5)])
    def test_equilibria_have_zero_accel(self, params, lo, hi):
        xeq = collinear_equilibrium_x(params, lo, hi)
        s = np.array([xeq, 0.0, 0.0, 0.0, 0.0, 0.0])
        assert np.max(np.abs(cr3bp_accel(s, params))) < 1e-12

    def test_degenerate_state_raises(self, params):
        s = np.array([-params.mu, 0.0, 0.0, 0.0, 0.0, 0.0])
        with pytest.raises(DegenerateStateError):
            cr3bp_accel(s, params)


class TestJacobi:
    def test_equilibrium_value_is_twice_potential(self, params):
        xeq = collinear_equilibrium_x(params, 1.01, 1.5)
        s = np.array([xeq, 0, 0, 0, 0, 0])
        r1 = abs(xeq + params.mu)
        r2 = abs(xeq - 1 + params.mu)
        ustar = (1 - params.mu) / r1 + params.mu / r2 + 0.5 * xeq**2
        assert jacobi_constant(s, params) == pytest.approx(2 * ustar, rel=1e-14)

    def test_invariant_along_nrho(self, params):
        ic = np.array(NRHO_92_STATE)
        out = propagate(ic, NRHO_92_PERIOD, params, tol=1e-12)
        drift = abs(jacobi_constant(out, params) - jacobi_constant(ic, params))
        assert drift < 1e-9

    def test_velocity_rotation_invariance(self, params):
        pos = [0.3, 0.2, 0.1]
        v = np.array([0.02, -0.01, 0.03])
        # Same speed, rotated velocity vector.
        theta = 0.7
        rot = np.array([
            [np.cos(theta), -np.sin(theta), 0],
            [np.sin(theta), np.cos(theta), 0],
            [0, 0, 1],
        ])
        s1 = np.array(pos + list(v))
        s2 = np.array(pos + list(rot @ v))
        assert jacobi_constant(s1, params) == pytest.approx(
            jacobi_constant(s2, params), rel=1e-14
        )


class TestPropagate:
    def test_zero_dt_identity(self, params):
        s = np.array(NRHO_92_STATE)
        assert np.array_equal(propagate(s, 0.0, params), s)

    def test_forward_backward_roundtrip(self, params):
        s = np.array(NRHO_92_STATE)
        tol = 1e-12
        fwd = propagate(s, 0.3, params, tol=tol)
        back = propagate(fwd, -0.3, params, tol=tol)
        assert np.max(np.abs(back - s)) < 10 * 1e-9

    def test_period_closure(self, params):
        ic = np.array(NRHO_92_STATE)
        out = propagate(ic, NRHO_92_PERIOD, params, tol=1e-12)
        assert np.max(np.abs(out - ic)) < 1e-6

    def test_planar_invariance_exact(self, params):
        s = np.array([0.5, 0.1, 0.0, 0.02, 0.2, 0.0])
        out = propagate(s, 1.0, params, tol=1e-10)
        assert out[2] == 0.0 and out[5] == 0.0

    def test_deterministic(self, params):
        s = np.array(NRHO_92_STATE)
        a = propagate(s, 0.123, params, tol=1e-11)
        b = propagate(s, 0.123, params, tol=1e-11)
        assert np.array_equal(a, b)

    def test_state_wrapper_type(self, params):
        s = SynodicState.from_array(np.array(NRHO_92_STATE))
        out = propagate(s, 0.01, params)
        assert isinstance(out, SynodicState)

    def test_invalid_tol(self, params):
        with pytest.raises(ValueError):
            propagate(np.array(NRHO_92_STATE), 0.1, params, tol=0.0)
