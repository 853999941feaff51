import math

import numpy as np
import pytest

from dexhand.fourbar import FourBarCoupling, SingularConfigurationError
from dexhand.model import load_reference_model


def bisection_oracle(coupling, driver_angle, lo=-np.pi, hi=np.pi, tol=1e-12):
    """Independent root finder on the closure residual, scanning for a
    bracket near the pinned-branch solution."""
    f = lambda out: coupling.closure_residual(driver_angle, out)
    grid = np.linspace(lo, hi, 4000)
    vals = np.array([f(g) for g in grid])
    roots = []
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            roots.append(grid[i])
        elif vals[i] * vals[i + 1] < 0:
            a, b = grid[i], grid[i + 1]
            for _ in range(200):
                m = 0.5 * (a + b)
                if f(a) * f(m) <= 0:
                    b = m
                else:
                    a = m
                if b - a < tol:
                    break
            roots.append(0.5 * (a + b))
    return roots


def identity_coupling():
    # a = f and g = c makes the output crank copy the input crank
    return FourBarCoupling("pip", "dip", g=0.03, a=0.012, c=0.03, f=0.012,
                           rest_in=0.5, rest_out=0.5)


def test_parallel_crank_identity():
    # the identity solution lives on the pinned branch for theta > 0;
    # past the fold at theta = 0 the assembly continues on the mirror root
    c = identity_coupling()
    assert abs(c.solve(0.5) - 0.5) < 1e-12
    for ang in np.linspace(0.1, 1.5, 15):
        assert abs(c.solve(ang) - ang) < 1e-12


def test_parallel_crank_unit_derivative():
    c = identity_coupling()
    _, d = c.solve_with_derivative(0.5)
    assert abs(d - 1.0) < 1e-10


def test_documented_geometry_against_bisection():
    c = FourBarCoupling("pip", "dip", g=0.030, a=0.010, c=0.030, f=0.012,
                        rest_in=1.0, rest_out=0.0)
    th = c.solve(1.0)
    roots = bisection_oracle(c, 1.0)
    assert any(abs(th - r) < 1e-8 for r in roots)
    assert abs(c.closure_residual(1.0, th)) < 1e-10


def test_reference_couplings_match_bisection_sweep():
    model = load_reference_model()
    c = model.couplings[0]
    jid = c.driver
    spec = model.joints[model.joint_index[jid]]
    sweep = np.linspace(spec.limits[0], spec.limits[1], 1000)
    prev = None
    for ang in sweep:
        out = c.solve(float(ang))
        roots = bisection_oracle(c, float(ang))
        assert any(abs(out - r) < 1e-8 for r in roots), f"at {ang}"
        near = c.solve(float(ang) + 1e-6)
        assert abs(near - out) < 1e-3  # continuity, no branch flips
        if prev is not None:
            assert abs(out - prev) < 5e-3
        prev = out


def test_derivative_matches_finite_difference():
    model = load_reference_model()
    for c in model.couplings:
        spec = model.joints[model.joint_index[c.driver]]
        for ang in np.linspace(spec.limits[0] + 1e-3,
                               spec.limits[1] - 1e-3, 7):
            _, d = c.solve_with_derivative(float(ang))
            h = 1e-7
            fd = (c.solve(ang + h) - c.solve(ang - h)) / (2 * h)
            assert abs(d - fd) < 1e-6


def stretched_coupling():
    # closes only when the crank folds back toward the ground link:
    # d = |g + a e^{i theta}| must stay below 2f = 28mm, so angles near
    # zero (d up to 35mm) cannot assemble
    return FourBarCoupling("pip", "dip", g=0.03, a=0.005, c=0.014, f=0.014,
                           rest_in=3.0, rest_out=1.5)


def test_assembly_failure_raises():
    c = stretched_coupling()
    c.solve(3.0)  # feasible at rest
    with pytest.raises(SingularConfigurationError):
        c.solve(0.0)


def test_infeasible_boundary_located_by_sweep():
    c = stretched_coupling()
    verdicts = []
    for ang in np.linspace(np.pi, 0.0, 400):
        try:
            c.solve(float(ang))
            verdicts.append(True)
        except SingularConfigurationError:
            verdicts.append(False)
    assert verdicts[0] and not verdicts[-1]
    # one clean transition from feasible to infeasible along the sweep
    flips = sum(1 for a, b in zip(verdicts, verdicts[1:]) if a != b)
    assert flips == 1


def test_positive_lengths_required():
    with pytest.raises(ValueError):
        FourBarCoupling("a", "b", g=0.0, a=0.01, c=0.03, f=0.012)
