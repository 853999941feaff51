"""Planar four-bar linkage closure: maps a driver angle to the driven angle.

Loop convention: the ground vector (length g) runs along +x from the output
pivot to the input pivot's opposite end; with A = g*x_hat + a*e^{i th_in'}
closure requires |A - f*e^{i th_out'}| = c, where th' = th + mounting offset.
Two assembly branches exist; the shipped models pin one at load time via the
declared rest angles and it is tracked by continuity afterwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


class SingularConfigurationError(ValueError):
    """Raised when the closure equation has no real solution."""


@dataclass(frozen=True)
class FourBarCoupling:
    driver: str
    driven: str
    g: float  # ground link, m
    a: float  # input crank, m
    c: float  # coupler, m
    f: float  # output crank, m
    offset_in: float = 0.0
    offset_out: float = 0.0
    rest_in: float = 0.0
    rest_out: float = 0.0
    branch: int = 0  # +1/-1 once resolved; 0 = resolve from rest angles

    def __post_init__(self):
        for name in ("g", "a", "c", "f"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"four-bar link length {name} must be > 0")
        if self.branch == 0:
            object.__setattr__(self, "branch", self._rest_branch())

    def _geometry(self, driver_angle: float):
        ti = driver_angle + self.offset_in
        gx = self.g + self.a * math.cos(ti)
        gy = self.a * math.sin(ti)
        d2 = gx * gx + gy * gy
        d = math.sqrt(d2)
        e = (d2 + self.f * self.f - self.c * self.c) / (2.0 * self.f)
        return gx, gy, d, e

    def _branch_angles(self, driver_angle: float):
        gx, gy, d, e = self._geometry(driver_angle)
        if d < 1e-15:
            raise SingularConfigurationError("coincident pivots")
        ratio = e / d
        if abs(ratio) > 1.0 + 1e-12:
            raise SingularConfigurationError(
                f"four-bar cannot assemble at driver angle {driver_angle:.6f}")
        ratio = max(-1.0, min(1.0, ratio))
        phi = math.atan2(gy, gx)
        half = math.acos(ratio)
        return phi + half - self.offset_out, phi - half - self.offset_out

    def _rest_branch(self) -> int:
        hi, lo = self._branch_angles(self.rest_in)
        err_hi = abs(_wrap(hi - self.rest_out))
        err_lo = abs(_wrap(lo - self.rest_out))
        return 1 if err_hi <= err_lo else -1

    def solve(self, driver_angle: float) -> float:
        """Driven angle for the pinned assembly branch."""
        hi, lo = self._branch_angles(driver_angle)
        return hi if self.branch > 0 else lo

    def solve_with_derivative(self, driver_angle: float):
        """(driven angle, d(driven)/d(driver)) via implicit differentiation
        of  Gx*cos(to') + Gy*sin(to') = E."""
        out = self.solve(driver_angle)
        ti = driver_angle + self.offset_in
        to = out + self.offset_out
        gx, gy, _, _ = self._geometry(driver_angle)
        dgx = -self.a * math.sin(ti)
        dgy = self.a * math.cos(ti)
        # dE/dti = (Gx*dGx + Gy*dGy)/f
        de = (gx * dgx + gy * dgy) / self.f
        dF_din = dgx * math.cos(to) + dgy * math.sin(to) - de
        dF_dout = -gx * math.sin(to) + gy * math.cos(to)
        if abs(dF_dout) < 1e-12:
            raise SingularConfigurationError(
                f"four-bar dead point at driver angle {driver_angle:.6f}")
        return out, -dF_din / dF_dout

    def closure_residual(self, driver_angle: float, driven_angle: float) -> float:
        """|distance(crank tip, output tip)| - c, in meters."""
        gx, gy, _, _ = self._geometry(driver_angle)
        to = driven_angle + self.offset_out
        wx = gx - self.f * math.cos(to)
        wy = gy - self.f * math.sin(to)
        return math.hypot(wx, wy) - self.c


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi
