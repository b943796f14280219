"""Reference-line construction and invertible Frenet <-> Cartesian transforms.

The reference line is a piecewise-linear polyline resampled at a fixed arc-length
step.  Positions are interpolated along the chords, so projection (Cartesian ->
Frenet) is the exact inverse of the forward map; heading and curvature are
interpolated linearly in arc length and used for the velocity/acceleration
transform terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, OutOfDomain, Singularity

SINGULARITY_GUARD = 1e-6


def normalize_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class FrenetState:
    """Full path-relative state: longitudinal (s) and lateral (d) triplets.

    ``d_prime`` and ``d_pprime`` are derivatives of d with respect to s;
    when s_dot > 0 they satisfy d_prime = d_dot / s_dot.
    """

    s: float
    s_dot: float = 0.0
    s_ddot: float = 0.0
    d: float = 0.0
    d_dot: float = 0.0
    d_ddot: float = 0.0
    d_prime: float = 0.0
    d_pprime: float = 0.0


@dataclass(frozen=True)
class CartesianState:
    x: float
    y: float
    theta: float = 0.0
    kappa: float = 0.0
    v: float = 0.0
    a: float = 0.0

    def __post_init__(self):
        if self.v < 0.0:
            raise InvalidInput(f"speed must be non-negative, got {self.v}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.v * math.cos(self.theta), self.v * math.sin(self.theta)])


@dataclass
class ReferenceLine:
    """Arc-length parameterized polyline with per-sample heading and curvature."""

    xs: np.ndarray
    ys: np.ndarray
    s: np.ndarray
    theta: np.ndarray  # unwrapped, interpolation-safe
    kappa: np.ndarray
    ds: float
    _kappa_prime: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._kappa_prime = np.gradient(self.kappa, self.s)

    @property
    def total_length(self) -> float:
        return float(self.s[-1])

    def _segment(self, s: float) -> tuple[int, float]:
        """Locate the chord containing s; returns (index, fraction along chord)."""
        k = int(np.searchsorted(self.s, s, side="right")) - 1
        k = min(max(k, 0), len(self.s) - 2)
        span = self.s[k + 1] - self.s[k]
        return k, (s - self.s[k]) / span

    def point_at(self, s: float) -> np.ndarray:
        k, alpha = self._segment(s)
        p0 = np.array([self.xs[k], self.ys[k]])
        p1 = np.array([self.xs[k + 1], self.ys[k + 1]])
        return p0 + alpha * (p1 - p0)

    def chord_frame(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Unit tangent and left normal of the chord containing s."""
        k, _ = self._segment(s)
        chord = np.array([self.xs[k + 1] - self.xs[k], self.ys[k + 1] - self.ys[k]])
        t = chord / np.linalg.norm(chord)
        return t, np.array([-t[1], t[0]])

    def heading_at(self, s: float) -> float:
        k, alpha = self._segment(s)
        return float(self.theta[k] + alpha * (self.theta[k + 1] - self.theta[k]))

    def kappa_at(self, s: float) -> float:
        k, alpha = self._segment(s)
        return float(self.kappa[k] + alpha * (self.kappa[k + 1] - self.kappa[k]))

    def kappa_prime_at(self, s: float) -> float:
        k, alpha = self._segment(s)
        kp = self._kappa_prime
        return float(kp[k] + alpha * (kp[k + 1] - kp[k]))


def build_reference_line(waypoints, ds: float) -> ReferenceLine:
    """Resample an ordered 2-D waypoint sequence at arc-length step ``ds``.

    Heading comes from segment tangents (endpoint-averaged); curvature from
    the three-point circumscribed-circle estimate, copied outward at the ends.
    """
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise InvalidInput("need at least 2 two-dimensional waypoints")
    if ds <= 0.0:
        raise InvalidInput(f"resample step must be positive, got {ds}")
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(seg_len < 1e-12):
        raise InvalidInput("consecutive waypoints must be distinct")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]

    grid = np.arange(0.0, total, ds)
    if total - grid[-1] > 1e-12:
        grid = np.concatenate([grid, [total]])
    else:
        grid[-1] = total
    xs = np.interp(grid, cum, pts[:, 0])
    ys = np.interp(grid, cum, pts[:, 1])

    n = len(grid)
    if n < 2:
        raise InvalidInput("reference line shorter than one resample step")
    chords = np.stack([np.diff(xs), np.diff(ys)], axis=1)
    chord_len = np.hypot(chords[:, 0], chords[:, 1])
    units = chords / chord_len[:, None]
    theta = np.empty(n)
    theta[0] = math.atan2(units[0, 1], units[0, 0])
    for k in range(1, n - 1):
        # chord directions approximate tangents at chord midpoints; weighting by
        # the opposite segment length interpolates the tangent to the sample itself
        h1, h2 = chord_len[k - 1], chord_len[k]
        avg = h2 * units[k - 1] + h1 * units[k]
        theta[k] = math.atan2(avg[1], avg[0])
    theta[-1] = math.atan2(units[-1, 1], units[-1, 0])
    theta = np.unwrap(theta)

    kappa = np.zeros(n)
    for k in range(1, n - 1):
        a = np.array([xs[k] - xs[k - 1], ys[k] - ys[k - 1]])
        b = np.array([xs[k + 1] - xs[k], ys[k + 1] - ys[k]])
        c = np.array([xs[k + 1] - xs[k - 1], ys[k + 1] - ys[k - 1]])
        denom = np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c)
        kappa[k] = 2.0 * (a[0] * b[1] - a[1] * b[0]) / denom if denom > 0 else 0.0
    if n > 2:
        kappa[0] = kappa[1]
        kappa[-1] = kappa[-2]

    return ReferenceLine(xs=xs, ys=ys, s=grid, theta=theta, kappa=kappa, ds=ds)


def _transform_arrays(ref: ReferenceLine, s, d, d_prime, d_pprime, s_dot, s_ddot):
    """Vectorized Frenet -> Cartesian core shared by the scalar op and discretization.

    Returns (x, y, theta, kappa, v, a) arrays. Raises on domain or singularity
    violations, reporting the first offending sample index.
    """
    s = np.asarray(s, dtype=float)
    bad = np.nonzero((s < -1e-9) | (s > ref.total_length + 1e-9))[0]
    if bad.size:
        raise OutOfDomain(
            f"s={s.flat[bad[0]]:.6g} outside [0, {ref.total_length:.6g}] at sample {bad[0]}"
        )
    s = np.clip(s, 0.0, ref.total_length)
    k = np.clip(np.searchsorted(ref.s, s, side="right") - 1, 0, len(ref.s) - 2)
    span = ref.s[k + 1] - ref.s[k]
    alpha = (s - ref.s[k]) / span
    theta_r = ref.theta[k] + alpha * (ref.theta[k + 1] - ref.theta[k])
    kap_r = ref.kappa[k] + alpha * (ref.kappa[k + 1] - ref.kappa[k])
    kp = ref._kappa_prime
    kap_rp = kp[k] + alpha * (kp[k + 1] - kp[k])
    # position along the chord, lateral offset along the interpolated-heading normal
    x = ref.xs[k] + alpha * (ref.xs[k + 1] - ref.xs[k]) - d * np.sin(theta_r)
    y = ref.ys[k] + alpha * (ref.ys[k + 1] - ref.ys[k]) + d * np.cos(theta_r)

    one_minus = 1.0 - kap_r * d
    bad = np.nonzero(np.abs(one_minus) <= SINGULARITY_GUARD)[0]
    if bad.size:
        raise Singularity(f"|1 - kappa*d| <= {SINGULARITY_GUARD} at sample {bad[0]}")

    dtheta = np.arctan2(d_prime, one_minus)
    cosd = np.cos(dtheta)
    tand = np.tan(dtheta)
    theta_x = theta_r + dtheta
    kd_term = kap_rp * d + kap_r * d_prime
    kappa_x = ((d_pprime + kd_term * tand) * cosd * cosd / one_minus + kap_r) * (
        cosd / one_minus
    )
    v = np.hypot(s_dot * one_minus, d_prime * s_dot)
    a = s_ddot * one_minus / cosd + (s_dot * s_dot / cosd) * (
        d_prime * (kappa_x * one_minus / cosd - kap_r) - kd_term
    )
    wrapped = np.mod(theta_x + np.pi, 2.0 * np.pi)
    wrapped = np.where(wrapped == 0.0, 2.0 * np.pi, wrapped)
    return x, y, wrapped - np.pi, kappa_x, v, a


def frenet_to_cartesian(ref: ReferenceLine, f: FrenetState) -> CartesianState:
    """Map a Frenet state to the Cartesian frame of the reference line."""
    x, y, th, kap, v, a = _transform_arrays(
        ref,
        np.array([f.s]),
        np.array([f.d]),
        np.array([f.d_prime]),
        np.array([f.d_pprime]),
        np.array([f.s_dot]),
        np.array([f.s_ddot]),
    )
    return CartesianState(x=float(x[0]), y=float(y[0]), theta=float(th[0]),
                          kappa=float(kap[0]), v=float(v[0]), a=float(a[0]))


def project_point(ref: ReferenceLine, x: float, y: float) -> tuple[float, float]:
    """Invert the positional map: returns (s, signed d).

    A segment-wise nearest-point scan (ties toward smaller s) seeds a Newton
    solve of the tangency condition (p - q(s)) . t(s) = 0, where q is the chord
    position and t the interpolated-heading tangent. This makes the projection
    the exact inverse of :func:`frenet_to_cartesian` to solver precision.
    """
    px = ref.xs[:-1]
    py = ref.ys[:-1]
    cx = np.diff(ref.xs)
    cy = np.diff(ref.ys)
    len2 = cx * cx + cy * cy
    t = np.clip(((x - px) * cx + (y - py) * cy) / len2, 0.0, 1.0)
    fx = px + t * cx
    fy = py + t * cy
    dist2 = (x - fx) ** 2 + (y - fy) ** 2
    k0 = int(np.argmin(dist2))  # argmin returns the first (smallest-s) minimizer
    s = float(ref.s[k0] + t[k0] * (ref.s[k0 + 1] - ref.s[k0]))

    total = ref.total_length
    for _ in range(25):
        k = min(max(int(np.searchsorted(ref.s, s, side="right")) - 1, 0), len(ref.s) - 2)
        span = ref.s[k + 1] - ref.s[k]
        alpha = (s - ref.s[k]) / span
        qx = ref.xs[k] + alpha * cx[k]
        qy = ref.ys[k] + alpha * cy[k]
        th = ref.theta[k] + alpha * (ref.theta[k + 1] - ref.theta[k])
        tx, ty = math.cos(th), math.sin(th)
        nx, ny = -ty, tx
        rx, ry = x - qx, y - qy
        g = rx * tx + ry * ty
        dth = (ref.theta[k + 1] - ref.theta[k]) / span
        gp = -(cx[k] * tx + cy[k] * ty) / span + (rx * nx + ry * ny) * dth
        if abs(gp) < 1e-12:
            break
        step = g / gp
        s_new = min(max(s - step, 0.0), total)
        if abs(s_new - s) < 1e-12:
            s = s_new
            break
        s = s_new

    k = min(max(int(np.searchsorted(ref.s, s, side="right")) - 1, 0), len(ref.s) - 2)
    span = ref.s[k + 1] - ref.s[k]
    alpha = (s - ref.s[k]) / span
    qx = ref.xs[k] + alpha * cx[k]
    qy = ref.ys[k] + alpha * cy[k]
    th = ref.theta[k] + alpha * (ref.theta[k + 1] - ref.theta[k])
    d = -(x - qx) * math.sin(th) + (y - qy) * math.cos(th)
    return s, float(d)


def cartesian_to_frenet(ref: ReferenceLine, c: CartesianState,
                        d_max: float = 10.0) -> FrenetState:
    """Invert :func:`frenet_to_cartesian` by nearest-point projection."""
    s, d = project_point(ref, c.x, c.y)
    if abs(d) >= d_max:
        raise OutOfDomain(f"lateral offset {d:.3f} outside band |d| < {d_max}")
    theta_r = ref.heading_at(s)
    kap_r = ref.kappa_at(s)
    kap_rp = ref.kappa_prime_at(s)
    one_minus = 1.0 - kap_r * d
    if abs(one_minus) <= SINGULARITY_GUARD:
        raise Singularity(f"|1 - kappa*d| <= {SINGULARITY_GUARD} at projection")
    dtheta = normalize_angle(c.theta - theta_r)
    cosd = math.cos(dtheta)
    tand = math.tan(dtheta)
    s_dot = c.v * cosd / one_minus
    d_dot = c.v * math.sin(dtheta)
    d_prime = one_minus * tand
    kd_term = kap_rp * d + kap_r * d_prime
    kx_term = c.kappa * one_minus / cosd - kap_r
    d_pprime = -kd_term * tand + (cosd * cosd / one_minus) * kx_term
    s_ddot = (c.a * cosd - s_dot * s_dot * (d_prime * kx_term - kd_term)) / one_minus
    d_ddot = d_pprime * s_dot * s_dot + d_prime * s_ddot
    return FrenetState(s=s, s_dot=s_dot, s_ddot=s_ddot, d=d, d_dot=d_dot,
                       d_ddot=d_ddot, d_prime=d_prime, d_pprime=d_pprime)
