"""Riemann-sphere geometry and rational-map arithmetic.

The sphere is identified with C + {inf} and carries the spherical metric
whose density with respect to the Euclidean metric is 1/(1+|z|^2); the
diameter of the sphere is pi/2 with this normalization.  Distances,
diameters and derivatives everywhere in this package are spherical.
"""

from __future__ import annotations

import cmath
import math
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

SPHERE_DIAM = math.pi / 2

__all__ = [
    "SPHERE_DIAM",
    "SpherePoint",
    "INFINITY",
    "sph_dist",
    "sph_diam",
    "MobiusMap",
    "SphericalDisk",
    "RoundAnnulus",
    "annulus_modulus",
    "RationalMap",
    "parse_rational_map",
    "quadratic",
    "sph_deriv",
    "critical_points",
    "CriticalPoint",
    "critical_set",
    "periodic_points",
    "PeriodicPoint",
    "julia_sample",
    "critical_orbit_entry",
    "rng_stream",
]


def rng_stream(seed, tag):
    """Independent generator derived from (seed, call-tag); scheduler-free."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())]))


# ---------------------------------------------------------------------------
# Points and the metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpherePoint:
    """A point of the Riemann sphere: a finite complex value or infinity."""

    value: complex = 0j
    is_infinity: bool = False

    def __post_init__(self):
        if not self.is_infinity:
            v = complex(self.value)
            if not (math.isfinite(v.real) and math.isfinite(v.imag)):
                raise ValueError("finite SpherePoint must have finite parts")

    @staticmethod
    def of(z):
        if isinstance(z, SpherePoint):
            return z
        if z is None:
            return INFINITY
        z = complex(z)
        if not (math.isfinite(z.real) and math.isfinite(z.imag)):
            return INFINITY
        return SpherePoint(z)


INFINITY = SpherePoint(0j, True)

_INF_C = complex(math.inf, 0.0)


def _as_complex(z):
    """Internal representation: complex, with complex(inf, 0) for infinity."""
    if isinstance(z, SpherePoint):
        return _INF_C if z.is_infinity else complex(z.value)
    z = complex(z)
    if not (math.isfinite(z.real) and math.isfinite(z.imag)):
        return _INF_C
    return z


def sph_dist(a, b):
    """Spherical distance; symmetric, bounded by pi/2.

    For finite points this is asin(|a-b| / sqrt((1+|a|^2)(1+|b|^2))),
    the geodesic distance for the density 1/(1+|z|^2).
    """
    a = _as_complex(a)
    b = _as_complex(b)
    ainf = not (math.isfinite(a.real) and math.isfinite(a.imag))
    binf = not (math.isfinite(b.real) and math.isfinite(b.imag))
    if ainf and binf:
        return 0.0
    if ainf:
        a, b = b, a
        binf = True
    if binf:
        q = 1.0 / math.sqrt(1.0 + abs(a) ** 2)
    else:
        q = abs(a - b) / math.sqrt((1.0 + abs(a) ** 2) * (1.0 + abs(b) ** 2))
    return math.asin(min(1.0, q))


def sph_dist_arr(a, b):
    """Vectorized sph_dist for finite complex arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    q = np.abs(a - b) / np.sqrt((1.0 + np.abs(a) ** 2) * (1.0 + np.abs(b) ** 2))
    return np.arcsin(np.minimum(1.0, q))


def sph_diam(points):
    """Spherical diameter of a finite point set (max pairwise distance)."""
    pts = np.asarray(points, dtype=complex).ravel()
    if pts.size <= 1:
        return 0.0
    # exact O(n^2) is fine for the sizes used here
    d = sph_dist_arr(pts[:, None], pts[None, :])
    return float(d.max())


# ---------------------------------------------------------------------------
# Moebius transformations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MobiusMap:
    """z -> (a z + b) / (c z + d), normalized so ad - bc = 1 (up to sign)."""

    a: complex
    b: complex
    c: complex
    d: complex

    def __post_init__(self):
        det = self.a * self.d - self.b * self.c
        if abs(det) < 1e-15:
            raise ValueError("degenerate Moebius map (ad - bc = 0)")
        s = 1.0 / cmath.sqrt(det)
        object.__setattr__(self, "a", self.a * s)
        object.__setattr__(self, "b", self.b * s)
        object.__setattr__(self, "c", self.c * s)
        object.__setattr__(self, "d", self.d * s)

    def __call__(self, z):
        if isinstance(z, np.ndarray):
            num = self.a * z + self.b
            den = self.c * z + self.d
            with np.errstate(divide="ignore", invalid="ignore"):
                out = num / den
            bad = np.abs(den) == 0.0
            if np.any(bad):
                out = np.where(bad, _INF_C, out)
            return out
        zc = _as_complex(z)
        if not math.isfinite(zc.real):
            if self.c == 0:
                return _INF_C
            return self.a / self.c
        den = self.c * zc + self.d
        if den == 0:
            return _INF_C
        return (self.a * zc + self.b) / den

    def compose(self, other):
        """self o other as matrix product."""
        return MobiusMap(
            self.a * other.a + self.b * other.c,
            self.a * other.b + self.b * other.d,
            self.c * other.a + self.d * other.c,
            self.c * other.b + self.d * other.d,
        )

    def inverse(self):
        return MobiusMap(self.d, -self.b, -self.c, self.a)

    @staticmethod
    def identity():
        return MobiusMap(1, 0, 0, 1)

    @staticmethod
    def scaling(lam):
        return MobiusMap(lam, 0, 0, 1)

    @staticmethod
    def rotation_to_zero(p):
        """Sphere isometry sending p to 0 (a rotation in SU(2))."""
        p = _as_complex(p)
        if not math.isfinite(p.real):
            return MobiusMap(0, 1, -1, 0)
        return MobiusMap(1, -p, p.conjugate(), 1)

    def image_disk(self, disk):
        """Image of a spherical disk (Moebius maps send circles to circles)."""
        ce, re_, _ = disk.euclidean_circle()
        pts = [ce + re_ * cmath.exp(2j * math.pi * k / 3) for k in range(3)]
        img = [self(p) for p in pts]
        interior = self(_as_complex(disk.center))
        return _disk_from_boundary(img, interior)


def _circumcircle(p1, p2, p3):
    """Center and radius of the circle through three points (or a line)."""
    ax, ay = p1.real, p1.imag
    bx, by = p2.real, p2.imag
    cx, cy = p3.real, p3.imag
    dd = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(dd) < 1e-14 * max(1.0, abs(p1 - p2) ** 2):
        return None  # collinear: a line (circle through infinity)
    ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
          + (cx * cx + cy * cy) * (ay - by)) / dd
    uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
          + (cx * cx + cy * cy) * (bx - ax)) / dd
    center = complex(ux, uy)
    return center, abs(p1 - center)


def _disk_from_boundary(boundary3, interior_pt):
    """Spherical disk with given boundary circle and a marked interior point."""
    circ = _circumcircle(*[_as_complex(p) for p in boundary3])
    if circ is None:
        raise ValueError("boundary through infinity not supported here")
    ce, re_ = circ
    inside = abs(_as_complex(interior_pt) - ce) < re_ if math.isfinite(
        _as_complex(interior_pt).real) else False
    return SphericalDisk.from_euclidean(ce, re_, not inside)


# ---------------------------------------------------------------------------
# Disks and annuli
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SphericalDisk:
    """Open metric ball B(center, radius) in the spherical metric."""

    center: SpherePoint
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", SpherePoint.of(self.center))
        if not 0 < self.radius <= SPHERE_DIAM:
            raise ValueError("disk radius must lie in (0, pi/2]")

    def euclidean_circle(self):
        """(center, radius, contains_infinity) of the boundary in the plane.

        Spherical circles are Euclidean circles under stereographic
        projection; the spherical ball is the inside of the returned circle
        unless contains_infinity is set, in which case it is the outside.
        """
        if self.center.is_infinity:
            t = math.tan(SPHERE_DIAM - self.radius)
            return 0j, t, True
        c = complex(self.center.value)
        rho = abs(c)
        u = c / rho if rho > 0 else 1.0 + 0j
        a0 = math.atan(rho)
        t1 = math.tan(a0 - self.radius)
        hi = a0 + self.radius
        contains_inf = hi >= SPHERE_DIAM
        t2 = math.tan(hi)  # negative when the disk wraps past infinity
        ce = (t1 + t2) / 2.0 * u
        re_ = abs(t2 - t1) / 2.0
        return ce, re_, contains_inf

    def boundary_points(self, m):
        """m equally spaced boundary samples (in the plane chart)."""
        ce, re_, _ = self.euclidean_circle()
        th = 2.0 * math.pi * np.arange(m) / m
        return ce + re_ * np.exp(1j * th)

    def contains(self, z, margin=0.0):
        return sph_dist(self.center, z) < self.radius - margin

    def scaled(self, factor):
        return SphericalDisk(self.center, self.radius * factor)

    @staticmethod
    def from_euclidean(center, radius, contains_infinity=False):
        """Spherical disk whose boundary is the given Euclidean circle."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        rho = abs(center)
        u = center / rho if rho > 0 else 1.0 + 0j
        a1 = math.atan2(rho - radius, 1.0)  # signed angle of near point
        a2 = math.atan(rho + radius)
        if not contains_infinity:
            mid = (a1 + a2) / 2.0
            return SphericalDisk(SpherePoint(math.tan(mid) * u), (a2 - a1) / 2.0)
        # ball is the outside: center at the antipodal side
        mid = (a1 + a2) / 2.0 + SPHERE_DIAM
        r = SPHERE_DIAM - (a2 - a1) / 2.0
        t = math.tan(mid)
        if abs(t) > 1e15:
            return SphericalDisk(INFINITY, r)
        return SphericalDisk(SpherePoint(t * u), r)


@dataclass(frozen=True)
class RoundAnnulus:
    """Region between two nested spherical disks: outer minus closure(inner).

    The degenerate two-point-complement case is modeled with
    `two_point_degenerate=True`, where the modulus is +infinity.
    """

    outer: SphericalDisk
    inner: SphericalDisk
    two_point_degenerate: bool = False

    def __post_init__(self):
        if self.two_point_degenerate:
            return
        gap = self.outer.radius - (sph_dist(self.outer.center, self.inner.center)
                                   + self.inner.radius)
        if gap <= 0:
            raise ValueError("inner disk must sit strictly inside the outer disk")


def annulus_modulus(annulus):
    """Conformal modulus ln R of a round annulus; Moebius invariant.

    The annulus is normalized by a Moebius map to concentric circles
    {r1 < |z| < r2}; the modulus is ln(r2/r1).  The complement of two
    points has modulus +infinity.
    """
    if annulus.two_point_degenerate:
        return math.inf
    co, ro, oinf = annulus.outer.euclidean_circle()
    ci, ri, iinf = annulus.inner.euclidean_circle()
    if abs(co - ci) < 1e-14 * max(ro, ri):
        lo, hi = sorted([ro, ri])
        if hi - lo < 1e-15 * hi:
            raise ValueError("degenerate annulus: boundaries touch")
        return math.log(hi / lo)
    # rotate the center line onto the real axis and find the common
    # symmetric pair p, q (real); z -> (z-p)/(z-q) makes both concentric
    u = (ci - co) / abs(ci - co)
    a1, a2 = 0.0, abs(ci - co)
    r1, r2 = ro, ri
    s = (r1 * r1 - r2 * r2 - a1 * a1 + a2 * a2) / (a2 - a1)
    # derived from  pq - s*a + a^2 = r^2  at a = a1, a2
    prod = r1 * r1 + s * a1 - a1 * a1
    disc = s * s - 4.0 * prod
    if disc <= 0:
        raise ValueError("circles intersect: not an annulus")
    p = (s - math.sqrt(disc)) / 2.0
    q = (s + math.sqrt(disc)) / 2.0
    mob = MobiusMap(1, -(co + p * u), 1, -(co + q * u))

    def _image_radius(ce, re_):
        pts = [ce + re_ * cmath.exp(2j * math.pi * k / 3) for k in range(3)]
        img = [mob(pt) for pt in pts]
        circ = _circumcircle(*img)
        if circ is None:
            raise ValueError("normalization failed (degenerate image)")
        icen, irad = circ
        if abs(icen) > 1e-6 * irad:
            # tolerate roundoff: use mean modulus of boundary points
            return float(np.mean([abs(v) for v in img]))
        return irad

    rr1 = _image_radius(co, ro)
    rr2 = _image_radius(ci, ri)
    lo, hi = sorted([rr1, rr2])
    if lo <= 0 or hi - lo <= 1e-15 * hi:
        raise ValueError("degenerate annulus: boundaries touch")
    return math.log(hi / lo)


# ---------------------------------------------------------------------------
# Polynomials (ascending coefficient lists)
# ---------------------------------------------------------------------------

def _trim(coeffs):
    c = np.asarray(coeffs, dtype=complex)
    n = len(c)
    while n > 1 and abs(c[n - 1]) == 0.0:
        n -= 1
    return c[:n]


def polyval(coeffs, z):
    """Horner evaluation, vectorized over z."""
    z = np.asarray(z, dtype=complex)
    out = np.full(z.shape, coeffs[-1], dtype=complex)
    for k in range(len(coeffs) - 2, -1, -1):
        out = out * z + coeffs[k]
    return out


def polyder(coeffs):
    if len(coeffs) == 1:
        return np.zeros(1, dtype=complex)
    return np.asarray(coeffs[1:], dtype=complex) * np.arange(1, len(coeffs))


def polymul(a, b):
    return np.convolve(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))


def _polyadd(a, b):
    n = max(len(a), len(b))
    out = np.zeros(n, dtype=complex)
    out[: len(a)] += a
    out[: len(b)] += b
    return out


def polyroots(coeffs, polish=True):
    """All roots via companion-matrix eigenvalues, Newton-polished."""
    c = _trim(coeffs)
    if len(c) == 1:
        return np.zeros(0, dtype=complex)
    r = np.roots(c[::-1])
    if polish and len(r):
        d = polyder(c)
        for _ in range(3):
            fv = polyval(c, r)
            dv = polyval(d, r)
            ok = np.abs(dv) > 1e-30
            step = np.where(ok, fv / np.where(ok, dv, 1.0), 0.0)
            step = np.where(np.abs(step) < 0.5 * (1.0 + np.abs(r)), step, 0.0)
            r = r - step
    return r


def _cluster_points(points, tol):
    """Group near-coincident points; returns (representatives, counts)."""
    pts = list(points)
    reps, counts = [], []
    for p in pts:
        for i, q in enumerate(reps):
            if abs(p - q) <= tol:
                reps[i] = (reps[i] * counts[i] + p) / (counts[i] + 1)
                counts[i] += 1
                break
        else:
            reps.append(p)
            counts.append(1)
    return reps, counts


# ---------------------------------------------------------------------------
# Rational maps
# ---------------------------------------------------------------------------

class RationalMap:
    """Degree-d rational map P(z)/Q(z) acting on the Riemann sphere.

    Coefficients are ascending.  Construction verifies that P and Q share
    no common root (to tolerance) and that the degree is at least 2.
    """

    def __init__(self, numer, denom=(1,), name=None):
        self.numer = _trim(numer)
        self.denom = _trim(denom)
        if np.all(self.denom == 0) or np.all(self.numer == 0):
            raise ValueError("zero numerator or denominator")
        self.degree = max(len(self.numer), len(self.denom)) - 1
        if self.degree < 2:
            raise ValueError("rational map must have degree >= 2")
        self.name = name
        self._check_coprime()
        d1 = self.degree + 1
        self._num_pad = np.zeros(d1, dtype=complex)
        self._num_pad[: len(self.numer)] = self.numer
        self._den_pad = np.zeros(d1, dtype=complex)
        self._den_pad[: len(self.denom)] = self.denom
        # w = 1/z input chart: f(1/w) = rev(P)(w)/rev(Q)(w)
        self._num_rev = _trim(self._num_pad[::-1])
        self._den_rev = _trim(self._den_pad[::-1])
        self._wronskian = _trim(_polyadd(
            polymul(polyder(self.numer), self.denom),
            -polymul(self.numer, polyder(self.denom))))

    def _check_coprime(self, tol=1e-9):
        if len(self.numer) == 1 or len(self.denom) == 1:
            return
        rn = polyroots(self.numer)
        rd = polyroots(self.denom)
        for r in rn:
            if np.min(np.abs(rd - r)) < tol * max(1.0, abs(r)):
                raise ValueError("numerator and denominator share a root")

    def __repr__(self):
        return self.name or f"RationalMap(deg={self.degree})"

    # -- evaluation ---------------------------------------------------------

    def __call__(self, z):
        """f(z), vectorized; finite inputs assumed (use eval_point at inf)."""
        z = np.asarray(z, dtype=complex)
        num = polyval(self._num_pad, z)
        den = polyval(self._den_pad, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = num / den
        bad = np.abs(den) < 1e-300
        if np.any(bad):
            out = np.where(bad, _INF_C, out)
        return out if out.shape else complex(out)

    def eval_point(self, z):
        """f(z) with infinity handled; returns complex (inf for the pole)."""
        zc = _as_complex(z)
        if not math.isfinite(zc.real):
            num = self._num_rev if len(self._num_pad) else None
            a = polyval(self._num_rev, 0.0)
            b = polyval(self._den_rev, 0.0)
            if abs(b) < 1e-300:
                return _INF_C
            return complex(a / b)
        if abs(zc) > 1.0:
            w = 1.0 / zc
            a = polyval(self._num_rev, w)
            b = polyval(self._den_rev, w)
            if abs(b) < 1e-300:
                return _INF_C
            return complex(a / b)
        return complex(self(zc))

    def orbit(self, z, n):
        """[z, f(z), ..., f^n(z)] with infinity handling."""
        out = [_as_complex(z)]
        for _ in range(n):
            out.append(self.eval_point(out[-1]))
        return out

    def deriv_euclid(self, z):
        """|f'| in the plane chart (not spherical); vectorized."""
        z = np.asarray(z, dtype=complex)
        w = polyval(self._wronskian, z)
        q = polyval(self._den_pad, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            return w / (q * q)

    def preimages(self, w):
        """All d preimages (with multiplicity) of each finite target.

        Vectorized: returns shape (d, n) for input shape (n,).  Degree 2
        uses the quadratic formula; higher degrees use batched companion
        matrices.
        """
        w = np.atleast_1d(np.asarray(w, dtype=complex))
        d = self.degree
        # coefficients of P(x) - w Q(x), ascending, per target
        coef = self._num_pad[:, None] - np.multiply.outer(self._den_pad, w)
        if d == 2:
            c, b, a = coef[0], coef[1], coef[2]
            lin = np.abs(a) < 1e-14 * (np.abs(b) + np.abs(c))
            a_safe = np.where(lin, 1.0, a)
            disc = np.sqrt(b * b - 4.0 * a_safe * c)
            # stable quadratic roots
            qq = -0.5 * (b + np.where(np.abs(b + disc) >= np.abs(b - disc), disc, -disc))
            r1 = qq / a_safe
            with np.errstate(divide="ignore", invalid="ignore"):
                r2 = np.where(np.abs(qq) > 0, c / qq, 0.0)
            if np.any(lin):
                # leading coefficient vanished (target is the image of inf)
                with np.errstate(divide="ignore", invalid="ignore"):
                    rl = -c / b
                r1 = np.where(lin, rl, r1)
                r2 = np.where(lin, _INF_C, r2)
            roots = np.stack([r1, r2])
        else:
            n = w.shape[0]
            comp = np.zeros((n, d, d), dtype=complex)
            comp[:, 1:, :-1] = np.eye(d - 1)
            lead = coef[d]
            lead = np.where(np.abs(lead) < 1e-300, 1e-300, lead)
            comp[:, :, -1] = -(coef[:d] / lead).T
            roots = np.linalg.eigvals(comp).T
        # one Newton polish step against P - wQ
        num = polyval(self._num_pad, roots)
        den = polyval(self._den_pad, roots)
        dnum = polyval(polyder(self._num_pad), roots)
        dden = polyval(polyder(self._den_pad), roots)
        fv = num - w[None, :] * den
        dv = dnum - w[None, :] * dden
        ok = (np.abs(dv) > 1e-30) & np.isfinite(roots)
        step = np.where(ok, fv / np.where(ok, dv, 1.0), 0.0)
        small = np.abs(step) < 1e-2 * (1.0 + np.abs(roots))
        roots = np.where(ok & small, roots - step, roots)
        return roots

    def conjugate_by(self, mob):
        """g = mob o f o mob^{-1} as a RationalMap (coefficient-level)."""
        inv = mob.inverse()
        # f(inv(z)) as homogeneous pair in (az+b, cz+d)
        a, b, c, d = inv.a, inv.b, inv.c, inv.d
        deg = self.degree
        top = np.array([b, a], dtype=complex)
        bot = np.array([d, c], dtype=complex)
        pow_top = [np.array([1.0 + 0j])]
        pow_bot = [np.array([1.0 + 0j])]
        for _ in range(deg):
            pow_top.append(polymul(pow_top[-1], top))
            pow_bot.append(polymul(pow_bot[-1], bot))

        def _homog(coeffs):
            out = np.zeros(deg + 1, dtype=complex)
            for k in range(deg + 1):
                ck = coeffs[k] if k < len(coeffs) else 0.0
                if ck == 0:
                    continue
                term = polymul(pow_top[k], pow_bot[deg - k]) * ck
                out[: len(term)] += term
            return out

        pn = _homog(self._num_pad)
        pd = _homog(self._den_pad)
        # post-compose with mob: (A f + B)/(C f + D)
        new_num = mob.a * pn + mob.b * pd
        new_den = mob.c * pn + mob.d * pd
        return RationalMap(new_num, new_den)


def parse_rational_map(text):
    """Parse 'num_coeffs = [c0, c1, ...]; den_coeffs = [...]'.

    Complex literals use 'a+bi' form, e.g. '0.5-2i'; a bare 'i' is allowed.
    """
    def _grab(key):
        m = re.search(rf"{key}\s*=\s*\[([^\]]*)\]", text)
        if not m:
            return None
        items = [s.strip() for s in m.group(1).split(",") if s.strip()]
        out = []
        for s in items:
            s2 = s.replace(" ", "").replace("I", "i")
            s2 = re.sub(r"i\b", "j", s2)
            s2 = re.sub(r"(?<![\w.])j", "1j", s2)
            s2 = s2.replace("+1j", "+1j").replace("-1j", "-1j")
            out.append(complex(s2))
        return out

    num = _grab("num_coeffs")
    if num is None:
        raise ValueError("missing num_coeffs")
    den = _grab("den_coeffs") or [1.0]
    return RationalMap(num, den)


def quadratic(c):
    """z^2 + c."""
    cc = complex(c)
    return RationalMap([cc, 0, 1], [1], name=f"z^2+({cc:g})")


# ---------------------------------------------------------------------------
# Spherical derivative
# ---------------------------------------------------------------------------

def sph_deriv(f, z):
    """Norm of the derivative of f in the spherical metric, vectorized.

    Computed as |f'(z)| (1+|z|^2)/(1+|f(z)|^2) in the chart combination
    that keeps both the input and the output at modulus <= 1; the chart
    swap z -> 1/z is an isometry, so the value is chart-independent and
    finite at poles and at infinity.
    """
    z0 = np.atleast_1d(np.asarray(
        [_as_complex(v) for v in np.atleast_1d(z)] if np.asarray(z).dtype == object
        else z, dtype=complex))
    scalar = np.isscalar(z) or isinstance(z, (complex, SpherePoint)) or z0.shape == ()
    zin = z0.ravel()
    out = np.empty(zin.shape, dtype=float)

    swap_in = (np.abs(zin) > 1.0) | ~np.isfinite(zin)
    for mask, chart_in in ((~swap_in, 0), (swap_in, 1)):
        if not np.any(mask):
            continue
        if chart_in == 0:
            zz = zin[mask]
            num_c, den_c = f._num_pad, f._den_pad
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                zz = np.where(np.isfinite(zin[mask]), 1.0 / zin[mask], 0.0)
            num_c, den_c = f._num_rev, f._den_rev
        pn = polyval(num_c, zz)
        pd = polyval(den_c, zz)
        wr = _trim(_polyadd(polymul(polyder(num_c), den_c),
                            -polymul(num_c, polyder(den_c))))
        wv = polyval(wr, zz)
        with np.errstate(divide="ignore", invalid="ignore"):
            fval = pn / pd
        swap_out = (np.abs(fval) > 1.0) | ~np.isfinite(fval)
        # |f'| spherical in chart: |W| (1+|z|^2) / (|Q|^2 + |P|^2 adjusted)
        # direct chart:  |W|/|Q|^2 * (1+|z|^2)/(1+|P/Q|^2) = |W|(1+|z|^2)/(|Q|^2+|P|^2)
        # output swap (1/f): same formula with P, Q exchanged -> identical
        denom = np.abs(pd) ** 2 + np.abs(pn) ** 2
        val = np.abs(wv) * (1.0 + np.abs(zz) ** 2) / denom
        _ = swap_out  # output swap leaves the expression unchanged
        out[mask] = val
    out = out.reshape(z0.shape)
    return float(out[0]) if scalar else out


def sph_deriv_orbit_product(f, z, n):
    """|(f^n)'| spherical at z via the chain rule along the orbit."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    total = np.ones(z.shape, dtype=float)
    cur = z.copy()
    for _ in range(n):
        total = total * sph_deriv(f, cur)
        cur = np.asarray([f.eval_point(v) for v in cur], dtype=complex)
    return total, cur


# ---------------------------------------------------------------------------
# Critical points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CriticalPoint:
    point: SpherePoint
    local_degree: int
    in_julia_set: bool = False


def critical_points(f, julia_cloud=None, julia_tol=1e-3):
    """All critical points of f with local degrees (2d-2 with multiplicity).

    When a Julia-set sample is supplied, each critical point is classified
    as belonging to the Julia critical set when its distance to the cloud
    is below julia_tol.
    """
    w = f._wronskian
    finite = polyroots(w)
    reps, counts = _cluster_points(finite, 1e-7)
    out = []
    total = 0
    for p, m in zip(reps, counts):
        out.append([SpherePoint(complex(p)), m + 1])
        total += m
    inf_mult = (2 * f.degree - 2) - total
    if inf_mult > 0:
        out.append([INFINITY, inf_mult + 1])

    res = []
    for pt, deg in out:
        in_j = False
        if julia_cloud is not None and not pt.is_infinity:
            dmin = float(np.min(sph_dist_arr(
                np.asarray(julia_cloud, dtype=complex), complex(pt.value))))
            in_j = dmin < julia_tol
        elif julia_cloud is not None and pt.is_infinity:
            in_j = bool(np.min([sph_dist(INFINITY, q) for q in
                                np.asarray(julia_cloud)[:200]]) < julia_tol)
        res.append(CriticalPoint(pt, deg, in_j))
    return res


def critical_set(f, julia_cloud, julia_tol=1e-3, orbit_horizon=60):
    """Critical points classified in J(f) (finite ones), as complex values.

    Rejects maps where one Julia critical point is mapped onto another
    under iteration within the horizon (unsupported input class).
    """
    crits = critical_points(f, julia_cloud, julia_tol)
    cs = [complex(c.point.value) for c in crits
          if c.in_julia_set and not c.point.is_infinity]
    for c in cs:
        z = c
        for _ in range(orbit_horizon):
            z = f.eval_point(z)
            if not math.isfinite(z.real):
                break
            for c2 in cs:
                if c2 != c and abs(z - c2) < 1e-9:
                    raise ValueError(
                        "critical orbit collision: a Julia critical point maps "
                        "onto another; this input class is not supported")
    return cs


# ---------------------------------------------------------------------------
# Periodic points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeriodicPoint:
    point: SpherePoint
    period: int          # minimal period (divides the requested n)
    multiplier: float    # |(f^n)'| at the requested n, spherical chain rule
    ambiguous: bool = False


def _iterate_coeffs(f, n):
    """Coefficient lists of f^n as a homogeneous pair; None on overflow."""
    pn, pd = f._num_pad.copy(), f._den_pad.copy()
    deg = f.degree
    for _ in range(n - 1):
        if (len(pn) - 1) * deg > 72:
            return None
        # f(g) with g = pn/pd: substitute homogeneously
        d1 = max(len(pn), len(pd)) - 1
        pow_n = [np.array([1.0 + 0j])]
        pow_d = [np.array([1.0 + 0j])]
        for _k in range(deg):
            pow_n.append(polymul(pow_n[-1], pn))
            pow_d.append(polymul(pow_d[-1], pd))
        nn = np.zeros(1, dtype=complex)
        dd = np.zeros(1, dtype=complex)
        for k in range(deg + 1):
            ck_n = f._num_pad[k]
            ck_d = f._den_pad[k]
            term = polymul(pow_n[k], pow_d[deg - k])
            if ck_n != 0:
                nn = _polyadd(nn, ck_n * term)
            if ck_d != 0:
                dd = _polyadd(dd, ck_d * term)
        pn, pd = _trim(nn), _trim(dd)
        m = max(np.abs(pn).max(), np.abs(pd).max())
        if not np.isfinite(m) or m > 1e30:
            return None
        pn = pn / m
        pd = pd / m
        _ = d1
    return pn, pd


def _newton_fixed_points(f, n, seeds, tol=1e-12, iters=60):
    """Solve f^n(z) = z by Newton from many seeds; returns converged roots."""
    z = np.asarray(seeds, dtype=complex).copy()
    alive = np.ones(z.shape, dtype=bool)
    for _ in range(iters):
        cur = z.copy()
        dprod = np.ones(z.shape, dtype=complex)
        overflow = np.zeros(z.shape, dtype=bool)
        for _j in range(n):
            dv = f.deriv_euclid(cur)
            dprod = dprod * dv
            cur = f(cur)
            overflow |= ~np.isfinite(cur) | (np.abs(cur) > 1e8)
        g = cur - z
        dg = dprod - 1.0
        bad = overflow | (np.abs(dg) < 1e-14)
        step = np.where(bad, 0.0, g / np.where(bad, 1.0, dg))
        step = np.where(np.abs(step) > 1.0, 0.0, step)
        z = z - np.where(alive, step, 0.0)
        conv = np.abs(step) < 1e-14 * (1.0 + np.abs(z))
        alive = alive & ~conv & ~bad
        if not alive.any():
            break
    # final residual filter
    cur = z.copy()
    for _j in range(n):
        cur = f(cur)
    ok = np.isfinite(cur) & (np.abs(cur - z) < 1e-8 * (1.0 + np.abs(z)))
    return z[ok]


def periodic_points(f, n, seed=7, work_bound=24.0, tol=1e-8):
    """All fixed points of f^n with minimal periods and spherical multipliers.

    Low iterates are solved by companion-matrix roots of the iterated
    coefficient pair; once iterated coefficients become ill-conditioned the
    solver switches to Newton iteration seeded densely near the Julia set,
    and verifies the count d^n + 1 (with multiplicity, on the sphere).
    """
    if n * math.log(f.degree) > work_bound:
        raise ValueError("n ln d exceeds the configured work bound")
    d = f.degree
    expected_sphere = d ** n + 1

    # is infinity fixed under f^n along its orbit?
    inf_per = 0
    z = INFINITY
    zo = _as_complex(z)
    for j in range(1, n + 1):
        zo = f.eval_point(zo)
        if not math.isfinite(zo.real):
            if n % j == 0:
                inf_per = j
            break
    expected_finite = expected_sphere - (1 if inf_per else 0)

    coeffs = _iterate_coeffs(f, n)
    finite = None
    if coeffs is not None:
        pn, pd = coeffs
        g = _polyadd(pn, -polymul(np.array([0.0, 1.0], dtype=complex), pd))
        if len(_trim(g)) - 1 >= expected_finite:
            roots = polyroots(g)
            finite = _newton_fixed_points(f, n, roots)
    if finite is None or len(finite) < expected_finite:
        cloud = julia_sample(f, max(4000, 40 * expected_finite), seed,
                             _allow_any_start=True)
        rng = rng_stream(seed, f"periodic-{n}")
        seeds = np.concatenate([
            cloud,
            cloud + 1e-4 * (rng.standard_normal(len(cloud))
                            + 1j * rng.standard_normal(len(cloud))),
        ])
        finite = _newton_fixed_points(f, n, seeds)

    reps, _counts = _cluster_points(finite, tol)
    # completeness retry with denser seeding
    attempts = 0
    while len(reps) < expected_finite and attempts < 3:
        attempts += 1
        rng = rng_stream(seed, f"periodic-retry-{n}-{attempts}")
        cloud = julia_sample(f, 20000 * (attempts + 1), seed + attempts,
                             _allow_any_start=True)
        extra = _newton_fixed_points(f, n, cloud)
        reps, _counts = _cluster_points(list(reps) + list(extra), tol)
    # multiplicity may make len(reps) < expected (multiple roots): flag below
    ambiguous_pairs = set()
    arr = np.asarray(reps, dtype=complex)
    for i in range(len(arr)):
        dd = np.abs(arr - arr[i])
        close = np.where((dd > 0) & (dd < 100 * tol))[0]
        for j in close:
            ambiguous_pairs.add((min(i, j), max(i, j)))

    out = []
    for i, p in enumerate(arr):
        # minimal period among divisors of n
        per = n
        for m in range(1, n):
            if n % m == 0:
                q = p
                for _ in range(m):
                    q = f.eval_point(q)
                if math.isfinite(q.real) and abs(q - p) < 1e-6:
                    per = m
                    break
        mult, _ = sph_deriv_orbit_product(f, np.array([p]), n)
        amb = any(i in pr for pr in ambiguous_pairs)
        out.append(PeriodicPoint(SpherePoint(complex(p)), per, float(mult[0]), amb))
    if inf_per:
        mult_inf = _multiplier_at_infinity(f, n)
        out.append(PeriodicPoint(INFINITY, inf_per, mult_inf))
    out.sort(key=lambda pp: (pp.point.is_infinity, pp.point.value.real,
                             pp.point.value.imag))
    return out


def _multiplier_at_infinity(f, n):
    """|(f^n)'| spherical at a fixed/periodic infinity via the 1/z chart."""
    g_num, g_den = f._den_rev, f._num_rev  # 1/f(1/w)
    eps = 1e-7
    w = np.array([eps, eps * 1j, -eps])
    num = polyval(g_num, w)
    den = polyval(g_den, w)
    val = num / den
    total = 1.0
    # chain rule in the w chart over n steps
    cur = w.copy()
    for _ in range(n):
        h = 1e-9
        d_est = (np.abs((polyval(g_num, cur + h) / polyval(g_den, cur + h)) -
                        (polyval(g_num, cur) / polyval(g_den, cur))) / h)
        sph = d_est * (1.0 + np.abs(cur) ** 2) / (1.0 + np.abs(val) ** 2)
        total = total * np.mean(sph)
        cur = polyval(g_num, cur) / polyval(g_den, cur)
        val = polyval(g_num, cur) / polyval(g_den, cur)
    return float(total)


# ---------------------------------------------------------------------------
# Julia set sampling and critical orbit entry
# ---------------------------------------------------------------------------

def julia_sample(f, count, seed, burn=64, _allow_any_start=False):
    """Seeded inverse-iteration sample of (approximately) J(f).

    Starts at a repelling fixed point and applies `burn` random inverse
    branches per walker; reproducible for a fixed seed.
    """
    start = None
    pn = f._num_pad
    pd = f._den_pad
    g = _polyadd(pn, -polymul(np.array([0.0, 1.0], dtype=complex), pd))
    fixed = polyroots(g)
    best = None
    for p in fixed:
        lam = sph_deriv(f, complex(p))
        if lam > 1.0 + 1e-9 and (best is None or lam > best[1]):
            best = (complex(p), lam)
    if best is not None:
        start = best[0]
    elif _allow_any_start and len(fixed):
        start = complex(fixed[0])
    else:
        raise ValueError("no repelling fixed point found")

    rng = rng_stream(seed, "julia-sample")
    pts = np.full(count, start, dtype=complex)
    d = f.degree
    for _ in range(burn):
        pre = f.preimages(pts)                      # (d, count)
        pick = rng.integers(0, d, size=count)
        pts = pre[pick, np.arange(count)]
        bad = ~np.isfinite(pts)
        if bad.any():
            pts[bad] = start
    return pts


def critical_orbit_entry(f, r, julia_cloud=None, horizon=512, seed=7):
    """Least L >= 1 with dist(f^L(c), C) <= r for some Julia critical c.

    Returns (L, found).  When no entry occurs within the horizon, found is
    False and L is the horizon (an explicit "not found below horizon"
    marker, never a silent cap).
    """
    if r <= 0:
        raise ValueError("r must be positive")
    if julia_cloud is None:
        julia_cloud = julia_sample(f, 2000, seed)
    cs = critical_set(f, julia_cloud)
    if not cs:
        return horizon, False
    if r >= SPHERE_DIAM:
        return 1, True
    orbits = [f.orbit(c, horizon) for c in cs]
    for L in range(1, horizon + 1):
        for orb in orbits:
            z = orb[L]
            if not math.isfinite(z.real):
                continue
            if min(sph_dist(z, c) for c in cs) <= r:
                return L, True
    return horizon, False
