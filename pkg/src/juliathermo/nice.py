"""Nice sets and nice couples: construction and finite-depth verification.

A nice set is a union of disjoint simply-connected neighborhoods of the
Julia critical points whose pull-backs never straddle its boundary; a
nice couple adds a shielded outer set whose pull-backs never straddle the
inner one.  Domains constructed here are round disks whose radii are
snapped, within the prescribed bands, to gaps left free by the radial
shells of the enumerated pull-back components.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    RoundAnnulus,
    SphericalDisk,
    annulus_modulus,
    critical_set,
    julia_sample,
    sph_dist,
    sph_dist_arr,
)
from .pullback import PullbackOptions, backward_contraction_trace, pullback_components

__all__ = [
    "NiceSet",
    "NiceCouple",
    "VerificationReport",
    "Violation",
    "CoupleConstructionError",
    "construct_nice_couple",
    "construct_anchored_couple",
    "verify_nice",
    "verify_couple",
    "couple_modulus",
    "polygon_modulus",
    "disk_polygon",
]


@dataclass(frozen=True)
class Violation:
    word: str
    kind: str          # straddle-nice | straddle-couple | closure-touch
    anchor: complex
    shell: tuple       # radial interval of the offending component


@dataclass
class VerificationReport:
    depth: int
    checked_components: int
    violations: list

    @property
    def passed(self):
        return not self.violations


@dataclass
class NiceSet:
    """Disjoint disk neighborhoods keyed by their anchors.

    Anchors are the Julia critical points, or marked Julia points for
    maps whose Julia set carries no critical point.
    """

    domains: dict                      # anchor complex -> SphericalDisk
    verified_depth: int = 0

    def __post_init__(self):
        anchors = list(self.domains)
        for i, a in enumerate(anchors):
            da = self.domains[a]
            if not da.contains(a):
                raise ValueError("domain must contain its anchor")
            for b in anchors[i + 1:]:
                db = self.domains[b]
                if sph_dist(a, b) <= da.radius + db.radius:
                    raise ValueError("domain closures must be pairwise disjoint")

    @property
    def anchors(self):
        return list(self.domains)

    def radius(self, anchor):
        return self.domains[anchor].radius

    def locate(self, z, pad=0.0):
        """Anchor of the domain containing z, or None."""
        for a, dsk in self.domains.items():
            if sph_dist(a, z) < dsk.radius - pad:
                return a
        return None


@dataclass
class NiceCouple:
    outer: NiceSet                     # the shielded set
    inner: NiceSet
    modulus_lb: float = 0.0
    verified_depth: int = 0

    def __post_init__(self):
        for a in self.inner.anchors:
            if a not in self.outer.domains:
                raise ValueError("inner and outer sets must share anchors")
            gap = (self.outer.radius(a)
                   - sph_dist(a, self.inner.domains[a].center)
                   - self.inner.radius(a))
            if gap <= 0:
                raise ValueError("closure(inner) must sit inside outer")
        if self.modulus_lb == 0.0:
            self.modulus_lb = couple_modulus(self)

    @property
    def anchors(self):
        return self.inner.anchors

    def to_json(self):
        return {
            "anchors": [[a.real, a.imag] for a in self.anchors],
            "outer": [{"center": [a.real, a.imag], "radius": self.outer.radius(a)}
                      for a in self.anchors],
            "inner": [{"center": [a.real, a.imag], "radius": self.inner.radius(a)}
                      for a in self.anchors],
            "modulus_lb": self.modulus_lb,
            "verified_depth": self.verified_depth,
        }


class CoupleConstructionError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def _node_shell(node, anchor):
    """(dmin, dmax, surrounds) of a component relative to an anchor point."""
    verts = node.curve
    d = sph_dist_arr(verts, anchor)
    surrounds = False
    dmin = float(d.min())
    if dmin < node.diam_hi * 1.5:
        from .pullback import _winding
        surrounds = _winding(verts, np.array([anchor]))[0] != 0
    pad = float(np.abs(verts - np.roll(verts, 1)).max()) / (
        1.0 + float(np.abs(verts).min()) ** 2)
    return dmin - pad, float(d.max()) + pad, surrounds


def _check_against(node, target: NiceSet, kind):
    """Dichotomy check of one component against every domain of a nice set."""
    out = []
    for a, dsk in target.domains.items():
        lo, hi, surrounds = _node_shell(node, a)
        r = dsk.radius
        if hi < r:
            continue                      # inside this domain
        if lo > r and not surrounds:
            continue                      # closure-disjoint from this domain
        if lo > r and surrounds:
            out.append(Violation(node.word, kind, a, (lo, hi)))
            continue
        k = "closure-touch" if (abs(lo - r) < 1e-12 or abs(hi - r) < 1e-12) else kind
        out.append(Violation(node.word, k, a, (lo, hi)))
    return out


def _enumerate_set_pullbacks(f, nice: NiceSet, depth, opts):
    """Pull-back trees of every domain disk of a nice set."""
    trees = {}
    for a, dsk in nice.domains.items():
        trees[a] = pullback_components(f, dsk, depth, opts)
    return trees


def verify_nice(f, nice: NiceSet, depth, opts=None):
    """Check the no-straddling dichotomy for pull-backs of the set itself."""
    opts = opts or PullbackOptions(n_boundary=32, check_precondition=False)
    violations = []
    checked = 0
    for _a, tree in _enumerate_set_pullbacks(f, nice, depth, opts).items():
        for lvl in tree.levels[1:]:
            for nd in lvl:
                checked += 1
                if nd.unresolved_merge:
                    violations.append(Violation(nd.word, "straddle-nice",
                                                _a, (0.0, math.inf)))
                    continue
                violations.extend(_check_against(nd, nice, "straddle-nice"))
    violations.sort(key=lambda v: v.word)
    rep = VerificationReport(depth, checked, violations)
    if rep.passed:
        nice.verified_depth = max(nice.verified_depth, depth)
    return rep


def verify_couple(f, couple: NiceCouple, depth, opts=None, check_parts=True):
    """Check pull-backs of the outer set against the inner set.

    With check_parts, both sets are first verified nice individually (a
    precondition of the couple property).
    """
    opts = opts or PullbackOptions(n_boundary=32, check_precondition=False)
    violations = []
    checked = 0
    if check_parts:
        rep_o = verify_nice(f, couple.outer, depth, opts)
        rep_i = verify_nice(f, couple.inner, depth, opts)
        violations.extend(rep_o.violations)
        violations.extend(rep_i.violations)
        checked += rep_o.checked_components + rep_i.checked_components
    for _a, tree in _enumerate_set_pullbacks(f, couple.outer, depth, opts).items():
        for lvl in tree.levels[1:]:
            for nd in lvl:
                checked += 1
                if nd.unresolved_merge:
                    violations.append(Violation(nd.word, "straddle-couple",
                                                _a, (0.0, math.inf)))
                    continue
                violations.extend(_check_against(nd, couple.inner, "straddle-couple"))
    violations.sort(key=lambda v: v.word)
    rep = VerificationReport(depth, checked, violations)
    if rep.passed:
        couple.verified_depth = max(couple.verified_depth, depth)
    return rep


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _free_radius(band, blocked, prefer=None):
    """A radius in `band` clear of all blocked intervals, or None.

    Picks the midpoint of the widest free gap (or the preferred value if
    it is free)."""
    lo, hi = band
    events = [(lo, 0)]
    segs = sorted((max(lo, b0), min(hi, b1)) for b0, b1 in blocked
                  if b1 > lo and b0 < hi)
    free = []
    cur = lo
    for b0, b1 in segs:
        if b0 > cur:
            free.append((cur, b0))
        cur = max(cur, b1)
    if cur < hi:
        free.append((cur, hi))
    _ = events
    if not free:
        return None
    if prefer is not None:
        for g0, g1 in free:
            if g0 <= prefer <= g1 and min(prefer - g0, g1 - prefer) > 0.02 * (hi - lo):
                return prefer
    g0, g1 = max(free, key=lambda g: g[1] - g[0])
    return 0.5 * (g0 + g1)


def _shells_blocking(trees, anchors, slack):
    """Radial shells of all enumerated components around each anchor."""
    blocked = {a: [] for a in anchors}
    for tree in trees.values():
        for lvl in tree.levels[1:]:
            for nd in lvl:
                for a in anchors:
                    dmin = float(np.min(sph_dist_arr(nd.curve, a)))
                    if dmin > 0.8:        # irrelevant, far from every band
                        continue
                    lo, hi, _s = _node_shell(nd, a)
                    blocked[a].append((lo - slack, hi + slack))
    return blocked


def _build_couple_disks(anchors, r_hat, r_in):
    outer = NiceSet({a: SphericalDisk(a, r_hat[a]) for a in anchors})
    inner = NiceSet({a: SphericalDisk(a, r_in[a]) for a in anchors})
    return NiceCouple(outer, inner)


def _search_couple(f, anchors, bands_hat, bands_in, depth, opts,
                   max_rounds=5, search_depth=None):
    """Snap one radius per anchor and band so that verification passes."""
    search_depth = search_depth or min(depth, 9)
    r_hat = {a: 0.5 * (b[0] + b[1]) for a, b in bands_hat.items()}
    r_in = {a: 0.5 * (b[0] + b[1]) for a, b in bands_in.items()}
    last_report = None
    for _round in range(max_rounds):
        couple = _build_couple_disks(anchors, r_hat, r_in)
        dep = search_depth if _round < max_rounds - 1 else depth
        rep = verify_couple(f, couple, dep, opts)
        last_report = rep
        if rep.passed and dep == depth:
            couple.verified_depth = depth
            return couple, rep
        if rep.passed:
            search_depth = depth
            continue
        # block the shells of the offending components and re-snap
        trees_o = _enumerate_set_pullbacks(f, couple.outer, dep, opts)
        trees_i = _enumerate_set_pullbacks(f, couple.inner, dep, opts)
        slack = 1e-4 * min(min(b[1] - b[0] for b in bands_hat.values()),
                           min(b[1] - b[0] for b in bands_in.values()))
        blk_o = _shells_blocking(trees_o, anchors, slack)
        blk_i = _shells_blocking(trees_i, anchors, slack)
        ok = True
        for a in anchors:
            # outer radius must clear shells of outer pull-backs;
            # inner radius must clear shells of both sets' pull-backs
            nh = _free_radius(bands_hat[a], blk_o[a], prefer=r_hat[a])
            ni = _free_radius(bands_in[a], blk_o[a] + blk_i[a], prefer=r_in[a])
            if nh is None or ni is None:
                ok = False
                break
            r_hat[a], r_in[a] = nh, ni
        if not ok:
            break
    raise CoupleConstructionError(
        "radius search failed: no clearance in the prescribed bands "
        f"(last report: {len(last_report.violations)} violations, first: "
        f"{last_report.violations[0] if last_report.violations else None})",
        last_report)


def construct_nice_couple(f, delta, tau, depth, opts=None, lam=1.2, alpha2=0.05,
                          bc_steps=10, seed=7):
    """Nice couple around the Julia critical points.

    Candidate radii follow the backward-contraction scales delta(c): the
    outer domain within [delta(c)/2, (1/2 + tau) delta(c)], the inner
    within [tau delta(c), 2 tau delta(c)]; boundaries are then snapped to
    radii avoiding every enumerated straddling component up to `depth`.
    """
    if not 0 < tau < 0.25:
        raise ValueError("tau must lie in (0, 1/4)")
    opts = opts or PullbackOptions(n_boundary=32, check_precondition=False)
    cloud = opts.julia_cloud
    if cloud is None:
        cloud = julia_sample(f, 2000, seed)
        opts.julia_cloud = cloud
    crits = critical_set(f, cloud)
    if not crits:
        raise CoupleConstructionError(
            "no Julia critical points: use construct_anchored_couple")
    delta_c = {c: delta for c in crits}
    for c0 in crits:
        tr = backward_contraction_trace(f, c0, delta, lam, alpha2, bc_steps,
                                        opts=PullbackOptions(
                                            n_boundary=24, julia_cloud=cloud,
                                            check_precondition=False))
        for c, v in tr.delta_of_c.items():
            delta_c[c] = max(delta_c[c], v)
    bands_hat = {c: (0.5 * dc, (0.5 + tau) * dc) for c, dc in delta_c.items()}
    bands_in = {c: (tau * dc, 2 * tau * dc) for c, dc in delta_c.items()}
    couple, rep = _search_couple(f, crits, bands_hat, bands_in, depth, opts)
    return couple, rep


def construct_anchored_couple(f, anchor, r_hat_band, r_in_band, depth,
                              opts=None, seed=7):
    """Couple around a marked Julia point, for maps with no Julia critical
    point (uniformly hyperbolic case); the induced-map machinery applies
    verbatim with the anchor playing the role of the critical label.
    """
    opts = opts or PullbackOptions(n_boundary=32, check_precondition=False)
    if opts.julia_cloud is None:
        opts.julia_cloud = julia_sample(f, 2000, seed)
    anchor = complex(anchor)
    return _search_couple(f, [anchor], {anchor: tuple(r_hat_band)},
                          {anchor: tuple(r_in_band)}, depth, opts)


# ---------------------------------------------------------------------------
# Modulus
# ---------------------------------------------------------------------------

def couple_modulus(couple: NiceCouple):
    """min over anchors of the modulus of the shield annulus outer \\ inner."""
    vals = []
    for a in couple.anchors:
        out = couple.outer.domains[a]
        inn = couple.inner.domains[a]
        vals.append(annulus_modulus(RoundAnnulus(out, inn)))
    return min(vals)


def polygon_modulus(outer_vertices, inner_vertices, grid=320):
    """Numerical conformal modulus of the region between two polygons.

    Solves the Laplace problem u=1 on the outer boundary, u=0 on the inner
    one, on a Cartesian grid; the modulus is 2 pi / energy(u).  Euclidean
    chart; intended for small domains where the spherical correction is
    negligible (matches the disk formula within a few percent).
    """
    from scipy import sparse
    from scipy.sparse.linalg import spsolve

    ov = np.asarray(outer_vertices, dtype=complex)
    iv = np.asarray(inner_vertices, dtype=complex)
    pad = 0.05 * (ov.real.max() - ov.real.min())
    x0, x1 = ov.real.min() - pad, ov.real.max() + pad
    y0, y1 = ov.imag.min() - pad, ov.imag.max() + pad
    n = grid
    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y0, y1, n)
    hx = xs[1] - xs[0]
    hy = ys[1] - ys[0]
    X, Y = np.meshgrid(xs, ys)
    P = X + 1j * Y

    def _inside(poly, pts):
        v = poly[None, :] - pts[:, None]
        nxt = np.roll(np.arange(len(poly)), -1)
        ang = np.angle(v[:, nxt] / v)
        return np.abs(ang.sum(axis=1)) > math.pi

    flat = P.ravel()
    in_outer = _inside(ov, flat)
    in_inner = _inside(iv, flat)
    dom = in_outer & ~in_inner          # annular region: unknowns
    idx = -np.ones(flat.shape, dtype=int)
    idx[dom] = np.arange(dom.sum())
    rows, cols, vals, rhs = [], [], [], np.zeros(dom.sum())
    nn = n
    for k in np.where(dom)[0]:
        i, j = divmod(k, nn)
        r = idx[k]
        diag = 0.0
        for (di, dj, w) in ((0, 1, 1 / hx ** 2), (0, -1, 1 / hx ** 2),
                            (1, 0, 1 / hy ** 2), (-1, 0, 1 / hy ** 2)):
            ii, jj = i + di, j + dj
            diag += w
            if not (0 <= ii < nn and 0 <= jj < nn):
                continue                # outside the box: u = 1 (outer side)
            kk = ii * nn + jj
            if dom[kk]:
                rows.append(r)
                cols.append(idx[kk])
                vals.append(-w)
            elif in_inner[kk]:
                pass                    # u = 0 on the inner island
            else:
                rhs[r] += w             # u = 1 outside the outer polygon
        rows.append(r)
        cols.append(r)
        vals.append(diag)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(dom.sum(), dom.sum()))
    u = spsolve(A, rhs)
    U = np.zeros(flat.shape)
    U[dom] = u
    U[~in_outer] = 1.0
    U = U.reshape(n, n)
    gx, gy = np.gradient(U, hx, hy, edge_order=1)
    mask = dom.reshape(n, n)
    energy = float(((gx ** 2 + gy ** 2) * mask).sum() * hx * hy)
    # include half-weight of boundary-adjacent cells crudely via the mask
    if energy <= 0:
        raise ValueError("degenerate polygon pair")
    return 2.0 * math.pi / energy


def disk_polygon(disk: SphericalDisk, m=96):
    """Polygonal refinement of a disk boundary (for the modulus oracle)."""
    return disk.boundary_points(m)
