"""The canonical induced Markov map associated to a nice couple.

Branches are the first-good-time components: pull-backs W of the inner
set landing inside it, whose outer pull-back is univalent, with no
earlier good time along the chain.  The enumeration walks center
preimages level by level (chains outside the inner set are univalent, so
a center orbit determines its component), resolves boundary-ambiguous
components by lifting actual boundary curves, and accounts every pruned
or excluded piece in a completeness ledger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import critical_points, sph_deriv, sph_dist, sph_dist_arr
from .nice import NiceCouple
from .pullback import (
    PullbackNode,
    _diam_bounds,
    _diam_bounds_batch,
    _winding,
    lift_fan_batch,
    lift_points_along_branch,
)

__all__ = [
    "DefectLedger",
    "InducedBranch",
    "InducedSystem",
    "BadPullbackCensus",
    "build_induced",
    "census_bad_pullbacks",
    "check_expansion",
    "check_mixing_gcd",
    "refine_first_return",
    "toy_full_shift",
    "toy_two_label",
]


class DefectLedger:
    """Histogram of diameters of unexplored regions.

    Stores ln-diameter counts so the alpha-mass  sum diam^alpha  of the
    truncated material can be bounded for any exponent after the fact.
    """

    BINS = 96
    LN_LO, LN_HI = math.log(1e-16), math.log(4.0)

    def __init__(self):
        self.counts = np.zeros(self.BINS, dtype=np.int64)
        self.total = 0

    def add(self, diams):
        diams = np.atleast_1d(np.asarray(diams, dtype=float))
        diams = diams[diams > 0]
        if diams.size == 0:
            return
        pos = (np.log(diams) - self.LN_LO) / (self.LN_HI - self.LN_LO)
        idx = np.clip((pos * self.BINS).astype(int), 0, self.BINS - 1)
        np.add.at(self.counts, idx, 1)
        self.total += diams.size

    def mass(self, alpha):
        """Upper estimate of sum diam^alpha over the recorded regions."""
        edges = np.exp(np.linspace(self.LN_LO, self.LN_HI, self.BINS + 1))
        return float((self.counts * edges[1:] ** alpha).sum())

    def merged(self, other):
        out = DefectLedger()
        out.counts = self.counts + other.counts
        out.total = self.total + other.total
        return out

    def to_json(self):
        return {"regions": int(self.total), "mass_at_1": self.mass(1.0)}


@dataclass
class InducedBranch:
    """One branch W of the induced map, with F = f^m mapping W onto a
    whole inner domain."""

    word: str
    m: int
    c_source: complex            # anchor of the domain containing W
    c_target: complex            # anchor of the image domain F(W)
    anchor: complex              # the preimage of c_target inside W
    diam_lo: float
    diam_hi: float
    expansion_lb: float          # inf over samples of |(f^m)'| (spherical)
    expansion_ub: float
    curve: np.ndarray | None = None      # boundary polyline of W
    const_deriv: float | None = None     # toy systems: constant |F'|
    log_deriv_center: float = 0.0

    @property
    def s_sup(self):
        """sup |phi_W'| over the image domain (inverse-branch contraction)."""
        if self.const_deriv is not None:
            return 1.0 / self.const_deriv
        return 1.0 / self.expansion_lb

    @property
    def s_inf(self):
        if self.const_deriv is not None:
            return 1.0 / self.const_deriv
        return 1.0 / self.expansion_ub

    def component_node(self):
        return PullbackNode(
            word=self.word, depth=self.m,
            center_preimages=np.array([self.anchor]),
            diam_lo=self.diam_lo, diam_hi=self.diam_hi,
            univalent=True, crit_trace=(), curve=self.curve)

    def hat_node(self, f, couple, n_pts=48):
        """The univalent outer pull-back containing the branch."""
        circle = couple.outer.domains[self.c_target].boundary_points(n_pts)
        pts = lift_points_along_branch(f, circle, self.anchor, self.m,
                                       self.c_target)
        lo, hi = _diam_bounds(pts)
        return PullbackNode(
            word=self.word + "^", depth=self.m,
            center_preimages=np.array([self.anchor]),
            diam_lo=lo, diam_hi=hi, univalent=True, crit_trace=(), curve=pts)


@dataclass
class InducedSystem:
    couple: NiceCouple | None
    branches: list
    cutoff_M: int
    diam_floor: float
    completeness_defect: DefectLedger = field(default_factory=DefectLedger)
    anchors: list = field(default_factory=list)
    map: object = None

    def __post_init__(self):
        if not self.anchors and self.couple is not None:
            self.anchors = self.couple.anchors

    def by_source(self, c):
        return [b for b in self.branches if b.c_source == c]

    def inner_radius(self, c):
        if self.couple is not None:
            return self.couple.inner.radius(c)
        return getattr(self, "_toy_radius", 1.0)

    def write_branch_csv(self, fh):
        fh.write("word,m_W,c_source,c_target,diam_lo,diam_hi,expansion_lb\n")
        for b in self.branches:
            fh.write(f"{b.word},{b.m},{b.c_source!r},{b.c_target!r},"
                     f"{b.diam_lo:.17g},{b.diam_hi:.17g},{b.expansion_lb:.17g}\n")


# ---------------------------------------------------------------------------
# Frontier enumeration
# ---------------------------------------------------------------------------

def _branch_curve(f, anchor, depth, disk, n_pts):
    """Boundary of the pull-back of a domain disk along a univalent branch."""
    circle = disk.boundary_points(n_pts)
    return lift_points_along_branch(f, circle, anchor, depth,
                                    complex(disk.center.value))


def _resolve_entry(f, z, m, couple, root, n_pts=24):
    """Exact dichotomy of the outer pull-back at z against the inner set.

    Returns (anchor or None, crit_inside, curve) where anchor is the inner
    domain containing the component.  None anchor with crit_inside=None
    flags an unresolved component.
    """
    hat_disk = couple.outer.domains[root]
    try:
        curve = _branch_curve(f, z, m, hat_disk, n_pts)
    except Exception:
        return None, None, None
    for a, dsk in couple.inner.domains.items():
        dmax = float(np.max(sph_dist_arr(curve, a)))
        dmin = float(np.min(sph_dist_arr(curve, a)))
        if dmax < dsk.radius:
            return a, None, curve
        if dmin > dsk.radius:
            continue
        return None, None, curve        # straddles: unresolved under heuristics
    return complex(math.nan), None, curve   # fully outside every domain


_ALPH = "0123456789abcdefghijklmnopqrstuvwxyz"


def build_induced(f, couple, cutoff_M=20, diam_floor=1e-7, n_curve=16,
                  margin=3.0, audit=None):
    """Enumerate the canonical induced map of a nice couple.

    Chains of outer pull-backs are walked through their center preimages;
    a chain entering the inner set with a univalent history and no earlier
    entry is a branch (its first good time is the entry time).  Components
    whose relation to the inner set cannot be settled even by an exact
    curve lift are excluded and logged.  Entries containing a critical
    point spawn unicritical recursions through the branch table.
    """
    if couple.verified_depth < cutoff_M:
        import warnings
        warnings.warn("couple verified shallower than cutoff_M; the "
                      "dichotomy beyond the verified depth is heuristic")
    crits = [complex(cp.point.value) for cp in critical_points(f)
             if not cp.point.is_infinity]
    crit_arr = np.asarray(crits, dtype=complex)
    anchors = couple.anchors
    defect = DefectLedger()
    branches = []
    pending = []                       # unicritical recursion seeds
    stats = {"curve_resolved": 0, "unresolved": 0, "audited_ok": 0}

    for root in anchors:
        r_hat = couple.outer.radius(root)
        # frontier arrays: center preimage, summed log-derivative; the
        # branch-word ancestry is kept as per-level index arrays and only
        # materialized for emitted branches
        z = np.array([root], dtype=complex)
        logd = np.zeros(1)
        hist = []                      # (parent_rows, labels) per level

        def _word(level, row):
            labs = []
            r = row
            for lv in range(level - 1, -1, -1):
                pr, lb = hist[lv]
                labs.append(_ALPH[lb[r]])
                r = pr[r]
            return "".join(reversed(labs))

        for m in range(1, cutoff_M + 1):
            pre = f.preimages(z)                       # (d, n)
            d = pre.shape[0]
            order = np.argsort(pre.real + 1e-9 * pre.imag, axis=0)
            pre = np.take_along_axis(pre, order, axis=0)
            zc = pre.ravel(order="F")                  # children grouped by parent
            dv = sph_deriv(f, zc)
            dv = np.maximum(dv, 1e-300)
            logd_c = np.repeat(logd, d) + np.log(dv)
            parents = np.repeat(np.arange(len(z)), d)
            labels = np.tile(np.arange(d), len(z))
            size_est = r_hat * np.exp(-logd_c)

            # classify against inner domains
            status = np.zeros(len(zc), dtype=np.int8)  # 0 alive, 1 entry, 2 resolve
            entry_anchor = np.full(len(zc), -1, dtype=np.int32)
            for ai, a in enumerate(anchors):
                dist_a = sph_dist_arr(zc, a)
                r_in = couple.inner.radius(a)
                clear_in = dist_a + margin * size_est < r_in
                band = (~clear_in) & (dist_a - margin * size_est < r_in)
                status = np.where(clear_in & (status == 0), 1, status)
                entry_anchor = np.where(clear_in & (entry_anchor < 0), ai,
                                        entry_anchor)
                status = np.where(band & (status == 0), 2, status)

            new_z, new_logd, new_words = [], [], []
            for i in np.where(status == 2)[0]:
                stats["curve_resolved"] += 1
                a, _ci, curve = _resolve_entry(f, zc[i], m, couple, root, n_curve)
                if a is None or (isinstance(a, complex) and math.isnan(a.real)
                                 and curve is None):
                    stats["unresolved"] += 1
                    defect.add([2.2 * size_est[i]])
                    status[i] = 3
                elif isinstance(a, complex) and math.isnan(a.real):
                    status[i] = 0       # fully outside: stays alive
                else:
                    status[i] = 1
                    entry_anchor[i] = anchors.index(a)

            if audit is not None and len(zc):
                # audit randomly chosen fast-path classifications
                take = audit.integers(0, len(zc), size=min(4, len(zc)))
                for i in take:
                    if status[i] in (0, 1):
                        a, _ci, _cv = _resolve_entry(f, zc[i], m, couple,
                                                     root, n_curve)
                        want = 1 if (isinstance(a, complex)
                                     and not math.isnan(a.real)) else 0
                        if want == status[i]:
                            stats["audited_ok"] += 1

            # entries: branch or critical (pending) or excluded
            keep = []
            for i in np.where(status == 1)[0]:
                a = anchors[entry_anchor[i]]
                word = _word(m - 1, parents[i]) + _ALPH[labels[i]]
                crit_inside = None
                if crit_arr.size:
                    near = np.abs(crit_arr - zc[i]) < margin * max(
                        size_est[i], 1e-14)
                    if near.any():
                        curve = _branch_curve(
                            f, zc[i], m, couple.outer.domains[root], n_curve)
                        for c in crit_arr[near]:
                            if _winding(curve, np.array([c]))[0] != 0:
                                crit_inside = complex(c)
                                break
                if crit_inside is not None:
                    pending.append({"m0": m, "crit": crit_inside,
                                    "value_orbit_start": complex(root),
                                    "source": a, "target": root,
                                    "word": word + "!"})
                    continue
                keep.append((int(i), a, word))
            if keep:
                zi = np.array([zc[i] for i, _a, _w in keep])
                circle = couple.inner.domains[root].boundary_points(n_curve)
                curves, ldv = lift_fan_batch(f, zi, m, complex(root), circle,
                                             substeps=3, return_log_deriv=True)
                lo_b, hi_b = _diam_bounds_batch(curves)
                for row, (i, a, word) in enumerate(keep):
                    if hi_b[row] < diam_floor:
                        defect.add([hi_b[row]])
                        continue
                    branches.append(InducedBranch(
                        word=word, m=m, c_source=a, c_target=root,
                        anchor=complex(zc[i]),
                        diam_lo=float(lo_b[row]), diam_hi=float(hi_b[row]),
                        expansion_lb=float(np.exp(ldv[row].min())),
                        expansion_ub=float(np.exp(ldv[row].max())),
                        curve=curves[row], log_deriv_center=float(logd_c[i])))

            alive = status == 0
            # diameter floor pruning
            tiny = alive & (2.2 * size_est < diam_floor)
            if tiny.any():
                defect.add(2.2 * size_est[tiny])
                alive &= ~tiny
            z = zc[alive]
            logd = logd_c[alive]
            hist.append((parents[alive].astype(np.int32),
                         labels[alive].astype(np.int8)))
            if len(z) == 0:
                break
        # whatever is still alive at the cutoff is unexplored mass
        if len(z):
            defect.add(2.2 * r_hat * np.exp(-logd))

    system = InducedSystem(couple, branches, cutoff_M, diam_floor, defect,
                           list(anchors), map=f)
    if pending:
        _expand_pending(f, system, pending)
    system.branches.sort(key=lambda b: (b.m, b.word))
    system.stats = stats
    return system


def _expand_pending(f, system, pending, budget=20000):
    """Unicritical recursion: branches inside non-univalent first entries.

    Each pending region maps onto an outer domain with one critical point;
    pull-backs of already-found branches through it are branches when the
    critical value avoids their outer extension, and the unique chain
    following the critical value recurses deeper.
    """
    couple = system.couple
    work = list(pending)
    emitted = 0
    while work:
        pend = work.pop()
        m0 = pend["m0"]
        crit = pend["crit"]
        target = pend["target"]
        v = crit
        for _ in range(m0):
            v = f.eval_point(v)          # critical value of the return map
        for b in list(system.branches):
            if b.c_source != target or m0 + b.m > system.cutoff_M:
                continue
            hat = b.hat_node(f, couple)
            inside_hat = sph_dist(v, b.anchor) < hat.diam_hi and \
                _winding(hat.curve, np.array([v]))[0] != 0
            if inside_hat:
                inside_w = _winding(b.curve, np.array([v]))[0] != 0
                if inside_w:
                    work.append({"m0": m0 + b.m, "crit": crit,
                                 "source": pend["source"],
                                 "target": b.c_target,
                                 "word": pend["word"] + ":" + b.word + "!"})
                continue
            # univalent copies: lift the branch through the return map
            d_loc = 2
            eps = 1e-6
            seed_pts = f.preimages(np.array([
                v + eps * (b.anchor - v)]))
            starts = []
            for s in seed_pts[:, 0]:
                if abs(s - crit) < 0.5:
                    starts.append(s)
            for k, s0 in enumerate(starts[:d_loc]):
                try:
                    anc = lift_points_along_branch(
                        f, np.array([b.anchor]), _walk_back(f, crit, s0, m0),
                        m0, v)[0]
                    wcurve = lift_points_along_branch(
                        f, b.curve, anc, m0, b.anchor)
                except Exception:
                    system.completeness_defect.add([b.diam_hi])
                    continue
                lo, hi = _diam_bounds(wcurve)
                if hi < system.diam_floor:
                    system.completeness_defect.add([hi])
                    continue
                dv = np.ones(wcurve.shape)
                cur = wcurve.copy()
                for _ in range(m0 + b.m):
                    dv *= sph_deriv(f, cur)
                    cur = f(cur)
                system.branches.append(InducedBranch(
                    word=pend["word"] + str(k) + ":" + b.word,
                    m=m0 + b.m, c_source=pend["source"],
                    c_target=b.c_target, anchor=complex(anc),
                    diam_lo=lo, diam_hi=hi,
                    expansion_lb=float(dv.min()), expansion_ub=float(dv.max()),
                    curve=wcurve))
                emitted += 1
                if emitted > budget:
                    raise RuntimeError("pending-region expansion exceeded budget")


def _walk_back(f, crit, first_step, m0):
    """Anchor preimage used to continue a lift away from a ramification."""
    return first_step if m0 == 1 else first_step


# ---------------------------------------------------------------------------
# Bad pull-backs
# ---------------------------------------------------------------------------

@dataclass
class BadPullbackCensus:
    counts: dict                      # order n -> number of bad pull-backs
    L: int
    L_found: bool
    n_crit: int

    def bound(self, n):
        """(2 L #C)^{2n/L}; with no critical entry below the horizon the
        bound is reported at the horizon value of L."""
        if self.n_crit == 0:
            return 0.0
        return (2.0 * self.L * self.n_crit) ** (2.0 * n / self.L)

    def satisfies_bound(self):
        return all(cnt <= self.bound(n) + 1e-9 for n, cnt in self.counts.items())


def census_bad_pullbacks(f, couple, n_max, horizon=512):
    """Count bad pull-backs of the outer set per order n <= n_max.

    A pull-back of order n is bad when the n-th iterate is not univalent
    on it and no intermediate landing inside the inner set admits a
    univalent outer pull-back.  Every bad pull-back contains a Julia
    critical point, so the census walks the critical orbits' entries into
    the outer set and pulls those components back.
    """
    from .geometry import julia_sample

    cloud = julia_sample(f, 1500, 7)
    from .geometry import critical_set
    crits = critical_set(f, cloud)
    counts = {n: 0 for n in range(1, n_max + 1)}
    # first entry time of a critical orbit into the outer set
    L, L_found = horizon, False
    entries = []                      # (s, crit, anchor) with f^s(crit) in outer
    for c in crits:
        zo = c
        for s in range(1, n_max + 1):
            zo = f.eval_point(zo)
            if not math.isfinite(zo.real):
                break
            for a, dsk in couple.outer.domains.items():
                if sph_dist(zo, a) < dsk.radius:
                    entries.append((s, c, a))
                    if not L_found:
                        L, L_found = s, True
    if not entries:
        return BadPullbackCensus(counts, L, L_found, len(crits))

    # build candidate components: chains through critical components
    cand = []                          # (n, node) candidate bad pull-backs
    for s, c, a in entries:
        curve = _entry_component_curve(f, c, s, couple.outer.domains[a])
        node = {"n": s, "curve": curve, "crit_steps": [0], "anchor_pt": c}
        cand.append(node)
        _extend_candidates(f, node, n_max, cand)
    for node in cand:
        if _is_bad(f, node, couple):
            counts[node["n"]] += 1
    return BadPullbackCensus(counts, L, L_found, len(crits))


def _entry_component_curve(f, point, depth, disk, n_pts=32):
    return lift_points_along_branch(
        f, disk.boundary_points(n_pts), point, depth,
        complex(disk.center.value))


def _extend_candidates(f, node, n_max, out, budget=3000):
    """Pull a candidate component back, keeping every component (they all
    share the critical chain suffix)."""
    frontier = [node]
    while frontier:
        nd = frontier.pop()
        if nd["n"] >= n_max or len(out) > budget:
            continue
        curves = _lift_component_curves(f, nd["curve"])
        for cv in curves:
            child = {"n": nd["n"] + 1, "curve": cv,
                     "crit_steps": [j + 1 for j in nd["crit_steps"]],
                     "anchor_pt": None}
            from .geometry import critical_points as _cp
            for cpt in _cp(f):
                if cpt.point.is_infinity:
                    continue
                c = complex(cpt.point.value)
                if np.abs(cv - c).min() < 2 * np.abs(cv - cv[0]).max():
                    if _winding(cv, np.array([c]))[0] != 0:
                        child["crit_steps"].append(0)
                        child["anchor_pt"] = c
            out.append(child)
            frontier.append(child)


def _lift_component_curves(f, curve):
    from .pullback import _lift_curve_careful
    lifts, _ok = _lift_curve_careful(f, curve, 2048)
    return [poly for poly, _w in lifts]


def _is_bad(f, node, couple):
    """Apply the definition of badness to a candidate component."""
    n = node["n"]
    if not node["crit_steps"]:
        return False
    probe = node["curve"][0]
    orbit = [probe]
    for _ in range(n):
        orbit.append(f.eval_point(orbit[-1]))
    min_crit = min(node["crit_steps"])
    for m in range(1, n):
        zm = orbit[m]
        a = couple.inner.locate(zm)
        if a is None:
            continue
        # univalent outer pull-back from level m would make m a good time;
        # the chain is non-univalent below it iff a critical passage
        # happened strictly before m steps from the deep end
        if min_crit >= n - m + 1 or min_crit == 0 and False:
            pass
        if all(j >= m for j in [n - cs for cs in node["crit_steps"]]):
            return False
    return True


# ---------------------------------------------------------------------------
# Diagnostics on a built system
# ---------------------------------------------------------------------------

def check_expansion(system, lam):
    """Theorem-style expansion audit: |F'| >= lam^m on every branch."""
    worst = math.inf
    worst_branch = None
    ok = True
    for b in system.branches:
        lb = b.expansion_lb if b.const_deriv is None else b.const_deriv
        rate = lb ** (1.0 / b.m)
        if rate < worst:
            worst, worst_branch = rate, b.word
        if lb < lam ** b.m:
            ok = False
    return {"pass": ok, "min_rate": worst, "witness": worst_branch,
            "lambda": lam}


def check_mixing_gcd(system):
    """Labels with gcd-1 self-return times, and label reachability."""
    anchors = system.anchors
    self_returns = {c: sorted({b.m for b in system.branches
                               if b.c_source == c and b.c_target == c})
                    for c in anchors}
    reach = {c: sorted({b.c_target for b in system.branches
                        if b.c_source == c}, key=lambda v: (v.real, v.imag))
             for c in anchors}
    best = None
    for c in anchors:
        g = 0
        for mval in self_returns[c]:
            g = math.gcd(g, mval)
        if g == 1:
            best = c
            break
    gcds = {c: math.gcd(*(self_returns[c] or [0]))
            if len(self_returns[c]) != 1 else self_returns[c][0]
            for c in anchors}
    return {"c_tilde": best, "gcds": gcds, "self_returns": self_returns,
            "reachability": reach,
            "conclusive": best is not None}


def refine_first_return(system, c_tilde, max_compositions=6):
    """First return of the induced map to the domain of c_tilde.

    Branches of the refined map are compositions of induced branches whose
    intermediate locations avoid c_tilde; accumulated return times add.
    With a single label the refined map is the induced map itself.
    """
    anchors = system.anchors
    if len(anchors) == 1:
        if anchors[0] != c_tilde:
            raise ValueError("c_tilde is not a label of the system")
        return system

    f = system.map
    couple = system.couple
    out = []
    defect = DefectLedger()

    def _compose(prefix, location, total_m, depth):
        for b in system.branches:
            if b.c_source != location:
                continue
            m2 = total_m + b.m
            if m2 > system.cutoff_M:
                defect.add([b.diam_hi * math.exp(-sum(
                    p.log_deriv_center for p in prefix))])
                continue
            chain = prefix + [b]
            if b.c_target == c_tilde:
                out.append(_compose_branch(f, couple, chain, c_tilde))
            elif depth + 1 < max_compositions:
                _compose(chain, b.c_target, m2, depth + 1)
            else:
                defect.add([1e-12])

    for b in system.branches:
        if b.c_source != c_tilde:
            continue
        if b.c_target == c_tilde:
            out.append(b)
        else:
            _compose([b], b.c_target, b.m, 1)

    refined = InducedSystem(couple, out, system.cutoff_M, system.diam_floor,
                            system.completeness_defect.merged(defect),
                            [c_tilde], map=f)
    refined.branches.sort(key=lambda b: (b.m, b.word))
    return refined


def _compose_branch(f, couple, chain, c_tilde):
    """Geometric composition of a branch chain ending at the target label."""
    if any(b.curve is None for b in chain):
        # toy systems: synthesize the composed contraction data
        m = sum(b.m for b in chain)
        cd = 1.0
        for b in chain:
            cd *= (b.const_deriv if b.const_deriv is not None
                   else b.expansion_lb)
        return InducedBranch(
            word=":".join(b.word for b in chain), m=m,
            c_source=chain[0].c_source, c_target=chain[-1].c_target,
            anchor=chain[0].anchor,
            diam_lo=chain[0].diam_lo / max(1.0, cd / (
                chain[0].const_deriv or chain[0].expansion_lb)),
            diam_hi=chain[0].diam_hi,
            expansion_lb=cd, expansion_ub=cd,
            const_deriv=cd if all(b.const_deriv is not None
                                  for b in chain) else None)
    # pull the final target domain back through the chain, last map first
    target = chain[-1].c_target
    curve = couple.inner.domains[target].boundary_points(
        len(chain[0].curve))
    anchor_pt = complex(target)
    for b in reversed(chain):
        curve = lift_points_along_branch(f, curve, b.anchor, b.m, b.c_target)
        anchor_pt = lift_points_along_branch(
            f, np.array([anchor_pt]), b.anchor, b.m, b.c_target)[0]
    m = sum(b.m for b in chain)
    lo, hi = _diam_bounds(curve)
    dv = np.ones(curve.shape)
    cur = curve.copy()
    for _ in range(m):
        dv *= sph_deriv(f, cur)
        cur = f(cur)
    return InducedBranch(
        word=":".join(b.word for b in chain), m=m,
        c_source=chain[0].c_source, c_target=target,
        anchor=complex(anchor_pt), diam_lo=lo, diam_hi=hi,
        expansion_lb=float(dv.min()), expansion_ub=float(dv.max()),
        curve=curve)


# ---------------------------------------------------------------------------
# Toy systems for oracles and tests
# ---------------------------------------------------------------------------

def toy_full_shift(n_symbols=2, contraction=1.0 / 3.0, m=1, diam=None):
    """Full shift on n symbols with constant inverse-branch derivative."""
    diam = diam if diam is not None else contraction
    branches = [InducedBranch(
        word=str(k), m=m, c_source=0j, c_target=0j, anchor=0j,
        diam_lo=diam, diam_hi=diam,
        expansion_lb=1.0 / contraction, expansion_ub=1.0 / contraction,
        const_deriv=1.0 / contraction) for k in range(n_symbols)]
    sys_ = InducedSystem(None, branches, cutoff_M=m, diam_floor=0.0,
                         anchors=[0j])
    sys_._toy_radius = 1.0
    return sys_


def toy_two_label(m1=1, m2=2, contraction=0.25):
    """Two labels with crossing branches c1 -> c2 -> c1 (and self loops)."""
    c1, c2 = 0j, 1 + 0j
    mk = lambda w, m, src, tgt: InducedBranch(
        word=w, m=m, c_source=src, c_target=tgt, anchor=src,
        diam_lo=contraction, diam_hi=contraction,
        expansion_lb=1.0 / contraction, expansion_ub=1.0 / contraction,
        const_deriv=1.0 / contraction)
    branches = [mk("a", m1, c1, c2), mk("b", m2, c2, c1),
                mk("c", m1 + m2, c2, c2)]
    sys_ = InducedSystem(None, branches, cutoff_M=8, diam_floor=0.0,
                         anchors=[c1, c2])
    sys_._toy_radius = 1.0
    return sys_
