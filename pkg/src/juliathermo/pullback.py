"""Pull-back components of disks, their diameters and critical passages.

A component of f^{-n}(D0) is tracked by a closed boundary polyline (the
lift of the boundary of D0), the preimages of the base center it contains,
two-sided diameter estimates and the list of critical points its forward
images pass through.  Rigor level is "heuristic": float sampling with
conservative padding; the certified interval backend is a stub.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    SPHERE_DIAM,
    SphericalDisk,
    critical_points,
    critical_set,
    julia_sample,
    rng_stream,
    sph_deriv,
    sph_diam,
    sph_dist,
    sph_dist_arr,
)

__all__ = [
    "PullbackNode",
    "PullbackTree",
    "PullbackOptions",
    "pullback_components",
    "ExpShrinkEstimate",
    "estimate_expshrink",
    "BackwardContractionTrace",
    "backward_contraction_trace",
    "koebe_distortion",
    "lift_points_along_branch",
]


@dataclass
class PullbackOptions:
    n_boundary: int = 64          # boundary samples per disk
    max_refine: int = 4096        # hard cap on per-curve refinement
    chunk: int = 4096             # parents processed per vectorized block
    keep_curves: bool = True
    rigor: str = "heuristic"      # "certified" reserved for an interval backend
    check_precondition: bool = True
    julia_cloud: np.ndarray | None = None
    seed: int = 7

    def __post_init__(self):
        if self.rigor == "certified":
            raise NotImplementedError(
                "certified rigor level is a hook for an interval-arithmetic "
                "backend and is not implemented in this version")
        if self.rigor != "heuristic":
            raise ValueError(f"unknown rigor level {self.rigor!r}")


@dataclass
class PullbackNode:
    """One connected component of f^{-depth}(D0)."""

    word: str
    depth: int
    center_preimages: np.ndarray          # preimages of the base center inside
    diam_lo: float
    diam_hi: float
    univalent: bool
    crit_trace: tuple                     # ((step j, critical point), ...)
    mapping_degree: int = 1               # degree of f^depth onto D0
    unresolved_merge: bool = False
    curve: np.ndarray | None = None       # closed boundary polyline
    parent: "PullbackNode | None" = None

    def anchor(self):
        return complex(self.center_preimages[0])

    def to_json(self):
        return {
            "word": self.word,
            "depth": self.depth,
            "diam_lo": self.diam_lo,
            "diam_hi": self.diam_hi,
            "univalent": self.univalent,
            "crit_trace": [[j, [c.real, c.imag]] for j, c in self.crit_trace],
        }


@dataclass
class PullbackTree:
    base: SphericalDisk
    levels: list                          # levels[k] = nodes of depth k
    unresolved_count: int = 0

    def nodes(self, depth=None):
        if depth is None:
            return [nd for lvl in self.levels[1:] for nd in lvl]
        return self.levels[depth]

    def write_jsonl(self, fh):
        for lvl in self.levels[1:]:
            for nd in lvl:
                fh.write(json.dumps(nd.to_json()) + "\n")


# ---------------------------------------------------------------------------
# Curve lifting
# ---------------------------------------------------------------------------

def _lift_block(f, curves):
    """Lift a block of closed curves one f-step, in lockstep.

    curves: (nc, M) closed polylines.  Returns per-curve thread paths
    (nc, d, M), an arrival permutation (nc, d) matching threads to starting
    fiber indices, and an "ambiguous" flag per curve.
    """
    nc, M = curves.shape
    d = f.degree
    fib0 = f.preimages(curves[:, 0]).T          # (nc, d)
    threads = fib0.copy()
    paths = np.empty((nc, d, M), dtype=complex)
    paths[:, :, 0] = threads
    flag = np.zeros(nc, dtype=bool)
    for j in range(1, M + 1):
        cand = f.preimages(curves[:, j % M]).T  # (nc, d)
        dist = np.abs(threads[:, :, None] - cand[:, None, :])
        pick = dist.argmin(axis=2)              # (nc, d)
        step = np.take_along_axis(dist, pick[:, :, None], 2)[:, :, 0]
        if d > 1:
            srt = np.sort(dist, axis=2)
            second = srt[:, :, 1]
            flag |= np.any(step > 0.6 * second + 1e-300, axis=1)
            # collision: two threads choosing one candidate
            flag |= np.any(np.sort(pick, axis=1)[:, 1:] == np.sort(pick, axis=1)[:, :-1],
                           axis=1)
        chosen = np.take_along_axis(cand, pick, axis=1)
        if j < M:
            paths[:, :, j] = chosen
        threads = chosen
    # match arrivals back to the starting fiber
    dist = np.abs(threads[:, :, None] - fib0[:, None, :])
    perm = dist.argmin(axis=2)
    flag |= np.any(np.sort(perm, axis=1)[:, 1:] == np.sort(perm, axis=1)[:, :-1], axis=1)
    return paths, perm, flag


def _lift_curve_careful(f, curve, max_pts):
    """Per-curve adaptive lift with segment bisection near branch collisions.

    Returns (list of (polyline, wraps), ok).  ok=False when the refinement
    budget is exhausted while branches stay ambiguous.
    """
    d = f.degree
    base = list(curve)
    fib0 = np.sort_complex(f.preimages(np.array([base[0]]))[:, 0])
    used = [False] * d
    lifts = []
    ok = True
    for s in range(d):
        if used[s]:
            continue
        pts = [fib0[s]]
        wraps = 0
        idx = 0
        total = 0
        while True:
            nxt = (idx + 1) % len(base)
            target = base[nxt]
            cur = pts[-1]
            seg = [(base[idx], target)]
            # adaptive: bisect the image segment until the lift step is safe
            while seg:
                a, b = seg.pop()
                cand = f.preimages(np.array([b]))[:, 0]
                dd = np.abs(cand - cur)
                order = np.argsort(dd)
                safe = d == 1 or dd[order[0]] < 0.5 * dd[order[1]]
                if not safe and total < max_pts:
                    mid = 0.5 * (a + b)
                    seg.append((mid, b))
                    seg.append((a, mid))
                    total += 1
                    continue
                if not safe:
                    ok = False
                cur = cand[order[0]]
                pts.append(cur)
            idx = nxt
            if idx == 0:
                wraps += 1
                dd = np.abs(fib0 - pts[-1])
                arr = int(np.argmin(dd))
                if arr == s or wraps >= d:
                    break
                used[arr] = True
        pts = pts[:-1]
        used[s] = True
        lifts.append((np.asarray(pts, dtype=complex), wraps))
    return lifts, ok


def _winding(closed, points):
    """Winding numbers of a closed polyline around each point."""
    pts = np.atleast_1d(np.asarray(points, dtype=complex))
    v = closed[None, :] - pts[:, None]
    ang = np.angle(v[:, np.append(np.arange(1, closed.shape[0]), 0)] / v)
    return np.rint(ang.sum(axis=1) / (2.0 * math.pi)).astype(int)


_DIAM_DIRS = np.exp(-1j * math.pi * np.arange(12) / 12)
_DIAM_SLACK = 1.0 / math.cos(math.pi / 24)


def _diam_bounds_batch(curves):
    """Vectorized (lower, upper) spherical diameter bounds; curves (n, M)."""
    n, M = curves.shape
    proj = np.real(np.multiply.outer(_DIAM_DIRS, curves).transpose(1, 0, 2))  # (n,K,M)
    idx = np.concatenate([proj.argmax(2), proj.argmin(2)], axis=1)            # (n,2K)
    cands = np.take_along_axis(curves, idx, axis=1)
    a = cands[:, :, None]
    b = cands[:, None, :]
    q = np.abs(a - b) / np.sqrt((1.0 + np.abs(a) ** 2) * (1.0 + np.abs(b) ** 2))
    lo = np.arcsin(np.minimum(1.0, q)).max(axis=(1, 2))
    edges = np.abs(curves - np.roll(curves, 1, axis=1)).max(axis=1)
    scale = 1.0 / (1.0 + np.abs(curves).min(axis=1) ** 2)
    hi = lo * _DIAM_SLACK + edges * scale
    return lo, np.maximum(hi, lo)


def _diam_bounds(verts, wraps_hint=1):
    """(lower, upper) spherical diameter bounds from polyline vertices.

    The diameter pair is located by rotating projections (the true
    direction is within pi/12 of a probe, giving a 0.9% upper slack), then
    measured exactly in the spherical metric; the upper bound adds the
    longest polyline edge to cover bulges between samples.
    """
    proj = np.real(np.multiply.outer(_DIAM_DIRS, verts))       # (K, L)
    cand_idx = np.unique(np.concatenate([proj.argmax(1), proj.argmin(1)]))
    cands = verts[cand_idx]
    lo = sph_diam(cands)
    edges = np.abs(verts - np.roll(verts, 1))
    scale = 1.0 / (1.0 + float(np.min(np.abs(verts))) ** 2)
    hi = lo * _DIAM_SLACK + float(edges.max()) * scale
    return lo, max(hi, lo)


def _assemble_children(f, parent, paths, perm, flagged, crit_pts, opts, label_offset=0):
    """Build child nodes of one parent from lifted thread paths."""
    d = f.degree
    children = []
    if flagged:
        lifts, ok = _lift_curve_careful(f, parent.curve, opts.max_refine)
        if not ok:
            # refinement budget exhausted: single merged, flagged node
            verts = np.concatenate([lf[0] for lf in lifts])
            lo, hi = _diam_bounds(verts)
            pre = f.preimages(parent.center_preimages).T.ravel()
            node = PullbackNode(
                word=parent.word + "?", depth=parent.depth + 1,
                center_preimages=pre, diam_lo=lo, diam_hi=hi,
                univalent=False, crit_trace=_shift_trace(parent, ()),
                mapping_degree=d * parent.mapping_degree,
                unresolved_merge=True,
                curve=verts, parent=parent)
            return [node]
        curves = lifts
    else:
        # decompose the arrival permutation into cycles
        curves = []
        seen = [False] * d
        for s in range(d):
            if seen[s]:
                continue
            cyc = [s]
            seen[s] = True
            t = int(perm[s])
            while t != s:
                cyc.append(t)
                seen[t] = True
                t = int(perm[t])
            poly = np.concatenate([paths[t] for t in cyc])
            curves.append((poly, len(cyc)))

    # preimages of the parent's center points, to be claimed by winding
    pre = f.preimages(parent.center_preimages)      # (d, ncen)
    pre_flat = pre.T.ravel()
    claimed = np.zeros(pre_flat.shape, dtype=bool)

    order = sorted(range(len(curves)),
                   key=lambda i: (curves[i][0][np.lexsort(
                       (curves[i][0].imag, curves[i][0].real))[0]].real,
                       curves[i][0][np.lexsort(
                           (curves[i][0].imag, curves[i][0].real))[0]].imag))
    for lab, i in enumerate(order):
        poly, wraps = curves[i]
        w = _winding(poly, pre_flat)
        inside = (w != 0) & ~claimed
        claimed |= inside
        centers = pre_flat[inside]
        if centers.size == 0:
            # every component of the fiber carries at least one center
            # preimage; treat as unresolved rather than dropping it
            centers = poly[:1]
        lo, hi = _diam_bounds(poly, wraps)
        # critical points inside this component
        trace_new = []
        radius_cap = hi
        for c in crit_pts:
            if abs(c - poly[0]) < radius_cap + 2.0 * np.abs(poly - c).min():
                if _winding(poly, np.array([c]))[0] != 0:
                    trace_new.append((0, c))
        node = PullbackNode(
            word=parent.word + _label(label_offset + lab),
            depth=parent.depth + 1,
            center_preimages=centers,
            diam_lo=lo, diam_hi=hi,
            univalent=parent.univalent and not trace_new,
            crit_trace=_shift_trace(parent, trace_new),
            mapping_degree=wraps * parent.mapping_degree,
            unresolved_merge=False,
            curve=poly,
            parent=parent)
        children.append(node)
    if not claimed.all():
        # leftover center preimages: attach to nearest child, flag it
        for p in pre_flat[~claimed]:
            best = min(children, key=lambda nd: np.abs(nd.curve - p).min()
                       if nd.curve is not None else math.inf)
            best.center_preimages = np.append(best.center_preimages, p)
            best.unresolved_merge = True
    return children


_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz"


def _label(i):
    return _ALPHABET[i] if i < len(_ALPHABET) else f"({i})"


def _shift_trace(parent, new_events):
    shifted = tuple((j + 1, c) for j, c in parent.crit_trace)
    return tuple(new_events) + shifted


def _check_disk_precondition(f, disk, opts):
    """The base disk must avoid forward orbits of critical points off J(f).

    A critical point already inside the disk is tolerated (its passage is
    visible in the output); the check rejects off-Julia critical orbits
    that enter the disk from outside within the horizon.
    """
    cloud = opts.julia_cloud
    if cloud is None:
        cloud = julia_sample(f, 1500, opts.seed)
    crits = critical_points(f, cloud)
    for cp in crits:
        if cp.in_julia_set or cp.point.is_infinity:
            continue
        z = complex(cp.point.value)
        if sph_dist(z, disk.center) < disk.radius:
            continue
        for _ in range(64):
            z = f.eval_point(z)
            if not math.isfinite(z.real):
                break
            if sph_dist(z, disk.center) < disk.radius:
                raise ValueError(
                    "base disk meets the forward orbit of a critical point "
                    "outside the Julia set")


def pullback_components(f, disk, n, opts=None):
    """Connected components of f^{-k}(disk) for k = 1..n, as a PullbackTree.

    Components are identified through closed lifts of the boundary
    polyline; center-preimage branches sharing a lift share a component.
    Ambiguities that survive the refinement budget yield nodes flagged
    unresolved_merge (never silently split).
    """
    opts = opts or PullbackOptions()
    if opts.check_precondition:
        _check_disk_precondition(f, disk, opts)
    # univalence concerns every critical point of f, not only Julia ones
    crit_pts = [complex(cp.point.value) for cp in critical_points(f)
                if not cp.point.is_infinity]

    base_curve = disk.boundary_points(opts.n_boundary)
    root = PullbackNode(
        word="", depth=0,
        center_preimages=np.array([complex(disk.center.value)]),
        diam_lo=2 * disk.radius * 0.99, diam_hi=2 * disk.radius,
        univalent=True, crit_trace=(), mapping_degree=1,
        curve=base_curve, parent=None)
    levels = [[root]]
    unresolved = 0
    cap = 8 * opts.n_boundary
    for _k in range(n):
        parents = levels[-1]
        children = []
        by_len = {}
        for p in parents:
            if len(p.curve) > cap:          # decimate oversized wrapped curves
                stride = int(math.ceil(len(p.curve) / cap))
                p.curve = p.curve[::stride]
            by_len.setdefault(len(p.curve), []).append(p)
        crit_arr = np.asarray(crit_pts, dtype=complex)
        for _L, group in sorted(by_len.items()):
            for lo in range(0, len(group), opts.chunk):
                block = group[lo: lo + opts.chunk]
                curves = np.stack([p.curve for p in block])
                paths, perm, flag = _lift_block(f, curves)
                nc, d, M = paths.shape
                # fast path: clean identity permutation, single tracked
                # center, and no critical point within reach of a child
                fast = (~flag) & np.all(perm == np.arange(d)[None, :], axis=1)
                fast &= np.array([len(p.center_preimages) == 1 for p in block])
                flat = paths.reshape(nc * d, M)
                lo_b, hi_b = _diam_bounds_batch(flat)
                if crit_arr.size:
                    dmin = np.min(np.abs(flat[:, :, None] - crit_arr[None, None, :]),
                                  axis=(1, 2)).reshape(nc, d)
                    fast &= np.all(dmin > 1.2 * hi_b.reshape(nc, d), axis=1)
                cen = np.stack([p.center_preimages[0] for p in block])
                pre_c = f.preimages(cen)                 # (d, nc)
                # match center preimages to threads by distance to the curve
                dd = np.abs(pre_c.T[:, :, None, None] - paths[:, None, :, ::4])
                owner = dd.min(axis=3).argmin(axis=2)    # (nc, d): thread per preimage
                fast &= np.array([np.array_equal(np.sort(owner[i]), np.arange(d))
                                  for i in range(nc)])
                keymin = np.argmin(flat.real + 1e-9 * flat.imag, axis=1)
                keys = flat[np.arange(nc * d), keymin].reshape(nc, d)
                for i, par in enumerate(block):
                    if fast[i]:
                        order = np.argsort(keys[i].real + 1e-9 * keys[i].imag)
                        trace = _shift_trace(par, ())
                        for lab, t in enumerate(order):
                            src = int(np.where(owner[i] == t)[0][0])
                            children.append(PullbackNode(
                                word=par.word + _label(lab),
                                depth=par.depth + 1,
                                center_preimages=pre_c[src: src + 1, i].copy(),
                                diam_lo=float(lo_b[i * d + t]),
                                diam_hi=float(hi_b[i * d + t]),
                                univalent=par.univalent,
                                crit_trace=trace,
                                mapping_degree=par.mapping_degree,
                                curve=paths[i, t],
                                parent=par))
                    else:
                        kids = _assemble_children(
                            f, par, paths[i], perm[i], bool(flag[i]),
                            crit_pts, opts)
                        children.extend(kids)
        if not opts.keep_curves and levels[-1][0].depth > 0:
            for p in parents:
                p.curve = None
        unresolved += sum(1 for c in children if c.unresolved_merge)
        children.sort(key=lambda nd: nd.word)
        levels.append(children)
    if not opts.keep_curves:
        for nd in levels[-1]:
            nd.curve = None
    return PullbackTree(disk, levels, unresolved)


# ---------------------------------------------------------------------------
# ExpShrink estimation
# ---------------------------------------------------------------------------

@dataclass
class ExpShrinkEstimate:
    lambda_hat: float
    r0: float
    depth: int
    samples: int
    worst_witness: tuple                  # (center, n, word)
    n_min: int = 4
    unresolved_merges: int = 0
    per_depth_max_diam: dict = field(default_factory=dict)


def estimate_expshrink(f, r0, depth, n_samples, seed, opts=None, threads=1,
                       n_min=4):
    """Empirical ExpShrink rate from pull-backs at Julia-sample centers.

    lambda_hat = exp(min over centers x and depths n >= n_min of
    -(1/n) ln max_W diam_hi(W)) for components W of f^{-n}(B(x, r0)).
    Transient depths below n_min are discarded.  Centers are processed
    independently; with threads > 1 results are reduced in center order,
    so the estimate is scheduler-independent.
    """
    opts = opts or PullbackOptions(n_boundary=24, keep_curves=False)
    cloud = julia_sample(f, max(1500, 2 * n_samples), seed)
    opts.julia_cloud = cloud
    centers = cloud[rng_stream(seed, "expshrink-centers").choice(
        len(cloud), size=n_samples, replace=False)]

    def _one(x):
        tree = pullback_components(f, SphericalDisk(x, r0), depth, opts)
        rows = []
        for k in range(n_min, depth + 1):
            nodes = tree.levels[k]
            if nodes:
                nd = max(nodes, key=lambda v: v.diam_hi)
                rows.append((k, nd.diam_hi, nd.word))
        return tree.unresolved_count, rows

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_one, centers))
    else:
        results = [_one(x) for x in centers]

    best = math.inf
    witness = None
    unresolved = 0
    per_depth = {}
    for x, (unres, rows) in zip(centers, results):
        unresolved += unres
        for k, dh, word in rows:
            per_depth[k] = max(per_depth.get(k, 0.0), dh)
            rate = -math.log(dh) / k
            if rate < best:
                best = rate
                witness = (complex(x), k, word)
    return ExpShrinkEstimate(
        lambda_hat=math.exp(best), r0=r0, depth=depth, samples=n_samples,
        worst_witness=witness, unresolved_merges=unresolved,
        per_depth_max_diam=per_depth, n_min=n_min)


# ---------------------------------------------------------------------------
# Backward-contraction traces
# ---------------------------------------------------------------------------

@dataclass
class BackwardContractionTrace:
    delta: float
    lam: float
    alpha2: float
    steps: list                            # [(j, m_j, c_j, delta_j)] witness chain
    terminated: bool
    delta_of_c: dict                       # c -> max delta_j over chains
    returns_to_start: list                 # (m, dist(c0, nearest m-preimage of c0))


def backward_contraction_trace(f, c0, delta, lam, alpha2, max_steps, opts=None):
    """Reproduce the backward-contraction induction from a critical point.

    Following successive pull-backs of B(c0, delta): along every chain, with
    delta_0 = delta and m_0 = 0, m_j is the least time after m_{j-1} at which
    delta_j := lam^{m_j} delta^{-j alpha2} diam(W_{m_j}) exceeds the distance
    of W_{m_j} to some Julia critical point c_j (ties broken by minimal
    distance).  Reports the chain realizing the largest delta_j and the
    per-critical-point maxima delta(c).
    """
    if not lam > 1.0:
        raise ValueError("lambda must exceed 1")
    opts = opts or PullbackOptions(n_boundary=32)
    cloud = opts.julia_cloud
    if cloud is None:
        cloud = julia_sample(f, 1500, opts.seed)
        opts.julia_cloud = cloud
    crit_pts = critical_set(f, cloud)
    c0 = complex(c0)
    if min(abs(c0 - c) for c in crit_pts) > 1e-9:
        raise ValueError("c0 is not a Julia critical point")

    tree = pullback_components(f, SphericalDisk(c0, delta), max_steps, opts)
    # per-node chain state: (j, events tuple)
    state = {id(tree.levels[0][0]): (0, ())}
    best = (-math.inf, ())
    delta_of_c = {c: delta for c in crit_pts}   # j = 0 event at the start
    last_event_depth = 0
    returns = {}
    for k in range(1, max_steps + 1):
        for nd in tree.levels[k]:
            j, events = state[id(nd.parent)]
            dists = [min(float(np.min(sph_dist_arr(nd.curve, c))),
                         float(np.min(sph_dist_arr(nd.center_preimages, c))))
                     for c in crit_pts]
            # track closest m-step preimage of c0 to c0 itself
            i0 = crit_pts.index(c0) if c0 in crit_pts else int(
                np.argmin([abs(c - c0) for c in crit_pts]))
            dmin = float(np.min(sph_dist_arr(nd.center_preimages, c0)))
            returns[k] = min(returns.get(k, math.inf), dmin)
            dj = (lam ** k) * delta ** (-(j + 1) * alpha2) * nd.diam_hi
            hit = [i for i, dist_c in enumerate(dists) if dj > dist_c]
            if hit:
                ci = min(hit, key=lambda i: dists[i])
                events = events + ((j + 1, k, crit_pts[ci], dj),)
                j = j + 1
                last_event_depth = max(last_event_depth, k)
                c = crit_pts[ci]
                delta_of_c[c] = max(delta_of_c[c], dj)
                if dj > best[0]:
                    best = (dj, events)
            state[id(nd)] = (j, events)
            _ = i0
        # free parent states
        for nd in tree.levels[k - 1]:
            state.pop(id(nd), None)

    window = max(2, max_steps // 5)
    terminated = last_event_depth <= max_steps - window
    steps = [(0, 0, c0, delta)] + [list(ev) for ev in (best[1] or ())]
    return BackwardContractionTrace(
        delta=delta, lam=lam, alpha2=alpha2, steps=steps,
        terminated=terminated, delta_of_c=delta_of_c,
        returns_to_start=sorted(returns.items()))


# ---------------------------------------------------------------------------
# Branch point lifting and Koebe distortion measurement
# ---------------------------------------------------------------------------

def lift_fan_batch(f, anchors, depth, base_center, targets, substeps=6,
                   return_log_deriv=False):
    """Batched inverse-branch lift of a shared target fan.

    anchors: (nb,) points with f^depth(anchor) = base_center; targets:
    (nt,) points near base_center.  Lifts every target through every
    anchored branch by continuation along straight rays from the base
    center.  Returns (nb, nt); with return_log_deriv also the summed
    log spherical derivative of f^depth at the lifted points.
    """
    anchors = np.asarray(anchors, dtype=complex)
    targets = np.asarray(targets, dtype=complex)
    nb, nt = anchors.shape[0], targets.shape[0]
    if depth == 0:
        out0 = np.broadcast_to(targets, (nb, nt)).copy()
        return (out0, np.zeros((nb, nt))) if return_log_deriv else out0
    orbits = np.empty((depth + 1, nb), dtype=complex)
    orbits[0] = anchors
    for j in range(depth):
        orbits[j + 1] = f(orbits[j])
    ts = np.linspace(0.0, 1.0, substeps + 1)[1:]
    rays = base_center + np.multiply.outer(targets - base_center, ts)  # (nt, S)
    cur_cols = np.broadcast_to(rays, (nb, nt, substeps)).copy()
    logdv = np.zeros((nb, nt)) if return_log_deriv else None
    for step in range(depth):
        drop = depth - step - 1
        prev = np.repeat(orbits[drop], nt)          # branch anchor at this level
        out = np.empty((nb * nt, substeps), dtype=complex)
        flat = cur_cols.reshape(nb * nt, substeps)
        for s in range(substeps):
            cand = f.preimages(flat[:, s])          # (d, nb*nt)
            pick = np.abs(cand - prev[None, :]).argmin(axis=0)
            prev = cand[pick, np.arange(nb * nt)]
            out[:, s] = prev
        cur_cols = out.reshape(nb, nt, substeps)
        if return_log_deriv:
            logdv += np.log(np.maximum(
                sph_deriv(f, cur_cols[:, :, -1]), 1e-300))
    if return_log_deriv:
        return cur_cols[:, :, -1], logdv
    return cur_cols[:, :, -1]


def lift_points_along_branch(f, targets, anchor, depth, base_center, substeps=8):
    """Pull target points back along the inverse branch through `anchor`.

    anchor is a point with f^depth(anchor) = base_center; the branch of
    f^{-depth} sending base_center to anchor is continued along straight
    segments from base_center to each target (a fan, lifted column by
    column).  Returns the lifted targets.
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=complex))
    orbit = [complex(anchor)]
    for _ in range(depth):
        orbit.append(f.eval_point(orbit[-1]))
    # columns of the fan in the image: base_center -> target
    ts = np.linspace(0.0, 1.0, substeps + 1)[1:]
    cols = base_center + np.multiply.outer(targets - base_center, ts)  # (nt, S)
    lifted_prev = None
    for step in range(depth):
        drop = depth - step - 1
        anchor_here = orbit[drop]          # exact branch point at this level
        img_anchor = orbit[drop + 1]
        if step == 0:
            img_cols = cols
        else:
            img_cols = lifted_prev
        out = np.empty_like(img_cols)
        prev = np.full(img_cols.shape[0], anchor_here, dtype=complex)
        _ = img_anchor
        for s in range(img_cols.shape[1]):
            cand = f.preimages(img_cols[:, s])      # (d, nt)
            dist = np.abs(cand - prev[None, :])
            pick = dist.argmin(axis=0)
            prev = cand[pick, np.arange(img_cols.shape[0])]
            out[:, s] = prev
        lifted_prev = out
    return lifted_prev[:, -1] if depth > 0 else targets


def koebe_distortion(f, node, eps, n_interior=6, base_disk=None):
    """Measured distortion sup/inf of |(f^n)'| over W(eps).

    W(eps) is the preimage in the node's component of the eps-shrunk base
    disk.  Samples sit on a fixed global radial grid restricted to radius
    <= eps, so shrinking eps shrinks the sample set monotonically.
    """
    if not node.univalent:
        raise ValueError("koebe_distortion requires a univalent node")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if base_disk is None:
        raise ValueError("base_disk (the pulled-back disk) is required")
    ce, re_, _ = base_disk.euclidean_circle()
    radii = np.linspace(1.0 / n_interior, 1.0, n_interior)
    radii = radii[radii <= eps + 1e-12]
    if radii.size == 0 or abs(radii[-1] - eps) > 1e-9:
        radii = np.append(radii, eps)
    th = 2.0 * math.pi * np.arange(16) / 16
    pts = (ce + np.multiply.outer(radii * re_, np.exp(1j * th))).ravel()
    pts = np.append(pts, ce)
    anchor = node.anchor()
    lifted = lift_points_along_branch(
        f, pts, anchor, node.depth, complex(base_disk.center.value))
    dv = np.ones(lifted.shape, dtype=float)
    cur = lifted.copy()
    for _ in range(node.depth):
        dv *= sph_deriv(f, cur)
        cur = f(cur)
    dv = dv[np.isfinite(dv) & (dv > 0)]
    return float(dv.max() / dv.min())
