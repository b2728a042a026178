"""Young-tower assembly, invariant measures, and statistical estimators.

The tower sits over the refined first-return system with the induced
conformal measure on its base; projecting the levels by finite orbits
yields the absolutely continuous invariant measure, whose correlation
decay, central-limit behavior, Lyapunov exponent and dimension identity
are estimated by seeded Monte-Carlo over orbit ensembles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import periodic_points, rng_stream, sph_deriv
from .thermo import _branch_jacobian_at

__all__ = [
    "Tower",
    "build_tower",
    "TailCurve",
    "tail",
    "ACIPSample",
    "acip_estimate",
    "CorrelationFit",
    "correlation",
    "CLTResult",
    "clt_test",
    "lyapunov",
    "dimension_identity",
    "entropy_from_tower",
    "HyperbolicityReport",
    "periodic_hyperbolicity",
    "observable",
]


# ---------------------------------------------------------------------------
# Tower
# ---------------------------------------------------------------------------

@dataclass
class Tower:
    system: object                     # refined induced system (single label)
    base_words: list
    base_masses: np.ndarray            # conformal masses of the base cells
    R: np.ndarray                      # return times per cell
    jacobian_C: float
    jacobian_beta: float
    jacobian_fit_residual: float
    gcd_R: int
    exponent: float

    def kac_total(self):
        """Total tower mass before normalization: sum mass * R."""
        return float(np.dot(self.base_masses, self.R))


def _locate_cell(system, pts):
    """Index of the branch cell containing each point (-1 if unresolved)."""
    anchors = np.array([b.anchor for b in system.branches])
    radii = np.array([b.diam_hi for b in system.branches])
    pts = np.atleast_1d(np.asarray(pts, dtype=complex))
    out = np.full(pts.shape, -1, dtype=int)
    for i, p in enumerate(pts):
        d = np.abs(anchors - p)
        j = int(np.argmin(d))
        if d[j] < max(radii[j], 1e-12):
            out[i] = j
    return out


def build_tower(refined, measure, n_pairs=160, max_sep=24, seed=23):
    """Assemble the tower over a single-label refined system.

    Base cells are the refined branches with conformal masses; the
    Jacobian Hoelder bound |Jac(x)/Jac(y) - 1| <= C beta^{s(Tx,Ty)} is
    fitted over sampled same-cell pairs with separation times computed
    from cell itineraries.  A common divisor of the return times beyond 1
    is an error: the mixing machinery needs gcd 1.
    """
    if len(refined.anchors) != 1:
        raise ValueError("tower needs the first-return refinement "
                         "(a single label)")
    words = [b.word for b in refined.branches]
    atom_w = {w: wt for (w, _p, wt) in measure.atoms}
    masses = np.array([atom_w.get(w, 0.0) for w in words])
    if masses.sum() <= 0:
        raise ValueError("measure carries no mass on the refined branches")
    masses = masses / masses.sum()
    R = np.array([b.m for b in refined.branches])
    g = 0
    for r in sorted(set(R.tolist())):
        g = math.gcd(g, int(r))
    if g != 1:
        raise ValueError(f"gcd of return times is {g}, not 1: the "
                         "exponential-mixing machinery does not apply")

    # Jacobian Hoelder fit on same-cell pairs
    f = refined.map
    h = measure.exponent
    rng = rng_stream(seed, "tower-jacobian")
    data = []
    exact = True
    if f is not None and any(b.curve is not None for b in refined.branches):
        big = np.argsort(masses)[::-1][: min(40, len(words))]
        for k in big:
            b = refined.branches[k]
            if b.curve is None:
                continue
            pts = b.curve
            for _ in range(max(1, n_pairs // len(big))):
                i, j = rng.integers(0, len(pts), size=2)
                if i == j:
                    continue
                x, y = complex(pts[i]), complex(pts[j])
                jx = _point_jacobian(f, x, b.m) ** h
                jy = _point_jacobian(f, y, b.m) ** h
                if jy == 0:
                    continue
                ratio = abs(jx / jy - 1.0)
                s = _separation_time(refined, f, f_iter(f, x, b.m),
                                     f_iter(f, y, b.m), max_sep)
                data.append((s, ratio))
                if ratio > 1e-12:
                    exact = False
    if not data or exact:
        C_fit, beta_fit, resid = 0.0, 0.5, 0.0
    else:
        ss = np.array([s for s, r in data if r > 1e-300], dtype=float)
        rr = np.log([r for s, r in data if r > 1e-300])
        if len(ss) >= 4 and np.ptp(ss) > 0:
            A = np.vstack([ss, np.ones_like(ss)]).T
            sol, res, _rk, _sv = np.linalg.lstsq(A, rr, rcond=None)
            beta_fit = float(np.exp(min(sol[0], -1e-6)))
            C_fit = float(np.exp(sol[1]))
            pred = A @ sol
            resid = float(np.sqrt(np.mean((rr - pred) ** 2)) /
                          max(1e-9, np.sqrt(np.mean(rr ** 2))))
        else:
            beta_fit, C_fit, resid = 0.9, float(np.exp(rr).max()), 1.0
    return Tower(system=refined, base_words=words, base_masses=masses,
                 R=R, jacobian_C=C_fit, jacobian_beta=beta_fit,
                 jacobian_fit_residual=resid, gcd_R=g, exponent=h)


def f_iter(f, z, n):
    for _ in range(n):
        z = f.eval_point(z)
    return z


def _point_jacobian(f, z, m):
    dv = 1.0
    cur = z
    for _ in range(m):
        dv *= sph_deriv(f, cur)
        cur = f.eval_point(cur)
    return dv


def _separation_time(system, f, x, y, max_sep):
    for s in range(max_sep):
        cx = _locate_cell(system, [x])[0]
        cy = _locate_cell(system, [y])[0]
        if cx < 0 or cy < 0 or cx != cy:
            return s
        m = system.branches[cx].m
        x, y = f_iter(f, x, m), f_iter(f, y, m)
    return max_sep


# ---------------------------------------------------------------------------
# Tail
# ---------------------------------------------------------------------------

@dataclass
class TailCurve:
    ms: np.ndarray
    masses: np.ndarray                 # m -> mass(R > m), exactly known range
    C2: float
    theta: float
    theta_defect_adjusted: float
    defect: float


def tail(tower):
    """Exponential tail estimate of the return time.

    Fits mass(R > m) = C2 theta^m on the exactly known range; the
    defect-adjusted variant adds the truncation mass to every tail level
    before fitting (an upper series)."""
    Rmax = int(tower.R.max())
    ms = np.arange(0, Rmax)
    masses = np.array([tower.base_masses[tower.R > m].sum() for m in ms])
    defect = tower.system.completeness_defect.mass(tower.exponent)
    known = masses > max(1e-14, 0.5 * defect)
    if known.sum() >= 3:
        A = np.vstack([ms[known], np.ones(known.sum())]).T
        sol, *_ = np.linalg.lstsq(A, np.log(masses[known]), rcond=None)
        theta = float(np.exp(sol[0]))
        C2 = float(np.exp(sol[1]))
        up = np.log(masses[known] + defect)
        sol_up, *_ = np.linalg.lstsq(A, up, rcond=None)
        theta_up = float(np.exp(sol_up[0]))
    else:
        theta = 0.0 if masses[0] == 0 else float(
            (masses[-1] / masses[0]) ** (1.0 / max(1, Rmax)))
        C2 = float(masses[0])
        theta_up = theta
    return TailCurve(ms=ms, masses=masses, C2=C2, theta=theta,
                     theta_defect_adjusted=theta_up, defect=defect)


# ---------------------------------------------------------------------------
# ACIP
# ---------------------------------------------------------------------------

class JuliaLeash:
    """Keeps orbit ensembles on thin Julia sets.

    Transverse rounding noise pushes numerical orbits off the Julia set
    exponentially fast; walkers drifting beyond a locally adaptive
    tolerance are snapped to the nearest point of a reference cloud (an
    O(cloud resolution) pseudo-orbit jump that preserves orbit
    continuity), while genuinely escaped, non-finite or rounding-captured
    walkers are reported for reseeding."""

    def __init__(self, f, seed, n_cloud=4096, escape_radius=8.0):
        from scipy.spatial import cKDTree
        from .geometry import julia_sample
        self.cloud = julia_sample(f, n_cloud, seed)
        xy = np.column_stack([self.cloud.real, self.cloud.imag])
        self.tree = cKDTree(xy)
        dnn, _ = self.tree.query(xy, k=5)
        self.local_scale = np.maximum(dnn[:, 4], 1e-13)
        self.escape_radius = escape_radius

    def snap(self, cur, prev1, prev2, rng):
        """Returns (snapped points, lost mask, n_snapped); `lost` walkers
        (escape / non-finite / captured on a short exact cycle) must be
        reseeded by the caller."""
        lost = ~np.isfinite(cur) | (np.abs(cur) > self.escape_radius)
        if prev1 is not None:
            tol = 1e-13 * (1.0 + np.abs(cur))
            lost |= np.abs(cur - prev1) < tol
            lost |= np.abs(cur - prev2) < tol
        ok = ~lost
        n_snap = 0
        if ok.any():
            pts = cur[ok]
            d, i = self.tree.query(np.column_stack([pts.real, pts.imag]))
            drift = d > 2.0 * self.local_scale[i]
            if drift.any():
                n_snap = int(drift.sum())
                # snap with a tangential jitter so repeated snaps do not
                # concentrate walkers on cloud atoms
                ii = i[drift]
                _d2, nb = self.tree.query(
                    np.column_stack([self.cloud[ii].real,
                                     self.cloud[ii].imag]), k=3)
                tang = self.cloud[nb[:, 1]] - self.cloud[nb[:, 2]]
                mag = np.abs(tang)
                tang = np.where(mag > 0, tang / np.maximum(mag, 1e-300), 1.0)
                jit = tang * rng.uniform(-0.5, 0.5, len(ii)) * \
                    self.local_scale[ii]
                out = pts.copy()
                out[drift] = self.cloud[ii] + jit
                cur = cur.copy()
                cur[ok] = out
        return cur, lost, n_snap


@dataclass
class ACIPSample:
    points: np.ndarray
    weights: np.ndarray
    density_floor: float
    escape_resamples: int
    seed: int
    leash: JuliaLeash = None

    def average(self, func):
        return float(np.dot(self.weights, func(self.points)))

    def resample_points(self, n, rng):
        idx = rng.choice(len(self.points), size=n, p=self.weights)
        return self.points[idx]


def _run_ensemble(f, acip, n_walkers, n_steps, seed, tag, accumulate):
    """Drive a leashed orbit ensemble, calling accumulate(t, points)."""
    rng = rng_stream(seed, tag)
    leash = acip.leash
    cur = acip.resample_points(n_walkers, rng).astype(complex)
    prev1 = cur.copy()
    prev2 = cur.copy()
    lost_total = 0
    for t in range(n_steps):
        prev2, prev1 = prev1, cur
        cur = f(cur)
        if leash is not None:
            cur, lost, _ns = leash.snap(cur, prev1, prev2, rng)
        else:
            lost = ~np.isfinite(cur) | (np.abs(cur) > 8.0)
        nl = int(lost.sum())
        if nl:
            lost_total += nl
            cur[lost] = acip.resample_points(nl, rng)
        accumulate(t, cur)
    return lost_total


def _tower_projection_atoms(f, tower, per_cell=2, seed=101):
    """Seed points of the projected tower measure: every level n < R of
    each base cell, pushed forward from cell samples (Kac weighting).

    Cell representatives are jittered off the anchor: the anchors are
    center preimages, hence preperiodic, and their exact orbits collapse
    onto the critical orbit instead of sampling the cell.
    """
    rng = rng_stream(seed, "tower-projection")
    pts, ws = [], []
    sysb = tower.system.branches
    for k, b in enumerate(sysb):
        w = tower.base_masses[k]
        if w <= 0:
            continue
        # the jitter must survive the rounding at critical passages of the
        # anchor orbit (an exact passage through a critical point would
        # otherwise collapse the seed onto the critical orbit)
        scale = 1e-7 * max(b.diam_lo, 1e-3)
        jit = scale * (rng.standard_normal(per_cell)
                       + 1j * rng.standard_normal(per_cell))
        cur = (b.anchor + jit).astype(complex)
        for n in range(int(b.m)):
            pts.append(cur.copy())
            ws.append(np.full(len(cur), w / len(cur)))
            cur = f(cur)
    p = np.concatenate(pts)
    w = np.concatenate(ws)
    good = np.isfinite(p)
    return p[good], w[good] / w[good].sum()


def acip_estimate(f, tower, n_points, seed, orbit_len=512, burn=24,
                  escape_radius=8.0, reference=None, floor_bins=24,
                  leash_cloud=4096):
    """Invariant-measure sample: tower projection refined by orbits.

    Atoms of the projected tower measure seed Birkhoff orbits whose points
    (after burn-in) form the returned weighted sample; the mixing of the
    orbit ensemble removes the truncation bias of the tower itself.
    Walkers drifting away from a Julia-set reference cloud (numerical
    noise pushes orbits off thin Julia sets) are resampled from the seed
    pool; the drift leash keeps every collected point within cloud
    resolution of the Julia set.  The density floor is measured against a
    reference conformal measure when one is supplied (minimum
    occupied-bin mass ratio).
    """
    if tail(tower).theta >= 1:
        raise ValueError("tail estimate not summable (theta >= 1)")
    rng = rng_stream(seed, "acip")
    seeds_p, seeds_w = _tower_projection_atoms(f, tower)
    leash = JuliaLeash(f, seed, n_cloud=leash_cloud,
                       escape_radius=escape_radius)

    def _seed(n):
        """Fresh walkers: pool seeds jittered along the local direction of
        the Julia cloud, so critical-orbit passages are generically sized
        without leaving thin Julia sets."""
        ridx = rng.choice(len(seeds_p), size=n, p=seeds_w)
        pts0 = seeds_p[ridx]
        _d, nb_ = leash.tree.query(np.column_stack([pts0.real, pts0.imag]),
                                   k=3)
        tang = leash.cloud[nb_[:, 1]] - leash.cloud[nb_[:, 2]]
        mag = np.abs(tang)
        tang = np.where(mag > 0, tang / np.maximum(mag, 1e-300), 1.0)
        scale = leash.local_scale[nb_[:, 0]]
        return pts0 + tang * rng.uniform(-2.0, 2.0, n) * scale

    n_orbits = max(8, int(n_points // orbit_len))
    cur = _seed(n_orbits)
    prev1 = cur.copy()
    prev2 = cur.copy()
    collected = []
    escapes = 0
    for t in range(burn + orbit_len):
        prev2, prev1 = prev1, cur
        cur = f(cur)
        cur, lost, _ns = leash.snap(cur, prev1, prev2, rng)
        nl = int(lost.sum())
        if nl:
            escapes += nl
            cur[lost] = _seed(nl)
        if t >= burn:
            collected.append(cur.copy())
    pts = np.concatenate(collected)[:n_points]
    w = np.full(len(pts), 1.0 / len(pts))

    floor = 0.0
    if reference is not None:
        lo = min(reference.atoms_points.real.min(), pts.real.min())
        hi = max(reference.atoms_points.real.max(), pts.real.max())
        bins = np.linspace(lo, hi, floor_bins + 1)
        ref_mass, _ = np.histogram(reference.atoms_points.real, bins=bins,
                                   weights=reference.atoms_weights)
        acip_mass, _ = np.histogram(pts.real, bins=bins, weights=w)
        sel = ref_mass > 1e-6
        if sel.any():
            floor = float((acip_mass[sel] / ref_mass[sel]).min())
    return ACIPSample(points=pts, weights=w, density_floor=floor,
                      escape_resamples=escapes, seed=seed, leash=leash)


# ---------------------------------------------------------------------------
# Observables
# ---------------------------------------------------------------------------

def observable(name):
    """Named built-in observables on the sphere sample (complex arrays)."""
    if name in ("x", "re"):
        return lambda z: np.real(z)
    if name == "im":
        return lambda z: np.imag(z)
    if name == "abs2":
        return lambda z: np.abs(z) ** 2
    if name == "cheb2":
        return lambda z: np.real(z) ** 2 - 2.0
    if name.startswith("indicator_smooth:"):
        _tag, a, b = name.split(":")
        a, b = float(a), float(b)
        w = 0.1 * (b - a)

        def _ind(z):
            x = np.real(z)
            up = np.clip((x - a) / w, 0.0, 1.0)
            dn = np.clip((b - x) / w, 0.0, 1.0)
            return up * dn
        return _ind
    raise ValueError(f"unknown observable {name!r}")


# ---------------------------------------------------------------------------
# Correlations and the CLT
# ---------------------------------------------------------------------------

@dataclass
class CorrelationFit:
    ns: np.ndarray
    values: np.ndarray
    C: float
    rho_mix: float
    fit_residual: float
    lipschitz_norm: float
    sup_phi: float
    noise_floor: float

    def bound(self, n):
        return self.C * self.sup_phi * self.lipschitz_norm * self.rho_mix ** n


def correlation(f, acip, phi, psi, n_max, n_samples, seed, escape_radius=8.0):
    """Correlation series C(n) and an exponential-decay fit.

    Orbit time averages over an ensemble seeded from the invariant sample
    estimate C(n) = avg[(phi o f^n) psi] - avg[phi] avg[psi]; the
    ensemble-orbit layout keeps the estimator bias at the level of the
    orbit equidistribution rather than the sample truncation.
    """
    if isinstance(phi, str):
        phi = observable(phi)
    if isinstance(psi, str):
        psi = observable(psi)
    rng = rng_stream(seed, "correlation")
    L = 4096
    n_orbits = max(4, int(n_samples // L))
    if n_orbits * L < 1000:
        raise ValueError("fewer than 10^3 effective samples")
    pts_buf = np.empty((n_orbits, L + n_max), dtype=complex)

    def _collect(t, pts):
        pts_buf[:, t] = pts

    _run_ensemble(f, acip, n_orbits, L + n_max, seed, "correlation-orbits",
                  _collect)
    phis = phi(pts_buf)
    psis = psi(pts_buf)
    mphi = float(np.mean(phis))
    mpsi = float(np.mean(psis))
    ns = np.arange(1, n_max + 1)
    vals = np.empty(n_max)
    for n in ns:
        prod = phis[:, n: n + L] * psis[:, :L]
        vals[n - 1] = float(np.mean(prod)) - mphi * mpsi

    # Lipschitz norm of psi over the sample
    samp = acip.resample_points(min(4000, len(acip.points)), rng)
    pv = psi(samp)
    sup_psi = float(np.max(np.abs(pv)))
    i = rng.integers(0, len(samp), 4000)
    j = rng.integers(0, len(samp), 4000)
    dz = np.abs(samp[i] - samp[j])
    ok = dz > 1e-9
    lip = sup_psi + float(np.max(np.abs(pv[i][ok] - pv[j][ok]) / dz[ok]))
    sup_phi = float(np.max(np.abs(phi(samp))))

    noise = 3.0 / math.sqrt(n_orbits * L)
    big = np.abs(vals) > noise
    if big.sum() >= 3:
        A = np.vstack([ns[big], np.ones(big.sum())]).T
        sol, *_ = np.linalg.lstsq(A, np.log(np.abs(vals[big])), rcond=None)
        rho = float(np.exp(min(sol[0], -1e-9)))
        Cf = float(np.exp(sol[1])) / max(sup_phi * lip, 1e-12)
        pred = A @ sol
        resid = float(np.sqrt(np.mean((np.log(np.abs(vals[big])) - pred) ** 2)))
    else:
        rho = 0.5
        Cf = max(noise, float(np.max(np.abs(vals)))) / max(sup_phi * lip, 1e-12)
        resid = 0.0
    return CorrelationFit(ns=ns, values=vals, C=Cf, rho_mix=rho,
                          fit_residual=resid, lipschitz_norm=lip,
                          sup_phi=sup_phi, noise_floor=noise)


@dataclass
class CLTResult:
    sigma_hat: float
    ks_distance: float
    n_birkhoff: int
    n_trials: int
    verdict: str                      # "clt" | "possible coboundary"
    samples: np.ndarray = None


def clt_test(f, acip, psi, n_birkhoff, n_trials, seed, escape_radius=8.0):
    """Histogram of normalized Birkhoff sums against the fitted normal.

    psi is centered by its invariant average; sigma comes from the sample
    variance of S_n / sqrt(n) and the Kolmogorov-Smirnov distance is taken
    to the centered normal with that variance.  A vanishing sigma yields
    the coboundary verdict instead of a KS test.
    """
    if isinstance(psi, str):
        psi = observable(psi)
    # invariant average of psi from a long calibration ensemble
    acc = {"tot": 0.0, "cnt": 0}

    def _cal(t, pts):
        acc["tot"] += float(np.sum(psi(pts)))
        acc["cnt"] += len(pts)

    _run_ensemble(f, acip, 16, 4000, seed, "clt-calibration", _cal)
    mean_psi = acc["tot"] / acc["cnt"]

    S = np.zeros(n_trials)

    def _sum(t, pts):
        S[:] += psi(pts) - mean_psi

    _run_ensemble(f, acip, n_trials, n_birkhoff, seed, "clt-trials", _sum)
    S = S / math.sqrt(n_birkhoff)
    sigma = float(np.std(S))
    if sigma < 1e-3:
        return CLTResult(sigma_hat=sigma, ks_distance=math.nan,
                         n_birkhoff=n_birkhoff, n_trials=n_trials,
                         verdict="possible coboundary", samples=S)
    from scipy.stats import norm
    xs = np.sort(S)
    emp = np.arange(1, n_trials + 1) / n_trials
    theo = norm.cdf(xs, loc=0.0, scale=sigma)
    ks = float(np.max(np.maximum(np.abs(emp - theo),
                                 np.abs(emp - 1.0 / n_trials - theo))))
    return CLTResult(sigma_hat=sigma, ks_distance=ks, n_birkhoff=n_birkhoff,
                     n_trials=n_trials, verdict="clt", samples=S)


# ---------------------------------------------------------------------------
# Lyapunov exponent and the dimension identity
# ---------------------------------------------------------------------------

def lyapunov(f, acip, n_iter, seed=29, n_orbits=64, escape_radius=8.0):
    """Birkhoff average of ln |f'| (spherical) with a standard error."""
    sums = np.zeros(n_orbits)

    def _acc(t, pts):
        dv = sph_deriv(f, pts)
        sums[:] += np.log(np.maximum(dv, 1e-300))

    escapes = _run_ensemble(f, acip, n_orbits, n_iter, seed, "lyapunov", _acc)
    per_orbit = sums / n_iter
    chi = float(np.mean(per_orbit))
    se = float(np.std(per_orbit) / math.sqrt(n_orbits))
    return {"chi_hat": chi, "stderr": se, "escape_resamples": escapes}


def entropy_from_tower(tower):
    """Kac/Rokhlin entropy: (sum mass ln|F'|) / (sum mass R) over cells."""
    sysb = tower.system.branches
    lnF = np.array([
        0.5 * (math.log(max(b.expansion_lb, 1e-300))
               + math.log(max(b.expansion_ub, 1e-300)))
        if b.const_deriv is None else math.log(b.const_deriv)
        for b in sysb])
    num = float(np.dot(tower.base_masses, lnF))
    den = float(np.dot(tower.base_masses, tower.R))
    return num / den


def dimension_identity(chi_hat, h_hat, entropy_estimate):
    """Residual of entropy = dimension * Lyapunov exponent."""
    return abs(entropy_estimate - h_hat * chi_hat)


# ---------------------------------------------------------------------------
# Periodic-orbit hyperbolicity
# ---------------------------------------------------------------------------

@dataclass
class HyperbolicityReport:
    per_period: dict                  # n -> min over repelling of mult^(1/n)
    lambda_per: float
    verdict: str
    failures: list


def periodic_hyperbolicity(f, n_max, margin=0.05, seed=7):
    """Minimum expansion rate over repelling periodic orbits per period."""
    per = {}
    failures = []
    for n in range(1, n_max + 1):
        try:
            pts = periodic_points(f, n, seed=seed)
        except Exception as e:            # root-finder failure is reported
            failures.append((n, str(e)))
            continue
        rates = [p.multiplier ** (1.0 / n) for p in pts
                 if p.period == n and not p.point.is_infinity
                 and p.multiplier > 1.0 + 1e-9]
        if rates:
            per[n] = min(rates)
    lam = min(per.values()) if per else 0.0
    verdict = ("consistent with uniform hyperbolicity on periodic orbits"
               if lam > 1.0 + margin else "no uniform expansion margin")
    return HyperbolicityReport(per_period=per, lambda_per=lam,
                               verdict=verdict, failures=failures)
