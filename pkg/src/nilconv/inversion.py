"""Neumann-series inversion of grid convolution operators.

For an invertible Op(K), a damping factor eps > 0 makes
S = I - eps Op(K~) Op(K) a contraction; the geometric series in S then
inverts eps Op(K~) Op(K), and composing with Op(K~) gives
Op(K)^{-1} = eps (sum_n S^n) Op(K~).  Everything is assembled on the
kernel side: the partial sums are applied to the discrete delta, whose
image is the kernel of the accumulated operator, and one final
convolution against K~'s kernel yields the inverse kernel.

A rendered operator can be far worse conditioned than its continuum
model: box restriction traps a few directions at small singular values
(any real odd kernel has exact symbol zeros at the mean and Nyquist
frequencies).  Fully inverting those directions amplifies grid
artifacts by 1/sigma, so neumann_invert supports Landweber-style early
stopping: directions with sigma below sigma_max / cond_cap count as
unresolved at this grid, and the series stops before their partial sums
exceed amplification_cap.  Delta kernels and well-conditioned operators
never hit the cap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .convolution import (
    PAIR_BUDGET,
    apply_op,
    boundary_mass_fraction,
    compose_kernels,
    convolve,
    op_norm,
    power_method,
)
from .grid import GridFunction, GridSpec
from .product import ProductGroup
from .kernels import (
    DeltaKernel,
    GridKernel,
    GrowthReport,
    KernelRep,
    TensorKernel,
    adjoint_kernel,
    check_growth,
)
from .seminorms import SeminormConfig, fk_seminorm, pk_seminorm

NOT_INVERTIBLE = "not invertible at this resolution"


def _structured(K: KernelRep, spec: GridSpec) -> KernelRep:
    """Keep fast-path kernel structure; render anything else once."""
    if isinstance(K, (GridKernel, DeltaKernel, TensorKernel)):
        return K
    return K.render(spec)


def _padded_spec(spec: GridSpec, pad_factor: int) -> GridSpec:
    # scaling N and T together keeps every axis spacing identical, so the
    # small lattice is a centered window of the padded one
    return GridSpec(spec.group, pad_factor * spec.N, pad_factor * spec.T)


def _embed_kernel(K: KernelRep, spec: GridSpec, big: GridSpec) -> KernelRep:
    """Zero-extend grid-sampled kernels onto the padded lattice."""
    if isinstance(K, GridKernel):
        lo = big.origin - spec.origin
        vals = np.zeros(big.shape, dtype=complex)
        window = tuple(slice(lo, lo + spec.N) for _ in range(spec.q_total))
        vals[window] = K.values
        return GridKernel(big, vals, principal_value=K.principal_value, mode=K.mode)
    if isinstance(K, TensorKernel):
        parts = []
        for part, factor in zip(K.parts, K.group.factors):
            sub = GridSpec(ProductGroup([factor]), spec.N, spec.T)
            bsub = GridSpec(ProductGroup([factor]), big.N, big.T)
            parts.append(_embed_kernel(part, sub, bsub))
        return TensorKernel(parts)
    return K


def _crop_kernel(L: GridKernel, spec: GridSpec) -> GridKernel:
    big = L.spec
    lo = big.origin - spec.origin
    window = tuple(slice(lo, lo + spec.N) for _ in range(spec.q_total))
    return GridKernel(spec, L.values[window].copy(),
                      principal_value=L.principal_value, mode=L.mode)


def probe_functions(spec: GridSpec, count: int = 3, seed: int = 101,
                    modes: int = 4, band=(0.05, 0.5)) -> list:
    """Seeded band-limited probes of unit L2 norm.

    Random phase gratings under a half-box Gaussian envelope; carrier
    frequencies per axis stay inside band x Nyquist, away from the mean
    and Nyquist parity zeros that a box discretization cannot resolve.
    """
    if count < 1:
        raise ValueError("need at least one probe")
    lo, hi = band
    if not (0.0 < lo < hi <= 1.0):
        raise ValueError("band must satisfy 0 < lo < hi <= 1")
    rng = np.random.default_rng(seed)
    mesh = spec.mesh
    envelope = np.exp(-0.5 * np.sum((mesh / (0.5 * spec.extents)) ** 2, axis=-1))
    out = []
    for _ in range(count):
        vals = np.zeros(spec.shape, dtype=complex)
        for _ in range(modes):
            u = rng.uniform(lo, hi, spec.q_total) * rng.choice([-1.0, 1.0], spec.q_total)
            omega = u * np.pi / spec.spacings
            coeff = rng.normal() + 1j * rng.normal()
            vals = vals + coeff * np.exp(1j * np.sum(omega * mesh, axis=-1))
        f = GridFunction(spec, vals * envelope)
        out.append(f.scaled(1.0 / f.l2_norm()))
    return out


# ---------------------------------------------------------------------------
# damping factor
# ---------------------------------------------------------------------------


def _cg_normal_solve(normal_step, rhs: GridFunction, shift: float,
                     tol: float, max_iter: int):
    """Solve (A~A + shift) x = rhs by conjugate gradients, matrix-free."""
    spec = rhs.spec
    x = spec.zeros()
    r = rhs.copy()
    p = r.copy()
    rs = float(np.real(r.inner(r)))
    rhs_norm = math.sqrt(rs)
    if rhs_norm == 0.0:
        return x, 0
    it = 0
    for it in range(1, max_iter + 1):
        Mp = normal_step(p).plus(p.scaled(shift))
        denom = float(np.real(Mp.inner(p)))
        if denom <= 0.0:
            break
        a = rs / denom
        x = x.plus(p.scaled(a))
        r = r.plus(Mp.scaled(-a))
        rs_new = float(np.real(r.inner(r)))
        if math.sqrt(rs_new) <= tol * rhs_norm:
            rs = rs_new
            break
        p = r.plus(p.scaled(rs_new / rs))
        rs = rs_new
    return x, it


def smallest_singular(K: KernelRep, spec: GridSpec, sigma_max: float | None = None,
                      max_iter: int = 24, tol: float = 1e-8, shift_rel: float = 1e-6,
                      cg_tol: float = 1e-10, cg_max_iter: int = 200,
                      seed: int = 0, budget: int = PAIR_BUDGET) -> dict:
    """Smallest singular value of Op(K) by shifted inverse power iteration.

    Each outer step solves (Op(K~)Op(K) + shift) w = v with conjugate
    gradients; the Rayleigh quotient of the normal operator at w comes
    for free from the solve.  The estimate approaches sigma_min from
    above (Rayleigh quotients of the normal operator never go below the
    bottom eigenvalue), so a slow run only lowers the damping factor
    below the optimum; the contraction survives, at the cost of a
    slightly optimistic predicted rate.  Clustered bottom spectra are
    resolved to a few percent, not to tol; `drift` reports the residual
    eigenvalue movement honestly.
    """
    Kop = _structured(K, spec)
    Kt = adjoint_kernel(Kop)

    def normal(v):
        return apply_op(Kt, apply_op(Kop, v, budget=budget), budget=budget)

    if sigma_max is None:
        sigma_max = op_norm(Kop, spec, seed=seed, budget=budget).value
    if sigma_max == 0.0:
        return {"value": 0.0, "iterations": 0, "cg_iterations": 0,
                "drift": 0.0, "converged": True, "shift": 0.0}

    shift = shift_rel * sigma_max ** 2
    rng = np.random.default_rng(seed)
    v = GridFunction(spec, rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape))
    v = v.scaled(1.0 / v.l2_norm())

    lam = math.inf
    drift = math.inf
    converged = False
    cg_total = 0
    outer = 0
    for outer in range(1, max_iter + 1):
        w, cg_it = _cg_normal_solve(normal, v, shift, cg_tol, cg_max_iter)
        cg_total += cg_it
        wn = w.l2_norm()
        if wn == 0.0:
            lam = 0.0
            converged = True
            break
        # (A~A + shift) w = v  =>  <A~A w, w> = <v, w> - shift |w|^2
        lam_new = (float(np.real(v.inner(w))) - shift * wn ** 2) / wn ** 2
        drift = abs(lam_new - lam) / max(abs(lam_new), 1e-300)
        lam = lam_new
        v = w.scaled(1.0 / wn)
        if drift <= tol:
            converged = True
            break
    return {
        "value": float(math.sqrt(max(lam, 0.0))),
        "iterations": outer,
        "cg_iterations": cg_total,
        "drift": float(drift),
        "converged": converged,
        "shift": float(shift),
    }


@dataclass
class EpsilonChoice:
    """Damping factor with the singular-value estimates behind it."""

    epsilon: float
    sigma_max: float
    sigma_min: float
    s_norm_pred: float
    paper_eps: bool
    sigma_max_info: dict = field(default_factory=dict, repr=False)
    sigma_min_info: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "sigma_max": self.sigma_max,
            "sigma_min": self.sigma_min,
            "s_norm_pred": self.s_norm_pred,
            "paper_eps": self.paper_eps,
            "sigma_max_info": dict(self.sigma_max_info),
            "sigma_min_info": dict(self.sigma_min_info),
        }


def choose_epsilon(K: KernelRep, spec: GridSpec, paper_eps: bool = False,
                   seed: int = 0, budget: int = PAIR_BUDGET,
                   max_iter: int = 80) -> EpsilonChoice:
    """Damping factor making I - eps Op(K~) Op(K) a contraction.

    The default eps = 2 / (sigma_max^2 + sigma_min^2) equalizes the
    contraction rate at both spectral edges; paper_eps selects the plain
    eps = 1 / sigma_max^2, which keeps the remainder positive
    semidefinite at the cost of a slower bottom edge.
    """
    top = op_norm(K, spec, max_iter=max_iter, seed=seed, budget=budget)
    smax = top.value
    bottom = smallest_singular(K, spec, sigma_max=smax, seed=seed, budget=budget)
    smin = bottom["value"]
    if smax == 0.0 or smin < 1e-8 * smax:
        raise ValueError(
            f"{NOT_INVERTIBLE}: sigma_min estimate {smin:.3e} below 1e-08 of "
            f"sigma_max {smax:.3e}"
        )
    if paper_eps:
        eps = 1.0 / smax ** 2
        pred = 1.0 - (smin / smax) ** 2
    else:
        eps = 2.0 / (smax ** 2 + smin ** 2)
        pred = (smax ** 2 - smin ** 2) / (smax ** 2 + smin ** 2)
    return EpsilonChoice(
        epsilon=float(eps),
        sigma_max=float(smax),
        sigma_min=float(smin),
        s_norm_pred=float(pred),
        paper_eps=bool(paper_eps),
        sigma_max_info=top.to_dict(),
        sigma_min_info=bottom,
    )


# ---------------------------------------------------------------------------
# Neumann inversion
# ---------------------------------------------------------------------------


TRACK_FLAG_CAP = "series truncated by the amplification cap (regularized inverse)"
TRACK_FLAG_STALL = "increment stagnates above tol; partial sum returned"


@dataclass
class InversionResult:
    """Inverse kernel with the diagnostics of the run that produced it."""

    kernel: GridKernel
    eps: EpsilonChoice
    n_steps: int
    converged: bool
    flag: str
    step_rel_norms: list
    residuals: list
    tracked: list
    kvec_track: tuple | None
    growth: object
    config: dict

    @property
    def max_residual(self) -> float:
        return max(max(r["right"], r["left"]) for r in self.residuals)

    def to_dict(self) -> dict:
        return {
            "eps": self.eps.to_dict(),
            "n_steps": self.n_steps,
            "converged": self.converged,
            "flag": self.flag,
            "step_rel_norms": [float(v) for v in self.step_rel_norms],
            "residuals": [dict(r) for r in self.residuals],
            "tracked": [dict(t) for t in self.tracked],
            "kvec_track": list(self.kvec_track) if self.kvec_track else None,
            "growth": self.growth.to_dict(),
            "kernel_l2": float(self.kernel.data.l2_norm()),
            "kernel_max_abs": float(self.kernel.data.max_abs()),
            "config": dict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _track_points(max_n: int) -> set:
    pts = set()
    n = 1
    while n <= max_n:
        pts.add(n)
        n *= 2
    return pts


def neumann_invert(K: KernelRep, spec: GridSpec, max_n: int = 64,
                   tol: float = 1e-8, kvec_track=None, *,
                   eps: EpsilonChoice | float | None = None,
                   paper_eps: bool = False,
                   amplification_cap: float | None = None,
                   cond_cap: float = 4.0,
                   pad_factor: int = 1,
                   probes: int = 3, probe_seed: int = 101,
                   cfg: SeminormConfig | None = None,
                   growth_kvec=None, seed: int = 0,
                   budget: int = PAIR_BUDGET) -> InversionResult:
    """Invert Op(K) through the damped Neumann series.

    Accumulates B = sum_{n <= N} S^n applied to the discrete delta and
    returns L = eps * (B convolved with K~'s kernel), so Op(L) realizes
    eps (sum S^n) Op(K~).  Stops when the increment's L2 norm drops to
    tol relative to the delta's, at max_n, or at the amplification cap
    (see module docstring).  Residuals are reported on seeded band
    limited probes, on both sides; the growth report of L quantifies
    whether the inverse satisfies the same kind of growth bounds as K.

    pad_factor > 1 runs the series on a box enlarged by that factor at
    identical spacing and returns the central window of the resulting
    kernel.  The series built in a box accumulates truncation artifacts
    near the boundary; padding moves the boundary away from the window
    that is kept.  Residuals and growth are always measured on the
    requested grid with the returned kernel.

    kvec_track, when set, computes the product-kernel seminorm of the
    S^n kernel at n = 1, 2, 4, 8, ... together with nth roots; the
    kernel of S^n is exactly the n-th increment, so tracking adds no
    extra compositions.
    """
    if max_n < 1:
        raise ValueError("max_n must be at least 1")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    if pad_factor < 1 or int(pad_factor) != pad_factor:
        raise ValueError("pad_factor must be a positive integer")
    Kop = _structured(K, spec)
    work = spec
    Kwork = Kop
    if pad_factor > 1:
        work = _padded_spec(spec, int(pad_factor))
        Kwork = _embed_kernel(Kop, spec, work)
    Kt = adjoint_kernel(Kwork)

    if eps is None:
        eps = choose_epsilon(Kwork, work, paper_eps=paper_eps, seed=seed, budget=budget)
    elif isinstance(eps, (int, float)):
        if amplification_cap is not None:
            raise ValueError("amplification cap needs sigma estimates; "
                             "pass an EpsilonChoice instead of a raw float")
        eps = EpsilonChoice(epsilon=float(eps), sigma_max=math.nan,
                            sigma_min=math.nan, s_norm_pred=math.nan,
                            paper_eps=False)
    ev = eps.epsilon
    if not ev > 0.0:
        raise ValueError("epsilon must be positive")

    n_cap = int(max_n)
    capped = False
    if amplification_cap is not None:
        if amplification_cap <= 0 or cond_cap <= 1:
            raise ValueError("amplification_cap must be positive and cond_cap > 1")
        sigma_ref = max(eps.sigma_min, eps.sigma_max / cond_cap)
        n_reg = max(1, math.ceil(amplification_cap / (ev * sigma_ref)))
        if n_reg < n_cap:
            n_cap = n_reg
            capped = True

    if kvec_track is not None:
        kvec_track = tuple(int(k) for k in kvec_track)
    track_at = _track_points(n_cap) if kvec_track is not None else set()

    delta = work.delta()
    dnorm = delta.l2_norm()
    term = delta.copy()
    accum = delta.copy()
    rels = []
    tracked = []
    converged = False
    n = 0
    for n in range(1, n_cap + 1):
        term = term.plus(apply_op(Kt, apply_op(Kwork, term, budget=budget),
                                  budget=budget).scaled(-ev))
        accum = accum.plus(term)
        rel = term.l2_norm() / dnorm
        rels.append(float(rel))
        if n in track_at:
            rep = pk_seminorm(GridKernel(work, term.values, mode=Kop.mode),
                              work, kvec_track, cfg)
            tracked.append({
                "n": n,
                "seminorm": float(rep.total),
                "op_norm": float(rep.value_for(())),
                "root": float(rep.total ** (1.0 / n)) if rep.total > 0 else 0.0,
            })
        if rel <= tol:
            converged = True
            break

    flag = ""
    if not converged:
        flag = TRACK_FLAG_CAP if capped else TRACK_FLAG_STALL

    ktilde = Kt.render(work)
    L = GridKernel(work, convolve(accum, ktilde.data, budget=budget).values * ev,
                   mode=Kop.mode)
    if pad_factor > 1:
        L = _crop_kernel(L, spec)

    # the true inverse of a self-adjoint operator is self-adjoint; the final
    # box-truncated convolution is the only step breaking that symmetry, and
    # averaging with the adjoint (an L2 isometry on kernels) projects it out
    # without increasing the distance to the true inverse
    kvals = Kwork.render(work).values
    scale = np.abs(kvals).max()
    if scale > 0 and np.abs(kvals - ktilde.values).max() <= 1e-10 * scale:
        Lt = adjoint_kernel(L).render(spec).values
        L = GridKernel(spec, 0.5 * (L.values + Lt), mode=L.mode)

    residuals = []
    for f in probe_functions(spec, count=probes, seed=probe_seed):
        Lf = apply_op(L, f, budget=budget)
        right = apply_op(Kop, Lf, budget=budget).plus(f.scaled(-1.0)).l2_norm()
        Kf = apply_op(Kop, f, budget=budget)
        left = apply_op(L, Kf, budget=budget).plus(f.scaled(-1.0)).l2_norm()
        residuals.append({"right": float(right), "left": float(left)})

    nu = spec.group.nu
    try:
        growth = check_growth(L, spec,
                              kvec=tuple(growth_kvec) if growth_kvec else (1,) * nu)
    except ValueError as exc:
        growth = GrowthReport(mode=L.mode, constants={}, argmax={}, n_samples=0,
                              valid=False, notes=str(exc))

    config = {
        "N": spec.N,
        "T": spec.T,
        "group": spec.group.to_dict(),
        "max_n": int(max_n),
        "tol": float(tol),
        "amplification_cap": amplification_cap,
        "cond_cap": float(cond_cap),
        "pad_factor": int(pad_factor),
        "probes": int(probes),
        "probe_seed": int(probe_seed),
        "seed": int(seed),
        "kvec_track": list(kvec_track) if kvec_track else None,
    }
    return InversionResult(
        kernel=L,
        eps=eps,
        n_steps=n,
        converged=converged,
        flag=flag,
        step_rel_norms=rels,
        residuals=residuals,
        tracked=tracked,
        kvec_track=kvec_track,
        growth=growth,
        config=config,
    )


# ---------------------------------------------------------------------------
# seminorm decay of the remainder powers
# ---------------------------------------------------------------------------


@dataclass
class DecayReport:
    """Seminorms of S^n with nth roots, against the measured |S|."""

    kind: str
    kvec: tuple
    epsilon: float
    s_norm_measured: float
    rows: list
    config: dict

    def sequence(self) -> list:
        return [(r["n"], r["value"], r["root"]) for r in self.rows]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "kvec": list(self.kvec),
            "epsilon": self.epsilon,
            "s_norm_measured": self.s_norm_measured,
            "rows": [dict(r) for r in self.rows],
            "config": dict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def export_csv(self, path):
        cols = ["n", "value", "root", "op_norm", "truncation"]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(str(r[c]) for c in cols))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def seminorm_decay(K: KernelRep, spec: GridSpec, kvec, n_list, *,
                   cfg: SeminormConfig | None = None,
                   eps: EpsilonChoice | float | None = None,
                   kind: str = "pk", seed: int = 0,
                   budget: int = PAIR_BUDGET) -> DecayReport:
    """Seminorms of the Neumann remainder powers S^n at the listed n.

    S^n kernels are formed by repeated kernel composition, so the
    seminorm estimator always sees a grid kernel.  Support spreads with
    each composition; the fraction of L1 mass in the outer shell is
    reported per row as `truncation` to expose grid-resolution
    exhaustion at large n.
    """
    if kind not in ("pk", "fk"):
        raise ValueError("kind must be 'pk' or 'fk'")
    n_list = sorted(set(int(n) for n in n_list))
    if not n_list or n_list[0] < 1:
        raise ValueError("n_list must contain positive integers")

    if eps is None:
        eps = choose_epsilon(K, spec, seed=seed, budget=budget)
    ev = eps.epsilon if isinstance(eps, EpsilonChoice) else float(eps)
    if not ev > 0.0:
        raise ValueError("epsilon must be positive")

    Kop = _structured(K, spec)
    Kt = adjoint_kernel(Kop)
    normal = compose_kernels(Kt, Kop, spec, budget=budget)
    s_vals = DeltaKernel(spec.group).render(spec).values - ev * normal.values
    S1 = GridKernel(spec, s_vals, mode=Kop.mode)

    def s_step(v):
        return apply_op(S1, apply_op(S1, v, budget=budget), budget=budget)

    s_norm = power_method(s_step, spec, seed=seed).value

    estimator = pk_seminorm if kind == "pk" else fk_seminorm
    rows = []
    cur = S1
    m = 1
    for n in n_list:
        while m < n:
            cur = compose_kernels(S1, cur, spec, budget=budget)
            m += 1
        rep = estimator(cur, spec, kvec, cfg)
        val = float(rep.total)
        rows.append({
            "n": n,
            "value": val,
            "root": float(val ** (1.0 / n)) if val > 0 else 0.0,
            "op_norm": float(rep.value_for(())),
            "truncation": float(boundary_mass_fraction(cur.data)),
        })

    config = {
        "N": spec.N,
        "T": spec.T,
        "group": spec.group.to_dict(),
        "kind": kind,
        "seed": int(seed),
        "eps": eps.to_dict() if isinstance(eps, EpsilonChoice) else float(eps),
    }
    return DecayReport(
        kind=kind,
        kvec=tuple(int(k) for k in kvec),
        epsilon=float(ev),
        s_norm_measured=float(s_norm),
        rows=rows,
        config=config,
    )


# ---------------------------------------------------------------------------
# invertible preset construction
# ---------------------------------------------------------------------------


def near_identity_kernel(K: KernelRep, spec: GridSpec, strength: float = 0.45,
                         seed: int = 0, budget: int = PAIR_BUDGET) -> GridKernel:
    """Delta plus a strength-scaled copy of K normalized to unit operator norm.

    The result has singular values inside [1 - strength, 1 + strength],
    hence is invertible with a short Neumann series; it is the standard
    way to turn a synthesized dyadic kernel into an inversion test case.
    """
    if not 0.0 < strength < 1.0:
        raise ValueError("strength must lie in (0, 1)")
    est = op_norm(K, spec, seed=seed, budget=budget)
    if est.value == 0.0:
        raise ValueError("cannot scale a zero operator toward the identity")
    Kr = K.render(spec)
    base = DeltaKernel(spec.group).render(spec).values
    return GridKernel(spec, base + (strength / est.value) * Kr.values, mode=Kr.mode)
