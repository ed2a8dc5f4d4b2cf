"""Acceptance gate: one test per criterion, each printing a PASS line.

Every test enforces its stated tolerance and runtime budget; failures
surface through plain asserts so a red run names the criterion that broke.
"""

import time
from itertools import product as iproduct

import numpy as np

from nilconv.convolution import apply_op, convolve
from nilconv.grid import GridFunction, GridSpec, zero_lowest_face
from nilconv.groups import abelian, heisenberg1
from nilconv.inversion import near_identity_kernel, neumann_invert, seminorm_decay
from nilconv.kernels import (
    DeltaKernel,
    DiscreteHilbertKernel,
    GridKernel,
    TensorKernel,
    synth_dyadic,
)
from nilconv.product import MultiIndex, ProductGroup
from nilconv.seminorms import SeminormConfig, block_operator, pk_seminorm
from nilconv.tame import tame_report_fk, tame_report_pk

from oracles import dense_matrix

AB1 = ProductGroup([abelian(1)])
AB2 = ProductGroup([abelian(1), abelian(1)])
HEIS = ProductGroup([heisenberg1()])

LIGHT = SeminormConfig(radius_factors=(1.0,))


def _random_field(spec, seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
    return GridFunction(spec, vals)


def _interior_probe(spec, seed, radius=1):
    # support of a cell per axis keeps every group product inside the box
    rng = np.random.default_rng(seed)
    vals = np.zeros(spec.shape, dtype=complex)
    c = spec.N // 2
    sl = tuple(slice(c - radius, c + radius + 1) for _ in range(spec.q_total))
    shape = (2 * radius + 1,) * spec.q_total
    vals[sl] = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return GridFunction(spec, vals)


def test_criterion_1_group_core():
    started = time.monotonic()
    alg = heisenberg1()
    rng = np.random.default_rng(1)
    a, b, c = rng.uniform(-1.0, 1.0, (3, 1000, alg.dim))

    assoc = np.abs(alg.bch_multiply(alg.bch_multiply(a, b), c)
                   - alg.bch_multiply(a, alg.bch_multiply(b, c))).max()
    ident = max(np.abs(alg.bch_multiply(a, np.zeros(alg.dim)) - a).max(),
                np.abs(alg.bch_multiply(np.zeros(alg.dim), a) - a).max())
    inv = np.abs(alg.bch_multiply(a, alg.invert(a))).max()
    assert assoc <= 1e-10
    assert ident <= 1e-10
    assert inv <= 1e-10

    r = 1.7
    base = alg.hom_norm(a)
    hom = np.abs(alg.hom_norm(alg.dilate(r, a)) - r * base).max() / (r * base.max())
    assert hom <= 1e-12

    assert alg.homogeneous_dimension == 4

    elapsed = time.monotonic() - started
    assert elapsed < 5.0
    print(f"[criterion 1] PASS: BCH errors <= {max(assoc, ident, inv):.2e}, "
          f"homogeneity {hom:.2e}, Q = 4, {elapsed:.2f}s")


def test_criterion_2_convolution_oracles():
    started = time.monotonic()
    spec = GridSpec(AB2, 32, 1.0)
    f = _random_field(spec, 20)
    g = _random_field(spec, 21)
    fast = convolve(f, g, path="fast")
    direct = convolve(f, g, path="direct")
    rel = fast.plus(direct.scaled(-1)).l2_norm() / direct.l2_norm()
    assert rel <= 1e-10

    hspec = GridSpec(HEIS, 12, 1.0)
    p = _interior_probe(hspec, 40)
    q = _interior_probe(hspec, 41)
    r = _interior_probe(hspec, 42)
    left = convolve(convolve(p, q), r)
    right = convolve(p, convolve(q, r))
    arel = left.plus(right.scaled(-1)).l2_norm() / max(left.l2_norm(), 1e-300)
    assert arel <= 1e-6

    elapsed = time.monotonic() - started
    assert elapsed < 60.0
    print(f"[criterion 2] PASS: fast vs direct {rel:.2e}, Heisenberg "
          f"associativity {arel:.2e}, {elapsed:.2f}s")


def test_criterion_3_adjoint_pairing():
    started = time.monotonic()
    spec = GridSpec(AB2, 16, 1.0)
    K = synth_dyadic(AB2, -2, 0, "random", seed=3)
    Kt = K.adjoint()
    worst = 0.0
    for seed in range(50):
        f = _random_field(spec, 300 + seed)
        g = _random_field(spec, 400 + seed)
        lhs = apply_op(K, f).inner(g)
        rhs = f.inner(apply_op(Kt, g))
        worst = max(worst, abs(lhs - rhs) / (f.l2_norm() * g.l2_norm()))
    assert worst <= 1e-8

    elapsed = time.monotonic() - started
    assert elapsed < 30.0
    print(f"[criterion 3] PASS: adjoint pairing error {worst:.2e} "
          f"over 50 pairs, {elapsed:.2f}s")


def test_criterion_4_seminorm_oracle():
    started = time.monotonic()
    spec = GridSpec(AB2, 8, 2.0)
    rng = np.random.default_rng(17)
    K = GridKernel(spec, zero_lowest_face(
        rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)))
    cfg = SeminormConfig(max_iter=4000, tol=1e-14)
    rep = pk_seminorm(K, spec, (1, 1), cfg)
    n = spec.size
    assert rep.blocks
    worst = 0.0
    for row in rep.blocks:
        subset = tuple(row["subset"])
        alpha = MultiIndex(tuple(tuple(e) for e in row["alpha"]))
        phi = {mu: ((0.0,) * AB2.factors[mu].dim, 2.0 ** row["j"])
               for mu in subset}
        gam = {mu: (tuple(row["z"][str(mu)]), 2.0 ** row["l"])
               for mu in subset}
        op = block_operator(K, spec, alpha, subset, phi, gam)

        def apply_flat(x, op=op):
            f = GridFunction(spec, x.reshape(spec.shape))
            return op.apply(f).values.reshape(-1)

        sigma = float(np.linalg.svd(dense_matrix(apply_flat, n),
                                    compute_uv=False)[0])
        assert row["residual"] <= 1e-6
        gap = abs(row["block"] - sigma) / max(sigma, 1.0)
        worst = max(worst, gap)
        assert gap <= 1e-6

    c = -0.7 + 0.4j
    dworst = 0.0
    for kvec in iproduct(range(3), range(3)):
        total = pk_seminorm(DeltaKernel(AB2, c), spec, kvec).total
        dworst = max(dworst, abs(total - abs(c)))
    assert dworst <= 1e-9

    elapsed = time.monotonic() - started
    assert elapsed < 120.0
    print(f"[criterion 4] PASS: {len(rep.blocks)} blocks within {worst:.2e} "
          f"of dense SVD, delta seminorm off by {dworst:.2e} "
          f"over k <= (2,2), {elapsed:.2f}s")


def _tame_max_ratios(kind, N, pairs, seed0):
    spec = GridSpec(AB2, N, 1.0)
    fn = tame_report_pk if kind == "pk" else tame_report_fk
    flag_mode = kind == "fk"
    ratios = []
    for i in range(pairs):
        base = seed0 + 2 * i
        K = synth_dyadic(AB2, -2, 0, "random", seed=base, flag_mode=flag_mode)
        L = synth_dyadic(AB2, -2, 0, "random", seed=base + 1, flag_mode=flag_mode)
        rep = fn(K, L, spec, (1, 1), cfg=LIGHT, ids=(f"K{i}", f"L{i}"))
        assert rep.tameness_ok
        assert np.isfinite(rep.ratio)
        ratios.append(rep.ratio)
    return max(ratios)


def test_criterion_5_tame_stability():
    started = time.monotonic()
    lines = []
    for kind in ("pk", "fk"):
        m16 = _tame_max_ratios(kind, 16, 20, seed0=7)
        m24 = _tame_max_ratios(kind, 24, 20, seed0=7)
        change = m24 / m16 if m16 > 0 else float("inf")
        assert np.isfinite(change)
        assert 1.0 / 3.0 <= change <= 3.0
        lines.append(f"{kind} max ratio {m16:.3g}->{m24:.3g} (x{change:.2f})")

    elapsed = time.monotonic() - started
    assert elapsed < 900.0
    print(f"[criterion 5] PASS: {'; '.join(lines)}, 20 pairs each, "
          f"{elapsed:.1f}s")


def _tensor_hilbert():
    return TensorKernel([DiscreteHilbertKernel(AB1), DiscreteHilbertKernel(AB1)])


def _invert_tensor(N):
    spec = GridSpec(AB2, N, 1.0)
    K = _tensor_hilbert()
    res = neumann_invert(K, spec, max_n=64, paper_eps=True,
                         amplification_cap=1.5, cond_cap=4.0, pad_factor=2,
                         growth_kvec=(1, 1))
    return spec, K, res


def test_criterion_6_inversion():
    started = time.monotonic()
    spec, K, res = _invert_tensor(128)
    assert res.max_residual <= 0.05

    # multiplier oracle: each axis symbol is unimodular with conjugate
    # inverse, so the inverse of H (x) H is (-H) (x) (-H) = H (x) H itself
    ref = K.render(spec).values.ravel()
    got = res.kernel.values.ravel()
    cosine = float(np.real(np.vdot(ref, got))
                   / (np.linalg.norm(ref) * np.linalg.norm(got)))
    assert cosine >= 0.95

    dspec = GridSpec(AB2, 8, 1.0)
    dworst = 0.0
    for c in (2.0, -0.5 + 0.2j):
        dres = neumann_invert(DeltaKernel(AB2, c), dspec)
        want = DeltaKernel(AB2, 1.0 / c).render(dspec).values
        err = (np.abs(dres.kernel.values - want).max()
               / np.abs(want).max())
        dworst = max(dworst, err, dres.max_residual)
    assert dworst <= 1e-10

    elapsed = time.monotonic() - started
    assert elapsed < 600.0
    print(f"[criterion 6] PASS: N=128 max residual {res.max_residual:.4f}, "
          f"cosine {cosine:.4f}, delta inversion off by {dworst:.2e}, "
          f"{elapsed:.1f}s")


def test_criterion_7_seminorm_decay():
    started = time.monotonic()
    spec = GridSpec(AB2, 16, 1.0)
    D = synth_dyadic(AB2, -2, 0, "random", seed=2)
    K = near_identity_kernel(D, spec, strength=0.2)
    rep = seminorm_decay(K, spec, (1, 1), (1, 2, 4, 8), cfg=LIGHT)

    roots = [row["root"] for row in rep.rows]
    assert all(np.isfinite(r) for r in roots)
    for prev, cur in zip(roots, roots[1:]):
        assert cur <= prev * 1.05  # nonincreasing within 5% slack
    assert roots[-1] <= rep.s_norm_measured + 0.1

    elapsed = time.monotonic() - started
    assert elapsed < 600.0
    print(f"[criterion 7] PASS: roots {' '.join(f'{r:.3f}' for r in roots)} "
          f"vs |S| = {rep.s_norm_measured:.3f} + 0.1, {elapsed:.1f}s")


def test_criterion_8_inverse_growth_closure():
    started = time.monotonic()
    _, _, res128 = _invert_tensor(128)
    _, _, res192 = _invert_tensor(192)

    c128 = {a.entries: v for a, v in res128.growth.constants.items()}
    c192 = {a.entries: v for a, v in res192.growth.constants.items()}
    assert res128.growth.valid and res192.growth.valid
    assert c128 and set(c128) == set(c192)
    drift = 0.0
    for key, v in c128.items():
        assert np.isfinite(v) and np.isfinite(c192[key])
        drift = max(drift, abs(c192[key] - v) / v)
    assert drift <= 0.30

    elapsed = time.monotonic() - started
    assert elapsed < 600.0
    print(f"[criterion 8] PASS: growth constants at alpha <= (1,1) finite, "
          f"max drift {100 * drift:.1f}% from N=128 to N=192, {elapsed:.1f}s")
