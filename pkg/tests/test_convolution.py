"""Group convolution, operator application, and operator norms."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nilconv.convolution import (
    apply_op,
    boundary_mass_fraction,
    compose_kernels,
    convolve,
    left_derivative,
    op_norm,
    right_translate,
)
from nilconv.grid import GridFunction, GridSpec, zero_lowest_face
from nilconv.groups import abelian, heisenberg1
from nilconv.kernels import (
    ClosedFormKernel,
    DeltaKernel,
    GridKernel,
    TensorKernel,
    adjoint_kernel,
    smooth_bump,
)
from nilconv.product import MultiIndex, ProductGroup

from oracles import dense_matrix, loop_group_convolution, toeplitz_convolution_matrix

AB1 = ProductGroup([abelian(1)])
AB2 = ProductGroup([abelian(1), abelian(1)])
HEIS = ProductGroup([heisenberg1()])


def _bump(spec, center, width):
    mesh = spec.mesh
    vals = np.ones(spec.shape)
    for j in range(spec.q_total):
        vals = vals * smooth_bump((mesh[..., j] - center[j]) / width)
    return GridFunction(spec, vals)


def _random_field(spec, seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape)
    return GridFunction(spec, vals)


def test_delta_reproduces_identity():
    spec = GridSpec(AB2, 16, 1.0)
    f = _random_field(spec, 0)
    d = spec.delta()
    for path in ("fast", "direct"):
        out = convolve(f, d, path=path)
        assert np.abs(out.values - f.values).max() <= 1e-12 * f.max_abs()
    hspec = GridSpec(HEIS, 8, 1.0)
    hf = _random_field(hspec, 1)
    out = convolve(hf, hspec.delta(), path="direct")
    assert np.abs(out.values - hf.values).max() <= 1e-12 * hf.max_abs()


def test_fast_path_matches_direct_sum():
    spec = GridSpec(AB2, 32, 1.0)
    f = _random_field(spec, 2)
    g = _random_field(spec, 3)
    fast = convolve(f, g, path="fast")
    direct = convolve(f, g, path="direct")
    denom = direct.l2_norm()
    assert fast.plus(direct.scaled(-1)).l2_norm() <= 1e-10 * denom


def test_direct_matches_loop_oracle_abelian():
    spec = GridSpec(AB1, 16, 1.0)
    f = _random_field(spec, 4)
    g = _random_field(spec, 5)
    got = convolve(f, g, path="direct")
    coords = spec.mesh.reshape(-1, 1)
    want = loop_group_convolution(
        AB1, f.values.reshape(-1), g.values.reshape(-1), coords, spec.volume
    )
    assert np.abs(got.values.reshape(-1) - want).max() <= 1e-12 * np.abs(want).max()


def test_direct_matches_loop_oracle_heisenberg():
    spec = GridSpec(HEIS, 6, 1.0)
    f = _random_field(spec, 6)
    g = _random_field(spec, 7)
    got = convolve(f, g, path="direct")
    coords = spec.mesh.reshape(-1, 3)
    want = loop_group_convolution(
        HEIS, f.values.reshape(-1), g.values.reshape(-1), coords, spec.volume
    )
    assert np.abs(got.values.reshape(-1) - want).max() <= 1e-12 * np.abs(want).max()


def _interior_probe(spec, seed, radii=None):
    # A cell or so of support per coordinate keeps every pairwise group
    # product inside the box, so truncation never enters and lattice
    # identities hold exactly.
    rng = np.random.default_rng(seed)
    vals = np.zeros(spec.shape, dtype=complex)
    c = spec.N // 2
    q = spec.q_total
    if radii is None:
        radii = (1,) * q
    shape = tuple(2 * r + 1 for r in radii)
    block = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    vals[tuple(slice(c - r, c + r + 1) for r in radii)] = block
    return GridFunction(spec, vals)


def test_heisenberg_associativity_interior():
    spec = GridSpec(HEIS, 12, 1.0)
    f = _interior_probe(spec, 40)
    g = _interior_probe(spec, 41)
    h = _interior_probe(spec, 42)
    left = convolve(convolve(f, g), h)
    right = convolve(f, convolve(g, h))
    denom = max(left.l2_norm(), 1e-300)
    assert left.plus(right.scaled(-1)).l2_norm() <= 1e-6 * denom


def test_convolve_validation():
    a = GridSpec(AB2, 16, 1.0)
    b = GridSpec(AB2, 16, 2.0)
    with pytest.raises(ValueError, match="do not match"):
        convolve(a.zeros(), b.zeros())
    f = _random_field(a, 0)
    with pytest.raises(ValueError, match="budget"):
        convolve(f, f, path="direct", budget=10)
    hspec = GridSpec(HEIS, 6, 1.0)
    with pytest.raises(ValueError, match="abelian"):
        convolve(hspec.zeros(), hspec.zeros(), path="fast")
    with pytest.raises(ValueError, match="unknown convolution path"):
        convolve(f, f, path="warp")


def test_apply_delta_scales():
    spec = GridSpec(AB2, 16, 1.0)
    f = _random_field(spec, 8)
    out = apply_op(DeltaKernel(AB2, 2.0 - 1.0j), f)
    assert np.allclose(out.values, (2.0 - 1.0j) * f.values, atol=0)


def test_apply_tensor_matches_full_render():
    spec = GridSpec(AB2, 32, 1.0)
    h = ClosedFormKernel(AB1, "hilbert")
    K = TensorKernel([h, h])
    f = _random_field(spec, 9)
    via_tensor = apply_op(K, f)
    via_full = convolve(K.render(spec).data, f, path="fast")
    denom = via_full.l2_norm()
    assert via_tensor.plus(via_full.scaled(-1)).l2_norm() <= 1e-10 * denom


def test_apply_tensor_nonabelian_factor():
    grp = ProductGroup([heisenberg1(), abelian(1)])
    spec = GridSpec(grp, 8, 1.0)
    sub_h = GridSpec(ProductGroup([heisenberg1()]), 8, 1.0)
    rng = np.random.default_rng(10)
    part_h = GridKernel(sub_h, zero_lowest_face(rng.normal(size=sub_h.shape)))
    part_a = ClosedFormKernel(AB1, "hilbert")
    K = TensorKernel([part_h, part_a])
    f = _random_field(spec, 11)
    got = apply_op(K, f)
    want = convolve(K.render(spec).data, f, path="direct")
    denom = want.l2_norm()
    assert got.plus(want.scaled(-1)).l2_norm() <= 1e-10 * denom


def test_compose_with_delta_is_identity():
    spec = GridSpec(AB2, 16, 1.0)
    rng = np.random.default_rng(12)
    L = GridKernel(spec, zero_lowest_face(rng.normal(size=spec.shape)))
    out = compose_kernels(DeltaKernel(AB2, 2.0), L, spec)
    assert np.allclose(out.values, 2.0 * L.values, atol=0)


def test_compose_action_matches_sequential_apply():
    spec = GridSpec(AB2, 32, 1.0)
    K = GridKernel(spec, _bump(spec, (0.05, -0.05), 0.2).values)
    L = GridKernel(spec, _bump(spec, (-0.1, 0.0), 0.2).values * (1 + 0.5j))
    f = _bump(spec, (0.1, 0.1), 0.2)
    combined = apply_op(compose_kernels(K, L, spec), f)
    sequential = apply_op(K, apply_op(L, f))
    denom = max(sequential.l2_norm(), 1e-300)
    assert combined.plus(sequential.scaled(-1)).l2_norm() <= 1e-6 * denom


def test_hilbert_squares_to_minus_identity():
    # The probe is modulated to sit in a frequency band where the windowed
    # kernel's multiplier is close to -i sgn: above the window roll-off near
    # zero, well below Nyquist where the sampled 1/t multiplier sags.
    spec = GridSpec(AB1, 1024, 2.0)
    H = ClosedFormKernel(AB1, "hilbert", support=2.0)
    HH = compose_kernels(H, H, spec)
    t = spec.axis_coords(0)
    f = GridFunction(spec, (smooth_bump(t / 1.5) * np.exp(9j * t)).astype(complex))
    out = apply_op(HH, f)
    err = out.plus(f).l2_norm() / f.l2_norm()
    assert err <= 0.05


def test_opnorm_delta():
    spec = GridSpec(AB2, 16, 1.0)
    est = op_norm(DeltaKernel(AB2, -2.5j), spec)
    assert abs(est.value - 2.5) <= 1e-10
    assert est.converged


def test_opnorm_hilbert_against_dense_svd():
    spec = GridSpec(AB1, 128, 2.0)
    K = ClosedFormKernel(AB1, "hilbert", support=1.9)
    est = op_norm(K, spec, max_iter=80, seed=0)
    M = toeplitz_convolution_matrix(K.render(spec).values, spec.spacings[0])
    svd_top = np.linalg.svd(M, compute_uv=False)[0]
    assert abs(est.value - svd_top) <= 1e-5 * svd_top
    assert abs(est.value - 1.0) <= 0.03


def test_opnorm_scale_covariance():
    spec = GridSpec(AB2, 16, 1.0)
    rng = np.random.default_rng(13)
    vals = zero_lowest_face(rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape))
    K = GridKernel(spec, vals)
    cK = GridKernel(spec, 3.7 * vals)
    a = op_norm(K, spec, seed=1)
    b = op_norm(cK, spec, seed=1)
    assert abs(b.value - 3.7 * a.value) <= 1e-9 * b.value


def test_opnorm_triangle_inequality():
    spec = GridSpec(AB2, 16, 1.0)
    rng = np.random.default_rng(14)
    A = GridKernel(spec, zero_lowest_face(rng.normal(size=spec.shape)))
    B = GridKernel(spec, zero_lowest_face(rng.normal(size=spec.shape)))
    AB = GridKernel(spec, A.values + B.values)
    na = op_norm(A, spec, seed=2).value
    nb = op_norm(B, spec, seed=2).value
    nab = op_norm(AB, spec, seed=2).value
    assert nab <= na + nb + 1e-9


def test_opnorm_deterministic():
    spec = GridSpec(AB1, 64, 1.0)
    K = ClosedFormKernel(AB1, "hilbert", support=0.9)
    a = op_norm(K, spec, seed=5)
    b = op_norm(K, spec, seed=5)
    assert a.value == b.value and a.iterations == b.iterations


def test_opnorm_convergence_flag():
    spec = GridSpec(AB1, 64, 1.0)
    K = ClosedFormKernel(AB1, "hilbert", support=0.9)
    est = op_norm(K, spec, max_iter=8, tol=0.0)
    assert not est.converged
    with pytest.raises(ValueError, match="max_iter"):
        op_norm(K, spec, max_iter=4)


def test_adjoint_pairing_heisenberg():
    spec = GridSpec(HEIS, 8, 1.0)
    rng = np.random.default_rng(15)
    K = GridKernel(
        spec,
        zero_lowest_face(rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape)),
    )
    Kt = adjoint_kernel(K)
    for seed in range(3):
        f = _random_field(spec, 100 + seed)
        g = _random_field(spec, 200 + seed)
        lhs = apply_op(K, f).inner(g)
        rhs = f.inner(apply_op(Kt, g))
        assert abs(lhs - rhs) <= 1e-8 * f.l2_norm() * g.l2_norm()


def test_adjoint_pairing_fast_path():
    spec = GridSpec(AB2, 32, 1.0)
    rng = np.random.default_rng(16)
    K = GridKernel(
        spec,
        zero_lowest_face(rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape)),
    )
    f = _random_field(spec, 17)
    g = _random_field(spec, 18)
    lhs = apply_op(K, f).inner(g)
    rhs = f.inner(apply_op(adjoint_kernel(K), g))
    assert abs(lhs - rhs) <= 1e-10 * f.l2_norm() * g.l2_norm()


def test_right_invariance_on_lattice():
    spec = GridSpec(HEIS, 12, 1.0)
    K = GridKernel(spec, _interior_probe(spec, 50, radii=(1, 1, 0)).values)
    f = _interior_probe(spec, 51, radii=(1, 1, 0))
    a = np.array([0.0, spec.spacings[1], 0.0])
    lhs = apply_op(K, right_translate(f, a))
    rhs = right_translate(apply_op(K, f), a)
    denom = max(rhs.l2_norm(), 1e-300)
    assert lhs.plus(rhs.scaled(-1)).l2_norm() <= 1e-10 * denom


def test_left_derivative_passes_through_convolution():
    spec = GridSpec(AB2, 32, 1.0)
    K = GridKernel(spec, _bump(spec, (0.0, 0.05), 0.18).values)
    L = GridKernel(spec, _bump(spec, (-0.05, 0.0), 0.18).values)
    g = _bump(spec, (0.08, -0.06), 0.15)
    alpha = MultiIndex.make(AB2, ((1,), (1,)))
    KL = compose_kernels(K, L, spec)
    lhs = convolve(left_derivative(KL.data, alpha), g)
    XL = GridKernel(spec, left_derivative(L.data, alpha).values)
    rhs = apply_op(K, apply_op(XL, g))
    denom = max(rhs.l2_norm(), 1e-300)
    assert lhs.plus(rhs.scaled(-1)).l2_norm() <= 1e-5 * denom


def test_left_derivative_abelian_is_partial():
    spec = GridSpec(AB2, 64, 1.0)
    mesh = spec.mesh
    f = GridFunction(spec, np.sin(2.0 * mesh[..., 0]) * np.exp(-mesh[..., 1] ** 2))
    alpha = MultiIndex.make(AB2, ((1,), (0,)))
    got = left_derivative(f, alpha)
    want = 2.0 * np.cos(2.0 * mesh[..., 0]) * np.exp(-mesh[..., 1] ** 2)
    core = (slice(4, -4),) * 2
    assert np.abs(got.values - want)[core].max() <= 5e-3


def test_boundary_mass_fraction():
    spec = GridSpec(AB2, 16, 1.0)
    assert boundary_mass_fraction(spec.delta()) == 0.0
    ones = GridFunction(spec, np.ones(spec.shape))
    assert boundary_mass_fraction(ones) > 0.3


@given(st.integers(0, 2 ** 31 - 1))
def test_apply_op_linear(seed):
    spec = GridSpec(AB1, 16, 1.0)
    rng = np.random.default_rng(seed)
    K = GridKernel(spec, zero_lowest_face(rng.normal(size=spec.shape)))
    f = GridFunction(spec, rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape))
    g = GridFunction(spec, rng.normal(size=spec.shape))
    a, b = complex(rng.normal(), rng.normal()), complex(rng.normal())
    lhs = apply_op(K, f.scaled(a).plus(g.scaled(b)))
    rhs = apply_op(K, f).scaled(a).plus(apply_op(K, g).scaled(b))
    scale = max(rhs.max_abs(), 1e-12)
    assert np.abs(lhs.values - rhs.values).max() <= 1e-10 * scale


def test_dense_matrix_oracle_agrees_with_toeplitz():
    spec = GridSpec(AB1, 32, 1.0)
    rng = np.random.default_rng(19)
    K = GridKernel(spec, zero_lowest_face(rng.normal(size=spec.shape)))

    def act(x):
        return apply_op(K, GridFunction(spec, x.reshape(spec.shape))).values.reshape(-1)

    M1 = dense_matrix(act, spec.size)
    M2 = toeplitz_convolution_matrix(K.values, spec.spacings[0])
    assert np.abs(M1 - M2).max() <= 1e-12 * np.abs(M2).max()
