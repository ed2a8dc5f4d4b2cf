"""Graded nilpotent Lie groups in exponential coordinates of the first kind.

A group is described by its graded Lie algebra: layer dimensions q_1..q_n
and structure constants c_{ijk} for [X_i, X_j] = sum_k c_{ijk} X_k.  The
group law is the Baker-Campbell-Hausdorff polynomial, exact because the
algebra is nilpotent of step n.  In these coordinates the identity is 0
and inversion is coordinate negation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

from ._poly import Poly

JACOBI_TOL = 1e-12
ANTISYM_TOL = 1e-12


def _bernoulli(m: int) -> Fraction:
    """Bernoulli number B_m (B_1 = -1/2 convention)."""
    bs = [Fraction(1)]
    for k in range(1, m + 1):
        acc = Fraction(0)
        for j in range(k):
            acc += math.comb(k + 1, j) * bs[j]
        bs.append(-acc / (k + 1))
    return bs[m]


def _compositions(total: int, parts: int):
    """All tuples of `parts` positive ints summing to `total`."""
    if parts == 1:
        if total >= 1:
            yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


class GradedLieAlgebra:
    """Graded nilpotent Lie algebra with numeric structure constants.

    Parameters
    ----------
    n_layers : int
        Nilpotency step; layer l carries dilation weight l.
    layer_dims : sequence of int
        Number of basis coordinates in each layer.
    structure_constants : iterable of (i, j, k, c)
        0-based entries for [X_i, X_j] = sum_k c X_k.  Antisymmetric
        counterparts may be omitted; if given they must be consistent.
    """

    def __init__(self, n_layers, layer_dims, structure_constants=()):
        self.n_layers = int(n_layers)
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if len(self.layer_dims) != self.n_layers:
            raise ValueError("layer_dims length must equal n_layers")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer dimensions must be positive")
        q = sum(self.layer_dims)
        self.dim = q
        w = []
        for l, d in enumerate(self.layer_dims, start=1):
            w.extend([l] * d)
        self.weights = np.array(w, dtype=int)

        C = np.zeros((q, q, q))
        seen = {}
        for entry in structure_constants:
            i, j, k, c = entry
            i, j, k, c = int(i), int(j), int(k), float(c)
            for idx in (i, j, k):
                if not 0 <= idx < q:
                    raise ValueError(f"index {idx} out of range for dim {q}")
            if i == j and c != 0.0:
                raise ValueError("[X_i, X_i] must vanish")
            if (i, j, k) in seen and abs(seen[(i, j, k)] - c) > ANTISYM_TOL:
                raise ValueError(f"conflicting entries for ({i},{j},{k})")
            seen[(i, j, k)] = c
            if (j, i, k) in seen and abs(seen[(j, i, k)] + c) > ANTISYM_TOL:
                raise ValueError(f"antisymmetry violated at ({i},{j},{k})")
            C[i, j, k] = c
            if (j, i, k) not in seen:
                C[j, i, k] = -c
        self.C = C
        self._validate_grading()
        self._validate_jacobi()

    # -- validation ------------------------------------------------------

    def _validate_grading(self):
        d = self.weights
        nz = np.argwhere(self.C != 0.0)
        for i, j, k in nz:
            if d[k] != d[i] + d[j]:
                raise ValueError(
                    f"grading violated: [layer {d[i]}, layer {d[j]}] "
                    f"hits layer {d[k]} at ({i},{j},{k})"
                )

    def _validate_jacobi(self):
        C = self.C
        # J[i,j,k,:] = [[ei,ej],ek] + [[ej,ek],ei] + [[ek,ei],ej]
        t1 = np.einsum("ijl,lkm->ijkm", C, C)
        J = t1 + np.transpose(t1, (1, 2, 0, 3)) + np.transpose(t1, (2, 0, 1, 3))
        worst = np.abs(J).max() if J.size else 0.0
        if worst > JACOBI_TOL:
            raise ValueError(f"Jacobi identity violated (max residual {worst:.3e})")

    # -- basic structure ---------------------------------------------------

    @property
    def is_abelian(self) -> bool:
        return not np.any(self.C)

    @cached_property
    def homogeneous_dimension(self) -> int:
        return int(self.weights.sum())

    def bracket(self, u, v):
        """[u, v] for coefficient vectors, batched over leading axes."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.einsum("...i,...j,ijk->...k", u, v, self.C)

    # -- symbolic group law -----------------------------------------------

    def _bracket_polyvec(self, u, v):
        nv = u[0].nvars
        out = [Poly.zero(nv) for _ in range(self.dim)]
        for i, j, k in self._nonzero_entries:
            out[k] = out[k] + self.C[i, j, k] * (u[i] * v[j])
        return out

    @cached_property
    def _nonzero_entries(self):
        return [tuple(idx) for idx in np.argwhere(self.C != 0.0)]

    @cached_property
    def group_law(self):
        """BCH polynomials m_k(x, y) in 2q variables (x first, then y)."""
        q, n = self.dim, self.n_layers
        nv = 2 * q
        x = [Poly.var(nv, i) for i in range(q)]
        y = [Poly.var(nv, q + i) for i in range(q)]
        xp = [a + b for a, b in zip(x, y)]
        xm = [a - b for a, b in zip(x, y)]
        z = {1: xp}
        for m in range(1, n):
            term = [0.5 * p for p in self._bracket_polyvec(xm, z[m])]
            for p in range(1, m // 2 + 1):
                coeff = float(_bernoulli(2 * p) / math.factorial(2 * p))
                for comp in _compositions(m, 2 * p):
                    w = xp
                    for part in reversed(comp):
                        w = self._bracket_polyvec(z[part], w)
                    if any(not wk.is_zero() for wk in w):
                        term = [t + coeff * wk for t, wk in zip(term, w)]
            z[m + 1] = [t * (1.0 / (m + 1)) for t in term]
        law = z[1]
        for m in range(2, n + 1):
            law = [a + b for a, b in zip(law, z[m])]
        return law

    # -- group operations ---------------------------------------------------

    def bch_multiply(self, a, b):
        """Group product, batched over leading axes of shape (..., q)."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape[-1] != self.dim or b.shape[-1] != self.dim:
            raise ValueError("element has wrong dimension")
        a, b = np.broadcast_arrays(a, b)
        if self.is_abelian:
            return a + b
        args = np.concatenate([a, b], axis=-1)
        out = np.empty_like(a)
        for k, poly in enumerate(self.group_law):
            out[..., k] = poly.eval(args)
        return out

    def invert(self, a):
        """Group inverse; exponential coordinates make it coordinate negation."""
        return -np.asarray(a, dtype=float)

    def dilate(self, r, a):
        """Anisotropic dilation: coordinate j scales by r**weight_j."""
        r = float(r)
        if r <= 0:
            raise ValueError("dilation parameter must be positive")
        a = np.asarray(a, dtype=float)
        return a * (r ** self.weights.astype(float))

    def hom_norm(self, a):
        """Homogeneous quasi-norm (sum_l sum_k |a|^(2 n!/l))^(1/(2 n!))."""
        a = np.asarray(a, dtype=float)
        fact = math.factorial(self.n_layers)
        acc = np.zeros(a.shape[:-1])
        for j in range(self.dim):
            p = 2 * fact // self.weights[j]
            acc = acc + np.abs(a[..., j]) ** p
        return acc ** (1.0 / (2 * fact))

    def triangle_constant(self, sample_count: int = 2000, seed: int = 0) -> float:
        """Empirical quasi-triangle constant C with |xy| <= C(|x| + |y|).

        Max of the ratio over seeded sample pairs spanning several dyadic
        magnitudes, clamped below by 1 (the constant is >= 1 for any
        homogeneous quasi-norm).
        """
        if sample_count < 1:
            raise ValueError("sample_count must be positive")
        rng = np.random.default_rng(seed)
        raw_x = rng.standard_normal((sample_count, self.dim))
        raw_y = rng.standard_normal((sample_count, self.dim))
        sx = 10.0 ** rng.uniform(-1.5, 1.5, (sample_count, 1))
        sy = 10.0 ** rng.uniform(-1.5, 1.5, (sample_count, 1))
        x = raw_x * sx ** self.weights.astype(float)
        y = raw_y * sy ** self.weights.astype(float)
        num = self.hom_norm(self.bch_multiply(x, y))
        den = self.hom_norm(x) + self.hom_norm(y)
        ratio = num / den
        return float(max(1.0, ratio.max()))

    # -- invariant vector fields ---------------------------------------------

    @cached_property
    def left_invariant_fields(self):
        """X_j f(x) = d/ds f(x * s e_j) at s=0; coefficients a_jk(x)."""
        q = self.dim
        fields = []
        for j in range(q):
            coeffs = []
            for k, poly in enumerate(self.group_law):
                c = poly.diff(q + j).subs_zero(range(q, 2 * q)).restrict(range(q))
                coeffs.append(c)
            fields.append(VectorField(j, int(self.weights[j]), tuple(coeffs)))
        return fields

    @cached_property
    def right_invariant_fields(self):
        """Y_j f(x) = d/ds f(s e_j * x) at s=0; coefficients b_jk(x)."""
        q = self.dim
        fields = []
        for j in range(q):
            coeffs = []
            for k, poly in enumerate(self.group_law):
                c = poly.diff(j).subs_zero(range(q)).restrict(range(q, 2 * q))
                coeffs.append(c)
            fields.append(VectorField(j, int(self.weights[j]), tuple(coeffs)))
        return fields

    # -- lattice compatibility ------------------------------------------------

    @cached_property
    def lattice_denominators(self):
        """Integers M_k such that the lattice {h^(d_k)/M_k * Z} is a subgroup.

        Requires rational structure constants; raises ValueError otherwise.
        Grids built with spacings h_k = h^(d_k)/M_k then carry the group law
        exactly (lattice points multiply to lattice points).
        """
        q = self.dim
        M = [1] * q
        order = sorted(range(q), key=lambda k: self.weights[k])
        for k in order:
            poly = self.group_law[k]
            dens = [1]
            for e, c in poly.terms.items():
                deg = sum(e)
                if deg <= 1:
                    continue  # the x_k + y_k part
                frac = Fraction(c).limit_denominator(10 ** 9)
                if abs(float(frac) - c) > 1e-9 * max(1.0, abs(c)):
                    raise ValueError(
                        "structure constants are not rational; lattice grids unavailable"
                    )
                prod_m = 1
                for v, p in enumerate(e):
                    if p:
                        prod_m *= M[v % q] ** p
                dens.append((frac / prod_m).denominator)
            M[k] = math.lcm(*dens)
        return tuple(M)

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        entries = []
        for i in range(self.dim):
            for j in range(i + 1, self.dim):
                for k in range(self.dim):
                    if self.C[i, j, k] != 0.0:
                        entries.append([i, j, k, float(self.C[i, j, k])])
        return {
            "n_layers": self.n_layers,
            "layer_dims": list(self.layer_dims),
            "structure_constants": entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GradedLieAlgebra":
        try:
            return cls(d["n_layers"], d["layer_dims"], d.get("structure_constants", ()))
        except KeyError as e:
            raise ValueError(f"group definition missing field {e}") from e

    def __repr__(self):
        return f"GradedLieAlgebra(n_layers={self.n_layers}, layer_dims={self.layer_dims})"


@dataclass(frozen=True)
class VectorField:
    """First-order invariant differential operator sum_k coeff_k(x) d/dx_k."""

    index: int
    weight: int
    coeffs: tuple

    def coeff_arrays(self, points: np.ndarray) -> list:
        """Evaluate every coefficient polynomial at points (..., q)."""
        return [c.eval(points) for c in self.coeffs]


# -- presets and file IO -------------------------------------------------------


def abelian(q: int) -> GradedLieAlgebra:
    """R^q with addition (one layer, trivial brackets)."""
    return GradedLieAlgebra(1, [q])


def heisenberg1() -> GradedLieAlgebra:
    """First Heisenberg group: weights (1, 1, 2), [X1, X2] = X3."""
    return GradedLieAlgebra(2, [2, 1], [(0, 1, 2, 1.0)])


def load_group(path: str) -> GradedLieAlgebra:
    with open(path) as f:
        return GradedLieAlgebra.from_dict(json.load(f))


def save_group(alg: GradedLieAlgebra, path: str):
    with open(path, "w") as f:
        json.dump(alg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
