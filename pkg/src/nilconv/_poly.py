"""Sparse multivariate polynomials with vectorized numpy evaluation.

Used for the symbolic group law of a graded nilpotent Lie group and for
the coefficient fields of invariant vector fields.  Coefficients are
binary64; exponents are tuples of small nonnegative ints.
"""

from __future__ import annotations

import numpy as np

_DROP = 1e-300  # coefficients below this are treated as exact zeros


class Poly:
    """Polynomial in ``nvars`` variables, stored as {exponent tuple: coeff}."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: dict | None = None):
        self.nvars = int(nvars)
        self.terms = {}
        if terms:
            for e, c in terms.items():
                if abs(c) > _DROP:
                    self.terms[tuple(e)] = float(c)

    @classmethod
    def zero(cls, nvars: int) -> "Poly":
        return cls(nvars)

    @classmethod
    def const(cls, nvars: int, c: float) -> "Poly":
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def var(cls, nvars: int, i: int) -> "Poly":
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): 1.0})

    # -- algebra ---------------------------------------------------------

    def __add__(self, other):
        if np.isscalar(other):
            other = Poly.const(self.nvars, other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + c
        return Poly(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.nvars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        if np.isscalar(other):
            other = Poly.const(self.nvars, other)
        return self + (-other)

    def __mul__(self, other):
        if np.isscalar(other):
            return Poly(self.nvars, {e: c * other for e, c in self.terms.items()})
        out: dict = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0.0) + c1 * c2
        return Poly(self.nvars, out)

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, Poly):
            return NotImplemented
        return self.nvars == other.nvars and self.terms == other.terms

    def __repr__(self):
        if not self.terms:
            return "Poly(0)"
        bits = []
        for e, c in sorted(self.terms.items()):
            mono = "*".join(f"x{i}^{p}" for i, p in enumerate(e) if p)
            bits.append(f"{c:g}" + ("*" + mono if mono else ""))
        return "Poly(" + " + ".join(bits) + ")"

    def is_zero(self, tol: float = 0.0) -> bool:
        return all(abs(c) <= tol for c in self.terms.values())

    # -- calculus --------------------------------------------------------

    def diff(self, i: int) -> "Poly":
        out = {}
        for e, c in self.terms.items():
            if e[i]:
                ne = list(e)
                ne[i] -= 1
                out[tuple(ne)] = out.get(tuple(ne), 0.0) + c * e[i]
        return Poly(self.nvars, out)

    def subs_zero(self, idxs) -> "Poly":
        """Set the listed variables to zero."""
        idxs = set(idxs)
        out = {}
        for e, c in self.terms.items():
            if all(e[i] == 0 for i in idxs):
                out[e] = out.get(e, 0.0) + c
        return Poly(self.nvars, out)

    def restrict(self, keep) -> "Poly":
        """Reindex onto the variables in ``keep`` (others must not occur)."""
        keep = list(keep)
        pos = {v: i for i, v in enumerate(keep)}
        out = {}
        for e, c in self.terms.items():
            ne = [0] * len(keep)
            for i, p in enumerate(e):
                if p == 0:
                    continue
                if i not in pos:
                    raise ValueError(f"variable x{i} occurs but is not kept")
                ne[pos[i]] = p
            out[tuple(ne)] = out.get(tuple(ne), 0.0) + c
        return Poly(len(keep), out)

    # -- evaluation ------------------------------------------------------

    def eval(self, args: np.ndarray) -> np.ndarray:
        """Evaluate at points ``args`` of shape (..., nvars)."""
        args = np.asarray(args, dtype=float)
        if args.shape[-1] != self.nvars:
            raise ValueError(f"expected last axis {self.nvars}, got {args.shape[-1]}")
        base = args.shape[:-1]
        out = np.zeros(base, dtype=float)
        if not self.terms:
            return out
        maxe = [0] * self.nvars
        for e in self.terms:
            for i, p in enumerate(e):
                if p > maxe[i]:
                    maxe[i] = p
        pows = {}
        for i, m in enumerate(maxe):
            if m > 0:
                col = args[..., i]
                plist = [np.ones(base)]
                for _ in range(m):
                    plist.append(plist[-1] * col)
                pows[i] = plist
        for e, c in self.terms.items():
            term = np.full(base, c)
            for i, p in enumerate(e):
                if p:
                    term = term * pows[i][p]
            out += term
        return out

    def weighted_degrees(self, weights) -> set:
        """Set of weighted total degrees present (empty for the zero poly)."""
        return {sum(w * p for w, p in zip(weights, e)) for e in self.terms}
