"""Moment functions g(N, M) and their exact product-Poisson moments.

Each moment component is affine in M: ``g = p0(N) + M * p1(N)`` with ``p0``
and ``p1`` polynomials in the observed cell counts. Means and variances
under independent Poisson cells are exact: a monomial's expectation factors
over cells, and ``E[N**r]`` for ``N ~ Poisson(m)`` is the Touchard
polynomial ``sum_j S(r, j) m**j`` (Stirling numbers of the second kind).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .restrictions import HighestOrder, Pairwise, RestrictionSpec
from .tables import pair_groups, parity_sets

EXACT_MAX_K = 5
DEGENERATE_SD = 1e-12


class DegenerateVarianceError(ArithmeticError):
    """A moment component has (numerically) zero variance."""


class CellPolynomial:
    """Sparse polynomial in the cell counts N_1..N_c.

    Terms are stored as ``{exponent tuple (length c): coefficient}``.
    """

    __slots__ = ("c", "terms", "_arrays")

    def __init__(self, c: int, terms: Mapping[tuple[int, ...], float] | None = None):
        self.c = c
        self.terms = {e: float(v) for e, v in (terms or {}).items() if v != 0}
        for e in self.terms:
            if len(e) != c or any(p < 0 for p in e):
                raise ValueError(f"bad exponent vector {e} for {c} cells")
        self._arrays = None

    @classmethod
    def constant(cls, c: int, value: float) -> "CellPolynomial":
        return cls(c, {(0,) * c: value})

    @classmethod
    def cell(cls, c: int, i: int) -> "CellPolynomial":
        """The count of observed cell ``i`` (1-based)."""
        if not 1 <= i <= c:
            raise ValueError(f"cell {i} out of range 1..{c}")
        e = [0] * c
        e[i - 1] = 1
        return cls(c, {tuple(e): 1.0})

    @classmethod
    def cell_sum(cls, c: int, cells: Sequence[int]) -> "CellPolynomial":
        out = cls(c)
        for i in cells:
            out = out + cls.cell(c, i)
        return out

    @classmethod
    def cell_product(cls, c: int, cells: Sequence[int]) -> "CellPolynomial":
        e = [0] * c
        for i in cells:
            e[i - 1] += 1
        return cls(c, {tuple(e): 1.0})

    def __add__(self, other):
        if not isinstance(other, CellPolynomial):
            other = CellPolynomial.constant(self.c, other)
        out = dict(self.terms)
        for e, v in other.terms.items():
            out[e] = out.get(e, 0.0) + v
        return CellPolynomial(self.c, out)

    __radd__ = __add__

    def __neg__(self):
        return CellPolynomial(self.c, {e: -v for e, v in self.terms.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, CellPolynomial) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, CellPolynomial):
            return CellPolynomial(self.c, {e: v * other for e, v in self.terms.items()})
        out: dict[tuple[int, ...], float] = {}
        for e1, v1 in self.terms.items():
            for e2, v2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0.0) + v1 * v2
        return CellPolynomial(self.c, out)

    __rmul__ = __mul__

    def __repr__(self):
        return f"CellPolynomial(c={self.c}, terms={len(self.terms)}, degree={self.degree})"

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(coefficients, exponent matrix) for vectorised evaluation."""
        if self._arrays is None:
            if self.terms:
                exps = np.array(list(self.terms), dtype=np.intp).reshape(len(self.terms), self.c)
                coefs = np.array(list(self.terms.values()))
            else:
                exps = np.zeros((0, self.c), dtype=np.intp)
                coefs = np.zeros(0)
            self._arrays = (coefs, exps)
        return self._arrays

    def evaluate(self, counts) -> np.ndarray:
        """Value at the given counts; ``counts`` has shape (..., c)."""
        counts = np.asarray(counts, dtype=float)
        coefs, exps = self.arrays()
        mono = np.prod(counts[..., None, :] ** exps, axis=-1)
        return mono @ coefs


@lru_cache(maxsize=None)
def _stirling2(max_r: int) -> np.ndarray:
    S = np.zeros((max_r + 1, max_r + 1))
    S[0, 0] = 1.0
    for r in range(1, max_r + 1):
        for j in range(1, r + 1):
            S[r, j] = j * S[r - 1, j] + S[r - 1, j - 1]
    S.setflags(write=False)
    return S


def touchard(means, max_r: int) -> np.ndarray:
    """Raw Poisson moments ``E[N**r]`` for r = 0..max_r; shape (..., max_r + 1)."""
    m = np.asarray(means, dtype=float)
    powers = m[..., None] ** np.arange(max_r + 1)
    return powers @ _stirling2(max_r).T


def poisson_mean(poly: CellPolynomial, means) -> np.ndarray | float:
    """Exact expectation of ``poly`` under independent Poisson cells.

    ``means`` may be a single mean vector or a stack of shape (B, c).
    """
    means = np.asarray(means, dtype=float)
    coefs, exps = poly.arrays()
    if coefs.size == 0:
        out = np.zeros(means.shape[:-1])
    else:
        T = touchard(means, int(exps.max()))
        cells = np.arange(poly.c)
        # T[..., cell, power] gathered per monomial -> (..., terms, c)
        factors = T[..., cells[None, :], exps]
        out = np.prod(factors, axis=-1) @ coefs
    return float(out) if out.ndim == 0 else out


def poisson_variance(poly: CellPolynomial, means) -> np.ndarray | float:
    mu = poisson_mean(poly, means)
    return poisson_mean(poly * poly, means) - np.square(mu)


@dataclass
class AffineMoment:
    """One moment component ``g(N, M) = p0(N) + M * p1(N)``."""

    p0: CellPolynomial
    p1: CellPolynomial
    label: str = ""
    _sq: tuple | None = field(default=None, repr=False)

    def squares(self) -> tuple[CellPolynomial, CellPolynomial, CellPolynomial]:
        if self._sq is None:
            self._sq = (self.p0 * self.p0, self.p0 * self.p1, self.p1 * self.p1)
        return self._sq

    def at(self, M: float) -> CellPolynomial:
        return self.p0 + self.p1 * M

    def evaluate(self, counts, M) -> np.ndarray:
        return self.p0.evaluate(counts) + np.asarray(M) * self.p1.evaluate(counts)


@dataclass
class MomentParts:
    """Expectation and variance pieces of each component, for any M.

    Arrays have shape (..., rho). The mean at M is ``e0 + M * e1`` and the
    variance is ``v00 + 2 M v01 + M**2 v11``.
    """

    e0: np.ndarray
    e1: np.ndarray
    v00: np.ndarray
    v01: np.ndarray
    v11: np.ndarray
    mc_se: np.ndarray | None = None

    def mean(self, M) -> np.ndarray:
        return self.e0 + M * self.e1

    def variance(self, M) -> np.ndarray:
        return self.v00 + 2.0 * M * self.v01 + M * M * self.v11

    def sd(self, M) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance(M), 0.0))

    def min_variance(self) -> np.ndarray:
        """Smallest variance over M >= 0, per component."""
        pos = self.v11 > 0
        m_star = np.where(pos, np.clip(-self.v01 / np.where(pos, self.v11, 1.0), 0.0, None), 0.0)
        return self.variance(m_star)

    def take(self, idx) -> "MomentParts":
        return MomentParts(
            self.e0[idx], self.e1[idx], self.v00[idx], self.v01[idx], self.v11[idx],
            None if self.mc_se is None else self.mc_se[idx],
        )


@dataclass
class MomentSpec:
    components: list[AffineMoment]
    k: int

    @property
    def rho(self) -> int:
        return len(self.components)

    @property
    def c(self) -> int:
        return 2**self.k - 1

    def mean(self, means, M) -> np.ndarray:
        return self.parts(means).mean(M)

    def variance(self, means, M) -> np.ndarray:
        return self.parts(means).variance(M)

    def parts(self, means, *, mc_draws: int = 100_000, rng=None) -> MomentParts:
        means = np.asarray(means, dtype=float)
        if self.k > EXACT_MAX_K:
            return self._parts_mc(means, mc_draws, rng)
        cols = {name: [] for name in ("e0", "e1", "q00", "q01", "q11")}
        for comp in self.components:
            s00, s01, s11 = comp.squares()
            cols["e0"].append(poisson_mean(comp.p0, means))
            cols["e1"].append(poisson_mean(comp.p1, means))
            cols["q00"].append(poisson_mean(s00, means))
            cols["q01"].append(poisson_mean(s01, means))
            cols["q11"].append(poisson_mean(s11, means))
        e0, e1, q00, q01, q11 = (np.stack(np.broadcast_arrays(*cols[n]), axis=-1) for n in cols)
        return MomentParts(e0, e1, q00 - e0 * e0, q01 - e0 * e1, q11 - e1 * e1)

    def _parts_mc(self, means, draws, rng) -> MomentParts:
        # Past k = 5 the squared polynomials get too large to expand; estimate instead.
        rng = np.random.default_rng(rng)
        flat = means.reshape(-1, means.shape[-1])
        rows = []
        for mv in flat:
            N = rng.poisson(mv, size=(draws, mv.size)).astype(float)
            p0 = np.stack([c.p0.evaluate(N) for c in self.components], axis=-1)
            p1 = np.stack([c.p1.evaluate(N) for c in self.components], axis=-1)
            e0, e1 = p0.mean(0), p1.mean(0)
            v00 = p0.var(0)
            v01 = ((p0 - e0) * (p1 - e1)).mean(0)
            v11 = p1.var(0)
            rows.append((e0, e1, v00, v01, v11, np.sqrt(v00 / draws)))
        arrs = [np.stack([r[i] for r in rows]).reshape(means.shape[:-1] + (self.rho,)) for i in range(6)]
        return MomentParts(*arrs[:5], mc_se=arrs[5])


def build_g_highest(gamma: float, k: int) -> MomentSpec:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    c = 2**k - 1
    ps = parity_sets(k)
    odd = CellPolynomial.cell_product(c, ps.odd)
    even = CellPolynomial.cell_product(c, ps.even)
    # the -2**(k-1) + 1 offset cancels E[N_j**2] = m_j**2 + m_j over the even cells
    total = CellPolynomial.cell_sum(c, range(1, c + 1)) + (1 - 2 ** (k - 1))
    up, down = math.exp(gamma), math.exp(-gamma)
    g1 = AffineMoment(odd + even * total * up, even * (-up), "g1")
    g2 = AffineMoment(-odd - even * total * down, even * down, "g2")
    return MomentSpec([g1, g2], k)


def _pair_polys(k: int, r: int, t: int):
    c = 2**k - 1
    g = pair_groups(k, r, t)
    cells = np.arange(1, c + 1)
    return tuple(CellPolynomial.cell_sum(c, cells[g == code]) for code in (3, 2, 1))


def build_g_pairwise(spec: Pairwise, k: int) -> MomentSpec:
    spec.validate_for(k)
    comps = []
    for j, con in enumerate(spec.constraints, start=1):
        n11, n10, n01 = _pair_polys(k, con.r, con.t)
        core = n11 * n11 + n10 * n11 + n01 * n11 - n11
        cross = n10 * n01
        comps.append(AffineMoment(-core - cross * con.xi, n11, f"g{j}1"))
        comps.append(AffineMoment(core + cross * con.eta, -n11, f"g{j}2"))
    return MomentSpec(comps, k)


def build_moments(spec: RestrictionSpec, k: int) -> MomentSpec:
    if isinstance(spec, HighestOrder):
        return build_g_highest(spec.gamma, k)
    return build_g_pairwise(spec, k)
