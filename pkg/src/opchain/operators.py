"""Fixed operators that carry prior knowledge into a pipeline.

All of them are :class:`~opchain.nn.OperatorNode` subclasses working on
``(n_samples, dim)`` batches.
"""

from __future__ import annotations

from itertools import combinations_with_replacement
from math import comb

import numpy as np

from .errors import DimensionMismatch, NonPositiveIntensity
from .nn import OperatorNode


class NegLogTransform(OperatorNode):
    """Per-bin ``-ln(I_b / I0_b)``: detector intensities to line integrals."""

    def __init__(self, i0_per_bin):
        i0 = np.asarray(i0_per_bin, dtype=np.float64).reshape(-1)
        if i0.size == 0 or not np.all(i0 > 0):
            raise NonPositiveIntensity("flat-field intensities must all be strictly positive")
        super().__init__(i0.size, i0.size, name="NegLog")
        self.i0_per_bin = i0

    def _check(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"expected {self.in_dim} bins, got {x.shape[-1]}")
        if not np.all(x > 0):
            raise NonPositiveIntensity("-log needs strictly positive intensities")

    def forward(self, x):
        self._check(x)
        return -np.log(x / self.i0_per_bin)

    def jvp(self, x, upstream):
        self._check(x)
        return -upstream / x


class IntensityFloor(OperatorNode):
    """Clamp intensities from below at ``rel_floor * I0`` (per bin).

    Guards the -log transform against photon-starved pixels. The gradient is
    passed through where the input is at or above the floor and zeroed where the
    clamp is active.
    """

    def __init__(self, i0_per_bin, rel_floor: float = 1e-12):
        i0 = np.asarray(i0_per_bin, dtype=np.float64).reshape(-1)
        super().__init__(i0.size, i0.size, name="IntensityFloor")
        self.floor = rel_floor * i0

    def forward(self, x):
        return np.maximum(x, self.floor)

    def jvp(self, x, upstream):
        return np.where(x >= self.floor, upstream, 0.0)


def monomial_exponents(input_dim: int, degree: int, cross_terms: bool = True) -> np.ndarray:
    """Exponent matrix of all monomials of total degree 1..degree, graded-lex order.

    Row ``m`` holds the power of each input variable in monomial ``m``. Without
    cross terms only pure powers ``x_i**k`` appear, ordered by degree, then by
    variable.
    """
    rows = []
    for k in range(1, degree + 1):
        if cross_terms:
            for combo in combinations_with_replacement(range(input_dim), k):
                e = np.zeros(input_dim, dtype=np.int64)
                for i in combo:
                    e[i] += 1
                rows.append(e)
        else:
            for i in range(input_dim):
                e = np.zeros(input_dim, dtype=np.int64)
                e[i] = k
                rows.append(e)
    return np.array(rows, dtype=np.int64)


def n_monomials(input_dim: int, degree: int, cross_terms: bool = True) -> int:
    if cross_terms:
        return comb(input_dim + degree, degree) - 1
    return input_dim * degree


class PolynomialExpansion(OperatorNode):
    """Map ``x`` to every monomial of total degree 1..degree (no constant term)."""

    def __init__(self, input_dim: int, degree: int = 3, include_cross_terms: bool = True):
        if input_dim <= 0 or degree <= 0:
            raise ValueError("input_dim and degree must be positive")
        self.exponents = monomial_exponents(input_dim, degree, include_cross_terms)
        super().__init__(input_dim, self.exponents.shape[0], name="PolyExpand")
        self.degree = degree
        self.include_cross_terms = include_cross_terms
        # For d/dx_i: exponents with x_i lowered by one, and the factor that comes down.
        self._lowered = []
        for i in range(input_dim):
            low = self.exponents.copy()
            low[:, i] = np.maximum(low[:, i] - 1, 0)
            self._lowered.append(low)

    def _check(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"expected {self.in_dim} inputs, got {x.shape[-1]}")

    @staticmethod
    def _eval(x, exps):
        return np.prod(x[:, None, :] ** exps[None, :, :], axis=2)

    def forward(self, x):
        self._check(x)
        return self._eval(x, self.exponents)

    def jvp(self, x, upstream):
        self._check(x)
        out = np.empty_like(x)
        for i in range(self.in_dim):
            factor = self.exponents[:, i].astype(np.float64)
            partial = factor * self._eval(x, self._lowered[i])
            out[:, i] = np.sum(upstream * partial, axis=1)
        return out


class Standardizer(OperatorNode):
    """Per-feature ``(x - mean) / std`` with statistics frozen at fit time."""

    def __init__(self, mean, std):
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        std = np.asarray(std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DimensionMismatch("mean and std must have the same length")
        if not np.all(std > 0):
            raise ValueError("std must be strictly positive")
        super().__init__(mean.size, mean.size, name="Standardize")
        self.mean = mean
        self.std = std

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        # Constant features pass through centred but unscaled.
        std = np.where(std > 0, std, 1.0)
        return cls(x.mean(axis=0), std)

    @classmethod
    def unfitted(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def forward(self, x):
        return (x - self.mean) / self.std

    def jvp(self, x, upstream):
        return upstream / self.std


class OutputScale(OperatorNode):
    """Fixed affine map ``x * scale + offset``; undoes target standardization."""

    def __init__(self, scale, offset):
        scale = np.atleast_1d(np.asarray(scale, dtype=np.float64))
        offset = np.atleast_1d(np.asarray(offset, dtype=np.float64))
        super().__init__(scale.size, scale.size, name="OutputScale")
        self.scale = scale
        self.offset = offset

    def forward(self, x):
        return x * self.scale + self.offset

    def jvp(self, x, upstream):
        return upstream * self.scale


def neg_log_forward(t: NegLogTransform, intensities):
    return t(intensities)


def neg_log_jvp(t: NegLogTransform, intensities, upstream):
    x = np.atleast_2d(np.asarray(intensities, dtype=np.float64))
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    out = t.jvp(x, g)
    return out[0] if np.ndim(intensities) == 1 else out


def poly_expand(p: PolynomialExpansion, x):
    return p(x)


def poly_expand_jvp(p: PolynomialExpansion, x, upstream):
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    out = p.jvp(xb, g)
    return out[0] if np.ndim(x) == 1 else out
