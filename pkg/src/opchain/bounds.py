"""Worst-case error bounds for a two-stage chain ``f = g(u(x))``.

The approximation is ``F = G(U(x))`` where ``U`` approximates the inner map
``u`` componentwise (``|U_j - u_j| <= eps_u[j]``) and ``G`` is a sigmoid layer
``G(v) = sum_j g_j s(v_j) + g_0`` approximating the outer map ``g`` up to
``eps_g``. Because the sigmoid is 1/4-Lipschitz,

    |f(x) - F(x)| <= sum_j |g_j| * 0.25 * eps_u[j] + eps_g.

Knowing either stage exactly removes its term: ``F_u = g(U)`` keeps only the
inner term (for a sigmoid-superposition ``g``), ``F_g = G(u)`` only ``eps_g``.
This module computes those bounds and checks them by sampling.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, Falsification
from .nn import SIGMOID_LIPSCHITZ, sigmoid


@dataclass
class ErrorBudget:
    eps_u: np.ndarray
    eps_g: float = 0.0

    def __post_init__(self):
        self.eps_u = np.atleast_1d(np.asarray(self.eps_u, dtype=np.float64))
        self.eps_g = float(self.eps_g)
        if np.any(self.eps_u < 0) or self.eps_g < 0:
            raise ValueError("error budgets must be non-negative")


@dataclass
class OuterLayerSpec:
    g_weights: np.ndarray
    g_bias: float = 0.0
    l_s: float = SIGMOID_LIPSCHITZ

    def __post_init__(self):
        self.g_weights = np.atleast_1d(np.asarray(self.g_weights, dtype=np.float64))
        if self.l_s != SIGMOID_LIPSCHITZ:
            raise ValueError("sigmoid outer layers have l_s = 0.25")


@dataclass
class LipschitzSpec:
    l_g: float

    def __post_init__(self):
        if self.l_g < 0:
            raise ValueError("Lipschitz constant must be non-negative")


@dataclass
class BoundReport:
    theoretical_bound: float
    empirical_max_dev: float
    n_samples: int
    margin: float
    label: str = "F"
    eps_u: list = field(default_factory=list)
    eps_g: float = 0.0

    @property
    def falsified(self) -> bool:
        return self.margin < 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# --------------------------------------------------------------------------
# closed-form bounds
# --------------------------------------------------------------------------

def sigmoid_inequality_residual(g_j, x, e, l_s: float = SIGMOID_LIPSCHITZ):
    """``g_j s(x+e) - g_j s(x) - |g_j| l_s |e|``; never positive. Vectorised."""
    g_j = np.asarray(g_j, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    r = g_j * sigmoid(x + e) - g_j * sigmoid(x) - np.abs(g_j) * l_s * np.abs(e)
    return float(r) if np.ndim(r) == 0 else r


def composed_bound_sigmoid(outer: OuterLayerSpec, budget: ErrorBudget) -> float:
    if outer.g_weights.shape != budget.eps_u.shape:
        raise DimensionMismatch(
            f"{outer.g_weights.size} outer weights but {budget.eps_u.size} inner error budgets"
        )
    return float(np.sum(np.abs(outer.g_weights) * outer.l_s * budget.eps_u) + budget.eps_g)


def composed_bound_lipschitz(spec: LipschitzSpec, budget: ErrorBudget) -> float:
    """``l_g * ||eps_u||_1 + eps_g`` for an outer map that is l_g-Lipschitz in L1."""
    return float(spec.l_g * np.sum(budget.eps_u) + budget.eps_g)


def sigmoid_layer_lipschitz(weights) -> float:
    """L1-Lipschitz constant of ``v -> W s(v)``: l_s times the largest column sum of ``|W|``.

    A 1-D ``weights`` is a single output row.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    return float(SIGMOID_LIPSCHITZ * np.abs(w).sum(axis=0).max())


# --------------------------------------------------------------------------
# grid sweep of the sigmoid inequality
# --------------------------------------------------------------------------

@dataclass
class SweepResult:
    g: float
    max_residual: float
    x: np.ndarray
    e: np.ndarray
    normalized_residual: np.ndarray  # shape (len(e), len(x))

    def write_csv(self, path) -> Path:
        path = Path(path)
        xx, ee = np.meshgrid(self.x, self.e)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "e", "normalized_residual"])
            for xv, ev, rv in zip(xx.ravel(), ee.ravel(), self.normalized_residual.ravel()):
                w.writerow([repr(float(xv)), repr(float(ev)), repr(float(rv))])
        return path


def _grid(lo, hi, step):
    n = int(round((hi - lo) / step))
    # Integer-indexed so that exact grid points like e = 0 are hit exactly.
    return lo + step * np.arange(n + 1)


def sweep_inequality_grid(g_values: Sequence[float], x_range=(-10.0, 10.0),
                          e_range=(-10.0, 10.0), step: float = 0.05,
                          out_dir=None) -> tuple[float, list[SweepResult]]:
    """Evaluate the residual over an ``(x, e)`` grid for every ``g`` value.

    Returns the overall maximum residual and one :class:`SweepResult` per ``g``.
    With ``out_dir`` each surface (residual divided by ``|g|``) is written to
    ``sweep_g{g}.csv``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = _grid(*x_range, step)
    e = _grid(*e_range, step)
    xx, ee = np.meshgrid(x, e)
    results = []
    for g in g_values:
        r = sigmoid_inequality_residual(g, xx, ee)
        norm = r / abs(g) if g != 0 else r
        results.append(SweepResult(float(g), float(r.max()), x, e, norm))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for res in results:
            res.write_csv(out_dir / f"sweep_g{res.g:+g}.csv")
    return max(res.max_residual for res in results), results


# --------------------------------------------------------------------------
# empirical verification
# --------------------------------------------------------------------------

@dataclass
class SigmoidOuter:
    """Callable sigmoid layer ``v -> sum_j w_j s(v_j + shift_j) + bias``."""

    weights: np.ndarray
    bias: float = 0.0
    shift: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        if self.shift is None:
            self.shift = np.zeros_like(self.weights)
        self.shift = np.asarray(self.shift, dtype=np.float64)

    def __call__(self, v):
        v = np.atleast_2d(v)
        return sigmoid(v + self.shift) @ self.weights + self.bias

    @property
    def spec(self) -> OuterLayerSpec:
        return OuterLayerSpec(self.weights, self.bias)


def _sample_box(rng, box, n):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    return lo + (hi - lo) * rng.random((n, lo.size))


def measure_budget(true_inner: Callable, true_outer: Callable, approx_inner: Callable,
                   approx_outer: Callable, blocks, rng, n_range: int) -> ErrorBudget:
    """Sampled ``eps_u`` (per component) and ``eps_g``.

    ``blocks`` is a list of sample arrays from the domain, each evaluated on its
    own. ``eps_g`` compares ``g`` and ``G`` at the exact inner values ``u(x)`` and
    at ``n_range`` uniform points of the bounding box of observed ``U`` outputs
    padded by ``eps_u``, which contains every ``u(x)`` the bound can touch.
    """
    us, big_us = [], []
    for xs in blocks:
        us.append(np.atleast_2d(true_inner(xs)))
        big_us.append(np.atleast_2d(approx_inner(xs)))
    eps_u = np.max([np.max(np.abs(b - u), axis=0) for u, b in zip(us, big_us)], axis=0)
    lo = np.min([b.min(axis=0) for b in big_us], axis=0) - eps_u
    hi = np.max([b.max(axis=0) for b in big_us], axis=0) + eps_u
    eps_g = 0.0
    for vs in [*us, _sample_box(rng, (lo, hi), n_range)]:
        diff = np.abs(np.ravel(true_outer(vs)) - np.ravel(approx_outer(vs)))
        eps_g = max(eps_g, float(diff.max()))
    return ErrorBudget(eps_u, eps_g)


def _outer_bound_term(outer, eps_u) -> float:
    """Inner-error term for a known outer map: sigmoid weights or an L1 Lipschitz constant."""
    if isinstance(outer, SigmoidOuter):
        return composed_bound_sigmoid(outer.spec, ErrorBudget(eps_u, 0.0))
    if isinstance(outer, LipschitzSpec):
        return composed_bound_lipschitz(outer, ErrorBudget(eps_u, 0.0))
    raise TypeError("need a SigmoidOuter or LipschitzSpec to bound the inner error")


def verify_configurations(true_inner, true_outer, approx_inner, approx_outer: SigmoidOuter,
                          domain, n: int, seed: int = 0,
                          true_outer_lipschitz: LipschitzSpec | None = None,
                          raise_on_falsification: bool = True) -> dict[str, BoundReport]:
    """Bound and measure all three approximation chains on one function pair.

    ``F = G(U)``, ``F_u = g(U)`` (outer known) and ``F_g = G(u)`` (inner known).
    Budgets are sampled on ``n`` calibration points together with the ``n``
    fresh verification points, so every verification point satisfies the
    pointwise bound by construction unless the bound itself is wrong.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    calib = _sample_box(rng, domain, n)
    xs = _sample_box(rng, domain, n)
    budget = measure_budget(true_inner, true_outer, approx_inner, approx_outer,
                            [calib, xs], rng, n)

    u = np.atleast_2d(true_inner(xs))
    big_u = np.atleast_2d(approx_inner(xs))
    f = np.ravel(true_outer(u))
    devs = {
        "F": np.abs(f - np.ravel(approx_outer(big_u))),
        "F_u": np.abs(f - np.ravel(true_outer(big_u))),
        "F_g": np.abs(f - np.ravel(approx_outer(u))),
    }
    known_outer = true_outer_lipschitz or (true_outer if isinstance(true_outer, SigmoidOuter) else None)
    bounds = {
        "F": composed_bound_sigmoid(approx_outer.spec, budget),
        "F_g": budget.eps_g,
    }
    if known_outer is not None:
        bounds["F_u"] = _outer_bound_term(known_outer, budget.eps_u)
    else:
        devs.pop("F_u")

    reports = {}
    for label, dev in devs.items():
        emp = float(dev.max())
        rep = BoundReport(theoretical_bound=bounds[label], empirical_max_dev=emp,
                          n_samples=n, margin=bounds[label] - emp, label=label,
                          eps_u=budget.eps_u.tolist(), eps_g=budget.eps_g)
        reports[label] = rep
        if raise_on_falsification and rep.falsified:
            raise Falsification(
                f"{label}: empirical deviation {emp:.6g} exceeds bound {bounds[label]:.6g}", rep
            )
    return reports


def verify_bound_empirically(true_inner, true_outer, approx_inner, approx_outer: SigmoidOuter,
                             domain, n: int, seed: int = 0,
                             raise_on_falsification: bool = True) -> BoundReport:
    """Check ``max |F - f| <= sum_j |g_j| l_s eps_u[j] + eps_g`` by sampling."""
    reps = verify_configurations(true_inner, true_outer, approx_inner, approx_outer,
                                 domain, n, seed, raise_on_falsification=False)
    rep = reps["F"]
    if raise_on_falsification and rep.falsified:
        raise Falsification(
            f"empirical deviation {rep.empirical_max_dev:.6g} exceeds bound {rep.theoretical_bound:.6g}", rep
        )
    return rep


# --------------------------------------------------------------------------
# random test pairs
# --------------------------------------------------------------------------

@dataclass
class SigmoidNet:
    """One-hidden-layer map ``x -> A s(W x + b) + c`` with an optional wobble.

    The wobble ``amp * sin(freq @ x + phase)`` turns an exact inner map into a
    controlled approximation of it.
    """

    w: np.ndarray
    b: np.ndarray
    a: np.ndarray
    c: np.ndarray
    amp: np.ndarray | None = None
    freq: np.ndarray | None = None
    phase: np.ndarray | None = None

    def __call__(self, x):
        x = np.atleast_2d(x)
        out = sigmoid(x @ self.w.T + self.b) @ self.a.T + self.c
        if self.amp is not None:
            out = out + self.amp * np.sin(x @ self.freq.T + self.phase)
        return out


@dataclass
class FunctionPair:
    true_inner: SigmoidNet
    approx_inner: SigmoidNet
    true_outer: SigmoidOuter
    approx_outer: SigmoidOuter
    domain: tuple

    @property
    def input_dim(self) -> int:
        return self.true_inner.w.shape[1]


def random_pair(seed: int, max_dim: int = 4, max_inner_error: float = 0.3,
                max_outer_shift: float = 0.3) -> FunctionPair:
    """Seeded two-stage pair: inner ``R^d -> R^m`` and sigmoid-layer outer ``R^m -> R``.

    ``G`` and ``g`` share their weights; ``g`` differs by small input shifts and a
    bias offset, so ``g`` is itself a sigmoid superposition with the same ``|g_j|``.
    """
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, max_dim + 1))
    m = int(rng.integers(1, max_dim + 1))
    hidden = int(rng.integers(2, 7))
    w = rng.uniform(-2, 2, (hidden, d))
    b = rng.uniform(-1, 1, hidden)
    a = rng.uniform(-3, 3, (m, hidden))
    c = rng.uniform(-1, 1, m)
    inner = SigmoidNet(w, b, a, c)
    approx_inner = SigmoidNet(w, b, a, c,
                              amp=rng.uniform(0, max_inner_error, m),
                              freq=rng.uniform(-4, 4, (m, d)),
                              phase=rng.uniform(0, 2 * np.pi, m))
    g = rng.uniform(-3, 3, m)
    g0 = float(rng.uniform(-1, 1))
    approx_outer = SigmoidOuter(g, g0)
    true_outer = SigmoidOuter(g, g0 + float(rng.uniform(-0.05, 0.05)),
                              shift=rng.uniform(-max_outer_shift, max_outer_shift, m))
    domain = (-np.ones(d), np.ones(d))
    return FunctionPair(inner, approx_inner, true_outer, approx_outer, domain)


def verify_random_pairs(n_pairs: int = 50, n_samples: int = 100_000, seed: int = 0,
                        max_dim: int = 4) -> list[dict[str, BoundReport]]:
    """Run :func:`verify_configurations` on ``n_pairs`` seeded random pairs.

    Falsifications are reported in the returned reports rather than raised.
    """
    out = []
    for k in range(n_pairs):
        pair = random_pair(seed + k, max_dim=max_dim)
        out.append(verify_configurations(pair.true_inner, pair.true_outer, pair.approx_inner,
                                         pair.approx_outer, pair.domain, n_samples,
                                         seed=seed + k, raise_on_falsification=False))
    return out
