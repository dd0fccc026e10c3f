"""Truth-bound logic kernel: negation, t-norms, weighted t-norms, dissimilarity.

Everything here is pure numpy over float64 and safe for concurrent use. An
embedding is d interval pairs [l_i, u_i] in [0,1] stored flat as
[l_1..l_d, u_1..u_d]; interval width encodes uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TNORM_KINDS = ("min", "prod", "luk")
DEFAULT_ALPHA = -10.0
ENTROPY_EPS = 1e-9


@dataclass(frozen=True)
class TNormKind:
    """A conjunction family plus the smoothing constant for the weighted minimum."""

    name: str
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if self.name not in TNORM_KINDS:
            raise ValueError(f"unknown t-norm kind {self.name!r}")
        if self.alpha >= 0:
            raise ValueError("smoothing constant must be negative")


@dataclass(frozen=True)
class TruthBounds:
    """d interval pairs flat-packed as [l_1..l_d, u_1..u_d] with 0 <= l <= u <= 1."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size % 2 != 0:
            raise ValueError("expected a flat array of 2d values")
        d = values.size // 2
        lower, upper = values[:d], values[d:]
        if np.any(lower < 0) or np.any(upper > 1) or np.any(lower > upper):
            raise ValueError("bounds must satisfy 0 <= l <= u <= 1")

    @classmethod
    def from_pairs(cls, lower, upper) -> "TruthBounds":
        return cls(np.concatenate([np.asarray(lower, float), np.asarray(upper, float)]))

    @property
    def dim(self) -> int:
        return self.values.size // 2

    @property
    def lower(self) -> np.ndarray:
        return self.values[: self.dim]

    @property
    def upper(self) -> np.ndarray:
        return self.values[self.dim:]

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower


def negate(bounds: TruthBounds) -> TruthBounds:
    """Involute negation: [l, u] -> [1-u, 1-l]."""
    return TruthBounds(np.concatenate([1.0 - bounds.upper, 1.0 - bounds.lower]))


def tnorm(kind: str | TNormKind, truths) -> np.ndarray:
    """Unweighted conjunction of k truth arrays stacked on axis 0.

    min is the hard minimum; prod the product; luk the Lukasiewicz form
    max(0, 1 - sum(1 - t_j)).
    """
    name = kind.name if isinstance(kind, TNormKind) else kind
    t = np.asarray(truths, dtype=np.float64)
    if t.shape[0] < 1:
        raise ValueError("need at least one input")
    if name == "min":
        return np.min(t, axis=0)
    if name == "prod":
        return np.prod(t, axis=0)
    if name == "luk":
        return np.maximum(0.0, 1.0 - np.sum(1.0 - t, axis=0))
    raise ValueError(f"unknown t-norm kind {name!r}")


def smoothmin_weighted(weights, truths, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Non-monotonic smooth minimum: sum(t w e^(at)) / sum(w e^(at))."""
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    scores = w * np.exp(alpha * t)
    denom = np.sum(scores, axis=0)
    if np.any(denom == 0.0):
        raise ValueError("all inputs removed: weighted-minimum denominator is zero")
    return np.sum(t * scores, axis=0) / denom


def weighted_tnorm(kind: str | TNormKind, weights, truths,
                   alpha: float | None = None) -> np.ndarray:
    """Weighted conjunction; weights in [0,1], w_j = 0 removes input j.

    prod: prod(t_j^w_j); luk: max(0, 1 - sum(w_j (1 - t_j))); min uses the
    smooth minimum even at all-ones weights, so it only approximates the hard
    minimum there.
    """
    if isinstance(kind, TNormKind):
        name = kind.name
        alpha = kind.alpha if alpha is None else alpha
    else:
        name = kind
        alpha = DEFAULT_ALPHA if alpha is None else alpha
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if w.shape != t.shape:
        raise ValueError(f"weight shape {w.shape} != truth shape {t.shape}")
    if name == "min":
        return smoothmin_weighted(w, t, alpha)
    if name == "prod":
        return np.prod(t ** w, axis=0)
    if name == "luk":
        return np.maximum(0.0, 1.0 - np.sum(w * (1.0 - t), axis=0))
    raise ValueError(f"unknown t-norm kind {name!r}")


def repair_bounds(lower: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Collapse crossed intervals (l > u) to their midpoint; returns repair count."""
    crossed = lower > upper
    count = int(np.count_nonzero(crossed))
    if count:
        mid = 0.5 * (lower + upper)
        lower = np.where(crossed, mid, lower)
        upper = np.where(crossed, mid, upper)
    return lower, upper, count


def conjoin_bounds(kind: str | TNormKind, inputs: list[TruthBounds],
                   weights: list[np.ndarray] | None = None,
                   alpha: float | None = None) -> TruthBounds:
    """Per-dimension conjunction of lowers and uppers, with midpoint repair.

    ``weights`` is one per-dimension weight vector per input; None means the
    unweighted t-norm. Only the non-monotonic weighted minimum can cross
    bounds; the repair is a no-op for the monotone kinds.
    """
    if not inputs:
        raise ValueError("need at least one input")
    d = inputs[0].dim
    if any(b.dim != d for b in inputs):
        raise ValueError("dimension mismatch between conjunction inputs")
    lowers = np.stack([b.lower for b in inputs])
    uppers = np.stack([b.upper for b in inputs])
    if weights is None:
        new_lower = tnorm(kind, lowers)
        new_upper = tnorm(kind, uppers)
    else:
        if len(weights) != len(inputs):
            raise ValueError("one weight vector per input required")
        w = np.stack([np.asarray(v, float) for v in weights])
        if w.shape != lowers.shape:
            raise ValueError(f"weight shape {w.shape} != ({len(inputs)}, {d})")
        new_lower = weighted_tnorm(kind, w, lowers, alpha)
        new_upper = weighted_tnorm(kind, w, uppers, alpha)
        new_lower, new_upper, _ = repair_bounds(new_lower, new_upper)
    return TruthBounds.from_pairs(new_lower, new_upper)


def disjoin_bounds(kind: str | TNormKind, inputs: list[TruthBounds],
                   weights: list[np.ndarray] | None = None,
                   alpha: float | None = None) -> TruthBounds:
    """Disjunction via De Morgan: not(conjoin(not inputs))."""
    negated = [negate(b) for b in inputs]
    return negate(conjoin_bounds(kind, negated, weights, alpha))


def dissimilarity(a, b) -> float:
    """Mean L1 distance over bound slots: sum(|l-l'| + |u-u'|) / (2d).

    Accepts TruthBounds or raw slot arrays (the point-truth layout); the
    satisfiability of a candidate against a query embedding is 1 minus this.
    """
    x = a.values if isinstance(a, TruthBounds) else np.asarray(a, float)
    y = b.values if isinstance(b, TruthBounds) else np.asarray(b, float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(np.mean(np.abs(x - y)))


def entropy_vector(bounds: TruthBounds, eps: float = ENTROPY_EPS) -> np.ndarray:
    """Per-dimension differential entropy log(u - l), clamped at log(eps)."""
    return np.log(np.maximum(bounds.widths, eps))
