"""Transferability indicators, expectations, dispersion, agreement, correlation.

Indicator functions accept scalars or numpy arrays of labels and broadcast.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidArguments, ZeroVarianceError


def is_adversarial(f, x, x_prime, epsilon):
    """True iff ``f`` labels ``x'`` differently from ``x`` and ``||x' - x||_2 <= epsilon``."""
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {x_prime.shape}")
    if np.linalg.norm(x_prime - x) > epsilon:
        return False
    return f.predict_label(x_prime) != f.predict_label(x)


def targeted_indicator(fT_x, fT_xp, fS_xp):
    """1 iff the target is fooled and agrees with the surrogate's adversarial label."""
    hit = (np.asarray(fT_xp) != np.asarray(fT_x)) & (np.asarray(fT_xp) == np.asarray(fS_xp))
    return hit.astype(np.uint8) if hit.ndim else int(hit)


def nontargeted_indicator(fT_x, fT_xp, fS_x, fS_xp):
    """1 iff both the target and the surrogate change their label between x and x'."""
    hit = (np.asarray(fT_xp) != np.asarray(fT_x)) & (np.asarray(fS_x) != np.asarray(fS_xp))
    return hit.astype(np.uint8) if hit.ndim else int(hit)


def transfer_expectation(indicators):
    """Mean of the indicator vector over the target ensemble (last axis)."""
    ind = np.asarray(indicators, dtype=np.float64)
    if ind.shape[-1] == 0:
        raise InvalidArguments("need at least one target model")
    return ind.mean(axis=-1) if ind.ndim > 1 else float(ind.mean())


def dispersion_stats(expectation):
    """Population standard deviations of an expectation matrix ``E[p, d]``.

    NaN entries (missing records) are ignored; sources with no entries are
    left out of the per-source mean.

    :returns: ``(sigma_p, mean_per_source_std, overall_std)``
    """
    E = np.asarray(expectation, dtype=np.float64)
    if E.ndim != 2:
        raise DimensionError("expectation must be a P x D matrix")
    if E.shape[1] < 1:
        raise InvalidArguments("need at least one perturbation per source")
    present = ~np.isnan(E)
    if not present.any():
        raise InvalidArguments("expectation matrix has no entries")
    counts = present.sum(axis=1)
    # shift each row by one of its own values so constant rows give exactly zero
    pivot = np.where(present, E, -np.inf).max(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        shifted = np.where(present, E - pivot[:, None], 0.0)
        means = shifted.sum(axis=1) / counts
        sq = np.where(present, (shifted - means[:, None]) ** 2, 0.0)
        sigma = np.sqrt(sq.sum(axis=1) / counts)
    flat = E[present]
    overall = float(np.std(flat - flat[0]))
    return sigma, float(np.mean(sigma[counts > 0])), overall


@dataclass
class TransferGrid:
    """Indicator tensors ``[p, d, j]`` for one surrogate against one target ensemble.

    ``present[p, d]`` is False where no adversarial example exists; indicator
    cells there are zero and are excluded from every aggregate.
    """

    targeted: np.ndarray
    nontargeted: np.ndarray
    present: np.ndarray
    surrogate_id: str = "surrogate"
    target_id: str = "targets"

    def __post_init__(self):
        self.targeted = np.asarray(self.targeted, dtype=np.uint8)
        self.nontargeted = np.asarray(self.nontargeted, dtype=np.uint8)
        self.present = np.asarray(self.present, dtype=bool)
        if self.targeted.shape != self.nontargeted.shape or self.targeted.ndim != 3:
            raise DimensionError("indicator tensors must share one (P, D, N) shape")
        if self.present.shape != self.targeted.shape[:2]:
            raise DimensionError("present mask must be P x D")

    @property
    def dims(self):
        return self.targeted.shape

    def tensor(self, variant):
        if variant == "targeted":
            return self.targeted
        if variant == "nontargeted":
            return self.nontargeted
        raise InvalidArguments(f"variant must be 'targeted' or 'nontargeted', got {variant!r}")

    def expectation(self, variant):
        """P x D expectation matrix with NaN where the record is missing."""
        E = transfer_expectation(self.tensor(variant))
        return np.where(self.present, E, np.nan)

    def implication_holds(self):
        return bool(np.all(self.targeted <= self.nontargeted))


def surrogate_agreement(grid_a, grid_b, variant):
    """Fraction of ``(p, d, j)`` cells whose indicator matches across two grids.

    Only ``(p, d)`` pairs present in both grids count. ``nonzero`` restricts to
    pairs where either grid fools at least one target; it is NaN when no such
    pair exists.

    :returns: ``(overall, nonzero)``
    """
    if grid_a.dims != grid_b.dims:
        raise DimensionError(f"grid dims differ: {grid_a.dims} vs {grid_b.dims}")
    A, B = grid_a.tensor(variant), grid_b.tensor(variant)
    both = grid_a.present & grid_b.present
    if not both.any():
        raise InvalidArguments("no (p, d) pair present in both grids")
    equal = (A == B).mean(axis=2)
    overall = float(equal[both].mean())
    active = both & ((A.max(axis=2) > 0) | (B.max(axis=2) > 0))
    nonzero = float(equal[active].mean()) if active.any() else math.nan
    return overall, nonzero


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise InvalidArguments("need at least two points")
    da, db = a - a.mean(), b - b.mean()
    ssa, ssb = da @ da, db @ db
    if ssa == 0.0 or ssb == 0.0:
        raise ZeroVarianceError("correlation undefined for a constant vector")
    return float(np.clip((da @ db) / np.sqrt(ssa * ssb), -1.0, 1.0))


def histogram2d(a, b, bins):
    """``bins x bins`` counts on [0, 1]^2; row index from ``a``, column from ``b``.

    Edges are uniform and the last bin is closed on the right.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    if bins < 1:
        raise InvalidArguments("bins must be >= 1")
    for v in (a, b):
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise InvalidArguments("values must lie in [0, 1]")
    ia = np.minimum((a * bins).astype(np.int64), bins - 1)
    ib = np.minimum((b * bins).astype(np.int64), bins - 1)
    counts = np.zeros((bins, bins), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return counts


def five_number_summary(values):
    """min, Q1, median, Q3, max with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise InvalidArguments("no values to summarise")
    return tuple(float(q) for q in np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear"))


@dataclass
class MetricsReport:
    """Aggregates for one grid, optionally with cross-grid agreement and correlation."""

    expectation_targeted: np.ndarray
    expectation_nontargeted: np.ndarray
    mean_expectation: dict
    per_source_std: dict
    mean_per_source_std: dict
    overall_std: dict
    record_count: int = 0
    agreement: dict | None = None
    pearson: dict | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_grid(cls, grid):
        E = {v: grid.expectation(v) for v in ("targeted", "nontargeted")}
        mean, sig, msig, osd = {}, {}, {}, {}
        for v, mat in E.items():
            sigma, m, o = dispersion_stats(mat)
            mean[v] = float(np.nanmean(mat))
            sig[v], msig[v], osd[v] = sigma, m, o
        return cls(E["targeted"], E["nontargeted"], mean, sig, msig, osd,
                   record_count=int(grid.present.sum()))

    def to_dict(self):
        def clean(x):
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, np.ndarray):
                return [clean(v) for v in x.tolist()]
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            if isinstance(x, float) and math.isnan(x):
                return None
            return x

        out = {
            "record_count": self.record_count,
            "mean_expectation": self.mean_expectation,
            "mean_per_source_std": self.mean_per_source_std,
            "overall_std": self.overall_std,
            "per_source_std": self.per_source_std,
            "expectation_targeted": self.expectation_targeted,
            "expectation_nontargeted": self.expectation_nontargeted,
        }
        if self.agreement is not None:
            out["agreement"] = self.agreement
        if self.pearson is not None:
            out["pearson"] = self.pearson
        out.update(self.extra)
        return clean(out)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)
