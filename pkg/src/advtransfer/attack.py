"""Boundary-traversal attack (HopSkipJump skeleton) with black-box and white-box normals.

Each iteration projects onto the decision boundary by bisection, estimates the
boundary normal there (Monte Carlo sign probing, or the analytic gradient of
the logit difference), and steps off the boundary along that normal. The
bisection back towards the source then lands closer to it than before.
"""
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import PerturbationRecord
from .errors import (
    DegenerateEstimate,
    DegenerateGradient,
    InvalidArguments,
    InvalidSource,
    NoInitialAdversarial,
    StepFailure,
    UnsupportedOperation,
)

MIN_STEP = 1e-10
RADIUS_RETRIES = 8


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "whitebox"
    max_iterations: int = 40
    bisect_tolerance: float = 1e-3
    mc_budget: int = 100
    mc_radius_scale: float = 1.0
    step_shrink: float = 0.5
    epsilon: float | None = None
    targeted: bool = True
    target_class: int | None = None

    def __post_init__(self):
        if self.mode not in ("blackbox", "whitebox"):
            raise InvalidArguments(f"mode must be 'blackbox' or 'whitebox', got {self.mode!r}")
        if self.max_iterations < 1:
            raise InvalidArguments("max_iterations must be >= 1")
        if not 0.0 < self.bisect_tolerance < 0.5:
            raise InvalidArguments("bisect_tolerance must lie in (0, 0.5)")
        if self.mc_budget < 10:
            raise InvalidArguments("mc_budget must be >= 10")
        if not self.mc_radius_scale > 0:
            raise InvalidArguments("mc_radius_scale must be positive")
        if not 0.0 < self.step_shrink < 1.0:
            raise InvalidArguments("step_shrink must lie in (0, 1)")
        if self.epsilon is not None and not self.epsilon > 0:
            raise InvalidArguments("epsilon must be positive when given")

    def to_dict(self):
        return asdict(self)


class DecisionOracle:
    """Hard-label adversarial predicate around one source point, with a query counter.

    Untargeted: adversarial iff the label differs from ``source_label``.
    Targeted: adversarial iff the label equals ``target_class``.
    Points are clipped into [0, 1] before every query.
    """

    def __init__(self, model, source_label, target_class=None):
        self.model = model
        self.source_label = int(source_label)
        self.target_class = None if target_class is None else int(target_class)
        self.queries = 0

    def labels(self, points):
        pts = np.clip(np.asarray(points, dtype=np.float64), 0.0, 1.0)
        self.queries += 1 if pts.ndim == 1 else pts.shape[0]
        return self.model.predict_label(pts)

    def is_adversarial_label(self, label):
        if self.target_class is None:
            return label != self.source_label
        return label == self.target_class

    def __call__(self, points):
        return self.is_adversarial_label(self.labels(points))


def as_oracle(surrogate, x=None, source_label=None):
    """Wrap a bare model as an untargeted oracle relative to ``source_label`` (or f(x))."""
    if isinstance(surrogate, DecisionOracle):
        return surrogate
    if source_label is None:
        if x is None:
            raise InvalidArguments("need a source point or source_label to build an oracle")
        source_label = surrogate.predict_label(x)
    return DecisionOracle(surrogate, source_label)


@dataclass
class Iterate:
    t: int
    boundary_point: np.ndarray
    offset_point: np.ndarray
    distance: float
    best_distance: float
    queries: int

    def to_json(self):
        return {
            "t": self.t,
            "boundary_point": self.boundary_point.tolist(),
            "offset_point": self.offset_point.tolist(),
            "distance": self.distance,
            "best_distance": self.best_distance,
            "queries": self.queries,
        }


@dataclass
class AttackTrace:
    iterates: list = field(default_factory=list)
    stopped_early: str | None = None

    def best_distances(self):
        return [it.best_distance for it in self.iterates]

    def write_jsonl(self, fh, **context):
        for it in self.iterates:
            fh.write(json.dumps({**context, **it.to_json()}) + "\n")


def find_initial_adversarial(surrogate, x, cfg, candidates, rng):
    """Uniformly draw a candidate the surrogate already places on the adversarial side.

    :param x: the :class:`~advtransfer.core.LabeledSample` under attack.
    :param candidates: pool to draw from (typically the attacker's training data).
    """
    model = surrogate.model if isinstance(surrogate, DecisionOracle) else surrogate
    labels = model.predict_label(candidates.features)
    if cfg.targeted:
        if cfg.target_class is None:
            raise InvalidArguments("targeted initialisation needs a target_class")
        qualifying = np.flatnonzero(labels == cfg.target_class)
    else:
        qualifying = np.flatnonzero(labels != model.predict_label(x.features))
    if qualifying.size == 0:
        raise NoInitialAdversarial("no candidate lies on the adversarial side of the surrogate")
    pick = qualifying[rng.gen.integers(qualifying.size)]
    return candidates.features[pick].copy()


def boundary_bisect(surrogate, x, x_adv, theta):
    """Binary search on the segment [x, x_adv] for the first adversarial point.

    Stops once the segment-parameter bracket is at most ``theta`` wide and
    returns its adversarial end. A segment already shorter than ``theta``
    returns ``x_adv`` unchanged.
    """
    oracle = as_oracle(surrogate, x)
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if not oracle(x_adv):
        raise InvalidArguments("x_adv is not adversarial: both endpoints share a label")
    if np.linalg.norm(x_adv - x) <= theta:
        return x_adv.copy()
    lo, hi = 0.0, 1.0
    while hi - lo > theta:
        mid = 0.5 * (lo + hi)
        if oracle((1.0 - mid) * x + mid * x_adv):
            hi = mid
        else:
            lo = mid
    return np.clip((1.0 - hi) * x + hi * x_adv, 0.0, 1.0)


def _unit_directions(gen, count, dim):
    u = gen.standard_normal((count, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def mc_normal_estimate(surrogate, x_t, B, radius, rng, source_label=None):
    """Monte Carlo estimate of the unit boundary normal at ``x_t``.

    Probes ``x_t + radius * u_b`` for ``B`` uniform unit directions, scores each
    +1 (adversarial) or -1, and returns the normalised baseline-corrected sum
    of ``(phi_b - mean(phi)) * u_b``. The result points into the adversarial side.
    """
    oracle = as_oracle(surrogate, source_label=source_label)
    x_t = np.asarray(x_t, dtype=np.float64)
    if not radius > 0:
        raise InvalidArguments("radius must be positive")
    u = _unit_directions(rng.gen, int(B), x_t.size)
    phi = np.where(oracle(x_t + radius * u), 1.0, -1.0)
    if np.all(phi == phi[0]):
        exc = DegenerateEstimate(
            f"all {B} probes at radius {radius:.3g} were "
            + ("adversarial" if phi[0] > 0 else "non-adversarial")
        )
        exc.all_adversarial = bool(phi[0] > 0)
        raise exc
    v = (phi - phi.mean()) @ u
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateEstimate("probe signs cancel exactly")
    return v / norm


def whitebox_normal(surrogate, x_t, source_label, adv_label):
    """Unit gradient of ``logit_adv - logit_source`` at ``x_t``."""
    model = surrogate.model if isinstance(surrogate, DecisionOracle) else surrogate
    if not model.differentiable:
        raise UnsupportedOperation(f"{model.kind} surrogates have no analytic gradient")
    g = model.boundary_gradient(x_t, adv_label, source_label)
    norm = np.linalg.norm(g)
    if norm < 1e-12:
        raise DegenerateGradient(f"boundary gradient vanishes (norm {norm:.3g})")
    return g / norm


def perpendicular_step(x_t, normal, x, step_size, surrogate, step_shrink=0.5):
    """Step from the boundary point along ``normal``, halving (by ``step_shrink``) until adversarial."""
    if not step_size > 0:
        raise InvalidArguments("step_size must be positive")
    oracle = as_oracle(surrogate, x)
    x_t = np.asarray(x_t, dtype=np.float64)
    while step_size >= MIN_STEP:
        candidate = np.clip(x_t + step_size * normal, 0.0, 1.0)
        if oracle(candidate):
            return candidate
        step_size *= step_shrink
    raise StepFailure("no adversarial point along the normal before the step size underflowed")


def _blackbox_normal(oracle, x_t, dist, t, cfg, rng):
    B = int(cfg.mc_budget * math.sqrt(t + 1))
    radius = cfg.mc_radius_scale * dist / math.sqrt(x_t.size)
    for _ in range(RADIUS_RETRIES):
        try:
            return mc_normal_estimate(oracle, x_t, B, radius, rng)
        except DegenerateEstimate as exc:
            # all-adversarial: probes never reach the boundary; all-benign: overshooting it
            radius = radius * 2.0 if exc.all_adversarial else radius * 0.5
            last = exc
    raise last


def draw_target_class(source_label, class_count, rng):
    """Uniform draw from the classes other than ``source_label``."""
    k = int(rng.gen.integers(class_count - 1))
    return k if k < source_label else k + 1


def run_attack(surrogate, source, cfg, candidates, rng, *, source_index=0, perturbation_index=0):
    """Minimum-distance adversarial example for ``source`` against ``surrogate``.

    Targeted runs with no fixed ``cfg.target_class`` draw one uniformly from the
    non-source classes as the first use of ``rng``.

    :returns: ``(PerturbationRecord, AttackTrace)``
    """
    x = np.asarray(source.features, dtype=np.float64)
    if surrogate.predict_label(x) != source.label:
        raise InvalidSource(f"surrogate misclassifies the source (true label {source.label})")
    if cfg.mode == "whitebox" and not surrogate.differentiable:
        raise UnsupportedOperation("white-box mode needs a differentiable surrogate")

    target = None
    if cfg.targeted:
        target = cfg.target_class
        if target is None:
            target = draw_target_class(source.label, surrogate.class_count, rng)
        if target == source.label:
            raise InvalidArguments("target class equals the source label")
        cfg = replace(cfg, target_class=target)
    oracle = DecisionOracle(surrogate, source.label, target)
    theta = cfg.bisect_tolerance

    offset = find_initial_adversarial(oracle, source, cfg, candidates, rng)
    x_t = boundary_bisect(oracle, x, offset, theta)
    dist = float(np.linalg.norm(x_t - x))
    best, best_dist = x_t, dist
    trace = AttackTrace([Iterate(0, x_t, offset, dist, best_dist, oracle.queries)])

    for t in range(1, cfg.max_iterations + 1):
        try:
            if cfg.mode == "whitebox":
                adv_label = int(oracle.labels(x_t))
                normal = whitebox_normal(surrogate, x_t, source.label, adv_label)
            else:
                normal = _blackbox_normal(oracle, x_t, dist, t, cfg, rng)
        except (DegenerateEstimate, DegenerateGradient) as exc:
            trace.stopped_early = f"iteration {t}: {exc}"
            break
        offset = perpendicular_step(x_t, normal, x, dist / math.sqrt(t), oracle, cfg.step_shrink)
        x_t = boundary_bisect(oracle, x, offset, theta)
        dist = float(np.linalg.norm(x_t - x))
        if dist < best_dist:
            best, best_dist = x_t, dist
        trace.iterates.append(Iterate(t, x_t, offset, dist, best_dist, oracle.queries))

    # tighten the bracket relative to the final distance
    x_final = boundary_bisect(oracle, x, best, theta)
    record = PerturbationRecord.build(
        source_index, perturbation_index, x, x_final,
        label_source=source.label,
        label_adv=int(oracle.labels(x_final)),
        target_class=target,
        seed=rng.seed64,
        queries=oracle.queries,
    )
    return record, trace
