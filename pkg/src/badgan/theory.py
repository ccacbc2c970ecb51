"""Numerical checks of the complement-generator theory.

Each check reads an immutable model snapshot and returns a small report
dataclass. ``TheoryReport`` collects named pass/fail rows and serialises
them to text or CSV.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from badgan.density import DensityModel, fit_kde, nearest_rank
from badgan.models import Discriminator, min_distances


def _weights(model) -> np.ndarray:
    if isinstance(model, Discriminator):
        return np.asarray(model.class_weights.values)
    return np.atleast_2d(np.asarray(model, dtype=float))


def _lse_with_zero(logits: np.ndarray) -> np.ndarray:
    full = np.concatenate([logits, np.zeros((logits.shape[0], 1))], axis=1)
    m = full.max(1, keepdims=True)
    return m[:, 0] + np.log(np.exp(full - m).sum(1))


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


# -- assumption ratios ------------------------------------------------------


@dataclass
class AssumptionReport:
    ratio_true: float
    ratio_fake: float
    history: list[tuple[int, float, float]] = field(default_factory=list)

    def passed(self, threshold: float = 0.9) -> bool:
        return self.ratio_true >= threshold and self.ratio_fake >= threshold


def ratios_from_logits(true_logits, fake_logits) -> tuple[float, float]:
    """Fractions with max logit > 0 (true) and < 0 (fake); ties are violations."""
    lt = np.atleast_2d(np.asarray(true_logits, float))
    lf = np.atleast_2d(np.asarray(fake_logits, float))
    if lt.shape[0] == 0 or lf.shape[0] == 0 or lt.size == 0 or lf.size == 0:
        raise ValueError("assumption ratios need non-empty true and generated sets")
    return float(np.mean(lt.max(1) > 0)), float(np.mean(lf.max(1) < 0))


def assumption_ratios(
    disc: Discriminator, test_x, generated_x, history: list | None = None
) -> AssumptionReport:
    test_x = np.atleast_2d(np.asarray(test_x, float))
    generated_x = np.atleast_2d(np.asarray(generated_x, float))
    if len(test_x) == 0 or len(generated_x) == 0:
        raise ValueError("assumption ratios need non-empty true and generated sets")
    rt, rf = ratios_from_logits(disc.logits(test_x).values, disc.logits(generated_x).values)
    return AssumptionReport(rt, rf, list(history or []))


# -- perfect-generator construction -----------------------------------------


@dataclass
class PerfectSolution:
    """Tabulated D* over a fixed set of evaluation points."""

    points: np.ndarray
    supervised_logits: np.ndarray
    logits: np.ndarray  # l*_k = log P_sup(k | x)
    p_fake: np.ndarray

    @property
    def max_p_fake_deviation(self) -> float:
        return float(np.max(np.abs(self.p_fake - 0.5)))

    @property
    def max_posterior_deviation(self) -> float:
        return float(np.max(np.abs(_softmax(self.logits) - _softmax(self.supervised_logits))))

    def predict(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


def construct_perfect_solution(disc_supervised: Discriminator, eval_points) -> PerfectSolution:
    """Re-parameterise a supervised classifier so that P(K+1|x) = 1/2 everywhere.

    Setting exp(l*_k) to the supervised class posterior makes the true logits
    sum to one, which leaves the conditional rule unchanged.
    """
    pts = np.atleast_2d(np.asarray(eval_points, float))
    sup = disc_supervised.logits(pts).values
    m = sup.max(1, keepdims=True)
    lse = m + np.log(np.exp(sup - m).sum(1, keepdims=True))
    star = sup - lse
    return PerfectSolution(pts, sup, star, np.exp(-_lse_with_zero(star)))


def count_errors(predictions, labels) -> int:
    return int(np.sum(np.asarray(predictions) != np.asarray(labels)))


# -- bounded-weight lemma ---------------------------------------------------


@dataclass
class LemmaBoundReport:
    C: float
    covering_radius: float
    max_violation: float
    triples_checked: int = 0
    triple_failures: int = 0

    @property
    def satisfied(self) -> bool:
        return self.max_violation < 0


def lemma_triple_bound(w, f_prime, delta) -> tuple[float, float]:
    """Return (w.f, w.f' + |w| |delta|) for f = f' + delta; the first never exceeds the second."""
    w = np.asarray(w, float)
    f_prime = np.asarray(f_prime, float)
    delta = np.asarray(delta, float)
    value = float(w @ (f_prime + delta))
    bound = float(w @ f_prime + np.linalg.norm(w) * np.linalg.norm(delta))
    return value, bound


def lemma_bound_check(
    model,
    probe_features,
    generated_features,
    n_triples: int = 1000,
    rng: np.random.Generator | None = None,
) -> LemmaBoundReport:
    """Check that complement features near generated ones keep every true logit below C*radius.

    ``model`` is a Discriminator or a (K, d_f) weight matrix; both feature
    sets live in feature space.
    """
    W = _weights(model)
    gen = np.atleast_2d(np.asarray(generated_features, float))
    probe = np.atleast_2d(np.asarray(probe_features, float))
    if gen.shape[0] == 0 or gen.size == 0:
        raise ValueError("generated set is empty")
    if probe.shape[0] == 0 or probe.size == 0:
        raise ValueError("probe set is empty")
    C = float(np.max(np.linalg.norm(W, axis=1)))
    radius = float(np.max(min_distances(probe, gen)))
    max_violation = float(np.max(probe @ W.T) - C * radius)

    rng = rng if rng is not None else np.random.default_rng(0)
    # pair each probe with its nearest generated feature and check the Cauchy-Schwarz step
    idx = rng.integers(0, len(probe), min(n_triples, len(probe)))
    fails = 0
    for i in idx:
        j = int(np.argmin(np.sum((gen - probe[i]) ** 2, axis=1)))
        delta = probe[i] - gen[j]
        k = int(rng.integers(0, W.shape[0]))
        value, bound = lemma_triple_bound(W[k], gen[j], delta)
        if value > bound + 1e-12 * max(1.0, abs(bound)):
            fails += 1
    return LemmaBoundReport(C, radius, max_violation, len(idx), fails)


# -- feature-space regions --------------------------------------------------


@dataclass
class RegionSpec:
    """Per-class high-density feature regions F_k on a finite evaluation set."""

    densities: list[DensityModel]
    eps: np.ndarray  # (K,) log-density thresholds
    eval_points: np.ndarray  # (M, d_f)
    masks: np.ndarray  # (K, M) bool, F_k membership
    lo: np.ndarray
    hi: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.densities)

    def contains(self, k: int, f) -> np.ndarray:
        return self.densities[k].log_density(np.atleast_2d(f)) > self.eps[k]

    def in_union(self, f) -> np.ndarray:
        f = np.atleast_2d(f)
        out = np.zeros(len(f), bool)
        for k in range(self.num_classes):
            out |= self.contains(k, f)
        return out

    def overlap_count(self) -> int:
        """Evaluation points belonging to more than one F_k."""
        return int(np.sum(self.masks.sum(0) > 1))

    def with_eps(self, eps) -> "RegionSpec":
        eps = np.asarray(eps, float)
        masks = np.stack([d.log_density(self.eval_points) > e for d, e in zip(self.densities, eps)])
        return RegionSpec(self.densities, eps, self.eval_points, masks, self.lo, self.hi)


def feature_box(features, pad_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    features = np.atleast_2d(np.asarray(features, float))
    lo, hi = features.min(0), features.max(0)
    span = hi - lo
    return lo - pad_fraction * span, hi + pad_fraction * span


def build_regions(
    features,
    labels,
    percentile: float = 50.0,
    grid_resolution: int = 100,
    pad_fraction: float = 0.1,
) -> RegionSpec:
    """Fit a KDE per class on held-out features and threshold it at a percentile.

    With 2-dimensional features F_k lives on a grid over the padded feature
    box; otherwise the observed held-out features themselves are the
    evaluation set.
    """
    features = np.atleast_2d(np.asarray(features, float))
    labels = np.asarray(labels)
    classes = np.unique(labels)
    lo, hi = feature_box(features, pad_fraction)
    densities, eps = [], []
    for k in classes:
        fk = features[labels == k]
        model = fit_kde(fk)
        densities.append(model)
        eps.append(nearest_rank(model.log_density(fk), percentile))
    if features.shape[1] == 2:
        xs = np.linspace(lo[0], hi[0], grid_resolution)
        ys = np.linspace(lo[1], hi[1], grid_resolution)
        gx, gy = np.meshgrid(xs, ys)
        points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    else:
        points = features
    eps = np.asarray(eps)
    masks = np.stack([d.log_density(points) > e for d, e in zip(densities, eps)])
    return RegionSpec(densities, eps, points, masks, lo, hi)


# -- boundary correctness ---------------------------------------------------


@dataclass
class Prop2Report:
    per_class: list[float]  # nan for skipped classes
    skipped: list[int]

    @property
    def min_fraction(self) -> float:
        vals = [v for v in self.per_class if not math.isnan(v)]
        return min(vals) if vals else math.nan


def proposition2_check(model, regions: RegionSpec) -> Prop2Report:
    """Fraction of each F_k where class k wins the argmax of w_j . f."""
    W = _weights(model)
    K = W.shape[0]
    per_class, skipped = [], []
    for k in range(K):
        pts = regions.eval_points[regions.masks[k]]
        if len(pts) == 0:
            warnings.warn(f"F_{k} is empty; class skipped", RuntimeWarning, stacklevel=2)
            per_class.append(math.nan)
            skipped.append(k)
            continue
        if K == 1:
            per_class.append(1.0)
            continue
        pred = np.argmax(pts @ W.T, axis=1)
        per_class.append(float(np.mean(pred == k)))
    return Prop2Report(per_class, skipped)


# -- convexity of the fake region -------------------------------------------


@dataclass
class ConvexityReport:
    pairs: int
    violations: int
    inconclusive: bool


def convexity_probe(
    model,
    lo,
    hi,
    n_pairs: int,
    rng: np.random.Generator,
    max_proposals: int = 100_000,
    chunk: int = 10_000,
) -> ConvexityReport:
    """Sample pairs in S = {f : max_k w_k . f < 0} and test 9 interior points each."""
    W = _weights(model)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    members: list[np.ndarray] = []
    have = 0
    proposed = 0
    need = 2 * n_pairs
    while have < need:
        if have == 0 and proposed >= max_proposals:
            return ConvexityReport(0, 0, True)
        cand = rng.uniform(lo, hi, (chunk, len(lo)))
        proposed += chunk
        keep = cand[(cand @ W.T).max(1) < 0]
        members.append(keep)
        have += len(keep)
    pts = np.concatenate(members)[:need]
    a, b = pts[:n_pairs], pts[n_pairs:]
    ts = np.linspace(0.1, 0.9, 9)
    violations = 0
    for t in ts:
        mid = t * a + (1 - t) * b
        inside = (mid @ W.T).max(1) < 0
        violations += int(np.sum(~inside))
    return ConvexityReport(n_pairs, violations, False)


# -- region disjointness ----------------------------------------------------


DEFAULT_ALPHAS = np.round(np.arange(1, 20) * 0.05, 10)


def sample_cross_pairs(
    regions: RegionSpec, n_pairs: int, rng: np.random.Generator
) -> list[tuple[int, np.ndarray, int, np.ndarray]]:
    K = regions.num_classes
    if K < 2:
        raise ValueError("disjointness needs at least two classes")
    members = [regions.eval_points[regions.masks[k]] for k in range(K)]
    valid = [k for k in range(K) if len(members[k])]
    if len(valid) < 2:
        return []
    pairs = []
    for _ in range(n_pairs):
        j, k = rng.choice(valid, 2, replace=False)
        fj = members[j][rng.integers(0, len(members[j]))]
        fk = members[k][rng.integers(0, len(members[k]))]
        pairs.append((int(j), fj, int(k), fk))
    return pairs


def disjointness_check(
    regions: RegionSpec,
    alpha_grid=None,
    n_pairs: int = 1000,
    rng: np.random.Generator | None = None,
    pairs=None,
) -> float:
    """Fraction of cross-class pairs with a mixture point outside F_j and F_k.

    ``pairs`` is an optional list of (j, f_j, k, f_k) tuples; by default
    ``n_pairs`` are drawn from the regions' evaluation points.
    """
    if regions.num_classes < 2:
        raise ValueError("disjointness needs at least two classes")
    alphas = DEFAULT_ALPHAS if alpha_grid is None else np.asarray(alpha_grid, float)
    if pairs is None:
        pairs = sample_cross_pairs(regions, n_pairs, rng if rng is not None else np.random.default_rng(0))
    if not pairs:
        return math.nan
    ok = 0
    for j, fj, k, fk in pairs:
        mix = alphas[:, None] * fj[None, :] + (1 - alphas[:, None]) * fk[None, :]
        covered = regions.contains(j, mix) | regions.contains(k, mix)
        ok += int(np.any(~covered))
    return ok / len(pairs)


# -- report -----------------------------------------------------------------


@dataclass
class TheoryReport:
    rows: list[tuple[str, float, str, bool]] = field(default_factory=list)

    def add(self, name: str, value: float, criterion: str, passed: bool) -> None:
        self.rows.append((name, float(value), criterion, bool(passed)))

    @property
    def all_passed(self) -> bool:
        return all(r[3] for r in self.rows)

    def to_text(self) -> str:
        width = max((len(r[0]) for r in self.rows), default=0)
        lines = [
            f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {value:.6g}  ({crit})"
            for name, value, crit, ok in self.rows
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "value", "criterion", "passed"])
        for name, value, crit, ok in self.rows:
            w.writerow([name, repr(value), crit, int(ok)])
        return buf.getvalue()
