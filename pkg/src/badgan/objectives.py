"""Loss terms for the (K+1)-class discriminator and the complement generator.

All expectations are minibatch means. Losses are returned as scalar
Tensors to be minimised, i.e. the negated maximisation objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from badgan import tensor as T
from badgan.density import DensityModel
from badgan.models import Discriminator, Encoder, Generator, gaussian_log_prob
from badgan.tensor import Tensor

ENTROPY_METHODS = ("none", "vi", "pt")


class ConfigurationError(ValueError):
    pass


@dataclass
class LossWeights:
    w_fm: float = 1.0
    w_ent_gen: float = 1.0
    w_ld: float = 1.0
    w_cond_ent: float = 1.0
    entropy_method: str = "none"

    def __post_init__(self):
        for name in ("w_fm", "w_ent_gen", "w_ld", "w_cond_ent"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.entropy_method not in ENTROPY_METHODS:
            raise ConfigurationError(f"entropy_method must be one of {ENTROPY_METHODS}")

    @property
    def entropy_active(self) -> bool:
        return self.entropy_method != "none" and self.w_ent_gen > 0


def _with_fake_column(logits: Tensor) -> Tensor:
    return T.concat([logits, Tensor(np.zeros((logits.shape[0], 1)))], axis=1)


def _onehot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((y.shape[0], k))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def labeled_log_likelihood(logits: Tensor, y: np.ndarray) -> Tensor:
    """Per-sample log P_D(y | x, y <= K)."""
    picked = T.sum(logits * Tensor(_onehot(y, logits.shape[1])), axis=1)
    return picked - T.logsumexp(logits, axis=1)


def true_log_prob(logits: Tensor) -> Tensor:
    """Per-sample log P_D(y <= K | x)."""
    return T.logsumexp(logits, axis=1) - T.logsumexp(_with_fake_column(logits), axis=1)


def fake_log_prob(logits: Tensor) -> Tensor:
    """Per-sample log P_D(K+1 | x) = -log(1 + sum_k exp l_k)."""
    return -T.logsumexp(_with_fake_column(logits), axis=1)


def neg_conditional_entropy(logits: Tensor) -> Tensor:
    """Per-sample sum_k P(k|x, y<=K) log P(k|x, y<=K); equals -H, so <= 0."""
    log_p = logits - T.matmul(
        T.reshape(T.logsumexp(logits, axis=1), (logits.shape[0], 1)),
        Tensor(np.ones((1, logits.shape[1]))),
    )
    return T.sum(T.exp(log_p) * log_p, axis=1)


def supervised_loss(disc: Discriminator, labeled_x, labeled_y) -> Tensor:
    labeled_y = np.asarray(labeled_y)
    if labeled_y.size == 0:
        raise ValueError("empty labeled batch")
    return -T.mean(labeled_log_likelihood(disc.logits(labeled_x), labeled_y))


def discriminator_loss(
    disc: Discriminator,
    labeled: tuple,
    unlabeled,
    generated,
    w_cond_ent: float = 0.0,
) -> Tensor:
    """Negated discriminator objective, with optional conditional-entropy term."""
    lx, ly = labeled
    ly = np.asarray(ly)
    if ly.size == 0:
        raise ValueError("empty labeled batch")
    if len(unlabeled) == 0 or len(generated) == 0:
        raise ValueError("empty unlabeled or generated batch")
    # one pass over the stacked batches, then split the logits
    n_lab, n_unl = len(lx), len(unlabeled)
    logits = disc.logits(T.concat([lx, unlabeled, generated], axis=0))
    l_lab = T.rows(logits, 0, n_lab)
    l_unl = T.rows(logits, n_lab, n_lab + n_unl)
    l_gen = T.rows(logits, n_lab + n_unl, logits.shape[0])
    obj = (
        T.mean(labeled_log_likelihood(l_lab, ly))
        + T.mean(true_log_prob(l_unl))
        + T.mean(fake_log_prob(l_gen))
    )
    if w_cond_ent > 0:
        obj = obj + w_cond_ent * T.mean(neg_conditional_entropy(l_unl))
    return -obj


def feature_matching_loss(disc: Discriminator, generated, unlabeled) -> Tensor:
    """Squared L2 distance between batch-mean features."""
    diff = T.mean(disc.features(generated), axis=0) - T.mean(disc.features(unlabeled), axis=0)
    return T.sum(T.square(diff))


_NORM_GUARD = 1e-12


def pull_away_term(features) -> Tensor:
    """Mean squared off-diagonal cosine similarity of a feature batch."""
    f = T.as_tensor(features)
    n = f.shape[0]
    if n < 2:
        raise ValueError("pull-away term needs at least two samples")
    norms = T.sqrt(T.sum(T.square(f), axis=1, keepdims=True)) + _NORM_GUARD
    cos = T.matmul(f, T.transpose(f)) / T.matmul(norms, T.transpose(norms))
    off_diag = Tensor(1.0 - np.eye(n))
    return T.sum(T.square(cos) * off_diag) / (n * (n - 1))


def vi_loss(enc: Encoder, z_batch, x_batch) -> Tensor:
    """-E log q(z|x) over generator pairs (z, x = G(z))."""
    z = T.as_tensor(z_batch)
    x = T.as_tensor(x_batch)
    if z.shape[0] != x.shape[0]:
        raise ValueError("z and x batches differ in length")
    mu, sigma = enc(x)
    return -T.mean(gaussian_log_prob(z, mu, sigma))


def low_density_loss(density: DensityModel, generated, eps_log: float) -> Tensor:
    """Mean of log p(x) over samples whose log p exceeds ``eps_log``.

    The gate is evaluated once and treated as a constant.
    """
    x = T.as_tensor(generated)
    vals, grads = density.log_density_and_grad(x.values)
    gate = (vals > eps_log).astype(np.float64)
    logp = T.external(x, vals, grads)
    return T.mean(logp * Tensor(gate))


def generator_loss(
    disc: Discriminator,
    gen: Generator,
    enc: Encoder | None,
    density: DensityModel | None,
    weights: LossWeights,
    z_batch: np.ndarray,
    unlabeled,
    eps_log: float | None = None,
    terms: dict | None = None,
) -> Tensor:
    """Weighted sum of entropy, low-density and feature-matching terms.

    ``terms``, when given, receives the unweighted value of each active term.
    """
    if weights.entropy_method == "vi" and enc is None and weights.w_ent_gen > 0:
        raise ConfigurationError("VI entropy selected but no encoder supplied")
    x = gen(z_batch)
    total = Tensor(0.0)
    parts = {}
    if weights.w_fm > 0:
        parts["fm"] = feature_matching_loss(disc, x, unlabeled)
        total = total + weights.w_fm * parts["fm"]
    if weights.entropy_active:
        if weights.entropy_method == "vi":
            parts["ent"] = vi_loss(enc, z_batch, x)
        else:
            parts["ent"] = pull_away_term(disc.features(x))
        total = total + weights.w_ent_gen * parts["ent"]
    if weights.w_ld > 0:
        if density is None or eps_log is None:
            raise ConfigurationError("low-density term needs a density model and eps_log")
        parts["ld"] = low_density_loss(density, x, eps_log)
        total = total + weights.w_ld * parts["ld"]
    if terms is not None:
        terms.update({k: float(v.values) for k, v in parts.items()})
    return total


# -- KL decomposition -------------------------------------------------------


@dataclass
class KLCheck:
    lhs: float
    rhs: float
    gap: float
    escaped: bool
    z: float
    c: float


def complement_target(p, eps: float, mask, c: float | None = None):
    """Discrete target ∝ 1/p above eps and constant c below, zero outside mask.

    Returns ``(p_star, Z, C)``. With ``c`` omitted, half the mass goes to the
    low-density part when both parts are non-empty.
    """
    p = np.asarray(p, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    high = mask & (p > eps)
    low = mask & ~(p > eps)
    n_low = int(low.sum())
    inv_sum = float((1.0 / p[high]).sum()) if high.any() else 0.0
    if n_low == 0:
        c = 1.0 if c is None else c
        low_mass = 0.0
    else:
        if c is None:
            c = 0.5 / n_low if high.any() else 1.0 / n_low
        low_mass = c * n_low
    if high.any():
        if not low_mass < 1.0:
            raise ValueError("constant C leaves no mass for the high-density part")
        z = inv_sum / (1.0 - low_mass)
    else:
        z = 1.0
    p_star = np.zeros_like(p)
    p_star[high] = 1.0 / (z * p[high])
    p_star[low] = c
    return p_star, z, c


def kl_decomposition_check(p_g, p, eps: float, support_mask=None, c: float | None = None) -> KLCheck:
    """KL(p_G || p*) by direct summation versus the three-term decomposition."""
    p_g = np.asarray(p_g, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mask = np.ones(p.shape, bool) if support_mask is None else np.asarray(support_mask, bool)
    p_star, z, c = complement_target(p, eps, mask, c)
    on = p_g > 0
    if np.any(on & (p_star == 0)):
        return KLCheck(math.inf, math.inf, math.nan, True, z, c)

    lhs = 0.0
    for pg, ps in zip(p_g[on], p_star[on]):
        lhs += pg * math.log(pg / ps)

    high = on & (p > eps)
    low = on & ~(p > eps)
    neg_entropy = float(np.sum(p_g[on] * np.log(p_g[on])))
    ld_term = float(np.sum(p_g[high] * np.log(p[high])))
    const_term = float(np.sum(p_g[high]) * math.log(z) - np.sum(p_g[low]) * math.log(c))
    rhs = neg_entropy + ld_term + const_term
    return KLCheck(lhs, rhs, abs(lhs - rhs), False, z, c)
