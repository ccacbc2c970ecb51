import math

import numpy as np
import pytest

import loss_cases
from badgan import objectives as O
from badgan import tensor as T
from badgan.density import fit_kde
from badgan.models import MLP, Discriminator, Encoder, gaussian_log_prob
from badgan.tensor import Tape, Tensor


def _linear_disc(w):
    net = MLP((2, 2), [Tensor(np.eye(2), True)], [Tensor(np.zeros((1, 2)), True)])
    return Discriminator(net, Tensor(np.asarray(w, float), True))


# -- discriminator terms ----------------------------------------------------


def test_labeled_term_half_probability():
    ll = O.labeled_log_likelihood(Tensor([[0.0, 0.0]]), np.array([0]))
    assert -ll.item() == pytest.approx(0.693147, abs=1e-6)


def test_uniform_conditional_entropy():
    v = O.neg_conditional_entropy(Tensor(np.zeros((1, 4)))).item()
    assert v == pytest.approx(-1.386294, abs=1e-6)
    assert v == pytest.approx(-math.log(4), abs=1e-12)


def test_generated_term_zero_logits():
    assert -O.fake_log_prob(Tensor(np.zeros((1, 4)))).item() == pytest.approx(1.609438, abs=1e-6)


def test_true_and_fake_log_probs_complement():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((10, 4)) * 3)
    total = np.exp(O.true_log_prob(logits).values) + np.exp(O.fake_log_prob(logits).values)
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_stable_for_huge_logits():
    logits = Tensor([[800.0, -800.0, 0.0]])
    assert math.isfinite(O.true_log_prob(logits).item())
    assert O.fake_log_prob(logits).item() == pytest.approx(-800.0)


def test_discriminator_loss_empty_labeled():
    disc = _linear_disc(np.eye(2))
    with pytest.raises(ValueError):
        O.discriminator_loss(disc, (np.zeros((0, 2)), np.zeros(0, int)), np.ones((2, 2)), np.ones((2, 2)))


def test_discriminator_loss_is_sum_of_terms():
    rng = np.random.default_rng(1)
    disc = Discriminator.init(3, 4, (6,), rng)
    lx, ly = rng.standard_normal((5, 2)), rng.integers(0, 3, 5)
    ux, gx = rng.standard_normal((7, 2)), rng.standard_normal((8, 2))
    got = O.discriminator_loss(disc, (lx, ly), ux, gx, 0.5).item()
    # hand assembly from per-sample numpy formulas
    def lse(a):
        m = a.max(1, keepdims=True)
        return m[:, 0] + np.log(np.exp(a - m).sum(1))

    def withzero(a):
        return np.concatenate([a, np.zeros((len(a), 1))], 1)

    ll, lu, lg = (disc.logits(v).values for v in (lx, ux, gx))
    sup = np.mean(ll[np.arange(5), ly] - lse(ll))
    unl = np.mean(lse(lu) - lse(withzero(lu)))
    fake = np.mean(-lse(withzero(lg)))
    logp = lu - lse(lu)[:, None]
    ent = np.mean(np.sum(np.exp(logp) * logp, 1))
    assert got == pytest.approx(-(sup + unl + fake + 0.5 * ent), abs=1e-12)


def test_discriminator_loss_descends():
    from badgan.datasets import make_dataset
    from badgan.models import median_nn_distance, oracle_complement_sampler
    from badgan.optim import Adam

    ds = make_dataset("spins", seed=0)
    rng = np.random.default_rng(2)
    disc = Discriminator.init(4, 16, (64, 64), rng)
    opt = Adam(disc.params(), 1e-3, (0.5, 0.999))
    r = 2 * median_nn_distance(ds.unlabeled_x)
    # fixed batches isolate the optimiser from sampling noise
    ub = ds.unlabeled_x[rng.integers(0, len(ds.unlabeled_x), 64)]
    gb = oracle_complement_sampler(ds.box, ds.unlabeled_x, r, 64, rng)
    losses = []
    for _ in range(50):
        opt.zero_grad()
        with Tape() as tape:
            loss = O.discriminator_loss(disc, (ds.labeled_x, ds.labeled_y), ub, gb, 1.0)
        tape.backward(loss)
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < losses[0]


# -- generator terms --------------------------------------------------------


def test_feature_matching_values():
    disc = _linear_disc(np.eye(2))
    x = np.random.default_rng(3).standard_normal((6, 2))
    assert O.feature_matching_loss(disc, x, x).item() == 0.0
    v = O.feature_matching_loss(disc, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item()
    assert v == pytest.approx(2.0, abs=1e-12)


def test_pull_away_identical_and_orthogonal():
    assert O.pull_away_term(Tensor([[0.6, 0.8], [0.6, 0.8]])).item() == pytest.approx(1.0, abs=1e-9)
    assert O.pull_away_term(Tensor([[1.0, 0.0], [0.0, 2.0]])).item() == pytest.approx(0.0, abs=1e-9)


def test_pull_away_brute_force():
    f = np.random.default_rng(4).standard_normal((3, 5))
    total = 0.0
    for i in range(3):
        for j in range(3):
            if i != j:
                c = sum(f[i, t] * f[j, t] for t in range(5))
                ni = math.sqrt(sum(v * v for v in f[i]))
                nj = math.sqrt(sum(v * v for v in f[j]))
                total += (c / (ni * nj)) ** 2
    assert O.pull_away_term(Tensor(f)).item() == pytest.approx(total / 6, abs=1e-12)


@pytest.mark.parametrize("c", [3.0, -0.01, 250.0])
def test_pull_away_scale_invariant(c):
    f = np.random.default_rng(5).standard_normal((8, 4))
    a = O.pull_away_term(Tensor(f)).item()
    b = O.pull_away_term(Tensor(c * f)).item()
    assert b == pytest.approx(a, abs=1e-9)


def test_pull_away_zero_row_guarded():
    v = O.pull_away_term(Tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])).item()
    assert math.isfinite(v) and 0 <= v <= 1


def test_vi_at_mode_is_log_two_pi():
    z = np.random.default_rng(6).random((5, 2))
    v = -T.mean(gaussian_log_prob(z, Tensor(z), Tensor(np.ones((5, 2))))).item()
    assert v == pytest.approx(1.837877, abs=1e-6)
    assert v == pytest.approx(math.log(2 * math.pi), abs=1e-12)


def test_vi_decreases_as_sigma_shrinks():
    z = np.zeros((1, 2))
    vals = [-gaussian_log_prob(z, Tensor(z), Tensor(np.full((1, 2), s))).item() for s in (1.0, 0.5, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_vi_matches_per_sample_hand_computation():
    rng = np.random.default_rng(7)
    enc = Encoder.init(3, (8,), 1.0, rng)
    x, z = rng.standard_normal((4, 2)), rng.random((4, 3))
    mu, sigma = (t.values for t in enc(x))
    hand = 0.0
    for i in range(4):
        for j in range(3):
            hand += 0.5 * math.log(2 * math.pi * sigma[i, j] ** 2) + (z[i, j] - mu[i, j]) ** 2 / (2 * sigma[i, j] ** 2)
    assert O.vi_loss(enc, z, x).item() == pytest.approx(hand / 4, abs=1e-12)


def test_vi_length_mismatch():
    enc = Encoder.init(3, (8,), 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        O.vi_loss(enc, np.zeros((3, 3)), np.zeros((4, 2)))


# -- low-density term -------------------------------------------------------


class _FixedDensity:
    def __init__(self, vals):
        self.vals = np.asarray(vals, float)

    def log_density_and_grad(self, x):
        return self.vals, np.zeros((len(self.vals), 2))


def test_low_density_definition():
    v = O.low_density_loss(_FixedDensity([1.0, -5.0]), np.zeros((2, 2)), 0.0).item()
    assert v == pytest.approx(0.5, abs=1e-12)


def test_low_density_all_below_threshold():
    dens = fit_kde([[0.0, 0.0], [1.0, 0.0]], bandwidth=0.3)
    x = Tensor(np.array([[5.0, 5.0], [6.0, 6.0]]), True)
    with Tape() as tape:
        loss = O.low_density_loss(dens, x, 0.0)
    tape.backward(loss)
    assert loss.item() == 0.0
    np.testing.assert_array_equal(x.grad, 0.0)


def test_low_density_gated_gradient_vs_fd():
    rng = np.random.default_rng(8)
    dens = fit_kde(rng.standard_normal((25, 2)), bandwidth=0.5)
    x = Tensor(rng.standard_normal((4, 2)) * 0.5, True)
    with Tape() as tape:
        loss = O.low_density_loss(dens, x, -1e9)
    tape.backward(loss)
    h = 1e-6
    fd = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            e = np.zeros((4, 2))
            e[i, j] = h
            fd[i, j] = (dens.log_density(x.values + e) - dens.log_density(x.values - e))[i] / (2 * h) / 4
    assert T.relative_error(x.grad, fd) < 1e-6


def test_low_density_monotone_in_threshold():
    # raising eps only removes terms with log p > eps; for eps >= 0 each removed
    # term is positive, so the loss cannot grow, and the gated count never grows
    rng = np.random.default_rng(9)
    dens = fit_kde(rng.standard_normal((30, 2)) * 0.05)
    x = np.concatenate([dens.points[:20] + 0.01, rng.standard_normal((20, 2))])
    lp = dens.log_density(x)
    assert lp.max() > 0
    grid = np.linspace(0.0, lp.max() + 1, 40)
    vals = [O.low_density_loss(dens, x, e).item() for e in grid]
    assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))
    full = np.linspace(lp.min() - 1, lp.max() + 1, 40)
    counts = [int(np.sum(lp > e)) for e in full]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


# -- generator loss ---------------------------------------------------------


def test_generator_loss_fm_only_equals_fm():
    c = loss_cases.build(0)
    w = O.LossWeights(1.0, 0.0, 0.0, 0.0, "none")
    g = O.generator_loss(c["disc"], c["gen"], None, None, w, c["z"], c["ux"]).item()
    fm = O.feature_matching_loss(c["disc"], c["gen"](c["z"]), c["ux"]).item()
    assert g == fm


def test_generator_loss_is_sum_of_terms():
    c = loss_cases.build(1)
    disc, gen, enc, dens = c["disc"], c["gen"], c["enc"], c["density"]
    for method in ("pt", "vi"):
        w = O.LossWeights(1.0, 1.0, 1.0, 0.0, method)
        terms: dict = {}
        g = O.generator_loss(disc, gen, enc, dens, w, c["z"], c["ux"], c["eps"], terms).item()
        x = gen(c["z"])
        ent = O.vi_loss(enc, c["z"], x) if method == "vi" else O.pull_away_term(disc.features(x))
        parts = [O.feature_matching_loss(disc, x, c["ux"]), ent, O.low_density_loss(dens, x, c["eps"])]
        assert g == pytest.approx(sum(p.item() for p in parts), abs=1e-12)
        assert set(terms) == {"fm", "ent", "ld"}


def test_generator_loss_configuration_errors():
    c = loss_cases.build(2)
    with pytest.raises(O.ConfigurationError):
        O.generator_loss(c["disc"], c["gen"], None, None, O.LossWeights(1, 1, 0, 0, "vi"), c["z"], c["ux"])
    with pytest.raises(O.ConfigurationError):
        O.generator_loss(c["disc"], c["gen"], None, None, O.LossWeights(1, 0, 1, 0, "none"), c["z"], c["ux"])
    with pytest.raises(O.ConfigurationError):
        O.LossWeights(-1.0)
    with pytest.raises(O.ConfigurationError):
        O.LossWeights(entropy_method="both")


def test_q100_gate_closed_on_training_support():
    # generated batch drawn from the density's own training points: at the
    # q=100 threshold no sample exceeds eps, so LD contributes nothing
    from badgan.density import quantile_threshold

    dens = fit_kde(np.random.default_rng(3).standard_normal((40, 2)))
    eps = quantile_threshold(dens, dens.points, 100)
    x = Tensor(dens.points[:12].copy(), True)
    with Tape() as tape:
        loss = O.low_density_loss(dens, x, eps)
    tape.backward(loss)
    assert loss.item() == 0.0 and not x.grad.any()


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients_match_fd(seed):
    errs = loss_cases.max_errors(seed)
    assert max(errs.values()) < 1e-5, errs


# -- KL decomposition -------------------------------------------------------


def test_kl_three_point_example():
    chk = O.kl_decomposition_check(np.full(3, 1 / 3), np.array([0.7, 0.2, 0.1]), 0.15)
    assert chk.gap < 1e-10
    # independent brute force for p*
    p = np.array([0.7, 0.2, 0.1])
    c = 0.5
    z = (1 / 0.7 + 1 / 0.2) / (1 - c)
    ps = np.array([1 / (z * 0.7), 1 / (z * 0.2), c])
    ref = sum((1 / 3) * math.log((1 / 3) / q) for q in ps)
    assert chk.lhs == pytest.approx(ref, abs=1e-12)


def test_kl_identity_case():
    p = np.array([0.5, 0.3, 0.15, 0.05])
    p_star, _, _ = O.complement_target(p, 0.1, np.ones(4, bool))
    chk = O.kl_decomposition_check(p_star, p, 0.1)
    assert abs(chk.lhs) < 1e-12 and abs(chk.rhs) < 1e-12


def test_kl_shifting_c():
    rng = np.random.default_rng(10)
    p = rng.dirichlet(np.ones(8))
    pg = rng.dirichlet(np.ones(8))
    eps = float(np.median(p))
    n_low = int(np.sum(p <= eps))
    for c in (0.1 / n_low, 0.5 / n_low, 0.9 / n_low):
        chk = O.kl_decomposition_check(pg, p, eps, c=c)
        assert chk.gap < 1e-10
        assert chk.c == c


def test_kl_escaped_support():
    p = np.array([0.4, 0.3, 0.3])
    chk = O.kl_decomposition_check(np.array([0.2, 0.3, 0.5]), p, 0.1, np.array([True, True, False]))
    assert chk.escaped and chk.lhs == math.inf


def test_complement_target_normalises():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        p = rng.dirichlet(np.ones(n))
        mask = rng.random(n) < 0.8
        mask[0] = True
        ps, _, _ = O.complement_target(p, float(rng.uniform(0, p.max())), mask)
        assert ps.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(ps[~mask] == 0)
