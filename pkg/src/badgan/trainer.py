"""Alternating minimax training, evaluation and boundary grids."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from badgan import objectives as O
from badgan.datasets import Dataset, InputBox
from badgan.density import DensityModel, quantile_threshold
from badgan.models import (
    Discriminator,
    Encoder,
    Generator,
    ModelBundle,
    median_nn_distance,
    oracle_complement_sampler,
    p_fake_from_logits,
)
from badgan.optim import Adam
from badgan.tensor import Tape

GENERATOR_MODES = ("learned", "oracle_complement")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    # data
    dataset: str = "spins"
    n_per_class: int = 0  # 0 -> dataset default
    noise_sigma: float = -1.0  # negative -> dataset default
    n_labeled_per_class: int = 5
    test_fraction: float = 0.25
    data_seed: int = 0
    # models
    d_f: int = 16
    d_z: int = 10
    hidden: int = 64
    disc_layers: int = 2
    theta: float = 1.0
    leaky_slope: float = 0.2
    # objective
    w_fm: float = 1.0
    w_ent_gen: float = 1.0
    w_ld: float = 1.0
    w_cond_ent: float = 1.0
    cond_ent_from: float = 0.0  # fraction of training before the conditional entropy switches on
    entropy_method: str = "none"
    q_centile: float = 10.0
    generator_mode: str = "learned"
    oracle_radius_factor: float = 2.0
    # optimisation
    lr: float = 1e-3
    lr_decay_from: float = 1.0  # fraction of training after which lr falls linearly to 0
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    d_steps: int = 1
    steps: int = 4000
    eval_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("w_fm", "w_ent_gen", "w_ld", "w_cond_ent"):
            if getattr(self, name) < 0:
                raise O.ConfigurationError(f"{name} must be non-negative")
        if self.steps < 0:
            raise O.ConfigurationError("steps must be non-negative")
        if self.generator_mode not in GENERATOR_MODES:
            raise O.ConfigurationError(f"generator_mode must be one of {GENERATOR_MODES}")
        if not 0 < self.q_centile <= 100:
            raise O.ConfigurationError("q_centile must lie in (0, 100]")
        if self.disc_layers < 1 or self.hidden < 1:
            raise O.ConfigurationError("disc_layers and hidden must be >= 1")
        for name in ("lr_decay_from", "cond_ent_from"):
            if not 0 <= getattr(self, name) <= 1:
                raise O.ConfigurationError(f"{name} must lie in [0, 1]")
        if self.batch_size < 2 or self.eval_interval < 1 or self.d_steps < 1:
            raise O.ConfigurationError("batch_size >= 2, eval_interval >= 1, d_steps >= 1")
        self.loss_weights()

    def loss_weights(self) -> O.LossWeights:
        return O.LossWeights(self.w_fm, self.w_ent_gen, self.w_ld, self.w_cond_ent, self.entropy_method)

    @property
    def needs_encoder(self) -> bool:
        return self.entropy_method == "vi" and self.w_ent_gen > 0


LOG_COLUMNS = (
    "step", "d_loss", "g_loss", "fm", "ent", "ld", "test_errors", "test_error_rate",
    "ratio_true", "ratio_fake", "max_logp",
)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append(rec)

    @property
    def last(self) -> dict:
        return self.records[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r.get(c, math.nan)) for c in LOG_COLUMNS])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# -- evaluation -------------------------------------------------------------


def predict(disc: Discriminator, x) -> np.ndarray:
    # np.argmax breaks ties toward the lowest index
    return np.argmax(disc.logits(x).values, axis=1)


def evaluate(disc: Discriminator, test_x, test_y) -> tuple[int, float]:
    test_y = np.asarray(test_y)
    pred = predict(disc, test_x)
    errors = int(np.sum(pred != test_y))
    return errors, errors / max(len(test_y), 1)


def true_fake_accuracy(disc: Discriminator, true_x, fake_x) -> float:
    """Balanced accuracy of the implicit binary real/fake decision."""
    pt = p_fake_from_logits(disc.logits(true_x).values)
    pf = p_fake_from_logits(disc.logits(fake_x).values)
    return 0.5 * (float(np.mean(pt < 0.5)) + float(np.mean(pf > 0.5)))


def max_generated_logp(gen, density: DensityModel, n: int, rng: np.random.Generator) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    x = gen(gen.sample_latent(n, rng)).values
    return float(np.max(density.log_density(x)))


def grid_points(lo, hi, resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-major (x2 outer, x1 inner) grid; returns (points, xs, ys)."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1), xs, ys


@dataclass
class BoundaryGrid:
    points: np.ndarray  # (r*r, 2)
    pred: np.ndarray  # (r*r,)
    p_fake: np.ndarray  # (r*r,)
    resolution: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x1", "x2", "class", "p_fake"])
        for (a, b), c, p in zip(self.points, self.pred, self.p_fake):
            w.writerow([repr(float(a)), repr(float(b)), int(c), repr(float(p))])
        return buf.getvalue()

    def boundary_mask(self) -> np.ndarray:
        """Cells with a 4-neighbour of a different predicted class."""
        r = self.resolution
        c = self.pred.reshape(r, r)
        m = np.zeros((r, r), bool)
        dv = c[1:, :] != c[:-1, :]
        dh = c[:, 1:] != c[:, :-1]
        m[1:, :] |= dv
        m[:-1, :] |= dv
        m[:, 1:] |= dh
        m[:, :-1] |= dh
        return m.ravel()

    def boundary_fake_fraction(self) -> float:
        """Fraction of boundary-adjacent cells with p_fake > 0.5 (1.0 if none)."""
        m = self.boundary_mask()
        if not m.any():
            return 1.0
        return float(np.mean(self.p_fake[m] > 0.5))


def boundary_grid(disc: Discriminator, box: InputBox, resolution: int = 100) -> BoundaryGrid:
    pts, _, _ = grid_points(box.lo, box.hi, resolution)
    logits = disc.logits(pts).values
    return BoundaryGrid(pts, np.argmax(logits, axis=1), p_fake_from_logits(logits), resolution)


def feature_grid(disc: Discriminator, lo, hi, resolution: int = 100) -> BoundaryGrid:
    """Same as boundary_grid but over feature space (requires d_f = 2)."""
    if disc.feature_dim != 2:
        raise ValueError("feature grid needs a 2-dimensional feature space")
    pts, _, _ = grid_points(lo, hi, resolution)
    logits = disc.logits_from_features(pts).values
    return BoundaryGrid(pts, np.argmax(logits, axis=1), p_fake_from_logits(logits), resolution)


# -- training ---------------------------------------------------------------


def _disc_hidden(config: TrainConfig) -> tuple[int, ...]:
    return (config.hidden,) * config.disc_layers


def init_models(config: TrainConfig, dataset: Dataset, rng: np.random.Generator) -> ModelBundle:
    hidden = (config.hidden, config.hidden)
    disc = Discriminator.init(dataset.num_classes, config.d_f, _disc_hidden(config), rng, config.leaky_slope)
    gen = Generator.init(dataset.box, config.d_z, hidden, rng)
    enc = Encoder.init(config.d_z, hidden, config.theta, rng) if config.needs_encoder else None
    return ModelBundle(disc, gen, enc)


class _GeneratedSource:
    """Produces fake batches either from the learned generator or the oracle."""

    def __init__(self, config: TrainConfig, dataset: Dataset, bundle: ModelBundle):
        self.oracle = config.generator_mode == "oracle_complement"
        self.bundle = bundle
        self.box = dataset.box
        self.unlabeled = dataset.unlabeled_x
        if self.oracle:
            self.radius = config.oracle_radius_factor * median_nn_distance(dataset.unlabeled_x)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.oracle:
            return oracle_complement_sampler(self.box, self.unlabeled, self.radius, n, rng)
        gen = self.bundle.gen
        return gen(gen.sample_latent(n, rng)).values


def assumption_counts(disc: Discriminator, true_x, fake_x) -> tuple[float, float]:
    lt = disc.logits(true_x).values.max(1)
    lf = disc.logits(fake_x).values.max(1)
    return float(np.mean(lt > 0)), float(np.mean(lf < 0))


def _eval_record(step, config, dataset, density, bundle, source, rng, d_loss, g_loss, terms):
    errors, rate = evaluate(bundle.disc, dataset.test_x, dataset.test_y)
    fake = source.sample(len(dataset.test_x), rng)
    ratio_true, ratio_fake = assumption_counts(bundle.disc, dataset.test_x, fake)
    max_logp = float(np.max(density.log_density(fake))) if density is not None else math.nan
    return {
        "step": step,
        "d_loss": d_loss,
        "g_loss": g_loss,
        "fm": terms.get("fm", math.nan),
        "ent": terms.get("ent", math.nan),
        "ld": terms.get("ld", math.nan),
        "test_errors": errors,
        "test_error_rate": rate,
        "ratio_true": ratio_true,
        "ratio_fake": ratio_fake,
        "max_logp": max_logp,
    }


def lr_factor(config: TrainConfig, step: int) -> float:
    """Learning-rate multiplier for ``step`` (1-based) under the linear decay tail."""
    start = config.lr_decay_from * config.steps
    if step <= start or config.steps == 0:
        return 1.0
    return max(0.0, (config.steps - step + 1) / (config.steps - start + 1))


def train(
    config: TrainConfig, dataset: Dataset, density: DensityModel | None = None
) -> tuple[ModelBundle, TrainLog]:
    """Alternate D and G(+E) updates for ``config.steps`` steps.

    In oracle mode fake batches come from the complement sampler and the
    generator is never updated.
    """
    init_ss, data_ss, eval_ss = np.random.SeedSequence(config.seed).spawn(3)
    bundle = init_models(config, dataset, np.random.default_rng(init_ss))
    log = TrainLog()
    if config.steps == 0:
        return bundle, log

    weights = config.loss_weights()
    learned = config.generator_mode == "learned"
    eps_log = None
    if learned and weights.w_ld > 0:
        if density is None:
            raise O.ConfigurationError("low-density term needs a density model")
        eps_log = quantile_threshold(density, density.points, config.q_centile)

    rng = np.random.default_rng(data_ss)
    eval_rng = np.random.default_rng(eval_ss)
    source = _GeneratedSource(config, dataset, bundle)
    disc = bundle.disc
    opt_d = Adam(disc.params(), config.lr, (config.beta1, config.beta2))
    g_params = bundle.gen.params() + (bundle.enc.params() if bundle.enc else [])
    opt_g = Adam(g_params, config.lr, (config.beta1, config.beta2))
    unl = dataset.unlabeled_x
    nb = config.batch_size

    for step in range(1, config.steps + 1):
        opt_d.lr = opt_g.lr = config.lr * lr_factor(config, step)
        w_ce = config.w_cond_ent if step > config.cond_ent_from * config.steps else 0.0
        for _ in range(config.d_steps):
            ub = unl[rng.integers(0, len(unl), nb)]
            gb = source.sample(nb, rng)
            opt_d.zero_grad()
            with Tape() as tape:
                d_loss = O.discriminator_loss(
                    disc, (dataset.labeled_x, dataset.labeled_y), ub, gb, w_ce
                )
            tape.backward(d_loss)
            opt_d.step()
        d_val = float(d_loss.values)

        terms: dict = {}
        g_val = math.nan
        if learned:
            z = bundle.gen.sample_latent(nb, rng)
            ub = unl[rng.integers(0, len(unl), nb)]
            opt_g.zero_grad()
            with Tape() as tape:
                g_loss = O.generator_loss(
                    disc, bundle.gen, bundle.enc, density, weights, z, ub, eps_log, terms
                )
            tape.backward(g_loss)
            opt_g.step()
            opt_d.zero_grad()
            g_val = float(g_loss.values)

        if not (math.isfinite(d_val) and (not learned or math.isfinite(g_val))):
            rec = {"step": step, "d_loss": d_val, "g_loss": g_val, **terms}
            raise TrainingDiverged(f"non-finite loss at step {step}", rec)

        if step % config.eval_interval == 0 or step == config.steps:
            log.append(
                _eval_record(step, config, dataset, density, bundle, source, eval_rng, d_val, g_val, terms)
            )
    return bundle, log


def train_supervised(
    config: TrainConfig, dataset: Dataset, steps: int | None = None
) -> Discriminator:
    """Fit a discriminator on the labeled set alone (supervised objective only)."""
    init_ss, _ = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(init_ss)
    disc = Discriminator.init(dataset.num_classes, config.d_f, _disc_hidden(config), rng, config.leaky_slope)
    opt = Adam(disc.params(), config.lr, (config.beta1, config.beta2))
    for _ in range(steps if steps is not None else config.steps):
        opt.zero_grad()
        with Tape() as tape:
            loss = O.supervised_loss(disc, dataset.labeled_x, dataset.labeled_y)
        tape.backward(loss)
        opt.step()
    return disc


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
