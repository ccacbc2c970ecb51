"""Discriminator, generator, encoder, and the oracle complement sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from badgan import tensor as T
from badgan.datasets import InputBox
from badgan.tensor import Tensor


class SaturationError(RuntimeError):
    """The data manifold leaves (almost) no room for complement samples."""


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # bias rows are broadcast with a ones column so only scalar broadcasting is needed
    ones = Tensor(np.ones((x.shape[0], 1)))
    return T.matmul(x, w) + T.matmul(ones, b)


@dataclass
class MLP:
    sizes: tuple[int, ...]
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)
    activation: str = "leaky_relu"
    slope: float = 0.2

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation="leaky_relu", slope=0.2) -> "MLP":
        net = cls(tuple(sizes), activation=activation, slope=slope)
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            # U(+-1/sqrt(fan_in)) for weights and biases; nonzero biases spread the
            # first-layer kinks over the input box instead of through the origin
            bound = 1.0 / math.sqrt(fan_in)
            net.weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True))
            net.biases.append(Tensor(rng.uniform(-bound, bound, (1, fan_out)), True))
        return net

    def _act(self, h: Tensor) -> Tensor:
        if self.activation == "leaky_relu":
            return T.leaky_relu(h, self.slope)
        if self.activation == "relu":
            return T.relu(h)
        if self.activation == "tanh":
            return T.tanh(h)
        raise ValueError(f"unknown activation {self.activation!r}")

    def __call__(self, x: Tensor, final_activation: bool = False) -> Tensor:
        h = T.as_tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = linear(h, w, b)
            if i < last or final_activation:
                h = self._act(h)
        return h

    def params(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{prefix}.{i}.weight", w), (f"{prefix}.{i}.bias", b)]
        return out


@dataclass
class Discriminator:
    """Feature net f plus K class rows W; the (K+1)-th (fake) row is implicitly zero."""

    net: MLP
    class_weights: Tensor  # (K, d_f)

    @classmethod
    def init(cls, num_classes: int, d_f: int = 16, hidden=(64, 64), rng=None, slope=0.2):
        rng = rng if rng is not None else np.random.default_rng(0)
        net = MLP.init((2, *hidden, d_f), rng, "leaky_relu", slope)
        bound = 1.0 / math.sqrt(d_f)
        w = Tensor(rng.uniform(-bound, bound, (num_classes, d_f)), True)
        return cls(net, w)

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.class_weights.shape[1]

    def features(self, x) -> Tensor:
        return self.net(T.as_tensor(x))

    def logits_from_features(self, f) -> Tensor:
        return T.matmul(T.as_tensor(f), T.transpose(self.class_weights))

    def logits(self, x) -> Tensor:
        return self.logits_from_features(self.features(x))

    def params(self) -> list[Tensor]:
        return self.net.params() + [self.class_weights]

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.net.named_params("D.f") + [("D.W", self.class_weights)]


@dataclass
class Generator:
    net: MLP
    box: InputBox
    latent_dim: int

    @classmethod
    def init(cls, box: InputBox, latent_dim: int = 10, hidden=(64, 64), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(MLP.init((latent_dim, *hidden, 2), rng, "relu"), box, latent_dim)

    def sample_latent(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, self.latent_dim))

    def __call__(self, z) -> Tensor:
        h = T.tanh(self.net(T.as_tensor(z)))
        n = h.shape[0]
        scale = Tensor(np.diag(self.box.half_width))
        shift = Tensor(np.ones((n, 1)) * self.box.center[None, :])
        return T.matmul(h, scale) + shift

    def params(self) -> list[Tensor]:
        return self.net.params()

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.net.named_params("G.g")


def generate(gen: Generator, n: int, rng: np.random.Generator) -> np.ndarray:
    return gen(gen.sample_latent(n, rng)).values


# keeps sigma strictly inside (0, theta) even when the sigmoid saturates in float64
_SIGMA_MARGIN = 1e-6


@dataclass
class Encoder:
    """Diagonal Gaussian q(z|x) with sigma squashed into (0, theta)."""

    trunk: MLP
    mu_head: MLP
    sigma_head: MLP
    theta: float = 1.0

    @classmethod
    def init(cls, latent_dim: int = 10, hidden=(64, 64), theta: float = 1.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        trunk = MLP.init((2, *hidden), rng, "leaky_relu")
        return cls(
            trunk,
            MLP.init((hidden[-1], latent_dim), rng),
            MLP.init((hidden[-1], latent_dim), rng),
            theta,
        )

    def squash(self, raw: Tensor) -> Tensor:
        s = T.sigmoid(raw)
        return self.theta * (_SIGMA_MARGIN + (1.0 - 2.0 * _SIGMA_MARGIN) * s)

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        h = self.trunk(T.as_tensor(x), final_activation=True)
        return self.mu_head(h), self.squash(self.sigma_head(h))

    def params(self) -> list[Tensor]:
        return self.trunk.params() + self.mu_head.params() + self.sigma_head.params()

    def named_params(self) -> list[tuple[str, Tensor]]:
        return (
            self.trunk.named_params("E.trunk")
            + self.mu_head.named_params("E.mu")
            + self.sigma_head.named_params("E.sigma")
        )


def encode(enc: Encoder, x) -> tuple[np.ndarray, np.ndarray]:
    mu, sigma = enc(x)
    return mu.values, sigma.values


def gaussian_log_prob(z, mu: Tensor, sigma: Tensor) -> Tensor:
    """Per-row log N(z; mu, diag(sigma^2)), differentiable in mu and sigma."""
    z = T.as_tensor(z)
    d = z.shape[1]
    var = T.square(sigma)
    quad = T.sum(T.square(z - mu) / (2.0 * var), axis=1)
    logdet = T.sum(T.log(sigma), axis=1)
    return -(quad + logdet) - 0.5 * d * math.log(2.0 * math.pi)


def encoder_log_prob(enc: Encoder, x, z) -> Tensor:
    mu, sigma = enc(x)
    return gaussian_log_prob(z, mu, sigma)


def disc_logits(disc: Discriminator, batch) -> np.ndarray:
    return disc.logits(batch).values


def class_posterior(logits: np.ndarray) -> np.ndarray:
    """Softmax over the K logits plus the implicit zero fake logit; shape (N, K+1)."""
    full = np.concatenate([logits, np.zeros((logits.shape[0], 1))], axis=1)
    m = full.max(1, keepdims=True)
    e = np.exp(full - m)
    return e / e.sum(1, keepdims=True)


def p_fake_from_logits(logits: np.ndarray) -> np.ndarray:
    # 1 / (1 + sum_k exp l_k), computed as exp(-logsumexp([l, 0]))
    full = np.concatenate([logits, np.zeros((logits.shape[0], 1))], axis=1)
    m = full.max(1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(full - m).sum(1))
    return np.exp(-lse)


def p_fake(disc: Discriminator, x) -> np.ndarray:
    return p_fake_from_logits(disc_logits(disc, np.atleast_2d(x)))


# -- oracle complement ------------------------------------------------------


def min_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distance from each query row to its nearest row of ``points``."""
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        return np.full(queries.shape[0], np.inf)
    return cKDTree(points).query(queries, k=1)[0]


def median_nn_distance(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    # k=2 because each point's nearest neighbour in its own tree is itself
    return float(np.median(cKDTree(points).query(points, k=2)[0][:, 1]))


def oracle_complement_sampler(
    box: InputBox,
    unlabeled: np.ndarray,
    radius: float,
    n: int,
    rng: np.random.Generator,
    max_proposals: int = 100_000,
    min_rate: float = 0.01,
) -> np.ndarray:
    """Uniform samples in ``box`` farther than ``radius`` from every unlabeled point."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    unlabeled = np.asarray(unlabeled, dtype=np.float64).reshape(-1, 2)
    accepted: list[np.ndarray] = []
    n_acc = proposed = 0
    batch = max(2 * n, 256)
    while n_acc < n:
        cand = box.uniform(batch, rng)
        keep = cand[min_distances(cand, unlabeled) > radius]
        proposed += batch
        accepted.append(keep)
        n_acc += keep.shape[0]
        if proposed >= max_proposals and n_acc < min_rate * proposed:
            raise SaturationError(
                f"acceptance rate {n_acc / proposed:.4f} after {proposed} proposals"
            )
    return np.concatenate(accepted)[:n]


# -- bundle and checkpoints -------------------------------------------------


@dataclass
class ModelBundle:
    disc: Discriminator
    gen: Generator | None = None
    enc: Encoder | None = None

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = self.disc.named_params()
        if self.gen is not None:
            out += self.gen.named_params()
        if self.enc is not None:
            out += self.enc.named_params()
        return out

    def meta(self) -> dict[str, str]:
        m = {
            "num_classes": str(self.disc.num_classes),
            "feature_dim": str(self.disc.feature_dim),
            "disc_sizes": "x".join(map(str, self.disc.net.sizes)),
            "slope": repr(self.disc.net.slope),
        }
        if self.gen is not None:
            m["gen_sizes"] = "x".join(map(str, self.gen.net.sizes))
            m["box"] = ",".join(repr(float(v)) for v in (*self.gen.box.lo, *self.gen.box.hi))
        if self.enc is not None:
            m["enc_sizes"] = "x".join(map(str, self.enc.trunk.sizes))
            m["latent_dim"] = str(self.enc.mu_head.sizes[-1])
            m["theta"] = repr(self.enc.theta)
        return m


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    with open(path, "w") as fh:
        for k, v in bundle.meta().items():
            fh.write(f"#meta {k}={v}\n")
        for name, t in bundle.named_params():
            shape = "x".join(map(str, t.shape))
            fh.write(f"{name} {shape} " + ",".join(repr(float(v)) for v in t.values.ravel()) + "\n")


def load_checkpoint(path: str | Path) -> ModelBundle:
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#meta "):
                k, v = line[6:].split("=", 1)
                meta[k] = v
                continue
            name, shape, vals = line.split(" ", 2)
            dims = tuple(int(s) for s in shape.split("x"))
            tensors[name] = np.array([float(v) for v in vals.split(",")]).reshape(dims)

    def sizes(key):
        return tuple(int(s) for s in meta[key].split("x"))

    def load_mlp(prefix, sz, activation, slope=0.2):
        net = MLP(sz, activation=activation, slope=slope)
        for i in range(len(sz) - 1):
            net.weights.append(Tensor(tensors[f"{prefix}.{i}.weight"], True))
            net.biases.append(Tensor(tensors[f"{prefix}.{i}.bias"], True))
        return net

    disc = Discriminator(
        load_mlp("D.f", sizes("disc_sizes"), "leaky_relu", float(meta["slope"])),
        Tensor(tensors["D.W"], True),
    )
    gen = enc = None
    if "gen_sizes" in meta:
        b = [float(v) for v in meta["box"].split(",")]
        gs = sizes("gen_sizes")
        gen = Generator(load_mlp("G.g", gs, "relu"), InputBox(np.array(b[:2]), np.array(b[2:])), gs[0])
    if "enc_sizes" in meta:
        es = sizes("enc_sizes")
        dz = int(meta["latent_dim"])
        enc = Encoder(
            load_mlp("E.trunk", es, "leaky_relu"),
            load_mlp("E.mu", (es[-1], dz), "leaky_relu"),
            load_mlp("E.sigma", (es[-1], dz), "leaky_relu"),
            float(meta["theta"]),
        )
    return ModelBundle(disc, gen, enc)
