"""Prior families and synthetic data generation.

Every experiment draws latent parameters theta_i from a prior, then observes
d_i = theta_i + sigma * z_i with standard Gaussian noise.  Priors here are
scalar families (the experiment suite works at per-token dimension 1; the
network itself accepts general p).

Provided families:

- :class:`GaussianMixture` -- finite mixture of normals
- :class:`Exponential` -- parameterised by its mean
- :class:`Uniform` -- on an interval
- :class:`PointMassSet` -- weighted atoms (also the materialised form of a
  shared-atom process realisation)
- :class:`DirichletProcess` -- exchangeable sequential draws: the j-th value
  either repeats a uniformly chosen earlier value (probability
  (j-1)/(alpha+j-1)) or is a fresh draw from the base distribution
  (probability alpha/(alpha+j-1))
- :class:`NeuralPrior` -- push a uniform cube through one of several small
  randomly initialised networks with a sigmoid output, giving awkward
  distributions supported on (0, 1)

Randomness is always explicit: functions take a numpy ``Generator`` or a
seed, and child streams are derived with ``SeedSequence`` over structured
keys so that every cell of an experiment is independently reproducible.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import erf


# ---------------------------------------------------------------------------
# prior families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMixture:
    weights: tuple[float, ...]
    means: tuple[float, ...]
    variances: tuple[float, ...]

    def __post_init__(self):
        k = len(self.weights)
        if not (k == len(self.means) == len(self.variances)) or k == 0:
            raise ValueError("weights/means/variances must be equal-length and non-empty")
        if any(w < 0 for w in self.weights):
            raise ValueError("mixture weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {sum(self.weights)}")
        if any(v <= 0 for v in self.variances):
            raise ValueError("mixture variances must be positive")


@dataclass(frozen=True)
class Exponential:
    mean: float

    def __post_init__(self):
        if not self.mean > 0:
            raise ValueError("exponential mean must be positive")

    @property
    def rate(self) -> float:
        return 1.0 / self.mean


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError("need high > low")


@dataclass(frozen=True)
class PointMassSet:
    atoms: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.atoms) != len(self.weights) or not self.atoms:
            raise ValueError("atoms/weights must be equal-length and non-empty")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @staticmethod
    def from_draws(draws: np.ndarray) -> "PointMassSet":
        draws = np.asarray(draws, dtype=float).ravel()
        n = draws.size
        return PointMassSet(tuple(draws.tolist()), tuple([1.0 / n] * n))


@dataclass(frozen=True)
class DirichletProcess:
    alpha: float
    base: "Prior"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("concentration must be positive")


@dataclass(frozen=True)
class NeuralPrior:
    seed: int
    n_nets: int = 4
    input_dim: int = 4
    hidden: int = 16


Prior = (GaussianMixture | Exponential | Uniform | PointMassSet
         | DirichletProcess | NeuralPrior)


# the three-component target used throughout the main experiments
def standard_target() -> GaussianMixture:
    return GaussianMixture((1 / 3, 1 / 3, 1 / 3), (1.0, 3.0, 4.0), (1.0, 1.0, 1.0))


def random_pretrain_prior(rng: np.random.Generator, n_components: int = 3,
                          low: float = 0.0, high: float = 5.0) -> GaussianMixture:
    """Equal-weight unit-variance mixture with component means drawn
    uniformly from [low, high]; the family the pretraining stage samples."""
    means = tuple(float(m) for m in rng.uniform(low, high, size=n_components))
    w = tuple([1.0 / n_components] * n_components)
    v = tuple([1.0] * n_components)
    return GaussianMixture(w, means, v)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _neural_activations():
    sqrt2 = np.sqrt(2.0)
    selu_l, selu_a = 1.0507009873554805, 1.6732632423543772
    return {
        "gelu": lambda x: 0.5 * x * (1.0 + erf(x / sqrt2)),
        "relu": lambda x: np.maximum(x, 0.0),
        "selu": lambda x: selu_l * np.where(x > 0, x, selu_a * np.expm1(x)),
        "celu": lambda x: np.maximum(x, 0.0) + np.minimum(0.0, np.expm1(x)),
        "silu": lambda x: x / (1.0 + np.exp(-x)),
        "tanhshrink": lambda x: x - np.tanh(x),
    }


class _NeuralNets:
    """The fixed random networks behind a NeuralPrior instance."""

    def __init__(self, prior: NeuralPrior):
        acts = _neural_activations()
        names = sorted(acts)
        self.layers = []
        for j in range(prior.n_nets):
            r = np.random.default_rng(np.random.SeedSequence((prior.seed, j)))
            w1 = r.uniform(-1, 1, (prior.hidden, prior.input_dim)) / np.sqrt(prior.input_dim)
            b1 = r.uniform(-1, 1, prior.hidden) / np.sqrt(prior.input_dim)
            w2 = r.uniform(-1, 1, (1, prior.hidden)) / np.sqrt(prior.hidden)
            b2 = r.uniform(-1, 1, 1) / np.sqrt(prior.hidden)
            act = acts[names[r.integers(0, len(names))]]
            self.layers.append((w1, b1, w2, b2, act))

    def push(self, net_idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        for j, (w1, b1, w2, b2, act) in enumerate(self.layers):
            sel = net_idx == j
            if not np.any(sel):
                continue
            h = act(x[sel] @ w1.T + b1)
            z = (h @ w2.T + b2).ravel()
            out[sel] = 1.0 / (1.0 + np.exp(-z))
        return out


_NET_CACHE: dict[NeuralPrior, _NeuralNets] = {}


def sample_prior(prior: Prior, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n latent parameter values from the prior."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if isinstance(prior, GaussianMixture):
        comp = rng.choice(len(prior.weights), size=n, p=np.asarray(prior.weights))
        means = np.asarray(prior.means)[comp]
        stds = np.sqrt(np.asarray(prior.variances))[comp]
        return means + stds * rng.standard_normal(n)
    if isinstance(prior, Exponential):
        return rng.exponential(prior.mean, size=n)
    if isinstance(prior, Uniform):
        return rng.uniform(prior.low, prior.high, size=n)
    if isinstance(prior, PointMassSet):
        return rng.choice(np.asarray(prior.atoms), size=n, p=np.asarray(prior.weights))
    if isinstance(prior, DirichletProcess):
        draws = np.empty(n)
        for j in range(n):
            # j earlier values exist; fresh with probability alpha/(alpha+j)
            if j == 0 or rng.uniform() < prior.alpha / (prior.alpha + j):
                draws[j] = sample_prior(prior.base, 1, rng)[0]
            else:
                draws[j] = draws[rng.integers(0, j)]
        return draws
    if isinstance(prior, NeuralPrior):
        nets = _NET_CACHE.get(prior)
        if nets is None:
            nets = _NET_CACHE.setdefault(prior, _NeuralNets(prior))
        idx = rng.integers(0, prior.n_nets, size=n)
        x = rng.uniform(0.0, 1.0, size=(n, prior.input_dim))
        return nets.push(idx, x)
    raise TypeError(f"unknown prior type {type(prior).__name__}")


def prior_mean_var(prior: Prior) -> tuple[float, float]:
    """Closed-form mean and variance where available.

    For the sequential shared-atom process each draw is marginally a draw
    from the base distribution, so base moments apply.
    """
    if isinstance(prior, GaussianMixture):
        w = np.asarray(prior.weights)
        m = np.asarray(prior.means)
        v = np.asarray(prior.variances)
        mean = float(w @ m)
        return mean, float(w @ (v + m * m) - mean ** 2)
    if isinstance(prior, Exponential):
        return prior.mean, prior.mean ** 2
    if isinstance(prior, Uniform):
        mean = 0.5 * (prior.low + prior.high)
        return mean, (prior.high - prior.low) ** 2 / 12.0
    if isinstance(prior, PointMassSet):
        a = np.asarray(prior.atoms)
        w = np.asarray(prior.weights)
        mean = float(w @ a)
        return mean, float(w @ (a * a) - mean ** 2)
    if isinstance(prior, DirichletProcess):
        return prior_mean_var(prior.base)
    raise NotImplementedError(f"no closed moments for {type(prior).__name__}")


def describe(prior: Prior) -> str:
    """Short deterministic label used in manifests and the records CSV."""
    if isinstance(prior, GaussianMixture):
        mm = ",".join(f"{m:.4g}" for m in prior.means)
        return f"gmm(means=[{mm}])"
    if isinstance(prior, Exponential):
        return f"exponential(mean={prior.mean:.4g})"
    if isinstance(prior, Uniform):
        return f"uniform({prior.low:.4g},{prior.high:.4g})"
    if isinstance(prior, PointMassSet):
        return f"atoms(k={len(prior.atoms)})"
    if isinstance(prior, DirichletProcess):
        return f"dp(alpha={prior.alpha:.4g},base={describe(prior.base)})"
    if isinstance(prior, NeuralPrior):
        return f"neural(seed={prior.seed},nets={prior.n_nets})"
    raise TypeError(f"unknown prior type {type(prior).__name__}")


# ---------------------------------------------------------------------------
# datasets and corpora
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Column-stacked (n, 1) latent parameters and observations.
    ``theta`` is None for unlabeled (real-world style) data."""

    obs: np.ndarray
    theta: np.ndarray | None = None
    sigma: float = 1.0

    def __post_init__(self):
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=float))
        if self.obs.shape[0] == 1 and self.obs.shape[1] > 1:
            self.obs = self.obs.T
        if self.theta is not None:
            self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
            if self.theta.shape[0] == 1 and self.theta.shape[1] > 1:
                self.theta = self.theta.T
            if self.theta.shape != self.obs.shape:
                raise ValueError("theta/obs shape mismatch")

    @property
    def n(self) -> int:
        return self.obs.shape[0]


def sample_dataset(prior: Prior, n: int, sigma: float,
                   rng: np.random.Generator) -> Dataset:
    theta = sample_prior(prior, n, rng)
    obs = theta + sigma * rng.standard_normal(n)
    return Dataset(obs=obs.reshape(-1, 1), theta=theta.reshape(-1, 1), sigma=sigma)


class PretrainCorpus:
    """Lazily generated labeled sequences for supervised pretraining.

    Sequence i is reproducible in isolation: its stream is seeded by
    (root_seed, i), so a worker can materialise any slice without generating
    the rest.
    """

    def __init__(self, prior: Prior, k: int, seq_len: int, sigma: float, seed: int):
        if k < 1 or seq_len < 1:
            raise ValueError("need k >= 1 sequences and seq_len >= 1")
        if not sigma > 0:
            raise ValueError("noise scale must be positive")
        self.prior = prior
        self.k = k
        self.seq_len = seq_len
        self.sigma = sigma
        self.seed = seed

    def sequence(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(theta, obs) arrays of shape (seq_len, 1) for sequence i."""
        if not 0 <= i < self.k:
            raise IndexError(f"sequence index {i} out of range [0, {self.k})")
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, i)))
        ds = sample_dataset(self.prior, self.seq_len, self.sigma, rng)
        return ds.theta, ds.obs

    def batch(self, start: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (size, seq_len, 1) labels and observations."""
        thetas, obs = zip(*(self.sequence(i) for i in range(start, start + size)))
        return np.stack(thetas), np.stack(obs)

    def manifest(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "prior": describe(self.prior),
            "sequences": self.k,
            "seq_len": self.seq_len,
            "sigma": self.sigma,
            "observations": self.k * self.seq_len,
        }, sort_keys=True, indent=2)


def make_pretrain_corpus(prior: Prior, k: int, seq_len: int, sigma: float,
                         seed: int) -> PretrainCorpus:
    return PretrainCorpus(prior, k, seq_len, sigma, seed)


# ---------------------------------------------------------------------------
# delimited export / import
# ---------------------------------------------------------------------------

def export_dataset_csv(path, dataset: Dataset, withhold_theta: bool = False) -> None:
    """Write ``index,theta,d`` rows; the theta field is empty when withheld
    or unknown."""
    if dataset.obs.shape[1] != 1:
        raise ValueError("delimited export is defined for per-token dimension 1")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,theta,d\n")
        for i in range(dataset.n):
            if withhold_theta or dataset.theta is None:
                theta_field = ""
            else:
                theta_field = repr(float(dataset.theta[i, 0]))
            fh.write(f"{i},{theta_field},{repr(float(dataset.obs[i, 0]))}\n")


def load_dataset_csv(path, sigma: float = 1.0) -> Dataset:
    thetas: list[float] = []
    obs: list[float] = []
    any_theta = False
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "index,theta,d":
            raise ValueError(f"unexpected dataset header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            _, theta_field, d_field = line.split(",")
            obs.append(float(d_field))
            if theta_field:
                any_theta = True
                thetas.append(float(theta_field))
            else:
                thetas.append(np.nan)
    theta_arr = np.asarray(thetas).reshape(-1, 1) if any_theta else None
    if theta_arr is not None and np.isnan(theta_arr).any():
        raise ValueError("dataset mixes labeled and unlabeled rows")
    return Dataset(obs=np.asarray(obs).reshape(-1, 1), theta=theta_arr, sigma=sigma)


# ---------------------------------------------------------------------------
# reproducible stream derivation
# ---------------------------------------------------------------------------

def derive_rng(root_seed: int, *parts) -> np.random.Generator:
    """Independent child stream keyed by (root_seed, parts).

    String parts are folded in via CRC32 so that labels like a prior
    description or a variant name key the stream deterministically.
    """
    key = [int(root_seed) & 0xFFFFFFFF]
    for part in parts:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode("utf-8")))
        else:
            key.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(tuple(key)))
