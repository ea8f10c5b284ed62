"""Prior samplers, corpora, and CSV round-trips."""

import numpy as np
import pytest

from ebtf.datagen import (
    Dataset,
    DirichletProcess,
    Exponential,
    GaussianMixture,
    NeuralPrior,
    PointMassSet,
    PretrainCorpus,
    Uniform,
    derive_rng,
    describe,
    export_dataset_csv,
    load_dataset_csv,
    prior_mean_var,
    random_pretrain_prior,
    sample_dataset,
    sample_prior,
    standard_target,
)


# ---------------------------------------------------------------------------
# moments: sample means/variances against independently computed values
# ---------------------------------------------------------------------------

def test_standard_target_moments():
    # equal-weight mixture at means (1, 3, 4), unit component variances:
    # mean = 8/3, var = (2 + 10 + 17)/3 - (8/3)^2 = 23/9
    mean, var = prior_mean_var(standard_target())
    assert abs(mean - 8.0 / 3.0) < 1e-12
    assert abs(var - 23.0 / 9.0) < 1e-12


@pytest.mark.parametrize("prior,mean,var", [
    (GaussianMixture((0.5, 0.5), (-2.0, 2.0), (1.0, 1.0)), 0.0, 5.0),
    (Exponential(5.0), 5.0, 25.0),
    (Uniform(0.0, 5.0), 2.5, 25.0 / 12.0),
    (PointMassSet((0.0, 10.0), (0.5, 0.5)), 5.0, 25.0),
])
def test_sample_moments_match_closed_forms(prior, mean, var):
    rng = np.random.default_rng(42)
    draws = sample_prior(prior, 200_000, rng)
    se_mean = np.sqrt(var / draws.size)
    assert abs(draws.mean() - mean) < 5 * se_mean
    assert abs(draws.var() - var) < 0.05 * max(var, 1.0)
    closed = prior_mean_var(prior)
    assert abs(closed[0] - mean) < 1e-12 and abs(closed[1] - var) < 1e-12


def test_mixture_weight_validation():
    with pytest.raises(ValueError):
        GaussianMixture((0.6, 0.6), (0.0, 1.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        GaussianMixture((1.0,), (0.0,), (-1.0,))
    with pytest.raises(ValueError):
        Uniform(2.0, 2.0)
    with pytest.raises(ValueError):
        Exponential(0.0)


# ---------------------------------------------------------------------------
# shared-atom process
# ---------------------------------------------------------------------------

def test_shared_atom_reuse_rate():
    # with concentration 1, the second draw copies the first with prob 1/2;
    # the base is continuous so equality only happens through reuse
    prior = DirichletProcess(1.0, Uniform(0.0, 5.0))
    rng = np.random.default_rng(7)
    reps = 10_000
    hits = 0
    for _ in range(reps):
        pair = sample_prior(prior, 2, rng)
        hits += pair[0] == pair[1]
    rate = hits / reps
    assert abs(rate - 0.5) < 0.02


def test_shared_atom_growth_is_logarithmic():
    prior = DirichletProcess(1.0, Uniform(0.0, 5.0))
    rng = np.random.default_rng(11)
    counts = [np.unique(sample_prior(prior, 1000, rng)).size for _ in range(20)]
    # expected unique count is about log(1000) + 0.577 ~ 7.5
    assert 2 <= min(counts) and max(counts) <= 30
    assert 4.0 < np.mean(counts) < 14.0


def test_shared_atom_higher_concentration_means_more_atoms():
    base = Uniform(0.0, 5.0)
    rng = np.random.default_rng(3)
    lo = np.mean([np.unique(sample_prior(DirichletProcess(0.5, base), 500, rng)).size
                  for _ in range(10)])
    hi = np.mean([np.unique(sample_prior(DirichletProcess(20.0, base), 500, rng)).size
                  for _ in range(10)])
    assert hi > 3 * lo


# ---------------------------------------------------------------------------
# random-network prior
# ---------------------------------------------------------------------------

def test_neural_prior_range_and_determinism():
    prior = NeuralPrior(seed=123)
    a = sample_prior(prior, 5000, np.random.default_rng(0))
    b = sample_prior(NeuralPrior(seed=123), 5000, np.random.default_rng(0))
    assert np.array_equal(a, b)
    assert np.all((a > 0.0) & (a < 1.0))       # sigmoid output
    assert a.std() > 1e-4                       # not collapsed to a constant


def test_neural_prior_different_seeds_differ():
    a = sample_prior(NeuralPrior(seed=1), 1000, np.random.default_rng(0))
    b = sample_prior(NeuralPrior(seed=2), 1000, np.random.default_rng(0))
    assert not np.allclose(a, b)


def test_random_pretrain_prior_family():
    rng = np.random.default_rng(9)
    for _ in range(25):
        g = random_pretrain_prior(rng)
        assert len(g.means) == 3
        assert all(0.0 <= m <= 5.0 for m in g.means)
        assert set(g.weights) == {1.0 / 3.0}
        assert set(g.variances) == {1.0}


# ---------------------------------------------------------------------------
# datasets and corpora
# ---------------------------------------------------------------------------

def test_dataset_shapes_and_noise_level():
    rng = np.random.default_rng(5)
    ds = sample_dataset(standard_target(), 50_000, 2.0, rng)
    assert ds.obs.shape == (50_000, 1) and ds.theta.shape == (50_000, 1)
    resid = (ds.obs - ds.theta).ravel()
    assert abs(resid.mean()) < 0.05
    assert abs(resid.std() - 2.0) < 0.05


def test_corpus_single_pair():
    corpus = PretrainCorpus(standard_target(), k=1, seq_len=1, sigma=1.0, seed=0)
    theta, obs = corpus.batch(0, 1)
    assert theta.shape == (1, 1, 1) and obs.shape == (1, 1, 1)


def test_corpus_sequences_are_independently_materializable():
    corpus = PretrainCorpus(standard_target(), k=10, seq_len=16, sigma=1.0, seed=77)
    # sequence 7 must not depend on whether earlier sequences were generated
    direct = corpus.sequence(7)
    for i in range(7):
        corpus.sequence(i)
    again = corpus.sequence(7)
    assert np.array_equal(direct[0], again[0])
    assert np.array_equal(direct[1], again[1])
    with pytest.raises(IndexError):
        corpus.sequence(10)


def test_corpus_manifest_counts():
    corpus = PretrainCorpus(Exponential(5.0), k=4, seq_len=8, sigma=0.5, seed=1)
    manifest = corpus.manifest()
    assert '"observations": 32' in manifest
    assert '"prior": "exponential(mean=5)"' in manifest


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    ds = sample_dataset(standard_target(), 100, 1.0, rng)
    path = tmp_path / "data.csv"
    export_dataset_csv(path, ds)
    back = load_dataset_csv(path)
    assert np.array_equal(back.obs, ds.obs)
    assert np.array_equal(back.theta, ds.theta)
    assert back.sigma == 1.0


def test_csv_withheld_labels(tmp_path):
    rng = np.random.default_rng(13)
    ds = sample_dataset(standard_target(), 20, 1.0, rng)
    path = tmp_path / "unlabeled.csv"
    export_dataset_csv(path, ds, withhold_theta=True)
    text = path.read_text()
    assert text.splitlines()[0] == "index,theta,d"
    back = load_dataset_csv(path, sigma=2.0)
    assert back.theta is None
    assert back.sigma == 2.0
    assert np.array_equal(back.obs, ds.obs)


def test_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n0,1,2\n")
    with pytest.raises(ValueError):
        load_dataset_csv(path)


# ---------------------------------------------------------------------------
# labels and derived streams
# ---------------------------------------------------------------------------

def test_describe_labels_are_distinct():
    priors = [
        standard_target(),
        Exponential(5.0),
        Uniform(0.0, 5.0),
        PointMassSet((1.0, 2.0), (0.5, 0.5)),
        DirichletProcess(1.0, Uniform(0.0, 5.0)),
        NeuralPrior(seed=4),
    ]
    labels = [describe(p) for p in priors]
    assert len(set(labels)) == len(labels)


def test_derive_rng_is_deterministic_and_separates_keys():
    a = derive_rng(7, "pretrain", 3).standard_normal(8)
    b = derive_rng(7, "pretrain", 3).standard_normal(8)
    c = derive_rng(7, "pretrain", 4).standard_normal(8)
    d = derive_rng(7, "finetune", 3).standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_dataset_reshapes_flat_input():
    ds = Dataset(obs=np.arange(4.0), theta=np.arange(4.0))
    assert ds.obs.shape == (4, 1)
    assert ds.n == 4
