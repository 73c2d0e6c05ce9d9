import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from metaci.dgp import (
    DEFAULT_BASIS,
    IHDP_COLUMNS,
    AdDgpParams,
    BasisRegistry,
    Dataset,
    Dgp,
    IhdpDgpParams,
    generate_ad_dataset,
    generate_ihdp_dataset,
    ground_truth_ate,
    load_ihdp_csv,
    make_concept_shift_family,
)
from metaci.errors import ConfigError
from metaci.mathcore import RngStream


def _gauss_mean(fn):
    x, w = hermegauss(80)
    return float(np.sum(w * fn(x)) / np.sqrt(2 * np.pi))


@pytest.mark.parametrize("j", range(1, 11))
def test_basis_centred_under_standard_normal(j):
    assert abs(_gauss_mean(DEFAULT_BASIS[j])) < 1e-10


def test_registry_shape():
    assert len(DEFAULT_BASIS.names()) == 10
    with pytest.raises(IndexError):
        DEFAULT_BASIS[0]
    with pytest.raises(ConfigError):
        BasisRegistry(DEFAULT_BASIS.functions[:9])


def test_ad_ate_is_eta():
    # mu1 is stored as mu0 + eta, so the difference is eta up to rounding
    for eta in (1.0, 0.0, 2.5):
        ds = generate_ad_dataset(AdDgpParams(n=300, eta=eta), RngStream(1))
        assert np.max(np.abs(ds.mu1 - ds.mu0 - eta)) < 1e-12
        assert abs(ground_truth_ate(ds) - eta) < 1e-12


def _mc_treated_share(draws=10**5):
    # independent generator, same mechanism
    g = np.random.default_rng(123)
    q = g.standard_normal((draws, 5))
    score = sum(DEFAULT_BASIS[j](q[:, j - 1]) for j in range(1, 6))
    return float(np.mean(score + g.standard_normal(draws) > 0))


def test_treated_share_near_half():
    oracle = _mc_treated_share()
    assert abs(oracle - 0.5) < 0.05
    ds = generate_ad_dataset(AdDgpParams(n=2000), RngStream(11))
    assert abs(ds.t.mean() - 0.5) < 0.05


def test_theta_only_changes_outcome_noise():
    a = generate_ad_dataset(AdDgpParams(n=200, theta=1.0), RngStream(4))
    b = generate_ad_dataset(AdDgpParams(n=200, theta=20.0), RngStream(4))
    for name in ("X", "t", "mu0", "mu1"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.y, b.y)
    noise_a = a.y - np.where(a.t == 1, a.mu1, a.mu0)
    noise_b = b.y - np.where(b.t == 1, b.mu1, b.mu0)
    assert np.allclose(noise_b, 20.0 * noise_a, rtol=1e-12, atol=0)


def test_ad_noiseless_limit():
    ds = generate_ad_dataset(AdDgpParams(n=100, theta=1e-300), RngStream(2))
    assert np.array_equal(ds.y, np.where(ds.t == 1, ds.mu1, ds.mu0))


def test_only_first_five_features_matter():
    ds = generate_ad_dataset(AdDgpParams(n=50, p=7), RngStream(8))
    expected = sum(DEFAULT_BASIS[j + 5](ds.X[:, j - 1]) for j in range(1, 6))
    assert np.allclose(ds.mu0, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kw", [{"p": 4}, {"n": 10}, {"theta": 0.0}])
def test_ad_param_validation(kw):
    with pytest.raises(ConfigError):
        generate_ad_dataset(AdDgpParams(**kw), RngStream(0))


def test_ihdp_stand_in_shape():
    ds = generate_ihdp_dataset(IhdpDgpParams(n=1144), RngStream(3))
    assert ds.X.shape == (1144, 8)


def test_ihdp_noiseless_limit():
    ds = generate_ihdp_dataset(IhdpDgpParams(n=300, noise_scale=0.0), RngStream(3))
    assert np.array_equal(ds.y, np.where(ds.t == 1, ds.mu1, ds.mu0))


def test_ihdp_ate_matches_configured_effect():
    for effect in (4.0, -1.5):
        ds = generate_ihdp_dataset(IhdpDgpParams(n=500, effect=effect), RngStream(6))
        assert abs(ground_truth_ate(ds) - effect) < 1e-12


def test_ihdp_csv_round_trip(tmp_path):
    g = np.random.default_rng(0)
    path = tmp_path / "ihdp.csv"
    lines = [",".join(("id",) + IHDP_COLUMNS)]
    for i in range(30):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in g.normal(size=8)]))
    path.write_text("\n".join(lines) + "\n")
    X = load_ihdp_csv(path)
    assert X.shape == (30, 8)
    ds = generate_ihdp_dataset(IhdpDgpParams(csv_path=str(path)), RngStream(1))
    assert np.array_equal(ds.X, X)


def test_ihdp_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("momage,bw\n1,2\n")
    with pytest.raises(ConfigError, match="bilirubin"):
        load_ihdp_csv(bad)
    with pytest.raises(ConfigError, match="not found"):
        load_ihdp_csv(tmp_path / "missing.csv")
    short = tmp_path / "short.csv"
    short.write_text(",".join(IHDP_COLUMNS) + "\n" + ",".join(["1"] * 8) + "\n")
    with pytest.raises(ConfigError, match="rows"):
        load_ihdp_csv(short)


def test_ihdp_param_validation():
    with pytest.raises(ConfigError):
        IhdpDgpParams(linear=(1.0,)).validate()
    with pytest.raises(ConfigError):
        IhdpDgpParams(noise_scale=-1.0).validate()


@pytest.mark.parametrize("thetas", [(1.0, 10.0), (1.0, 10.0, 20.0)])
def test_concept_shift_family_shares_features(thetas):
    family = make_concept_shift_family(AdDgpParams(n=100), [{"theta": t} for t in thetas])
    assert [d.dgp_id for d in family] == [f"ad-{i}" for i in range(len(thetas))]
    data = [d.generate(RngStream(5)) for d in family]
    for ds in data[1:]:
        assert np.array_equal(ds.X, data[0].X) and np.array_equal(ds.t, data[0].t)


def test_concept_shift_family_errors():
    with pytest.raises(ConfigError):
        make_concept_shift_family(AdDgpParams(), [{"theta": 1.0}])
    with pytest.raises(ConfigError, match="non-outcome"):
        make_concept_shift_family(AdDgpParams(), [{"theta": 1.0}, {"p": 6}])
    with pytest.raises(ConfigError, match="unknown"):
        make_concept_shift_family(AdDgpParams(), [{"theta": 1.0}, {"zeta": 6}])


def test_ground_truth_ate_small():
    ds = Dataset(np.zeros((2, 1)), [1, 0], [0.0, 0.0], [0.0, 1.0], [1.0, 4.0])
    assert ground_truth_ate(ds) == 2.0
    with pytest.raises(ConfigError):
        ground_truth_ate(Dataset(np.zeros((2, 1)), [1, 0], [0.0, 0.0]))


def test_dataset_validation_and_immutability():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 1)), [1, 2], [0.0, 0.0])
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 1)), [1, 0], [0.0])
    ds = Dataset(np.zeros((2, 1)), [1, 0], [0.0, 0.0])
    with pytest.raises(ValueError):
        ds.y[0] = 1.0


def test_dataset_csv_round_trip(tmp_path):
    ds = generate_ad_dataset(AdDgpParams(n=40, p=5), RngStream(9))
    ds.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert back.checksum() == ds.checksum()
    ds.to_csv(tmp_path / "blind.csv", include_truth=False)
    blind = Dataset.from_csv(tmp_path / "blind.csv")
    assert not blind.has_truth and np.array_equal(blind.y, ds.y)


def test_population_sizes():
    assert Dgp("ad-0", AdDgpParams(n=500)).population_size(7) == 3500
    assert Dgp("ihdp-0", IhdpDgpParams()).population_size(8) == 3984
