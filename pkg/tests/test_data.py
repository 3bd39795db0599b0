import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leakaudit import data
from leakaudit.data import SyntheticSpec


def _small(**kw):
  return SyntheticSpec(**{"n_features": 20, "n_classes": 4, **kw})


def test_sizes_and_disjointness():
  ds = data.generate(_small(), 100, 1.0)
  assert [len(r) for r in ds.splits().values()] == [100, 100, 100, 100]
  ids = np.concatenate([r.ids for r in ds.splits().values()])
  assert len(np.unique(ids)) == len(ids)


def test_pool_scales_with_gamma():
  ds = data.generate(_small(), 100, 10)
  assert len(ds.train) == 100
  assert len(ds.target_test) == 1000
  assert len(ds.holdout_test) == 1000


@pytest.mark.parametrize("gamma,expected", [(0.1, 50), (0.33, 165), (2.5, 1250)])
def test_pool_size_ceiling(gamma, expected):
  assert data.pool_size(500, gamma) == expected


def test_prior():
  for gamma in (0.1, 1.0, 10.0):
    ds = data.generate(_small(), 10, gamma)
    assert (1 - ds.prior_p) / ds.prior_p == pytest.approx(gamma, abs=1e-9)


def test_deterministic():
  a = data.generate(_small(seed=7), 50, 2)
  b = data.generate(_small(seed=7), 50, 2)
  c = data.generate(_small(seed=8), 50, 2)
  for name in data.SPLIT_NAMES:
    np.testing.assert_array_equal(a.splits()[name].features,
                                  b.splits()[name].features)
    np.testing.assert_array_equal(a.splits()[name].labels,
                                  b.splits()[name].labels)
  assert not np.array_equal(a.train.features, c.train.features)


def test_smaller_gamma_is_a_prefix():
  big = data.generate(_small(seed=3), 40, 10)
  small = data.generate(_small(seed=3), 40, 0.5)
  np.testing.assert_array_equal(small.train.features, big.train.features)
  np.testing.assert_array_equal(small.target_test.features,
                                big.target_test.features[:20])
  np.testing.assert_array_equal(small.holdout_test.labels,
                                big.holdout_test.labels[:20])


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 5), st.floats(0.05, 5), st.integers(0, 2**64 - 1))
def test_norms_bounded(sep, noise, seed):
  ds = data.generate(_small(class_separation=sep, within_class_noise=noise,
                            seed=seed), 30, 1)
  for block in ds.splits().values():
    norms = np.linalg.norm(block.features.astype(np.float64), axis=1)
    assert np.all(norms <= 1.0)
    assert np.all((block.labels >= 0) & (block.labels < 4))


def test_class_frequencies_uniform():
  spec = SyntheticSpec(n_features=5, n_classes=10, seed=11)
  ds = data.generate(spec, 10_000, 0.01)
  counts = np.bincount(ds.train.labels, minlength=10)
  n, p = 10_000, 0.1
  sd = np.sqrt(n * p * (1 - p))
  assert np.all(np.abs(counts - n * p) <= 3 * sd)


def test_spec_validation():
  with pytest.raises(ValueError):
    SyntheticSpec(n_classes=1)
  with pytest.raises(ValueError):
    SyntheticSpec(within_class_noise=0)
  with pytest.raises(ValueError):
    data.generate(_small(), 0, 1)
  with pytest.raises(ValueError):
    data.generate(_small(), 10, 0)


def test_sampler_always_member_when_no_pool():
  ds = data.generate(_small(), 20, 1)
  ds = data.SplitDataset(ds.train, ds.target_test, ds.holdout_train,
                         ds.holdout_test, gamma=0.0, n_classes=4)
  rng = np.random.default_rng(0)
  assert all(data.sample_candidate(ds, rng)[1] == 1 for _ in range(200))


@pytest.mark.parametrize("gamma,expected,tol", [(1.0, 0.5, 0.01),
                                                (10.0, 1 / 11, 0.005)])
def test_sampler_member_fraction(gamma, expected, tol):
  ds = data.generate(_small(), 20, gamma)
  rng = np.random.default_rng(1)
  bits = [data.sample_candidate(ds, rng)[1] for _ in range(100_000)]
  assert np.mean(bits) == pytest.approx(expected, abs=tol)


def test_sampler_returns_members_from_train():
  ds = data.generate(_small(), 20, 1)
  train_ids = set(ds.train.ids.tolist())
  rng = np.random.default_rng(2)
  for _ in range(50):
    z, bit = data.sample_candidate(ds, rng)
    in_train = int(data.record_ids(z.features[None, :])[0]) in train_ids
    assert in_train == bool(bit)


def test_binary_round_trip(tmp_path):
  ds = data.generate(_small(seed=5), 30, 1.5)
  path = tmp_path / "ds.bin"
  data.save(ds, path)
  back = data.load(path)
  assert back.gamma == ds.gamma and back.seed == ds.seed
  assert back.n_classes == ds.n_classes
  for name in data.SPLIT_NAMES:
    np.testing.assert_array_equal(back.splits()[name].features,
                                  ds.splits()[name].features)
    np.testing.assert_array_equal(back.splits()[name].labels,
                                  ds.splits()[name].labels)
  record = 20 * 4 + 4
  assert path.stat().st_size == data._HEADER.size + (30 + 45 + 30 + 45) * record


def test_load_rejects_foreign_file(tmp_path):
  path = tmp_path / "junk.bin"
  path.write_bytes(b"\0" * 200)
  with pytest.raises(ValueError):
    data.load(path)


def test_csv_export():
  ds = data.generate(_small(), 5, 1)
  buf = io.StringIO()
  data.export_csv(ds, buf)
  lines = buf.getvalue().splitlines()
  assert lines[0].startswith("split,record_id,label,x0,")
  assert len(lines) == 1 + 20
  assert lines[1].startswith("train,")
