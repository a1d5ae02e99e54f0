"""Feature-file format, synthetic generators, batching, splitting."""

import struct

import numpy as np
import pytest

from momentprobe.data import (FeatureDataset, SynthSpec, batch_iter,
                              class_covariance, read_feature_file,
                              split_train_val, synth_generate,
                              write_feature_file)
from momentprobe.errors import ConfigError, DataError, UsageError


def small_dataset(seed=0, n=12, tokens=3, dim=4, classes=3, has_cls=True):
    rng = np.random.default_rng(seed)
    rows = tokens + (1 if has_cls else 0)
    return FeatureDataset(
        tokens_per_sample=tokens, feature_dim=dim, has_cls=has_cls,
        class_count=classes,
        labels=rng.integers(0, classes, size=n).astype(np.uint32),
        features=rng.standard_normal((n, rows, dim)).astype(np.float32))


class TestFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "t.mpft"
        write_feature_file(path, ds)
        back = read_feature_file(path)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.features, ds.features)
        assert back.header == ds.header

    def test_rewrite_is_byte_identical(self, tmp_path):
        ds = small_dataset()
        a, b = tmp_path / "a.mpft", tmp_path / "b.mpft"
        write_feature_file(a, ds)
        write_feature_file(b, ds)
        assert a.read_bytes() == b.read_bytes()

    def test_truncated_file_names_byte_counts(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "t.mpft"
        write_feature_file(path, ds)
        whole = path.read_bytes()
        path.write_bytes(whole[:-7])
        with pytest.raises(DataError, match=r"expected \d+ bytes.*found \d+"):
            read_feature_file(path)

    def test_wrong_magic_rejected_before_payload(self, tmp_path):
        path = tmp_path / "t.mpft"
        ds = small_dataset()
        write_feature_file(path, ds)
        corrupted = b"XXXX" + path.read_bytes()[4:]
        path.write_bytes(corrupted)
        with pytest.raises(DataError, match="not a feature file"):
            read_feature_file(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "t.mpft"
        write_feature_file(path, small_dataset())
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="version"):
            read_feature_file(path)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(DataError, match="label"):
            FeatureDataset(tokens_per_sample=2, feature_dim=2, has_cls=False,
                           class_count=2,
                           labels=np.array([0, 5], dtype=np.uint32),
                           features=np.zeros((2, 2, 2), dtype=np.float32))

    def test_nan_features_rejected(self):
        bad = np.zeros((1, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(DataError, match="NaN"):
            FeatureDataset(tokens_per_sample=2, feature_dim=2, has_cls=False,
                           class_count=2,
                           labels=np.zeros(1, dtype=np.uint32), features=bad)

    def test_sample_splits_cls_row(self):
        ds = small_dataset()
        s = ds.sample(0)
        assert s.tokens.shape == (3, 4)
        assert s.cls.shape == (4,)
        assert np.array_equal(s.cls, ds.features[0, 0].astype(np.float64))


class TestSynth:
    def test_deterministic_under_seed(self):
        spec = SynthSpec(classes=2, tokens=4, dim=6, regime="cov_sep",
                         per_class=5, seed=3)
        a, b = synth_generate(spec), synth_generate(spec)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_cls_row_is_token_mean(self):
        ds = synth_generate(SynthSpec(classes=2, tokens=8, dim=6,
                                      regime="mean_sep", per_class=3, seed=1))
        s = ds.features[0]
        np.testing.assert_allclose(s[0], s[1:].mean(axis=0), atol=1e-6)

    def test_mean_sep_pairwise_distances(self):
        spec = SynthSpec(classes=3, tokens=4, dim=8, regime="mean_sep",
                         per_class=2, seed=0, delta=5.0)
        from momentprobe.data import class_means
        mu = class_means(spec)
        for a in range(3):
            for b in range(a + 1, 3):
                assert abs(np.linalg.norm(mu[a] - mu[b]) - 5.0) < 1e-12

    def test_zero_rho_gives_identical_distributions(self):
        spec = SynthSpec(classes=2, tokens=4, dim=6, regime="cov_sep",
                         per_class=3, seed=0, rho=0.0)
        for c in range(2):
            assert np.array_equal(class_covariance(spec, c), np.eye(6))

    def test_empirical_covariance_matches_target(self):
        # law of large numbers: ~1e5 tokens per class
        spec = SynthSpec(classes=2, tokens=32, dim=8, regime="cov_sep",
                         per_class=3125, seed=7, rho=0.8)
        ds = synth_generate(spec)
        for c in range(2):
            tokens = ds.features[ds.labels == c][:, 1:].reshape(-1, 8).astype(np.float64)
            emp = tokens.T @ tokens / len(tokens)
            err = np.linalg.norm(emp - class_covariance(spec, c))
            assert err < 0.05

    def test_invalid_specs_rejected(self):
        with pytest.raises(ConfigError):
            SynthSpec(classes=1, tokens=4, dim=6, regime="cov_sep", per_class=3, seed=0)
        with pytest.raises(ConfigError):
            SynthSpec(classes=2, tokens=4, dim=6, regime="cov_sep", per_class=3,
                      seed=0, rho=1.0)
        with pytest.raises(ConfigError):
            SynthSpec(classes=2, tokens=4, dim=6, regime="nope", per_class=3, seed=0)
        with pytest.raises(ConfigError):
            SynthSpec(classes=5, tokens=4, dim=8, regime="cov_sep", per_class=3, seed=0)


class TestBatching:
    def test_same_seed_epoch_identical(self):
        ds = small_dataset(n=10)
        a = [b.tolist() for b in batch_iter(ds, 3, seed=5, epoch=2)]
        b = [b.tolist() for b in batch_iter(ds, 3, seed=5, epoch=2)]
        assert a == b

    def test_union_covers_dataset_without_duplicates(self):
        ds = small_dataset(n=11)
        seen = np.concatenate(list(batch_iter(ds, 4, seed=1, epoch=0)))
        assert sorted(seen.tolist()) == list(range(11))
        assert len(list(batch_iter(ds, 4, seed=1, epoch=0))) == 3  # last kept

    def test_epochs_reshuffle(self):
        ds = small_dataset(n=10)
        perms = [np.concatenate(list(batch_iter(ds, 10, seed=9, epoch=e)))
                 for e in range(4)]
        for a in range(4):
            for b in range(a + 1, 4):
                assert not np.array_equal(perms[a], perms[b])

    def test_bad_batch_size_rejected(self):
        with pytest.raises(UsageError):
            next(batch_iter(small_dataset(), 0, seed=0, epoch=0))


class TestSplit:
    def balanced(self, per_class=10, classes=3):
        n = per_class * classes
        rng = np.random.default_rng(0)
        return FeatureDataset(
            tokens_per_sample=2, feature_dim=3, has_cls=False, class_count=classes,
            labels=np.repeat(np.arange(classes), per_class).astype(np.uint32),
            features=rng.standard_normal((n, 2, 3)).astype(np.float32))

    def test_exact_fraction_per_class(self):
        train, val = split_train_val(self.balanced(per_class=100), 0.8, seed=1)
        for c in range(3):
            assert (train.labels == c).sum() == 80
            assert (val.labels == c).sum() == 20

    def test_disjoint_and_complete(self):
        ds = self.balanced()
        train, val = split_train_val(ds, 0.7, seed=2)
        assert len(train) + len(val) == len(ds)
        # stratified draws are disjoint by construction; check content
        joined = np.concatenate([train.features.reshape(len(train), -1),
                                 val.features.reshape(len(val), -1)])
        original = ds.features.reshape(len(ds), -1)
        assert {tuple(r) for r in joined} == {tuple(r) for r in original}

    def test_proportions_within_one_sample(self):
        train, val = split_train_val(self.balanced(per_class=13), 0.6, seed=3)
        for c in range(3):
            assert abs((train.labels == c).sum() - 0.6 * 13) <= 1

    def test_tiny_class_rejected(self):
        ds = FeatureDataset(
            tokens_per_sample=2, feature_dim=3, has_cls=False, class_count=2,
            labels=np.array([0, 0, 1], dtype=np.uint32),
            features=np.zeros((3, 2, 3), dtype=np.float32))
        with pytest.raises(ConfigError, match="class 1"):
            split_train_val(ds, 0.5, seed=0)

    def test_determinism(self):
        ds = self.balanced()
        a = split_train_val(ds, 0.8, seed=7)
        b = split_train_val(ds, 0.8, seed=7)
        assert np.array_equal(a[0].labels, b[0].labels)
        assert np.array_equal(a[0].features, b[0].features)
