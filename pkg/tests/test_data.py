import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitmf.data import (
    SplitSpec,
    export_csv,
    global_mean_rmse,
    load_movielens,
    partition_users,
    rmse,
    save_movielens,
    split_train_test,
    synth_ratings,
)
from splitmf.errors import ConfigError, DegenerateInputError, ParseError
from splitmf.mf import RatingMatrix, TrainConfig, loss, train_centralized


class TestLoadMovielens:
    def test_documented_first_record(self, tmp_path):
        path = tmp_path / "u.data"
        path.write_text("196\t242\t3\t881250949\n")
        ds = load_movielens(path)
        assert ds.ratings.n_users == 1 and ds.ratings.n_items == 1
        assert ds.user_ids.tolist() == [196] and ds.item_ids.tolist() == [242]
        assert list(ds.ratings.entries) == [(0, 0, 3.0)]

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "u.data"
        path.write_text("")
        with pytest.raises(DegenerateInputError):
            load_movielens(path)

    def test_ids_compacted(self, tmp_path):
        path = tmp_path / "u.data"
        path.write_text("10\t7\t4\t0\n10\t900\t1\t0\n3\t7\t5\t0\n")
        ds = load_movielens(path)
        assert ds.ratings.n_users == 2 and ds.ratings.n_items == 2
        assert ds.user_ids.tolist() == [3, 10]
        assert ds.item_ids.tolist() == [7, 900]
        r, mask = ds.ratings.dense()
        assert r[0, 0] == 5.0 and r[1, 0] == 4.0 and r[1, 1] == 1.0

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "u.data"
        path.write_text("1\t1\t5\t0\nnot-a-row\n")
        with pytest.raises(ParseError, match="line 2"):
            load_movielens(path)

    def test_duplicates_keep_last(self, tmp_path):
        path = tmp_path / "u.data"
        path.write_text("1\t1\t2\t0\n1\t1\t5\t0\n")
        ds = load_movielens(path)
        assert ds.duplicates == 1
        assert list(ds.ratings.entries) == [(0, 0, 5.0)]

    def test_save_load_roundtrip_multiset(self, tmp_path):
        R, _, _ = synth_ratings(8, 6, 2, noise_sigma=0.1, fill_fraction=0.5, seed=4)
        path = tmp_path / "u.data"
        save_movielens(R, path)
        back = load_movielens(path).ratings
        assert sorted(R.entries) == sorted(back.entries)


class TestSplit:
    def test_fraction_validated(self):
        with pytest.raises(ConfigError):
            SplitSpec(train_fraction=0.0)
        with pytest.raises(ConfigError):
            SplitSpec(train_fraction=1.0)

    def test_split_sizes_within_one_percent(self):
        R, _, _ = synth_ratings(40, 50, 2, fill_fraction=0.5, seed=1)
        R = RatingMatrix(40, 50, R.users[:1000], R.items[:1000], R.values[:1000])
        train, test = split_train_test(R, SplitSpec(0.7, seed=3))
        assert 690 <= train.nnz <= 710

    def test_deterministic_under_seed(self):
        R, _, _ = synth_ratings(10, 10, 2, fill_fraction=0.8, seed=2)
        a_train, a_test = split_train_test(R, SplitSpec(0.7, seed=5))
        b_train, b_test = split_train_test(R, SplitSpec(0.7, seed=5))
        assert sorted(a_train.entries) == sorted(b_train.entries)
        assert sorted(a_test.entries) == sorted(b_test.entries)

    def test_partition_of_entries(self):
        R, _, _ = synth_ratings(10, 10, 2, fill_fraction=0.8, seed=2)
        train, test = split_train_test(R, SplitSpec(0.6, seed=9))
        union = sorted(list(train.entries) + list(test.entries))
        assert union == sorted(R.entries)

    def test_empty_rejected(self):
        with pytest.raises(DegenerateInputError):
            split_train_test(RatingMatrix.from_entries(2, 2, []), SplitSpec())


class TestPartitionUsers:
    def test_single_source_is_whole_matrix(self):
        R, _, _ = synth_ratings(6, 5, 2, fill_fraction=0.7, seed=0)
        parts = partition_users(R, 1, seed=1)
        assert len(parts) == 1
        assert sorted(parts[0].ratings.entries) == sorted(R.entries)
        assert parts[0].user_ids.tolist() == list(range(6))

    def test_one_user_per_source(self):
        R, _, _ = synth_ratings(5, 4, 2, fill_fraction=1.0, seed=0)
        parts = partition_users(R, 5, seed=3)
        assert all(p.ratings.n_users == 1 for p in parts)

    def test_too_many_sources_rejected(self):
        R, _, _ = synth_ratings(3, 4, 2, fill_fraction=1.0, seed=0)
        with pytest.raises(ConfigError):
            partition_users(R, 4, seed=0)

    @given(st.integers(1, 7), st.integers(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_disjoint_cover(self, n_sources, seed):
        R, _, _ = synth_ratings(7, 5, 2, fill_fraction=0.6, seed=1)
        parts = partition_users(R, n_sources, seed=seed)
        all_ids = np.concatenate([p.user_ids for p in parts])
        assert sorted(all_ids.tolist()) == list(range(7))
        total_entries = sum(p.ratings.nnz for p in parts)
        assert total_entries == R.nnz
        for p in parts:
            assert p.ratings.n_items == R.n_items

    def test_local_rows_match_global_users(self):
        R, _, _ = synth_ratings(9, 6, 2, fill_fraction=0.5, seed=6)
        r_dense, _ = R.dense()
        for p in partition_users(R, 3, seed=8):
            sub_dense, sub_mask = p.ratings.dense()
            np.testing.assert_array_equal(
                sub_dense, r_dense[p.user_ids] * (sub_mask > 0)
            )


class TestSynthRatings:
    def test_zero_fill_rejected(self):
        with pytest.raises(ConfigError):
            synth_ratings(5, 5, 2, fill_fraction=0.0)

    def test_seed_reproducible(self):
        a = synth_ratings(6, 6, 2, noise_sigma=0.1, fill_fraction=0.5, seed=11)
        b = synth_ratings(6, 6, 2, noise_sigma=0.1, fill_fraction=0.5, seed=11)
        assert sorted(a[0].entries) == sorted(b[0].entries)
        np.testing.assert_array_equal(a[1], b[1])

    def test_noiseless_realizable_fit(self):
        R, _, _ = synth_ratings(10, 8, 3, noise_sigma=0.0, fill_fraction=1.0, seed=5)
        cfg = TrainConfig(dim=3, learning_rate=5e-3, reg_user=0.0, reg_item=0.0,
                          stop_threshold=1e-10, max_epochs=20000, init_seed=1)
        res = train_centralized(R, cfg)
        assert res.loss_history[-1] < 1e-6


class TestMetrics:
    def test_perfect_predictions_zero_rmse(self, rng):
        U = rng.normal(size=(4, 3))
        V = rng.normal(size=(3, 5))
        entries = [(i, j, float(U[i] @ V[:, j])) for i in range(4) for j in range(5)]
        R = RatingMatrix.from_entries(4, 5, entries)
        assert rmse(U, V, R) == pytest.approx(0.0, abs=1e-12)

    def test_constant_predictor_single_rating(self):
        R = RatingMatrix.from_entries(1, 1, [(0, 0, 4.0)])
        U = np.array([[1.5]])
        V = np.array([[1.0]])  # predicts 1.5 everywhere
        assert rmse(U, V, R) == pytest.approx(2.5)

    def test_rmse_matches_loss_identity(self, rng):
        from conftest import random_instance

        R, U, V = random_instance(rng, n_users=5, m_items=6, dim=2)
        want = np.sqrt(loss(U, V, R, 0.0, 0.0))
        assert rmse(U, V, R) == pytest.approx(want, rel=1e-12)

    def test_empty_test_set_rejected(self):
        with pytest.raises(DegenerateInputError):
            rmse(np.ones((1, 1)), np.ones((1, 1)), RatingMatrix.from_entries(1, 1, []))

    def test_global_mean_baseline(self):
        train = RatingMatrix.from_entries(2, 2, [(0, 0, 2.0), (1, 1, 4.0)])
        test = RatingMatrix.from_entries(2, 2, [(0, 1, 5.0)])
        assert global_mean_rmse(train, test) == pytest.approx(2.0)


def test_export_csv(tmp_path):
    R = RatingMatrix.from_entries(2, 3, [(0, 2, 3.5), (1, 0, 1.0)])
    path = tmp_path / "ratings.csv"
    export_csv(R, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "user,item,rating"
    assert "0,2,3.5" in lines and "1,0,1" in lines
