import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from splitmf.errors import ConfigError, EncodingOverflowError, ShapeError
from splitmf.sharing import (
    FixedPointBlock,
    ShareRng,
    ZeroRng,
    combine_shares,
    decode,
    derive_source_seed,
    encode,
    split_shares,
)


def grid(*values):
    return np.array(values, dtype=np.float64).reshape(1, -1)


class TestEncodeDecode:
    def test_known_words(self):
        assert encode(grid(1.5), 24).words[0, 0] == 25165824
        assert encode(grid(0.0), 16).words[0, 0] == 0
        assert encode(grid(-1.0), 24).words[0, 0] == 2**64 - 16777216

    def test_dyadic_roundtrip_exact(self):
        out = decode(encode(grid(3.25), 24))
        assert out[0, 0] == 3.25

    def test_zero_roundtrip(self):
        assert decode(encode(grid(0.0), 24))[0, 0] == 0.0

    def test_roundtrip_error_bound(self):
        # 10^5 reals in [-100, 100]: quantization stays under half an ulp of 2^-24.
        rng = np.random.default_rng(7)
        x = rng.uniform(-100.0, 100.0, size=(100, 1000))
        back = decode(encode(x, 24))
        assert np.abs(back - x).max() <= 2.0**-25

    def test_frac_bits_range_enforced(self):
        with pytest.raises(ConfigError):
            encode(grid(1.0), 7)
        with pytest.raises(ConfigError):
            encode(grid(1.0), 41)

    def test_encode_overflow_names_cell(self):
        x = np.zeros((2, 3))
        x[1, 2] = 2.0**40
        with pytest.raises(EncodingOverflowError, match=r"\(1, 2\)"):
            encode(x, 24)

    def test_decode_headroom_check(self):
        words = np.array([[np.uint64(2**62)]], dtype=np.uint64)
        block = FixedPointBlock(1, 1, words, 24)
        with pytest.raises(EncodingOverflowError):
            decode(block)
        # Unchecked decode still produces the wrapped signed value.
        assert decode(block, check_headroom=False)[0, 0] == 2.0**62 / 2.0**24

    @given(
        st.lists(st.floats(-1000, 1000), min_size=1, max_size=20),
        st.sampled_from([8, 16, 24, 32, 40]),
    )
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_within_half_quantum(self, values, f):
        x = grid(*values)
        back = decode(encode(x, f))
        assert np.abs(back - x).max() <= 2.0 ** (-f - 1) + 1e-15


class TestSplitCombine:
    @pytest.mark.parametrize("n_shares", [2, 3, 5])
    def test_split_combine_identity(self, n_shares, rng):
        for seed in range(34):
            x = rng.uniform(-50, 50, size=(3, 4))
            block = encode(x, 24)
            shares = split_shares(block, n_shares, ShareRng(seed))
            assert combine_shares(shares) == block

    def test_zero_block_shares_are_nonzero(self):
        block = encode(np.zeros((10, 10)), 24)
        shares = split_shares(block, 3, ShareRng(1))
        for s in shares[:-1]:
            assert np.count_nonzero(s.words) > 0

    def test_rejects_single_share(self):
        with pytest.raises(ConfigError):
            split_shares(encode(grid(1.0), 24), 1, ShareRng(0))

    def test_combine_additive_inverse(self):
        a = encode(grid(1.25), 24)
        b = encode(grid(-1.25), 24)
        assert decode(combine_shares([a, b]))[0, 0] == 0.0

    def test_combine_shape_and_scale_mismatch(self):
        a = encode(np.zeros((2, 2)), 24)
        b = encode(np.zeros((2, 3)), 24)
        c = encode(np.zeros((2, 2)), 16)
        with pytest.raises(ShapeError):
            combine_shares([a, b])
        with pytest.raises(ShapeError):
            combine_shares([a, c])

    def test_int_seed_convenience(self):
        block = encode(grid(2.0, -3.0), 24)
        assert combine_shares(split_shares(block, 3, 42)) == block

    def test_zero_rng_degenerate_split(self):
        block = encode(grid(1.0, -2.5, 0.125), 24)
        shares = split_shares(block, 4, ZeroRng())
        for s in shares[:-1]:
            assert np.count_nonzero(s.words) == 0
        assert shares[-1] == block

    @given(
        st.lists(st.floats(-100, 100), min_size=1, max_size=12),
        st.sampled_from([16, 24, 32]),
        st.integers(2, 5),
        st.integers(0, 2**32),
    )
    @settings(max_examples=150, deadline=None)
    def test_reconstruction_adds_no_error(self, values, f, n_shares, seed):
        # Splitting and recombining must reproduce the encoded words exactly;
        # the only error anywhere is the initial quantization.
        block = encode(grid(*values), f)
        out = combine_shares(split_shares(block, n_shares, ShareRng(seed)))
        np.testing.assert_array_equal(out.words, block.words)


class TestShareRng:
    def test_seeded_streams_reproduce(self):
        a = ShareRng(123).words((4, 4))
        b = ShareRng(123).words((4, 4))
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = ShareRng(1).words((4, 4))
        b = ShareRng(2).words((4, 4))
        assert not np.array_equal(a, b)

    def test_derive_source_seed_distinct(self):
        seeds = {derive_source_seed(7, t) for t in range(10)}
        assert len(seeds) == 10

    def test_unseeded_streams_differ(self):
        assert not np.array_equal(ShareRng().words((2, 2)), ShareRng().words((2, 2)))


class TestHiding:
    def uniform_pvalue(self, words):
        top = (words >> np.uint64(56)).astype(np.int64).ravel()
        counts = np.bincount(top, minlength=256)
        return stats.chisquare(counts).pvalue

    def test_share_words_uniform_top_byte(self):
        # 10^5 share words drawn for a fixed plaintext: top byte is uniform.
        block = encode(np.full((100, 1000), 3.14159), 24)
        share = split_shares(block, 2, ShareRng(99))[0]
        assert self.uniform_pvalue(share.words) > 0.001

    def test_shares_of_different_plaintexts_indistinguishable(self):
        a = encode(np.full((100, 1000), -271.8), 24)
        b = encode(np.linspace(-5, 5, 100000).reshape(100, 1000), 24)
        p_a = self.uniform_pvalue(split_shares(a, 3, ShareRng(5))[0].words)
        p_b = self.uniform_pvalue(split_shares(b, 3, ShareRng(6))[0].words)
        assert p_a > 0.001 and p_b > 0.001

    def test_no_share_word_collides_with_plaintext(self):
        # 10^4 words: a uniform 64-bit share matching its plaintext word is
        # a ~5e-16 event; assert zero collisions.
        rng = np.random.default_rng(3)
        block = encode(rng.uniform(-10, 10, size=(100, 100)), 24)
        shares = split_shares(block, 2, ShareRng(11))
        for s in shares:
            assert not np.any(s.words == block.words)
