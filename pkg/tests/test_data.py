import itertools

import numpy as np
import pytest

from nodeformer.autodiff import ContractError
from nodeformer.data import (
    LABEL_EVEN,
    LABEL_ODD,
    ParityDataset,
    bits_to_tokens,
    gen_dataset,
    parity_oracle,
    read_dataset,
    write_dataset,
)
from nodeformer.model import TOKEN_SOS


class TestParityOracle:
    def test_two_ones_is_even(self):
        assert parity_oracle((1, 0, 1)) == LABEL_EVEN

    def test_single_one_is_odd(self):
        assert parity_oracle((1,)) == LABEL_ODD

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            parity_oracle(())

    def test_non_bit_rejected(self):
        with pytest.raises(ContractError):
            parity_oracle((0, 2))

    def test_equals_xor_fold_exhaustively(self):
        for length in range(1, 11):
            for bits in itertools.product((0, 1), repeat=length):
                xor = 0
                for b in bits:
                    xor ^= b
                assert parity_oracle(bits) == xor

    def test_flipping_any_bit_flips_label(self, rng):
        for _ in range(50):
            bits = list(rng.integers(0, 2, size=rng.integers(1, 12)))
            base = parity_oracle(bits)
            for i in range(len(bits)):
                flipped = list(bits)
                flipped[i] ^= 1
                assert parity_oracle(flipped) != base


class TestGenDataset:
    def test_maxlen_six_has_126_items(self):
        assert len(gen_dataset(6)) == 126

    def test_maxlen_one_items(self):
        ds = gen_dataset(1)
        assert ds.items == [
            ((TOKEN_SOS, 0), LABEL_EVEN),
            ((TOKEN_SOS, 1), LABEL_ODD),
        ]

    def test_maxlen_ten_count_and_balance(self):
        ds = gen_dataset(10)
        assert len(ds) == 2046
        labels = [label for _, label in ds.items]
        assert labels.count(LABEL_EVEN) == 1023
        assert labels.count(LABEL_ODD) == 1023

    @pytest.mark.parametrize("max_len", range(1, 9))
    def test_every_length_balanced_and_complete(self, max_len):
        ds = gen_dataset(max_len)
        buckets = ds.buckets()
        assert sorted(buckets) == list(range(1, max_len + 1))
        for length, (toks, labels) in buckets.items():
            assert len(toks) == 2 ** length
            assert len(set(toks)) == len(toks)  # deduplicated
            assert labels.count(LABEL_EVEN) == labels.count(LABEL_ODD)
            assert all(t[0] == TOKEN_SOS and len(t) == length + 1 for t in toks)

    def test_labels_match_oracle(self):
        for tokens, label in gen_dataset(7).items:
            assert label == parity_oracle(tokens[1:])

    @pytest.mark.parametrize("bad", [0, 21, -3])
    def test_out_of_range_rejected(self, bad):
        with pytest.raises(ValueError):
            gen_dataset(bad)


class TestDatasetFile:
    def test_maxlen_one_file_contents(self, tmp_path):
        path = tmp_path / "ds.txt"
        write_dataset(gen_dataset(1), path)
        assert path.read_text() == "0 even\n1 odd\n"

    def test_maxlen_six_has_126_lines(self, tmp_path):
        path = tmp_path / "ds.txt"
        write_dataset(gen_dataset(6), path)
        assert len(path.read_text().splitlines()) == 126

    def test_regeneration_is_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        write_dataset(gen_dataset(5), p1)
        write_dataset(gen_dataset(5), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_length_major_lexicographic_order(self, tmp_path):
        path = tmp_path / "ds.txt"
        write_dataset(gen_dataset(3), path)
        bit_cols = [line.split()[0] for line in path.read_text().splitlines()]
        assert bit_cols == sorted(bit_cols, key=lambda b: (len(b), b))

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "ds.txt"
        ds = gen_dataset(4)
        write_dataset(ds, path)
        loaded = read_dataset(path)
        assert loaded.items == ds.items
        assert loaded.max_len == 4

    def test_malformed_line_reports_location(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("01 even\n10 maybe\n")
        with pytest.raises(ValueError, match="bad.txt:2"):
            read_dataset(path)


class TestTokens:
    def test_bits_to_tokens_prepends_sos(self):
        assert bits_to_tokens((1, 0, 1)) == (TOKEN_SOS, 1, 0, 1)
