"""Vocabulary training, greedy encoding and round-trip behaviour."""

import numpy as np
import pytest

from poolbert import tokenizer as tok
from poolbert.errors import DataError, ParameterError


def make_vocab(extra_tokens):
    return tok.Vocab(list(tok.SPECIAL_TOKENS) + list(extra_tokens))


class TestTrainVocab:
    def test_repeated_word_becomes_single_token(self):
        vocab = tok.train_vocab(["abc"] * 100, vocab_size=50, min_frequency=2)
        assert "abc" in vocab

    def test_alphabet_only_vocab_encodes_characters(self):
        corpus = ["abc abd"] * 10
        # specials + alphabet {a, ##b, ##c, ##d} and no room for merges
        vocab = tok.train_vocab(corpus, vocab_size=5 + 4, min_frequency=1)
        assert len(vocab) == 9
        assert tok.tokenize("abc", vocab) == ["a", "##b", "##c"]

    def test_headache_merge_order(self):
        corpus = ["headache"] * 90 + ["head"] * 50 + ["ache"] * 10
        vocab = tok.train_vocab(corpus, vocab_size=200, min_frequency=1)
        assert tok.tokenize("headache", vocab) == ["headache"]
        without = tok.Vocab([t for t in vocab.tokens if t != "headache"])
        assert tok.tokenize("headache", without) == ["head", "##ache"]

    def test_deterministic(self):
        corpus = ["fever cough headache", "cough fever", "nausea fever"] * 30
        a = tok.train_vocab(corpus, vocab_size=60, min_frequency=1)
        b = tok.train_vocab(corpus, vocab_size=60, min_frequency=1)
        assert a.tokens == b.tokens

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            tok.train_vocab([], vocab_size=100)
        with pytest.raises(DataError):
            tok.train_vocab(["   "], vocab_size=100)

    def test_vocab_size_too_small_for_alphabet(self):
        with pytest.raises(DataError):
            tok.train_vocab(["abcdefgh"] * 5, vocab_size=6)

    def test_min_frequency_blocks_rare_merges(self):
        vocab = tok.train_vocab(["xy"] * 3, vocab_size=100, min_frequency=5)
        assert "xy" not in vocab
        assert tok.tokenize("xy", vocab) == ["x", "##y"]


class TestEncode:
    def test_empty_input(self):
        vocab = make_vocab(["a"])
        enc = tok.encode("", vocab, max_len=6)
        assert enc.ids == [vocab.cls_id, vocab.sep_id, 0, 0, 0, 0]
        assert enc.attention_mask == [1, 1, 0, 0, 0, 0]
        assert enc.original_length == 2

    def test_unknown_word_is_single_unk(self):
        vocab = make_vocab(["a"])
        enc = tok.encode("zzz", vocab, max_len=6)
        assert enc.ids[:3] == [vocab.cls_id, vocab.unk_id, vocab.sep_id]

    def test_truncation_keeps_final_sep(self):
        vocab = make_vocab(["w"])
        text = " ".join(["w"] * 300)
        enc = tok.encode(text, vocab, max_len=128)
        assert len(enc.ids) == 128
        assert enc.original_length == 128
        assert enc.ids[-1] == vocab.sep_id
        assert enc.attention_mask == [1] * 128

    def test_max_len_floor(self):
        vocab = make_vocab(["a"])
        with pytest.raises(ParameterError):
            tok.encode("a", vocab, max_len=2)

    def test_mask_marks_non_pad_exactly(self):
        vocab = make_vocab(["a", "b", "##b"])
        enc = tok.encode("a bb", vocab, max_len=8)
        # non-pad prefix, pad suffix
        assert enc.ids[: enc.original_length].count(vocab.pad_id) == 0
        assert all(i == vocab.pad_id for i in enc.ids[enc.original_length :])
        assert enc.attention_mask == [1] * enc.original_length + [0] * (
            8 - enc.original_length
        )

    def test_invariants_on_arbitrary_strings(self):
        corpus = ["common words for a tiny vocabulary"] * 5
        vocab = tok.train_vocab(corpus, vocab_size=60, min_frequency=1)
        rng = np.random.default_rng(0)
        glyphs = list("abcdef ,.!?бы 09é")
        for _ in range(200):
            text = "".join(rng.choice(glyphs, size=rng.integers(0, 40)))
            enc = tok.encode(text, vocab, max_len=16)
            assert len(enc.ids) == 16
            assert enc.ids[0] == vocab.cls_id
            non_pad = [i for i in enc.ids if i != vocab.pad_id]
            assert non_pad[-1] == vocab.sep_id
            assert enc.attention_mask == [1] * enc.original_length + [0] * (
                16 - enc.original_length
            )
            assert enc.segment_ids == [0] * 16

    def test_greedy_longest_match_prefix(self):
        vocab = make_vocab(["head", "heada", "h", "##e", "##a", "##d", "##che",
                            "##ache", "##c", "##h"])
        # longest vocab prefix of "headache" is "heada"
        pieces = tok.tokenize("headache", vocab)
        assert pieces[0] == "heada"

    def test_coverage_no_unk_with_full_alphabet(self):
        corpus = ["abc cab bac"] * 4
        vocab = tok.train_vocab(corpus, vocab_size=40, min_frequency=1)
        enc_tokens = tok.tokenize("cba abc bca", vocab)
        assert tok.UNK not in enc_tokens


class TestDecode:
    def test_joins_continuations(self):
        vocab = make_vocab(["head", "##ache"])
        ids = [vocab.cls_id, vocab.id_of("head"), vocab.id_of("##ache"),
               vocab.sep_id]
        assert tok.decode(ids, vocab) == "headache"

    def test_all_specials_decode_empty(self):
        vocab = make_vocab(["a"])
        assert tok.decode([2, 3, 0, 0, 4, 1], vocab) == ""

    def test_out_of_range_id(self):
        vocab = make_vocab(["a"])
        with pytest.raises(DataError):
            tok.decode([len(vocab)], vocab)

    def test_round_trip_on_in_vocab_corpus(self):
        lines = [
            "fever and cough for three days",
            "persistent headache , nausea",
            "lower back pain after lifting",
            "sore throat with mild fever",
        ] * 25
        vocab = tok.train_vocab(lines, vocab_size=300, min_frequency=1)
        for line in lines:
            enc = tok.encode(line, vocab, max_len=32)
            assert tok.decode(enc.ids, vocab) == tok.normalized_text(line)


class TestVocabIO:
    def test_save_load_round_trip(self, tmp_path):
        vocab = tok.train_vocab(["alpha beta gamma"] * 10, vocab_size=60,
                                min_frequency=1)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = tok.Vocab.load(path)
        assert loaded.tokens == vocab.tokens

    def test_specials_enforced_on_load(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("a\nb\nc\n", encoding="utf-8")
        with pytest.raises(Exception):
            tok.Vocab.load(path)
