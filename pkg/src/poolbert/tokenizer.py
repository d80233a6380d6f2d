"""Subword vocabulary training and fixed-length encoding.

Vocabulary training is frequency-based pair merging over whitespace-split,
lowercased, punctuation-isolated words; non-initial pieces carry the "##"
prefix.  Encoding is greedy longest-match-first segmentation per word, the
same scheme the classic WordPiece encoder uses, wrapped as
``[CLS] ... [SEP]`` and padded to a fixed length.

Normalization is deliberately minimal (NFC, lowercase, punctuation isolated,
whitespace collapsed): inputs are raw clinical text with typos, and nothing
is corrected.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import DataError, FormatError, ParameterError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

CONTINUATION = "##"
MAX_SEQUENCE_LENGTH = 128
MAX_WORD_CHARS = 100  # longer words become a single [UNK]


def normalize(text: str) -> list[str]:
    """Lowercase + NFC, punctuation as standalone tokens, split on whitespace."""
    text = unicodedata.normalize("NFC", text).lower()
    chars = []
    for ch in text:
        if ch.isspace():
            chars.append(" ")
        elif unicodedata.category(ch).startswith("P"):
            chars.append(f" {ch} ")
        else:
            chars.append(ch)
    return "".join(chars).split()


def normalized_text(text: str) -> str:
    return " ".join(normalize(text))


class Vocab:
    """Ordered token list with dense ids; the five specials come first."""

    def __init__(self, tokens: list[str]):
        if len(tokens) < len(SPECIAL_TOKENS) or tuple(tokens[:5]) != SPECIAL_TOKENS:
            raise FormatError(
                f"vocabulary must start with the special tokens {SPECIAL_TOKENS}"
            )
        self.tokens = list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise FormatError("vocabulary contains duplicate tokens")

    pad_id = 0
    unk_id = 1
    cls_id = 2
    sep_id = 3
    mask_id = 4

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (0, 1, 2, 3, 4)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


@dataclass
class Encoding:
    """Fixed-length id sequence: [CLS] ... [SEP] then [PAD] up to max_len."""

    ids: list[int]
    attention_mask: list[int]
    segment_ids: list[int]
    original_length: int


def _word_symbols(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + ch for ch in word[1:]]


def train_vocab(
    corpus: Iterable[str], vocab_size: int, min_frequency: int = 2
) -> Vocab:
    """Build a vocabulary of at most ``vocab_size`` tokens from text lines.

    Starts from the observed per-character alphabet (head and continuation
    forms) and repeatedly merges the most frequent adjacent symbol pair; ties
    go to the lexicographically smaller pair, so the result is deterministic
    given the corpus.  Stops when ``vocab_size`` is reached, no pair reaches
    ``min_frequency``, or every word is a single token.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        for word in normalize(line):
            if len(word) <= MAX_WORD_CHARS:
                word_counts[word] += 1
    if not word_counts:
        raise DataError("tokenizer training corpus is empty")

    alphabet = set()
    for word in word_counts:
        alphabet.update(_word_symbols(word))
    tokens = list(SPECIAL_TOKENS) + sorted(alphabet)
    if vocab_size < len(tokens):
        raise DataError(
            f"vocab_size {vocab_size} cannot hold {len(SPECIAL_TOKENS)} specials "
            f"plus the {len(alphabet)}-symbol alphabet"
        )
    known = set(tokens)

    symbolized = {word: _word_symbols(word) for word in word_counts}

    while len(tokens) < vocab_size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for word, symbols in symbolized.items():
            count = word_counts[word]
            for left, right in zip(symbols, symbols[1:]):
                pair_counts[(left, right)] += count
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count < min_frequency:
            break
        left, right = min(p for p, c in pair_counts.items() if c == best_count)
        merged = left + right[len(CONTINUATION):]

        for word, symbols in symbolized.items():
            i = 0
            out = []
            while i < len(symbols):
                if (
                    i + 1 < len(symbols)
                    and symbols[i] == left
                    and symbols[i + 1] == right
                ):
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbolized[word] = out

        if merged not in known:
            tokens.append(merged)
            known.add(merged)

    return Vocab(tokens)


def _greedy_pieces(word: str, vocab: Vocab) -> list[str] | None:
    """Longest-match-first segmentation; None when any part is unmatched."""
    if len(word) > MAX_WORD_CHARS:
        return None
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while end > start:
            candidate = word[start:end]
            if start > 0:
                candidate = CONTINUATION + candidate
            if candidate in vocab.token_to_id:
                piece = candidate
                break
            end -= 1
        if piece is None:
            return None
        pieces.append(piece)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[str]:
    """Wordpiece tokens of normalized ``text``, unmatched words as [UNK]."""
    out = []
    for word in normalize(text):
        pieces = _greedy_pieces(word, vocab)
        out.extend(pieces if pieces is not None else [UNK])
    return out


def token_length(text: str, vocab: Vocab) -> int:
    """Non-special token count before any truncation (length-analysis input)."""
    return len(tokenize(text, vocab))


def encode(text: str, vocab: Vocab, max_len: int = MAX_SEQUENCE_LENGTH) -> Encoding:
    """Encode arbitrary text to exactly ``max_len`` ids.

    Truncation drops tail tokens but always keeps the final [SEP]; the
    attention mask is 1 exactly on non-[PAD] positions; segment ids are 0.
    """
    if max_len < 3:
        raise ParameterError("max_len must be at least 3 ([CLS], token, [SEP])")
    ids = [vocab.cls_id]
    ids.extend(vocab.id_of(tok) for tok in tokenize(text, vocab))
    ids.append(vocab.sep_id)
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [vocab.sep_id]
    original_length = len(ids)
    ids = ids + [vocab.pad_id] * (max_len - original_length)
    mask = [1] * original_length + [0] * (max_len - original_length)
    return Encoding(
        ids=ids,
        attention_mask=mask,
        segment_ids=[0] * max_len,
        original_length=original_length,
    )


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """Inverse of encode up to normalization: strips specials, joins pieces."""
    words: list[str] = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise DataError(f"token id {i} out of range for vocabulary")
        if i in vocab.special_ids:
            continue
        tok = vocab.tokens[i]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


def iter_lines(path) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            yield line.rstrip("\n")
