"""The 32-token synthetic vocabulary shared by every model.

Content symbols are the base-15 digits ``0-9a-e``; the digit at index n doubles
as the answer token for "length n". ``x``, ``y`` and ``z`` are rare symbols that
only occur inside biasing entities, playing the role of out-of-vocabulary
names a recognizer has never heard.
"""

from __future__ import annotations

from typing import Iterable, Sequence

SPECIALS = ["<pad>", "<bos>", "<eos>", "<blank>"]
WORDS = ["recognize", "translate", "speech", "lang_a", "lang_b",
         "reverse", "length", "lookup", "last", "mention"]
CONTENT = [str(d) for d in range(10)] + list("abcde")
RARE = ["x", "y", "z"]

TOKENS = SPECIALS + WORDS + CONTENT + RARE
VOCAB_SIZE = len(TOKENS)
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}

PAD, BOS, EOS, BLANK = (TOKEN_ID[t] for t in SPECIALS)
CONTENT_IDS = tuple(TOKEN_ID[t] for t in CONTENT)
RARE_IDS = tuple(TOKEN_ID[t] for t in RARE)
SPOKEN_IDS = CONTENT_IDS + RARE_IDS

assert VOCAB_SIZE == 32


class VocabularyError(KeyError):
    pass


def tokenize(text: str) -> list[int]:
    ids = []
    for word in text.split():
        if word not in TOKEN_ID:
            raise VocabularyError(f"unknown token {word!r}")
        ids.append(TOKEN_ID[word])
    return ids


def detokenize(ids: Iterable[int]) -> str:
    return " ".join(TOKENS[i] for i in ids)


def strip_special(ids: Sequence[int]) -> list[int]:
    """Cut at the first EOS and drop pad/bos/blank."""
    out = []
    for i in ids:
        if i == EOS:
            break
        if i not in (PAD, BOS, BLANK):
            out.append(int(i))
    return out


def length_token(n: int) -> int:
    if not 0 <= n < len(CONTENT_IDS):
        raise ValueError(f"length {n} has no answer token")
    return CONTENT_IDS[n]


def check_ids(ids: Iterable[int], allowed: Sequence[int] = tuple(range(VOCAB_SIZE))) -> None:
    allowed = set(allowed)
    for i in ids:
        if i not in allowed:
            raise VocabularyError(f"token id {i} not allowed here")
