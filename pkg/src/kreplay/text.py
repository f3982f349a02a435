"""Word-level vocabulary, caption encoding and keyword tokenization."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT = re.compile(r"[^\w\s]|_")


def normalize(text: str) -> list[str]:
    """Lowercase, turn punctuation into spaces, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIAL_TOKENS:
            raise ValueError("specials must occupy ids 0-3")
        if len(self.id_to_token) < 5:
            raise ValueError("vocabulary needs at least one content token")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def save(self, path: str | Path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        tokens = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            try:
                tok, idx = line.split("\t")
                idx = int(idx)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed vocabulary line") from exc
            if idx != len(tokens):
                raise ValueError(f"{path}:{lineno}: ids must be consecutive from 0")
            tokens.append(tok)
        return cls(tuple(tokens))


@dataclass(frozen=True)
class Keyword:
    surface: str
    subword_ids: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.subword_ids)


def build_vocab(corpus_texts: list[str], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary ordered by descending count, then lexicographically."""
    if not corpus_texts:
        raise ValueError("empty corpus")
    counts = Counter(tok for text in corpus_texts for tok in normalize(text))
    kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    kept = [tok for tok in kept if tok not in SPECIAL_TOKENS]
    return Vocabulary(SPECIAL_TOKENS + tuple(kept))


def encode(text: str, vocab: Vocabulary) -> list[int]:
    ids = [vocab.token_to_id.get(tok, UNK) for tok in normalize(text)]
    return [BOS, *ids, EOS]


def decode_tokens(ids, vocab: Vocabulary) -> str:
    """Join the tokens between BOS and the first EOS, dropping specials."""
    words = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise ValueError(f"invalid token id {i}")
        if i == EOS:
            break
        if i >= 4:
            words.append(vocab.id_to_token[i])
    return " ".join(words)


def tokenize_keyword(surface: str, vocab: Vocabulary) -> Keyword:
    words = normalize(surface)
    if not words:
        raise ValueError("empty keyword")
    missing = [w for w in words if w not in vocab.token_to_id or vocab.token_to_id[w] < 4]
    if missing:
        raise ValueError(f"keyword not representable: {surface!r} (missing {missing})")
    return Keyword(" ".join(words), tuple(vocab.token_to_id[w] for w in words))
