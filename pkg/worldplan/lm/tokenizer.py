"""Word-level vocabulary for instruction text."""

import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from worldplan.errors import ConfigError
from worldplan.microworld.instructions import grammar_words

VOCAB_VERSION = 1
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(len(SPECIAL_TOKENS))


class Vocabulary:
    """Token <-> id table; ids 0-3 are reserved for pad, bos, eos and unk."""

    def __init__(self, words: Optional[Iterable[str]] = None):
        """Initialize the table from `words` (the instruction grammar by default)."""
        words = grammar_words() if words is None else sorted(set(words))
        self.tokens: List[str] = list(SPECIAL_TOKENS) + [
            w for w in words if w not in SPECIAL_TOKENS
        ]
        self.ids: Dict[str, int] = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self) -> int:
        """Return the vocabulary size."""
        return len(self.tokens)

    def tokenize(self, text: str) -> List[int]:
        """Return [BOS, word ids..., EOS]; unknown words map to UNK."""
        return [BOS] + [self.ids.get(word, UNK) for word in text.split()] + [EOS]

    def detokenize(self, ids: Sequence[int]) -> str:
        """Return the text of `ids`, dropping special tokens other than UNK."""
        words = []
        for token_id in ids:
            if token_id in (PAD, BOS, EOS):
                continue
            words.append(self.tokens[token_id])
        return " ".join(words)

    def encode_padded(self, text: str, length: int) -> List[int]:
        """Return the tokenized text left-padded with PAD to `length`."""
        ids = self.tokenize(text)
        if len(ids) > length:
            raise ConfigError(
                f"Instruction '{text}' needs {len(ids)} tokens, more than {length}"
            )
        return [PAD] * (length - len(ids)) + ids

    def save(self, path: Path) -> Path:
        """Write the versioned token table as JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"version": VOCAB_VERSION, "tokens": self.tokens}
        path.write_text(json.dumps(payload, indent=2))
        return path

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        """Read a token table written by `save`."""
        payload = json.loads(Path(path).read_text())
        if payload.get("version") != VOCAB_VERSION:
            raise ConfigError(
                f"Vocabulary {path} has version {payload.get('version')}, "
                f"expected {VOCAB_VERSION}"
            )
        tokens = payload["tokens"]
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError(
                f"Vocabulary {path} does not start with the special tokens"
            )
        vocab = cls(words=())
        vocab.tokens = list(tokens)
        vocab.ids = {token: i for i, token in enumerate(vocab.tokens)}
        return vocab
