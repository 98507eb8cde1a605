"""Text ingestion: tokenization, vocabulary, encoding, deterministic batching.

Sequences are fixed length: START, up to seq_len - 2 content tokens, END,
then PAD.  Out-of-vocabulary tokens map to UNK at id-lookup time, but
``char_count`` always measures the original pre-UNK text that survived
truncation, so bits-per-character stays comparable across vocabularies.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

RESERVED = ("START", "END", "PAD", "UNK")
START_ID, END_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

MODES = ("word", "char")


def tokenize(line: str, mode: str) -> list[str]:
    """Lowercase and split a line; word mode on whitespace, char mode per character."""
    if mode not in MODES:
        raise ConfigError(f"unknown tokenizer mode {mode!r}")
    line = line.lower()
    return line.split() if mode == "word" else list(line)


def detokenize(tokens, mode: str) -> str:
    return (" " if mode == "word" else "").join(tokens)


class Vocabulary:
    """Token inventory with the four reserved specials pinned at ids 0..3."""

    def __init__(self, content_tokens, mode: str):
        if mode not in MODES:
            raise ConfigError(f"unknown tokenizer mode {mode!r}")
        content_tokens = tuple(content_tokens)
        for tok in content_tokens:
            if tok in RESERVED:
                raise ConfigError(f"token {tok!r} collides with a reserved literal")
        if len(set(content_tokens)) != len(content_tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        self.mode = mode
        self.tokens = RESERVED + content_tokens
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path, mode: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [ln.rstrip("\n") for ln in fh]
        if tuple(tokens[:4]) != RESERVED:
            raise ConfigError(f"vocabulary file {path} lacks the reserved header")
        return cls(tokens[4:], mode)


def build_vocab(lines, mode: str, max_size: int) -> Vocabulary:
    """Most frequent tokens, ties broken lexicographically; max_size includes specials."""
    if max_size <= len(RESERVED):
        raise ConfigError(f"max_size must exceed {len(RESERVED)} reserved slots")
    counts = Counter()
    for line in lines:
        counts.update(tokenize(line, mode))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(RESERVED)]]
    return Vocabulary(keep, mode)


@dataclass
class TokenSequence:
    """Fixed-length id row plus the character count of the text it encodes."""

    ids: np.ndarray
    char_count: int

    def validate(self, seq_len: int | None = None):
        ids = self.ids
        if seq_len is not None and len(ids) != seq_len:
            raise ConfigError(f"expected length {seq_len}, got {len(ids)}")
        if ids[0] != START_ID or np.count_nonzero(ids == END_ID) != 1:
            raise ConfigError("sequence must open with START and hold exactly one END")
        end = int(np.flatnonzero(ids == END_ID)[0])
        if np.any(ids[end + 1 :] != PAD_ID) or np.any(ids[1:end] == PAD_ID):
            raise ConfigError("PAD must fill exactly the tail after END")
        if self.char_count < 1:
            raise ConfigError("char_count must be positive")
        return self


def encode(line: str, vocab: Vocabulary, seq_len: int) -> TokenSequence:
    """Encode one line to a fixed-length id row, truncating to fit START/END."""
    if seq_len < 3:
        raise ConfigError("seq_len must be at least 3 to hold START, content, END")
    body = tokenize(line, vocab.mode)[: seq_len - 2]
    ids = np.full(seq_len, PAD_ID, dtype=np.int64)
    ids[0] = START_ID
    ids[1 : 1 + len(body)] = [vocab.id_of(tok) for tok in body]
    ids[1 + len(body)] = END_ID
    char_count = max(1, len(detokenize(body, vocab.mode)))
    return TokenSequence(ids, char_count)


def decode_text(ids, vocab: Vocabulary) -> str:
    """Text between START and END (or the first PAD), UNK rendered literally."""
    toks = []
    for idx in np.asarray(ids).tolist()[1:]:
        if idx in (END_ID, PAD_ID):
            break
        toks.append(vocab.token(idx) if idx != START_ID else "")
    return detokenize(toks, vocab.mode)


def load_lines(path) -> list[str]:
    """Non-blank lines of a text file, in order."""
    with open(path, encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh if ln.strip()]


def load_corpus(path, vocab: Vocabulary, seq_len: int) -> list[TokenSequence]:
    return [encode(ln, vocab, seq_len) for ln in load_lines(path)]


def batch_iter(sequences, batch_size: int, seed: int, start_step: int = 0):
    """Infinite iterator of id batches [B, S], reshuffled each epoch.

    Fully determined by (seed, step): epoch permutations come from
    SeedSequence([seed, epoch]), the partial tail batch of each epoch is
    dropped, and start_step resumes mid-stream bit-for-bit.
    """
    n = len(sequences)
    if not 1 <= batch_size <= n:
        raise ConfigError(f"batch_size {batch_size} not in [1, {n}]")
    ids = np.stack([s.ids for s in sequences])
    per_epoch = n // batch_size
    step = start_step
    epoch, perm = -1, None
    while True:
        e, k = divmod(step, per_epoch)
        if e != epoch:
            epoch = e
            perm = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
        yield ids[perm[k * batch_size : (k + 1) * batch_size]]
        step += 1
