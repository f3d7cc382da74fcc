"""Corpus ingestion, tag-scheme conversion, vocabularies and batching.

Labelled corpora use the column format: one token per line, whitespace
separated columns with the tag last, and a blank line between sentences.
Unlabelled corpora are plain text with one whitespace-tokenised sentence
per line.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
OUTSIDE = "O"
SCHEMES = ("iob1", "iob2", "bilou", "token_class")


@dataclass
class TokenSequence:
    tokens: list[str]
    tags: list[str] | None = None
    domain: str = "source"
    token_ids: list[int] | None = None
    tag_ids: list[int] | None = None

    def __post_init__(self):
        if self.tags is not None and len(self.tags) != len(self.tokens):
            raise DataError(f"{len(self.tags)} tags for {len(self.tokens)} tokens")
        if self.domain not in ("source", "target"):
            raise DataError(f"unknown domain {self.domain!r}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray
    tags: np.ndarray | None
    domain: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def unpad(self) -> list[list[int]]:
        return [row[m.astype(bool)].tolist() for row, m in zip(self.tokens, self.mask)]


# -- tag schemes ------------------------------------------------------------


def _split(tag: str, index: int, allowed: str) -> tuple[str, str]:
    if tag == OUTSIDE:
        return OUTSIDE, ""
    prefix, sep, etype = tag.partition("-")
    if not sep or not etype or prefix not in allowed or any(c.isspace() for c in etype):
        raise DataError(f"malformed tag {tag!r} at index {index}")
    return prefix, etype


def to_iob(tags: Sequence[str], scheme: str = "iob2") -> list[str]:
    """Convert a tag sequence to IOB2 (every entity opens with ``B-``).

    ``iob1`` and ``iob2`` input only needs its ``I-`` tags that do not
    continue an entity of the same type turned into ``B-``. ``bilou`` (and
    the equivalent IOBES letters) maps U/S to B and L/E to I.
    ``token_class`` input carries bare types (``PER``), where a run of the
    same type is one entity.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown tag scheme {scheme!r}; expected one of {SCHEMES}")
    out: list[str] = []
    prev_type = ""
    for i, tag in enumerate(tags):
        if scheme == "token_class":
            if tag == OUTSIDE:
                prefix, etype = OUTSIDE, ""
            elif not tag or any(c.isspace() for c in tag):
                raise DataError(f"malformed tag {tag!r} at index {i}")
            else:
                prefix, etype = ("I" if tag == prev_type else "B"), tag
        elif scheme == "bilou":
            prefix, etype = _split(tag, i, "BILUES")
            prefix = {"U": "B", "S": "B", "L": "I", "E": "I"}.get(prefix, prefix)
        else:
            prefix, etype = _split(tag, i, "BI")
        if prefix == "I" and etype != prev_type:
            prefix = "B"
        out.append(OUTSIDE if prefix == OUTSIDE else f"{prefix}-{etype}")
        prev_type = etype
    return out


def is_valid_iob(tags: Sequence[str]) -> bool:
    prev_type = ""
    for tag in tags:
        if tag == OUTSIDE:
            prev_type = ""
            continue
        prefix, sep, etype = tag.partition("-")
        if not sep or not etype or prefix not in ("B", "I"):
            return False
        if prefix == "I" and etype != prev_type:
            return False
        prev_type = etype
    return True


# -- parsing ----------------------------------------------------------------


def _open_text(source) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, encoding="utf-8", newline=""), True
    return source, False


def _limit(seq: TokenSequence, max_len: int | None, on_long: str, where: str) -> list[TokenSequence]:
    if max_len is None or len(seq) <= max_len:
        return [seq]
    if on_long == "reject":
        raise DataError(f"sentence of length {len(seq)} exceeds max_len {max_len} ({where})")
    if on_long == "split":
        parts = []
        for start in range(0, len(seq), max_len):
            tags = None
            if seq.tags is not None:
                # a split point inside an entity leaves an orphan I- tag
                tags = to_iob(seq.tags[start:start + max_len])
            parts.append(replace(seq, tokens=seq.tokens[start:start + max_len], tags=tags))
        return parts
    logger.warning("truncating sentence of length %d to max_len %d (%s)", len(seq), max_len, where)
    tags = None if seq.tags is None else seq.tags[:max_len]
    return [replace(seq, tokens=seq.tokens[:max_len], tags=tags)]


def parse_conll(
    source,
    labelled: bool = True,
    scheme: str = "iob2",
    max_len: int | None = 128,
    on_long: str = "truncate",
    domain: str = "source",
) -> list[TokenSequence]:
    """Read a column-format corpus from a path or text stream.

    Tags are normalised to IOB2 via :func:`to_iob` using ``scheme``. With
    ``labelled=False`` only the first column is kept. ``on_long`` is one of
    ``truncate`` (default, logs a warning), ``split`` or ``reject``.
    """
    if on_long not in ("truncate", "split", "reject"):
        raise ConfigError(f"unknown on_long policy {on_long!r}")
    stream, owned = _open_text(source)
    sentences: list[TokenSequence] = []
    tokens: list[str] = []
    tags: list[str] = []
    start_line = 1

    def flush():
        if not tokens:
            return
        where = f"sentence starting at line {start_line}"
        try:
            seq_tags = to_iob(tags, scheme) if labelled else None
        except DataError as exc:
            raise DataError(f"{exc} ({where})") from None
        seq = TokenSequence(list(tokens), seq_tags, domain=domain)
        sentences.extend(_limit(seq, max_len, on_long, where))

    try:
        for lineno, raw in enumerate(stream, start=1):
            line = raw.rstrip("\r\n")
            cols = line.split()
            if not cols:
                flush()
                tokens, tags = [], []
                continue
            if cols[0] == "-DOCSTART-":
                continue
            if not tokens:
                start_line = lineno
            if labelled and len(cols) < 2:
                raise DataError(f"line {lineno}: expected token and tag columns, got {line!r}")
            tokens.append(cols[0])
            if labelled:
                tags.append(cols[-1])
        flush()
    finally:
        if owned:
            stream.close()
    return sentences


def parse_conll_text(text: str, **kwargs) -> list[TokenSequence]:
    return parse_conll(io.StringIO(text), **kwargs)


def read_unlabeled(
    source,
    conll: bool = False,
    max_len: int | None = 128,
    on_long: str = "truncate",
) -> list[TokenSequence]:
    """Target-domain sentences without tags.

    Plain text is one sentence per line; blank lines are skipped. With
    ``conll=True`` the file is read in column format and tags are dropped.
    """
    if conll:
        return parse_conll(source, labelled=False, max_len=max_len, on_long=on_long, domain="target")
    stream, owned = _open_text(source)
    out: list[TokenSequence] = []
    try:
        for lineno, raw in enumerate(stream, start=1):
            words = raw.split()
            if words:
                out.extend(_limit(TokenSequence(words, None, "target"), max_len, on_long, f"line {lineno}"))
    finally:
        if owned:
            stream.close()
    return out


def load_unlabeled(source, vocab: "Vocab", conll: bool = False, max_len: int | None = 128) -> list[TokenSequence]:
    return [vocab.encode(s) for s in read_unlabeled(source, conll=conll, max_len=max_len)]


def write_conll(sequences: Iterable[TokenSequence], tags: Iterable[Sequence[str]] | None = None) -> str:
    """Render sentences as ``token<TAB>tag`` lines with a blank line after each."""
    lines = []
    tag_iter = iter(tags) if tags is not None else None
    for seq in sequences:
        seq_tags = next(tag_iter) if tag_iter is not None else seq.tags
        for i, tok in enumerate(seq.tokens):
            lines.append(f"{tok}\t{seq_tags[i]}" if seq_tags is not None else tok)
        lines.append("")
    return "".join(line + "\n" for line in lines)


# -- vocabulary -------------------------------------------------------------


class Vocab:
    """Token and tag id maps. Ids 0 and 1 are reserved for PAD and UNK; tag ``O`` is id 0."""

    def __init__(self, tokens: Sequence[str], tags: Sequence[str]):
        self.itos = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.tags = list(tags)
        if not self.tags or self.tags[0] != OUTSIDE:
            raise DataError("tagset must start with 'O'")
        self.tag_to_id = {t: i for i, t in enumerate(self.tags)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    def token_id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, seq: TokenSequence) -> TokenSequence:
        ids = [self.token_id(t) for t in seq.tokens]
        tag_ids = None
        if seq.tags is not None:
            try:
                tag_ids = [self.tag_to_id[t] for t in seq.tags]
            except KeyError as exc:
                raise DataError(f"tag {exc.args[0]!r} not in tagset") from None
        return replace(seq, token_ids=ids, tag_ids=tag_ids)

    def to_dict(self) -> dict:
        return {"tokens": self.itos, "tags": self.tags}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        if d["tokens"][:2] != [PAD, UNK]:
            raise DataError("serialised vocab must start with PAD and UNK")
        return cls(d["tokens"][2:], d["tags"])

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(sequences: Iterable[TokenSequence], min_freq: int = 1, extra_tags: Iterable[str] = ()) -> Vocab:
    """Frequency-ordered vocabulary (ties broken lexicographically).

    Tokens seen fewer than ``min_freq`` times are left out and map to UNK.
    The tagset is ``O`` followed by ``B-X, I-X`` for every type, sorted.
    """
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    types: set[str] = set()
    for seq in sequences:
        counts.update(seq.tokens)
        for tag in seq.tags or ():
            if tag != OUTSIDE:
                types.add(tag.partition("-")[2])
    for tag in extra_tags:
        if tag != OUTSIDE:
            types.add(tag.partition("-")[2])
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    tags = [OUTSIDE] + [f"{p}-{t}" for t in sorted(types) for p in ("B", "I")]
    return Vocab(kept, tags)


# -- batching ---------------------------------------------------------------


def pad_batch(sequences: Sequence[TokenSequence], vocab: Vocab, indices: Sequence[int] | None = None) -> Batch:
    encoded = [s if s.token_ids is not None else vocab.encode(s) for s in sequences]
    length = max((len(s) for s in encoded), default=0)
    if length == 0:
        raise DataError("cannot batch empty sentences")
    b = len(encoded)
    tokens = np.full((b, length), PAD_ID, dtype=np.int64)
    mask = np.zeros((b, length), dtype=np.int64)
    labelled = all(s.tag_ids is not None for s in encoded)
    tags = np.zeros((b, length), dtype=np.int64) if labelled else None
    for r, s in enumerate(encoded):
        n = len(s)
        if n == 0:
            raise DataError("cannot batch an empty sentence")
        tokens[r, :n] = s.token_ids
        mask[r, :n] = 1
        if tags is not None:
            tags[r, :n] = s.tag_ids
    domain = np.array([0 if s.domain == "source" else 1 for s in encoded], dtype=np.int64)
    idx = np.arange(b) if indices is None else np.asarray(indices, dtype=np.int64)
    return Batch(tokens, mask, tags, domain, idx)


def make_batches(
    sequences: Sequence[TokenSequence],
    vocab: Vocab,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield padded batches covering every sequence exactly once.

    The order is ``default_rng(seed).permutation`` when ``shuffle`` is set,
    corpus order otherwise.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(sequences)) if shuffle else np.arange(len(sequences))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield pad_batch([sequences[i] for i in idx], vocab, idx)
