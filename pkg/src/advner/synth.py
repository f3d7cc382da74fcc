"""Synthetic labelled corpora with a controllable domain gap.

Sentences are sequences of context tokens with entities spliced in.
Entities come from per-type gazetteers shared by all domains; context
tokens come either from a pool shared by every domain or, with probability
``domain_gap``, from the domain's private pool. A domain may own several
private pools, in which case each sentence picks one (the mixed-domain
case).
"""

from __future__ import annotations

import string
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import TokenSequence, write_conll
from .errors import ConfigError

MODES = ("same", "different", "mixed")

_ONSETS = ["", "b", "br", "c", "ch", "d", "f", "g", "gr", "j", "l", "m", "n", "p", "pl", "r", "s", "t", "tr", "v"]
_VOWELS = ["a", "e", "i", "o", "u", "ou", "ai", "eu", "au", "on", "an", "in"]
_CODAS = ["", "", "", "l", "n", "r", "s", "t", "x"]


@dataclass
class Lexicon:
    shared: list[str]
    private: list[list[str]]
    gazetteers: dict[str, list[tuple[str, ...]]]


def _words(rng: np.random.Generator, n: int, taken: set[str], capital: bool = False) -> list[str]:
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))
        w += _CODAS[rng.integers(len(_CODAS))]
        if capital:
            w = w.capitalize()
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_lexicon(
    seed: int = 0,
    n_shared: int = 100,
    n_private: int = 300,
    n_pools: int = 4,
    entity_types: Sequence[str] = ("PER", "LOC", "ORG"),
    n_entities: int = 60,
) -> Lexicon:
    """Disjoint pseudo-word pools plus gazetteers of 1-3 token entities."""
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    shared = _words(rng, n_shared, taken)
    private = [_words(rng, n_private, taken) for _ in range(n_pools)]
    gazetteers = {}
    for etype in entity_types:
        pieces = _words(rng, n_entities * 2, taken, capital=True)
        entries = []
        for _ in range(n_entities):
            size = int(rng.choice([1, 2, 3], p=[0.4, 0.4, 0.2]))
            entries.append(tuple(pieces[i] for i in rng.choice(len(pieces), size=size, replace=False)))
        gazetteers[etype] = sorted(set(entries))
    return Lexicon(shared, private, gazetteers)


@dataclass
class DomainSpec:
    seed: int
    n_sentences: int
    shared_pool: list[str]
    private_pools: list[list[str]]
    gazetteers: dict[str, list[tuple[str, ...]]]
    sentence_len: tuple[int, int] = (8, 20)
    entity_density: float = 0.2
    domain_gap: float = 0.7
    noise_rate: float = 0.0
    entity_types: list[str] = field(default_factory=lambda: ["PER", "LOC", "ORG"])

    def __post_init__(self):
        lo, hi = self.sentence_len
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid sentence_len range {self.sentence_len}")
        if self.n_sentences < 0:
            raise ConfigError("n_sentences must be >= 0")
        if not 0.0 <= self.entity_density < 1.0:
            raise ConfigError(f"entity_density must be in [0, 1), got {self.entity_density}")
        if not 0.0 <= self.domain_gap <= 1.0:
            raise ConfigError(f"domain_gap must be in [0, 1], got {self.domain_gap}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if not self.shared_pool and self.domain_gap < 1.0:
            raise ConfigError("shared context pool is empty")
        if self.domain_gap > 0 and (not self.private_pools or not all(self.private_pools)):
            raise ConfigError("private context pool is empty")
        if self.entity_density > 0:
            missing = [t for t in self.entity_types if not self.gazetteers.get(t)]
            if missing:
                raise ConfigError(f"empty gazetteer for entity types {missing}")

    @classmethod
    def from_lexicon(cls, lexicon: Lexicon, pools: Sequence[int], **kwargs) -> "DomainSpec":
        types = kwargs.pop("entity_types", None) or list(lexicon.gazetteers)
        return cls(
            shared_pool=lexicon.shared,
            private_pools=[lexicon.private[i] for i in pools],
            gazetteers={t: lexicon.gazetteers[t] for t in types},
            entity_types=list(types),
            **kwargs,
        )

    def summary(self) -> dict:
        """The scalar knobs, without the word lists."""
        d = asdict(self)
        for k in ("shared_pool", "private_pools", "gazetteers"):
            d.pop(k)
        d["n_private_pools"] = len(self.private_pools)
        return d


def _perturb(word: str, rng: np.random.Generator) -> str:
    i = int(rng.integers(len(word)))
    return word[:i] + string.ascii_lowercase[rng.integers(26)] + word[i + 1:]


def generate_sequences(spec: DomainSpec) -> list[TokenSequence]:
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.sentence_len
    d = spec.entity_density
    mean_entity = 0.0
    if d > 0:
        mean_entity = float(np.mean([np.mean([len(e) for e in spec.gazetteers[t]]) for t in spec.entity_types]))
    # probability that a slot holds an entity so that the token-level entity share is d
    p_entity = d / (mean_entity * (1 - d) + d) if d > 0 else 0.0
    out = []
    for _ in range(spec.n_sentences):
        length = int(rng.integers(lo, hi + 1))
        pool = spec.private_pools[int(rng.integers(len(spec.private_pools)))] if spec.private_pools else []
        tokens: list[str] = []
        tags: list[str] = []
        while len(tokens) < length:
            room = length - len(tokens)
            if p_entity and rng.random() < p_entity:
                etype = spec.entity_types[int(rng.integers(len(spec.entity_types)))]
                gaz = spec.gazetteers[etype]
                entity = gaz[int(rng.integers(len(gaz)))]
                if len(entity) <= room:
                    tokens.extend(entity)
                    tags.extend([f"B-{etype}"] + [f"I-{etype}"] * (len(entity) - 1))
                    continue
            if rng.random() < spec.domain_gap:
                word = pool[int(rng.integers(len(pool)))]
            else:
                word = spec.shared_pool[int(rng.integers(len(spec.shared_pool)))]
            if spec.noise_rate and rng.random() < spec.noise_rate:
                word = _perturb(word, rng)
            tokens.append(word)
            tags.append("O")
        out.append(TokenSequence(tokens, tags))
    return out


def generate(spec: DomainSpec) -> str:
    """Labelled CoNLL text for ``spec``; byte-identical for identical specs."""
    return write_conll(generate_sequences(spec))


def generate_pair(
    source_spec: DomainSpec,
    target_spec: DomainSpec,
    mode: str,
    extra_pools: Sequence[Sequence[str]] = (),
) -> tuple[str, str]:
    """Source and target corpora for one of the three domain relations.

    * ``same``: the target reuses the source's pools and gap.
    * ``different``: the target keeps its own private pools and gap.
    * ``mixed``: each target sentence draws from one of the source's pools,
      the target's own pools or ``extra_pools``.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown pair mode {mode!r}; expected one of {MODES}")
    if set(source_spec.entity_types) != set(target_spec.entity_types):
        raise ConfigError("source and target entity types differ")
    if mode == "same":
        target_spec = replace(target_spec, private_pools=source_spec.private_pools, domain_gap=source_spec.domain_gap)
    elif mode == "mixed":
        pools = list(source_spec.private_pools) + list(target_spec.private_pools) + [list(p) for p in extra_pools]
        target_spec = replace(target_spec, private_pools=pools)
    return generate(source_spec), generate(target_spec)


def context_vocab(sequences: Sequence[TokenSequence]) -> set[str]:
    return {tok for s in sequences for tok, tag in zip(s.tokens, s.tags or ["O"] * len(s)) if tag == "O"}


def jaccard(a: set, b: set) -> float:
    return len(a & b) / len(a | b) if a | b else 1.0


def corpus_stats(sequences: Sequence[TokenSequence]) -> dict:
    n_tokens = sum(len(s) for s in sequences)
    n_entity = sum(t != "O" for s in sequences for t in s.tags or ())
    return {
        "n_sentences": len(sequences),
        "mean_length": n_tokens / len(sequences) if sequences else 0.0,
        "entity_density": n_entity / n_tokens if n_tokens else 0.0,
    }
