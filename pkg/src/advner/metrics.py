"""Entity-level precision/recall/F1 and discriminator accuracy."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError


class EntitySpan(NamedTuple):
    type: str
    start: int
    end: int  # exclusive


def extract_entities(tags: Sequence[str]) -> set[EntitySpan]:
    """Spans of maximal ``B-X I-X*`` runs.

    Like conlleval, an ``I-X`` that does not continue an entity of type X
    opens a new entity instead of being dropped.
    """
    spans: set[EntitySpan] = set()
    cur_type, cur_start = None, 0
    for i, tag in enumerate(tags):
        prefix, _, etype = tag.partition("-")
        if tag == "O" or not etype:
            if cur_type is not None:
                spans.add(EntitySpan(cur_type, cur_start, i))
            cur_type = None
            continue
        if prefix == "B" or etype != cur_type:
            if cur_type is not None:
                spans.add(EntitySpan(cur_type, cur_start, i))
            cur_type, cur_start = etype, i
    if cur_type is not None:
        spans.add(EntitySpan(cur_type, cur_start, len(tags)))
    return spans


def _ratios(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_type: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Flat key-value form, e.g. ``per_type.PER.f1``."""
        out = {"precision": self.precision, "recall": self.recall, "f1": self.f1,
               "tp": self.tp, "fp": self.fp, "fn": self.fn}
        for t, (p, r, f) in sorted(self.per_type.items()):
            out[f"per_type.{t}.precision"] = p
            out[f"per_type.{t}.recall"] = r
            out[f"per_type.{t}.f1"] = f
        return out


def prf1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> Metrics:
    """Micro-averaged exact-match span scores with a per-type breakdown."""
    if len(pred) != len(gold):
        raise ContractError(f"{len(pred)} predicted sentences vs {len(gold)} gold sentences")
    tp, fp, fn = Counter(), Counter(), Counter()
    for i, (p_tags, g_tags) in enumerate(zip(pred, gold)):
        if len(p_tags) != len(g_tags):
            raise ContractError(f"sentence {i}: {len(p_tags)} predicted tags vs {len(g_tags)} gold tags")
        p_spans, g_spans = extract_entities(p_tags), extract_entities(g_tags)
        for s in p_spans & g_spans:
            tp[s.type] += 1
        for s in p_spans - g_spans:
            fp[s.type] += 1
        for s in g_spans - p_spans:
            fn[s.type] += 1
    total = (sum(tp.values()), sum(fp.values()), sum(fn.values()))
    per_type = {t: _ratios(tp[t], fp[t], fn[t]) for t in sorted(set(tp) | set(fp) | set(fn))}
    return Metrics(*_ratios(*total), *total, per_type=per_type)


def domain_accuracy(logits, gold) -> float:
    """Fraction of rows whose argmax matches the gold domain (ties go to class 0)."""
    rows = np.asarray(getattr(logits, "data", logits))
    gold = np.asarray(gold).reshape(-1)
    if rows.shape[0] == 0:
        raise ContractError("domain_accuracy needs at least one row")
    return float((rows.argmax(axis=1) == gold).mean())
