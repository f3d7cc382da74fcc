"""NER loss, domain (adversarial) loss and their weighted total.

Both component losses are per-batch means rather than sums so that the
weight ``alpha`` means the same thing at every batch size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

SOURCE, TARGET = 0, 1


@dataclass
class LossBreakdown:
    l_ner: float
    l_adv: float
    l_total: float
    alpha: float
    n_source_tokens: int
    n_source_seqs: int
    n_target_seqs: int
    domain_acc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def ner_loss(logits: Tensor, tags: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token NLL of the gold tags over real (mask == 1) positions."""
    b, length, n_tags = logits.shape
    tags = np.asarray(tags, dtype=np.int64)
    mask = np.asarray(mask)
    if tags.shape != (b, length) or mask.shape != (b, length):
        raise DataError(f"tags {tags.shape} / mask {mask.shape} do not align with logits {logits.shape}")
    real = mask != 0
    if (tags[real] >= n_tags).any() or (tags[real] < 0).any():
        raise DataError(f"tag id out of range for {n_tags} tags")
    flat = ad.reshape(logits, (b * length, n_tags))
    return ad.cross_entropy(flat, np.where(real, tags, 0).reshape(-1), real.reshape(-1))


def domain_loss(src_logits: Tensor, tgt_logits: Tensor | None = None) -> Tensor:
    """Mean NLL with gold class 0 for source rows and 1 for target rows."""
    if tgt_logits is None:
        return ad.cross_entropy(src_logits, np.full(src_logits.shape[0], SOURCE))
    logits = ad.concat([src_logits, tgt_logits], axis=0)
    gold = np.concatenate([np.full(src_logits.shape[0], SOURCE), np.full(tgt_logits.shape[0], TARGET)])
    return ad.cross_entropy(logits, gold)


def total_loss(l_ner: Tensor, l_adv: Tensor, alpha: float) -> Tensor:
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    return ad.add(l_ner, ad.scale(l_adv, alpha))
