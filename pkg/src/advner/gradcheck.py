"""Finite-difference checks for every autodiff op and the full training loss.

Each check builds a small float64 problem and returns the worst relative
error reported by :func:`autodiff.finite_diff_check`. Ops are looked up on
the ``autodiff`` module at call time, so replacing an op there (as the
fault-injection test does) is picked up by the checks.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import domain_loss, ner_loss, total_loss
from .model import ModelConfig, domain_logits, encode, init_params, ner_logits

TOLERANCE = 1e-3
H = 1e-3


def _weighted(out: ad.Tensor, seed: int = 5) -> ad.Tensor:
    """Reduce a tensor to a scalar with fixed random weights."""
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum(ad.mul(out, ad.tensor(weights)))


def _check(loss: Callable[[], ad.Tensor], params, numeric=None) -> float:
    return ad.finite_diff_check(loss, params, h=H, coords_per_param=24, numeric=numeric)


def _op_checks() -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(11)
    x = ad.parameter(rng.normal(size=(2, 3, 4)))
    y = ad.parameter(rng.normal(size=(2, 3, 4)))
    m2 = ad.parameter(rng.normal(size=(3, 4)))
    w = ad.parameter(rng.normal(size=(4, 5)))
    b = ad.parameter(rng.normal(size=4))
    q = ad.parameter(rng.normal(size=(2, 4, 3)))
    gamma = ad.parameter(rng.normal(1.0, 0.1, 4))
    beta = ad.parameter(rng.normal(0.0, 0.1, 4))
    table = ad.parameter(rng.normal(size=(7, 4)))
    logits = ad.parameter(rng.normal(size=(6, 5)))
    mask = np.array([[1, 1, 0], [1, 1, 1]])
    fill = rng.random((2, 3, 4)) > 0.5
    targets = rng.integers(0, 5, 6)
    row_weights = rng.random(6)

    def dropout():
        return _weighted(ad.dropout(x, 0.3, np.random.default_rng(2)))

    checks = {
        "add": lambda: _check(lambda: _weighted(ad.add(x, y)), [x, y]),
        "add_bias": lambda: _check(lambda: _weighted(ad.add(x, b)), [x, b]),
        "sub": lambda: _check(lambda: _weighted(ad.sub(x, y)), [x, y]),
        "mul": lambda: _check(lambda: _weighted(ad.mul(x, y)), [x, y]),
        "scale": lambda: _check(lambda: _weighted(ad.scale(x, -1.5)), [x]),
        "relu": lambda: _check(lambda: _weighted(ad.relu(x)), [x]),
        "tanh": lambda: _check(lambda: _weighted(ad.tanh(x)), [x]),
        "gelu": lambda: _check(lambda: _weighted(ad.gelu(x)), [x]),
        "gradient_reversal": lambda: _check(lambda: _weighted(ad.gradient_reversal(x, 0.7)), [x],
                                            numeric=lambda: ad.scale(_weighted(x), -0.7)),
        "dropout": lambda: _check(dropout, [x]),
        "masked_fill": lambda: _check(lambda: _weighted(ad.masked_fill(x, fill, 0.0)), [x]),
        "matmul_2d": lambda: _check(lambda: _weighted(ad.matmul(m2, w)), [m2, w]),
        "matmul_3d_2d": lambda: _check(lambda: _weighted(ad.matmul(x, w)), [x, w]),
        "matmul_3d_3d": lambda: _check(lambda: _weighted(ad.matmul(x, q)), [x, q]),
        "transpose": lambda: _check(lambda: _weighted(ad.transpose(x)), [x]),
        "reshape": lambda: _check(lambda: _weighted(ad.reshape(x, (6, 4))), [x]),
        "split_merge_heads": lambda: _check(
            lambda: _weighted(ad.merge_heads(ad.mul(ad.split_heads(x, 2), ad.split_heads(y, 2)), 2)), [x, y]),
        "concat": lambda: _check(lambda: _weighted(ad.concat([x, y], axis=1)), [x, y]),
        "embedding": lambda: _check(lambda: _weighted(ad.embedding(table, np.array([[1, 2, 2], [6, 0, 1]]))),
                                    [table]),
        "sum": lambda: _check(lambda: ad.sum(ad.mul(x, x)), [x]),
        "mean": lambda: _check(lambda: ad.mean(ad.mul(x, y)), [x, y]),
        "masked_mean": lambda: _check(lambda: _weighted(ad.masked_mean(x, mask)), [x]),
        "softmax": lambda: _check(lambda: _weighted(ad.softmax(x, axis=-1)), [x]),
        "log_softmax": lambda: _check(lambda: _weighted(ad.log_softmax(x, axis=1)), [x]),
        "layer_norm": lambda: _check(lambda: _weighted(ad.layer_norm(x, gamma, beta)), [x, gamma, beta]),
        "cross_entropy": lambda: _check(lambda: ad.cross_entropy(logits, targets, row_weights), [logits]),
    }
    return checks


def _loss_checks() -> dict[str, Callable[[], float]]:
    cfg = ModelConfig(vocab_size=30, n_tags=5, d_model=8, n_heads=2, n_layers=2, d_ff=16, max_len=16,
                      dropout=0.0)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(8)
    s_tok = rng.integers(2, 30, (3, 6))
    s_mask = np.ones_like(s_tok)
    s_mask[1, 3:] = 0
    s_tok[1, 3:] = 0
    s_tags = rng.integers(0, 5, (3, 6)) * s_mask
    t_tok = rng.integers(2, 30, (2, 5))
    t_mask = np.ones_like(t_tok)
    lam, alpha = 0.7, 2.0

    def parts(reverse: bool):
        sf, tf = encode(params, s_tok, s_mask), encode(params, t_tok, t_mask)
        l_ner = ner_loss(ner_logits(params, sf), s_tags, s_mask)
        l_adv = domain_loss(domain_logits(params, sf, s_mask, lam, reverse),
                            domain_logits(params, tf, t_mask, lam, reverse))
        return l_ner, l_adv

    def training_loss():
        return total_loss(*parts(True), alpha)

    def objective():
        return total_loss(*parts(False), alpha)

    def extractor_objective():
        l_ner, l_adv = parts(False)
        return ad.sub(l_ner, ad.scale(l_adv, lam * alpha))

    heads = params.group("theta_n") + params.group("theta_d")
    return {
        "loss.total": lambda: _check(objective, params.all()),
        "loss.heads_under_reversal": lambda: _check(training_loss, heads),
        "loss.extractor_under_reversal": lambda: _check(training_loss, params.group("theta_f"),
                                                        numeric=extractor_objective),
    }


def run_all() -> dict[str, float]:
    """Worst relative error per check, computed in float64."""
    results = {}
    with ad.precision(np.float64):
        for name, check in {**_op_checks(), **_loss_checks()}.items():
            results[name] = float(check())
    return results
