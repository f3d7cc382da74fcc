"""Matched adapted-vs-baseline runs on synthetic domain pairs.

For every seed a fresh lexicon is drawn. The source domain owns private
pool 0, the target domain owns pool 1, and the remaining pools feed the
mixed condition. The labelled test set is generated from the target side
of the pair, so "test F1" measures source-trained NER under the shifted
context distribution.
"""

from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import synth
from .data import TokenSequence, build_vocab, parse_conll_text, read_unlabeled
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig, evaluate, fit

logger = logging.getLogger(__name__)


@dataclass
class SynthSettings:
    n_source: int = 2000
    n_target: int = 2000
    n_dev: int = 300
    n_test: int = 500
    domain_gap: float = 0.7
    entity_density: float = 0.2
    sentence_len: tuple[int, int] = (8, 20)
    noise_rate: float = 0.0
    n_shared: int = 100
    n_private: int = 300
    n_pools: int = 4
    n_entities: int = 60
    entity_types: list[str] = field(default_factory=lambda: ["PER", "LOC", "ORG"])

    def __post_init__(self):
        self.sentence_len = tuple(self.sentence_len)
        if self.n_pools < 2:
            raise ConfigError("synth.n_pools must be >= 2 (one source and one target pool)")
        for name in ("n_source", "n_target", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sentence_len"] = list(self.sentence_len)
        return d


@dataclass
class ExperimentSettings:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    modes: list[str] = field(default_factory=lambda: ["different"])

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("experiment.seeds must not be empty")
        bad = [m for m in self.modes if m not in synth.MODES]
        if bad or not self.modes:
            raise ConfigError(f"experiment.modes must be drawn from {synth.MODES}, got {self.modes}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpora:
    train: list[TokenSequence]
    dev: list[TokenSequence]
    test: list[TokenSequence]
    target: list[TokenSequence]


def synth_texts(settings: SynthSettings, seed: int, mode: str) -> dict[str, str]:
    """CoNLL text for source train/dev, target-side test and the (labelled) target corpus."""
    lex = synth.make_lexicon(seed, settings.n_shared, settings.n_private, settings.n_pools,
                             settings.entity_types, settings.n_entities)
    common = dict(domain_gap=settings.domain_gap, entity_density=settings.entity_density,
                  sentence_len=settings.sentence_len, noise_rate=settings.noise_rate,
                  entity_types=settings.entity_types)
    src = synth.DomainSpec.from_lexicon(lex, [0], seed=seed * 10 + 1, n_sentences=settings.n_source, **common)
    tgt = synth.DomainSpec.from_lexicon(lex, [1], seed=seed * 10 + 2, n_sentences=settings.n_target, **common)
    extra = lex.private[2:]
    train, target = synth.generate_pair(src, tgt, mode, extra_pools=extra)
    _, test = synth.generate_pair(src, replace(tgt, seed=seed * 10 + 4, n_sentences=settings.n_test), mode,
                                  extra_pools=extra)
    dev = synth.generate(replace(src, seed=seed * 10 + 3, n_sentences=settings.n_dev))
    return {"source_train": train, "source_dev": dev, "source_test": test, "target": target}


def synth_corpora(settings: SynthSettings, seed: int, mode: str) -> Corpora:
    texts = synth_texts(settings, seed, mode)
    return Corpora(
        train=parse_conll_text(texts["source_train"]),
        dev=parse_conll_text(texts["source_dev"]),
        test=parse_conll_text(texts["source_test"]),
        target=read_unlabeled(io.StringIO(texts["target"]), conll=True),
    )


def run_arm(corpora: Corpora, model_kwargs: dict, config: TrainConfig) -> dict:
    """Train one arm and score it on the test split."""
    start = time.perf_counter()
    vocab = build_vocab(corpora.train + corpora.target)
    model_config = ModelConfig(vocab_size=len(vocab), n_tags=vocab.n_tags, grl_lambda=config.grl_lambda,
                               **model_kwargs)
    result = fit(corpora.train, corpora.dev, corpora.target if config.adaptation else None,
                 vocab, model_config, config)
    test = evaluate(result.state, corpora.test)
    return {
        "test": test.to_dict(),
        "test_f1": test.f1,
        "best_epoch": result.state.best_epoch,
        "epochs_run": len(result.history),
        "history": result.history,
        "domain_accuracy": [h["domain_accuracy"] for h in result.history],
        "probe_domain_accuracy": [h["probe_domain_accuracy"] for h in result.history],
        "seconds": time.perf_counter() - start,
    }


def _mean_sd(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "sd": sd, "n": len(arr)}


def summarize(runs: list[dict]) -> dict:
    adapted = [r for r in runs if r["arm"] == "adapted"]
    baseline = [r for r in runs if r["arm"] == "baseline"]
    a = _mean_sd([r["test_f1"] for r in adapted])
    b = _mean_sd([r["test_f1"] for r in baseline])
    drops = [r["domain_accuracy"][-1] < r["domain_accuracy"][0] for r in adapted if len(r["domain_accuracy"]) > 1]
    return {
        "adapted": a,
        "baseline": b,
        "delta_f1": a["mean"] - b["mean"],
        "domain_accuracy_drop_seeds": int(sum(drops)),
        "n_seeds": len(adapted),
    }


def run_experiment(
    synth_settings: SynthSettings,
    settings: ExperimentSettings,
    model_kwargs: dict,
    train_config: TrainConfig,
    on_run: Callable[[dict], None] | None = None,
) -> dict:
    """Two runs per seed and mode: the configured adaptive arm and its baseline."""
    if not train_config.adaptation or train_config.alpha == 0:
        raise ConfigError("experiment needs an adaptive train config (adaptation=true, alpha>0)")
    sections = []
    for mode in settings.modes:
        runs = []
        for seed in settings.seeds:
            corpora = synth_corpora(synth_settings, seed, mode)
            for arm, cfg in (("adapted", replace(train_config, seed=seed)),
                             ("baseline", replace(train_config, seed=seed, adaptation=False))):
                out = run_arm(corpora, model_kwargs, cfg)
                record = {"mode": mode, "seed": seed, "arm": arm, **out}
                logger.info("%s seed=%d %s test_f1=%.4f (%.0fs)", mode, seed, arm, out["test_f1"], out["seconds"])
                if on_run:
                    on_run(record)
                runs.append(record)
        sections.append({"mode": mode, "runs": runs, "summary": summarize(runs)})
    return {
        "synth": synth_settings.to_dict(),
        "experiment": settings.to_dict(),
        "train": train_config.to_dict(),
        "model": dict(model_kwargs),
        "sections": sections,
    }


def _fmt(x: float | None) -> str:
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.2f}"


def format_report(report: dict) -> str:
    """Plain-text tables derived from the JSON report."""
    lines = []
    for section in report["sections"]:
        s = section["summary"]
        lines.append(f"## mode: {section['mode']}")
        lines.append("")
        lines.append("| seed | adapted F1 | baseline F1 | delta | domain acc (first -> last) |")
        lines.append("|---:|---:|---:|---:|---|")
        by_seed: dict[int, dict] = {}
        for r in section["runs"]:
            by_seed.setdefault(r["seed"], {})[r["arm"]] = r
        for seed, arms in by_seed.items():
            a, b = arms["adapted"], arms["baseline"]
            traj = a["domain_accuracy"]
            lines.append(f"| {seed} | {a['test_f1']:.4f} | {b['test_f1']:.4f} | {a['test_f1'] - b['test_f1']:+.4f} "
                         f"| {_fmt(traj[0])} -> {_fmt(traj[-1])} ({' '.join(_fmt(x) for x in traj)}) |")
        lines.append(f"| mean ± sd | {s['adapted']['mean']:.4f} ± {s['adapted']['sd']:.4f} "
                     f"| {s['baseline']['mean']:.4f} ± {s['baseline']['sd']:.4f} | {s['delta_f1']:+.4f} "
                     f"| drop in {s['domain_accuracy_drop_seeds']}/{s['n_seeds']} seeds |")
        lines.append("")
    return "\n".join(lines)
