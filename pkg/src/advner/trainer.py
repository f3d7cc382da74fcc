"""Joint adversarial training loop, evaluation and checkpoints.

Each step encodes a source batch and (when adapting) a target batch with
the same extractor, then backpropagates once through
``ner_loss + alpha * domain_loss``. The reversal node in front of the
domain head flips the sign of the domain gradient reaching the extractor,
so the discriminator and the extractor pull in opposite directions within
that single update.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .data import Batch, TokenSequence, Vocab, make_batches, pad_batch
from .errors import ConfigError, ContractError, IntegrityError, NumericalError
from .losses import LossBreakdown, domain_loss, ner_loss, total_loss
from .metrics import Metrics, domain_accuracy, prf1
from .model import ModelConfig, ModelParams, domain_logits, encode, init_params, ner_logits

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    alpha: float = 2.0
    grl_lambda: float = 1.0
    grl_warmup_steps: int = 0
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    adaptation: bool = True
    early_stop_patience: int = 5
    grad_clip: float | None = 1.0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"train.alpha must be >= 0, got {self.alpha}")
        if self.grl_lambda < 0:
            raise ConfigError(f"train.grl_lambda must be >= 0, got {self.grl_lambda}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"train.optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        for name in ("epochs", "batch_size", "eval_batch_size", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.grl_warmup_steps < 0:
            raise ConfigError("train.grl_warmup_steps must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be positive or null, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return asdict(self)

    def lambda_at(self, step: int) -> float:
        """GRL coefficient for a 0-based step; ramps linearly when warm-up is on."""
        if self.grl_warmup_steps <= 0:
            return self.grl_lambda
        return self.grl_lambda * min(1.0, step / self.grl_warmup_steps)


class Optimizer:
    """Adam or plain SGD over a fixed, ordered list of parameters."""

    def __init__(self, params: Sequence[ad.Tensor], config: TrainConfig):
        self.params = list(params)
        self.kind = config.optimizer
        self.lr = config.lr
        self.betas = (config.beta1, config.beta2)
        self.eps = config.eps
        self.t = 0
        if self.kind == "adam":
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]
        else:
            self.m, self.v = [], []

    def step(self, grads: Sequence[np.ndarray | None]) -> None:
        self.t += 1
        lr = self.lr
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                if g is not None:
                    p.data = p.data - p.data.dtype.type(lr) * g
            return
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            dt = p.data.dtype.type
            self.m[i] = dt(b1) * self.m[i] + dt(1 - b1) * g
            self.v[i] = dt(b2) * self.v[i] + dt(1 - b2) * g * g
            update = (self.m[i] / dt(c1)) / (np.sqrt(self.v[i] / dt(c2)) + dt(self.eps))
            p.data = p.data - dt(lr) * update

    def moments(self) -> list[np.ndarray]:
        return self.m + self.v

    def load_moments(self, arrays: Sequence[np.ndarray], t: int) -> None:
        n = len(self.params)
        if self.kind == "adam":
            self.m = [a.copy() for a in arrays[:n]]
            self.v = [a.copy() for a in arrays[n:]]
        self.t = t


def clip_global_norm(grads: list[np.ndarray | None], max_norm: float | None) -> float:
    present = [g for g in grads if g is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in present))
    if max_norm is not None and norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for i, g in enumerate(grads):
            if g is not None:
                grads[i] = g * g.dtype.type(coef)
    return norm


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Optimizer
    config: TrainConfig
    vocab: Vocab | None = None
    epoch: int = 0
    step: int = 0
    best_dev_f1: float = -1.0
    best_epoch: int = 0


def new_state(model_config: ModelConfig, config: TrainConfig, vocab: Vocab | None = None) -> TrainState:
    params = init_params(model_config, config.seed)
    return TrainState(params, Optimizer(params.all(), config), config, vocab)


def _step_rng(config: TrainConfig, step: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, step, 0x5eed])


def train_step(
    state: TrainState,
    source_batch: Batch,
    target_batch: Batch | None = None,
    config: TrainConfig | None = None,
) -> LossBreakdown:
    """One joint forward/backward/update. See the module docstring."""
    config = config or state.config
    params = state.params
    if source_batch.tags is None:
        raise ContractError("source batch has no tags")
    if target_batch is not None and target_batch.tags is not None:
        raise ContractError("target batch must not carry tags")
    if config.adaptation and target_batch is None:
        raise ContractError("adaptation is enabled but no target batch was given")

    rng = _step_rng(config, state.step)
    lam = config.lambda_at(state.step)
    for p in params.all():
        p.grad = None
    try:
        src_feat = encode(params, source_batch.tokens, source_batch.mask, rng)
        l_ner = ner_loss(ner_logits(params, src_feat), source_batch.tags, source_batch.mask)
        dom_acc = None
        n_tgt = 0
        if config.adaptation:
            tgt_feat = encode(params, target_batch.tokens, target_batch.mask, rng)
            src_dom = domain_logits(params, src_feat, source_batch.mask, lam)
            tgt_dom = domain_logits(params, tgt_feat, target_batch.mask, lam)
            l_adv = domain_loss(src_dom, tgt_dom)
            total = total_loss(l_ner, l_adv, config.alpha)
            n_tgt = len(target_batch)
            gold = np.r_[np.zeros(len(source_batch)), np.ones(n_tgt)]
            dom_acc = domain_accuracy(np.concatenate([src_dom.data, tgt_dom.data]), gold)
            adv_value = l_adv.item()
        else:
            total = l_ner
            adv_value = 0.0
    except NumericalError as exc:
        raise NumericalError(f"{exc} at step {state.step} (source rows {source_batch.indices.tolist()})") from None
    if not math.isfinite(total.item()):
        raise NumericalError(f"non-finite loss at step {state.step} (source rows {source_batch.indices.tolist()})")

    ad.backward(total)
    grads = [p.grad for p in params.all()]
    clip_global_norm(grads, config.grad_clip)
    state.optimizer.step(grads)
    state.step += 1
    out = LossBreakdown(
        l_ner=l_ner.item(),
        l_adv=adv_value,
        l_total=total.item(),
        alpha=config.alpha if config.adaptation else 0.0,
        n_source_tokens=int(source_batch.mask.sum()),
        n_source_seqs=len(source_batch),
        n_target_seqs=n_tgt,
        domain_acc=dom_acc,
    )
    return out


class CyclingStream:
    """Endless batch stream that restarts a factory each time it runs dry.

    ``factory(cycle)`` returns a fresh iterable for the given cycle number,
    so reshuffling per cycle stays deterministic.
    """

    def __init__(self, factory: Callable[[int], Iterable[Batch]]):
        self.factory = factory
        self.cycle = 0
        self._it: Iterator[Batch] = iter(factory(0))

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        try:
            return next(self._it)
        except StopIteration:
            self.cycle += 1
            self._it = iter(self.factory(self.cycle))
            try:
                return next(self._it)
            except StopIteration:
                raise ConfigError("target stream is empty") from None


def interleave(source: Iterable[Batch], target) -> Iterator[tuple[Batch, Batch | None]]:
    """Pair each source batch with the next target batch, cycling the target.

    ``target`` may be ``None`` (baseline), a re-iterable collection, or an
    already-cycling iterator such as :class:`CyclingStream`.
    """
    if target is None:
        stream = None
    elif isinstance(target, CyclingStream):
        stream = target
    else:
        stream = CyclingStream(lambda _cycle: target)
    any_source = False
    for batch in source:
        any_source = True
        yield batch, (next(stream) if stream is not None else None)
    if not any_source:
        raise ConfigError("source stream is empty")


def predict_tags(params: ModelParams, vocab: Vocab, sequences: Sequence[TokenSequence],
                 batch_size: int = 64) -> list[list[str]]:
    """Greedy per-token argmax decoding; no dropout."""
    out: list[list[str]] = []
    with ad.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start:start + batch_size]
            batch = pad_batch(chunk, vocab)
            logits = ner_logits(params, encode(params, batch.tokens, batch.mask)).data
            ids = logits.argmax(axis=-1)
            for row, seq in zip(ids, chunk):
                out.append([vocab.tags[i] for i in row[: len(seq)]])
    return out


def evaluate(state: TrainState | ModelParams, dataset: Sequence[TokenSequence], vocab: Vocab | None = None,
             batch_size: int = 64) -> Metrics:
    params = state.params if isinstance(state, TrainState) else state
    vocab = vocab or getattr(state, "vocab", None)
    if vocab is None:
        raise ContractError("evaluate needs a vocabulary")
    if not dataset:
        raise ContractError("cannot evaluate on an empty dataset")
    if any(s.tags is None for s in dataset):
        raise ContractError("evaluation data must be labelled")
    pred = predict_tags(params, vocab, dataset, batch_size)
    return prf1(pred, [s.tags for s in dataset])


def probe_domain_accuracy(params: ModelParams, vocab: Vocab, source: Sequence[TokenSequence],
                          target: Sequence[TokenSequence], batch_size: int = 64) -> float:
    """Discriminator accuracy on fixed source and target samples, frozen parameters."""
    rows, gold = [], []
    with ad.no_grad():
        for label, seqs in ((0, source), (1, target)):
            for start in range(0, len(seqs), batch_size):
                batch = pad_batch(seqs[start:start + batch_size], vocab)
                feats = encode(params, batch.tokens, batch.mask)
                rows.append(domain_logits(params, feats, batch.mask).data)
                gold.append(np.full(len(batch), label))
    return domain_accuracy(np.concatenate(rows), np.concatenate(gold))


@dataclass
class FitResult:
    state: TrainState
    history: list[dict] = field(default_factory=list)


def fit(
    source_train: Sequence[TokenSequence],
    source_dev: Sequence[TokenSequence],
    target_corpus: Sequence[TokenSequence] | None,
    vocab: Vocab,
    model_config: ModelConfig,
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train with early stopping on dev F1 and return the best-dev state.

    An epoch is one pass over ``source_train``; the target corpus cycles
    underneath it. Each history record holds the epoch's mean losses, the
    dev metrics, ``domain_accuracy`` (the discriminator's accuracy on the
    training batches it saw that epoch, averaged over sequences) and
    ``probe_domain_accuracy`` (its accuracy at the end of the epoch on
    source dev against an equal number of target sentences).
    """
    if not source_dev:
        raise ContractError("fit needs a labelled dev set")
    if config.adaptation and not target_corpus:
        raise ConfigError("adaptation is enabled but the target corpus is empty")
    source_train = [vocab.encode(s) for s in source_train]
    source_dev = [vocab.encode(s) for s in source_dev]
    target = [vocab.encode(s) for s in target_corpus] if target_corpus else []
    probe_target = target[: len(source_dev)]
    state = new_state(model_config, config, vocab)

    target_stream = None
    if config.adaptation:
        target_stream = CyclingStream(
            lambda cycle: make_batches(target, vocab, config.batch_size, seed=_seed(config.seed, 2, cycle)))

    history: list[dict] = []
    best = None
    bad_epochs = 0
    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        sums = {"l_ner": 0.0, "l_adv": 0.0, "l_total": 0.0}
        dom_hits, dom_rows, steps = 0.0, 0, 0
        source_batches = make_batches(source_train, vocab, config.batch_size, seed=_seed(config.seed, 1, epoch))
        for src, tgt in interleave(source_batches, target_stream):
            br = train_step(state, src, tgt, config)
            for k in sums:
                sums[k] += getattr(br, k)
            steps += 1
            if br.domain_acc is not None:
                rows = br.n_source_seqs + br.n_target_seqs
                dom_hits += br.domain_acc * rows
                dom_rows += rows
        dev = evaluate(state, source_dev, vocab, config.eval_batch_size)
        record = {
            "epoch": epoch,
            "steps": steps,
            "alpha": config.alpha if config.adaptation else 0.0,
            "grl_lambda": config.lambda_at(state.step - 1) if config.adaptation else 0.0,
            **{k: v / steps for k, v in sums.items()},
            "dev": dev.to_dict(),
            "domain_accuracy": dom_hits / dom_rows if dom_rows else None,
            "probe_domain_accuracy": (probe_domain_accuracy(state.params, vocab, source_dev, probe_target)
                                      if config.adaptation else None),
        }
        history.append(record)
        if on_epoch:
            on_epoch(record)
        logger.info("epoch %d: l_ner=%.4f l_adv=%.4f dev_f1=%.4f", epoch, record["l_ner"], record["l_adv"], dev.f1)
        if dev.f1 > state.best_dev_f1:
            state.best_dev_f1 = dev.f1
            state.best_epoch = epoch
            best = (state.params.state(), [m.copy() for m in state.optimizer.moments()], state.optimizer.t, state.step)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                break
    if best is not None:
        params_state, moments, t, step = best
        state.params.load_state(params_state)
        state.optimizer.load_moments(moments, t)
        state.step = step
        state.epoch = state.best_epoch
    return FitResult(state, history)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# -- checkpoints ------------------------------------------------------------


def _pack(arrays: Iterable[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def save_checkpoint(state: TrainState, directory: Path | str, extra: dict | None = None) -> Path:
    """Write ``manifest.json``, ``params.bin``, ``moments.bin`` and ``vocab.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = state.params
    names = params.names()
    group_of = {n: g for g, members in params.groups.items() for n in members}
    params_blob = _pack(params[n].data for n in names)
    moments_blob = _pack(state.optimizer.moments())
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": params.config.to_dict(),
        "train_config": state.config.to_dict(),
        "params": [{"name": n, "shape": list(params[n].shape), "group": group_of[n]} for n in names],
        "optimizer": {"kind": state.optimizer.kind, "t": state.optimizer.t},
        "epoch": state.epoch,
        "step": state.step,
        "best_dev_f1": state.best_dev_f1,
        "vocab_hash": state.vocab.content_hash() if state.vocab else None,
        "params_sha256": hashlib.sha256(params_blob).hexdigest(),
        "moments_sha256": hashlib.sha256(moments_blob).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    (directory / "params.bin").write_bytes(params_blob)
    (directory / "moments.bin").write_bytes(moments_blob)
    if state.vocab is not None:
        state.vocab.save(directory / "vocab.json")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def _unpack(blob: bytes, shapes: list[tuple[int, ...]], what: str) -> list[np.ndarray]:
    sizes = [int(np.prod(s)) for s in shapes]
    if len(blob) != 4 * sum(sizes):
        raise IntegrityError(f"{what} holds {len(blob)} bytes, manifest implies {4 * sum(sizes)}")
    flat = np.frombuffer(blob, dtype="<f4")
    out, offset = [], 0
    for shape, size in zip(shapes, sizes):
        out.append(flat[offset:offset + size].reshape(shape).astype(np.float32))
        offset += size
    return out


def load_checkpoint(directory: Path | str) -> TrainState:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        params_blob = (directory / "params.bin").read_bytes()
        moments_blob = (directory / "moments.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"incomplete checkpoint in {directory}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    if hashlib.sha256(params_blob).hexdigest() != manifest["params_sha256"]:
        raise IntegrityError("params.bin does not match its recorded hash")
    if hashlib.sha256(moments_blob).hexdigest() != manifest["moments_sha256"]:
        raise IntegrityError("moments.bin does not match its recorded hash")

    vocab = None
    if manifest.get("vocab_hash"):
        try:
            vocab = Vocab.load(directory / "vocab.json")
        except OSError as exc:
            raise IntegrityError(f"missing vocabulary: {exc}") from None
        if vocab.content_hash() != manifest["vocab_hash"]:
            raise IntegrityError("vocab.json does not match its recorded hash")

    try:
        model_config = ModelConfig(**manifest["model_config"])
        config = TrainConfig(**manifest["train_config"])
    except (TypeError, ConfigError) as exc:
        raise IntegrityError(f"invalid config in manifest: {exc}") from None
    with ad.precision(np.float32):
        state = new_state(model_config, config, vocab)
    names = state.params.names()
    entries = manifest["params"]
    if [e["name"] for e in entries] != names:
        raise IntegrityError("parameter names or order differ from the model definition")
    shapes = [tuple(e["shape"]) for e in entries]
    for n, shape in zip(names, shapes):
        if state.params[n].shape != shape:
            raise IntegrityError(f"parameter {n} has shape {shape} in manifest, model expects {state.params[n].shape}")
    state.params.load_state(dict(zip(names, _unpack(params_blob, shapes, "params.bin"))))
    opt = manifest["optimizer"]
    if opt["kind"] != config.optimizer:
        raise IntegrityError("optimizer kind disagrees with train config")
    moment_shapes = shapes * 2 if config.optimizer == "adam" else []
    state.optimizer.load_moments(_unpack(moments_blob, moment_shapes, "moments.bin"), opt["t"])
    state.epoch = manifest["epoch"]
    state.step = manifest["step"]
    state.best_dev_f1 = manifest["best_dev_f1"]
    return state
