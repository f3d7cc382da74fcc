"""Command-line entry point: ``advner {train,eval,predict,synth,experiment,gradcheck}``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration error,
3 data or checkpoint error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Sequence

from threadpoolctl import threadpool_limits

from . import gradcheck as gradcheck_mod
from .data import build_vocab, parse_conll, read_unlabeled, to_iob, write_conll
from .errors import ConfigError, ContractError, DataError, IntegrityError, NumericalError
from .experiment import ExperimentSettings, SynthSettings, format_report, run_experiment, synth_texts
from .model import ModelConfig
from .trainer import TrainConfig, evaluate, fit, load_checkpoint, predict_tags, save_checkpoint

logger = logging.getLogger("advner")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

MODEL_KEYS = ("d_model", "n_heads", "n_layers", "d_ff", "max_len", "dropout")
DATA_DEFAULTS = {
    "source_train": None,
    "source_dev": None,
    "source_test": None,
    "target": None,
    "target_format": "text",
    "scheme": "iob2",
    "on_long": "truncate",
    "min_freq": 1,
}
SYNTH_DEFAULTS = {**SynthSettings().to_dict(), "seed": 0, "mode": "different"}


def _fields(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def default_config() -> dict:
    model = {k: v for k, v in _fields(ModelConfig).items() if k in MODEL_KEYS}
    return {
        "model": model,
        "train": TrainConfig().to_dict(),
        "data": dict(DATA_DEFAULTS),
        "synth": dict(SYNTH_DEFAULTS),
        "experiment": ExperimentSettings().to_dict(),
        "output_dir": "runs/default",
    }


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"--set expects dotted.path=value, got {text!r}")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip().split("."), value


def load_config(path: str | None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides; unknown keys are errors."""
    config = default_config()
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        _merge(config, raw)
    for item in overrides:
        keys, value = _parse_override(item)
        nested: Any = value
        for key in reversed(keys):
            nested = {key: nested}
        _merge(config, nested)
    return config


def _train_config(config: dict) -> TrainConfig:
    try:
        return TrainConfig(**config["train"])
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None


def _model_kwargs(config: dict) -> dict:
    return dict(config["model"])


def _require(config: dict, key: str) -> str:
    value = config["data"].get(key)
    if not value:
        raise ConfigError(f"data.{key} is required")
    return value


def _read_labelled(config: dict, key: str, max_len: int):
    path = _require(config, key)
    try:
        seqs = parse_conll(path, scheme=config["data"]["scheme"], max_len=max_len,
                           on_long=config["data"]["on_long"])
    except OSError as exc:
        raise DataError(f"data.{key}: {exc}") from None
    if not seqs:
        raise DataError(f"data.{key} ({path}) holds no sentences")
    return seqs


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    tc = _train_config(config)
    baseline = not tc.adaptation or tc.alpha == 0
    if baseline and tc.adaptation:
        # alpha = 0 leaves every parameter's update equal to the baseline's
        tc = dataclasses.replace(tc, adaptation=False)
    model_kwargs = _model_kwargs(config)
    max_len = model_kwargs.get("max_len", 128)
    train = _read_labelled(config, "source_train", max_len)
    dev = _read_labelled(config, "source_dev", max_len)
    test = _read_labelled(config, "source_test", max_len) if config["data"]["source_test"] else None
    target = []
    if tc.adaptation:
        path = _require(config, "target")
        try:
            target = read_unlabeled(path, conll=config["data"]["target_format"] == "conll", max_len=max_len,
                                    on_long=config["data"]["on_long"])
        except OSError as exc:
            raise DataError(f"data.target: {exc}") from None
        if not target:
            raise DataError(f"data.target ({path}) holds no sentences")
    vocab = build_vocab(train + target, min_freq=config["data"]["min_freq"])
    model_config = ModelConfig(vocab_size=len(vocab), n_tags=vocab.n_tags, grl_lambda=tc.grl_lambda,
                               **model_kwargs)

    out = Path(args.output or config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    history_path = out / "history.jsonl"
    history_path.write_text("", encoding="utf-8")

    def on_epoch(record: dict) -> None:
        with history_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        logger.info("epoch %d dev_f1=%.4f", record["epoch"], record["dev"]["f1"])

    result = fit(train, dev, target, vocab, model_config, tc, on_epoch=on_epoch)
    save_checkpoint(result.state, out / "checkpoint", extra={"config": config})
    report = {
        "run_type": "non-adaptive baseline" if baseline else "adversarial adaptation",
        "adaptation": not baseline,
        "alpha": tc.alpha,
        "grl_lambda": tc.grl_lambda,
        "best_epoch": result.state.best_epoch,
        "epochs_run": len(result.history),
        "dev": evaluate(result.state, dev).to_dict(),
        "test": evaluate(result.state, test).to_dict() if test else None,
        "config": config,
    }
    _write_json(out / "report.json", report)
    print(json.dumps({k: report[k] for k in ("run_type", "best_epoch", "dev", "test")}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    try:
        test = parse_conll(args.test, scheme=args.scheme, max_len=state.params.config.max_len, on_long="split")
    except OSError as exc:
        raise DataError(f"{args.test}: {exc}") from None
    if not test:
        raise DataError(f"{args.test} holds no sentences")
    metrics = evaluate(state, test).to_dict()
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_predict(args) -> int:
    state = load_checkpoint(args.checkpoint)
    try:
        seqs = read_unlabeled(args.input, max_len=state.params.config.max_len, on_long="split")
    except OSError as exc:
        raise DataError(f"{args.input}: {exc}") from None
    tags = [to_iob(t) for t in predict_tags(state.params, state.vocab, seqs)] if seqs else []
    text = write_conll(seqs, tags)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    config = load_config(args.config, args.set)
    s = dict(config["synth"])
    seed, mode = s.pop("seed"), s.pop("mode")
    try:
        texts = synth_texts(SynthSettings(**s), seed, mode)
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("source_train", "source_dev", "source_test"):
        (out / f"{name}.conll").write_text(texts[name], encoding="utf-8")
    # the target corpus is written without tags, one sentence per line
    target = read_unlabeled(io.StringIO(texts["target"]), conll=True, max_len=None)
    (out / "target.txt").write_text("".join(" ".join(t.tokens) + "\n" for t in target), encoding="utf-8")
    print(json.dumps({"output": str(out), "seed": seed, "mode": mode}))
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = load_config(args.config, args.set)
    s = dict(config["synth"])
    s.pop("seed"), s.pop("mode")
    try:
        synth_settings = SynthSettings(**s)
        settings = ExperimentSettings(**config["experiment"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.output or config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    runs_path = out / "runs.jsonl"
    runs_path.write_text("", encoding="utf-8")

    def on_run(record: dict) -> None:
        slim = {k: v for k, v in record.items() if k != "history"}
        with runs_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(slim, sort_keys=True) + "\n")

    report = run_experiment(synth_settings, settings, _model_kwargs(config), _train_config(config), on_run)
    _write_json(out / "report.json", report)
    table = format_report(report)
    (out / "summary.md").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all()
    worst = max(results.values())
    for name, err in results.items():
        status = "ok" if err < gradcheck_mod.TOLERANCE else "FAIL"
        print(f"{name:32s} {err:.3e} {status}")
    passed = worst < gradcheck_mod.TOLERANCE
    print(json.dumps({"max_rel_error": worst, "tolerance": gradcheck_mod.TOLERANCE, "passed": passed,
                      "per_op": results}, sort_keys=True))
    return EXIT_OK if passed else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advner", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, output_help):
        p.add_argument("config", nargs="?", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config value, e.g. train.alpha=0")
        p.add_argument("-o", "--output", help=output_help)

    p = sub.add_parser("train", help="train one model")
    with_config(p, "output directory (default: output_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on labelled CoNLL data")
    p.add_argument("checkpoint")
    p.add_argument("test")
    p.add_argument("--scheme", default="iob2")
    p.add_argument("-o", "--output", help="write the metrics JSON here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="tag raw text, one sentence per line")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic source/target corpus pair")
    p.add_argument("config", nargs="?")
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experiment", help="adapted vs baseline over seeds and domain modes")
    with_config(p, "output directory (default: output_dir from the config)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("ADVNER_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ADVNER_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ADVNER_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IntegrityError, ContractError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
