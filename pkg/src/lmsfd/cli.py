"""Command line: ``run``, ``compare``, ``budget`` and ``gen-data``.

Exit codes are 0 on success, 2 for usage or configuration errors and 3 when
training hits a non-finite loss or gradient.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .budget import ShapeParams, budget_full_model, budget_single_projection, flops_ratio, model_params, render_ratio
from .data import CipherTask, DataError, Vocab, eval_batches, gen_cipher_corpus, load_tsv, write_tsv
from .lms import ConfigurationError
from .model import ModelConfig, build_model
from .numerics import NumericError
from .training import TrainConfig, evaluate, routes_for, train

log = logging.getLogger("lmsfd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    """A run configuration that cannot be used; the message names the field."""


class ComparisonError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class CipherSource:
    n_languages: int = 4
    latent_vocab: int = 48
    seed: int = 0
    min_len: int = 4
    max_len: int = 10
    pair_sizes: list[int] = field(default_factory=lambda: [2000, 2000, 600, 600, 150, 150])
    valid_per_pair: int = 64

    def task(self) -> CipherTask:
        return CipherTask.random(
            self.n_languages,
            self.latent_vocab,
            seed=self.seed,
            min_len=self.min_len,
            max_len=self.max_len,
            pair_sizes=list(self.pair_sizes),
            valid_per_pair=self.valid_per_pair,
        )


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    out_dir: Path
    cipher: CipherSource | None = None
    train_tsv: Path | None = None
    valid_tsv: Path | None = None

    def to_dict(self) -> dict:
        data: dict = {"kind": "cipher", **asdict(self.cipher)} if self.cipher else {
            "kind": "tsv",
            "train": str(self.train_tsv),
            "valid": None if self.valid_tsv is None else str(self.valid_tsv),
        }
        return {"model": asdict(self.model), "train": asdict(self.train), "data": data}


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: expected an object")
    return value


def _build(cls, section: str, values: dict):
    try:
        obj = cls.from_dict(values) if hasattr(cls, "from_dict") else cls(**values)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except TypeError as e:
        raise ConfigError(f"{section}: {e}") from None
    except (ConfigurationError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def parse_run_config(raw: dict, base_dir: Path = Path(".")) -> tuple[RunConfig, list, list, Vocab]:
    """Validate a config object and materialize its corpus and vocabulary.

    ``vocab_size`` and ``n_languages`` are filled in from the data when the
    model section leaves them out.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"model", "train", "data", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level fields: {sorted(unknown)}")
    if "out_dir" not in raw:
        raise ConfigError("out_dir: required")
    out_dir = base_dir / raw["out_dir"]

    data = dict(_section(raw, "data"))
    kind = data.pop("kind", "cipher")
    cipher = train_tsv = valid_tsv = None
    if kind == "cipher":
        cipher = _build(CipherSource, "data", data)
        try:
            task = cipher.task()
        except ValueError as e:
            raise ConfigError(f"data: {e}") from None
        train_ex, valid_ex = gen_cipher_corpus(task, cipher.seed)
        languages = task.languages
    elif kind == "tsv":
        if "train" not in data:
            raise ConfigError("data.train: required for kind 'tsv'")
        extra = set(data) - {"train", "valid"}
        if extra:
            raise ConfigError(f"data: unknown fields {sorted(extra)}")
        train_tsv = base_dir / data["train"]
        valid_tsv = base_dir / data["valid"] if data.get("valid") else None
        for name, path in (("data.train", train_tsv), ("data.valid", valid_tsv)):
            if path is not None and not path.is_file():
                raise ConfigError(f"{name}: no such file {path}")
        try:
            train_ex = load_tsv(train_tsv)
            valid_ex = load_tsv(valid_tsv) if valid_tsv else []
        except DataError as e:
            raise ConfigError(f"data: {e}") from None
        if not train_ex:
            raise ConfigError("data.train: corpus is empty")
        languages = None
    else:
        raise ConfigError(f"data.kind: expected 'cipher' or 'tsv', got {kind!r}")

    vocab = Vocab.build(train_ex + valid_ex, languages)
    model_raw = dict(_section(raw, "model"))
    model_raw.setdefault("vocab_size", len(vocab))
    model_raw.setdefault("n_languages", len(vocab.languages))
    model = _build(ModelConfig, "model", model_raw)
    if model.vocab_size < len(vocab):
        raise ConfigError(f"model.vocab_size: {model.vocab_size} < corpus vocabulary {len(vocab)}")
    if model.n_languages < len(vocab.languages):
        raise ConfigError(f"model.n_languages: {model.n_languages} < {len(vocab.languages)} languages in data")
    train_cfg = _build(TrainConfig, "train", _section(raw, "train"))
    if train_cfg.fd_enabled and not model.has_shared_route:
        raise ConfigError(f"train.fd_enabled: strategy {model.ffn_strategy!r} has no shared route")
    cfg = RunConfig(model, train_cfg, out_dir, cipher, train_tsv, valid_tsv)
    return cfg, train_ex, valid_ex, vocab


def load_run_config(path) -> tuple[RunConfig, list, list, Vocab]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_run_config(raw, path.parent)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def execute_run(cfg: RunConfig, train_ex, valid_ex, vocab: Vocab) -> dict:
    """Train, then write ``metrics.jsonl``, ``model.npz`` and ``summary.json``."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model)
    with open(cfg.out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:

        def emit(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec.get("kind") == "eval":
                log.info("step %d %s mean accuracy %.2f", rec["step"], rec["route"], rec["mean"])

        result = train(model, train_ex, valid_ex, vocab, cfg.train, on_record=emit)
    model.save(cfg.out_dir / "model.npz")

    # final numbers come from the held-out split when there is one
    held_out = valid_ex or train_ex
    batches = eval_batches(held_out, vocab, cfg.train.eval_batch_size)
    accuracy = {route: evaluate(model, batches, vocab, route) for route in routes_for(model)}
    last = result.history[-1]
    summary = {
        "config": cfg.to_dict(),
        "steps": cfg.train.steps,
        "final_loss": last.total_loss,
        "accuracy": accuracy,
        "mean_accuracy": {route: float(np.mean(list(acc.values()))) for route, acc in accuracy.items()},
        "census": model.census(),
        "census_closed_form": model_params(cfg.model),
    }
    (cfg.out_dir / "summary.json").write_text(_dump(summary), encoding="utf-8")
    return summary


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonReport:
    deltas: dict[str, float]
    mean_delta: float
    win_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        lines = [f"{'pair':<12}{'delta':>10}"]
        lines += [f"{k:<12}{v:>+10.3f}" for k, v in self.deltas.items()]
        lines.append(f"mean delta {self.mean_delta:+.3f}   win ratio {self.win_ratio:.1f}%")
        return "\n".join(lines)


def compare(
    baseline: dict[str, float],
    candidate: dict[str, float],
) -> ComparisonReport:
    """Per-pair deltas, their mean, and the share of pairs the candidate strictly wins."""
    if set(baseline) != set(candidate):
        missing = sorted(set(baseline) ^ set(candidate))
        raise ComparisonError(f"pair inventories differ: {missing}")
    if not baseline:
        raise ComparisonError("no pairs to compare")
    pairs = sorted(baseline)
    deltas = {p: candidate[p] - baseline[p] for p in pairs}
    wins = sum(1 for p in pairs if candidate[p] > baseline[p])
    return ComparisonReport(deltas, float(np.mean(list(deltas.values()))), 100.0 * wins / len(pairs))


def _summary_accuracy(path, route: str) -> dict[str, float]:
    try:
        summary = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"summary not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    acc = summary.get("accuracy", {})
    if route not in acc:
        raise ConfigError(f"{path}: no accuracy for route {route!r} (have {sorted(acc)})")
    return acc[route]


# ---------------------------------------------------------------------------
# argparse wiring


def _cmd_run(args) -> int:
    cfg, train_ex, valid_ex, vocab = load_run_config(args.config)
    if args.out_dir:
        cfg.out_dir = Path(args.out_dir)
    summary = execute_run(cfg, train_ex, valid_ex, vocab)
    for route, mean in summary["mean_accuracy"].items():
        print(f"{route}: mean accuracy {mean:.2f}")
    print(f"wrote {cfg.out_dir / 'summary.json'}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    base = _summary_accuracy(args.baseline, args.baseline_route)
    cand = _summary_accuracy(args.candidate, args.candidate_route)
    report = compare(base, cand)
    print(_dump(report.to_dict()) if args.json else report.format_table())
    return EXIT_OK


def _cmd_budget(args) -> int:
    try:
        shape = ShapeParams(L=args.L, r=args.r, c=args.c, d=args.d, E=args.E, N=args.N)
        ratio = flops_ratio(args.r, args.c, args.d)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    report = budget_single_projection(shape)
    full = budget_full_model(shape)
    if args.json:
        out = report.to_dict()
        out["full_model_language_params"] = full
        out["flops_ratio"] = {"numerator": ratio.numerator, "denominator": ratio.denominator, "value": float(ratio)}
        print(_dump(out), end="")
    else:
        print(report.format_table())
        print(f"full model LMS params (2LNd(c+r), N={shape.N}): {full:,}")
        print(f"flops ratio rc/(d(r+c)): {render_ratio(ratio)}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    src = CipherSource(
        n_languages=args.languages,
        latent_vocab=args.latent_vocab,
        seed=args.seed,
        min_len=args.min_len,
        max_len=args.max_len,
        valid_per_pair=args.valid_per_pair,
    )
    if args.pair_sizes is not None:
        src.pair_sizes = args.pair_sizes
    elif args.languages != 4:
        src.pair_sizes = [1000] * (2 * (args.languages - 1))
    try:
        train_ex, valid_ex = gen_cipher_corpus(src.task(), args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tsv(train_ex, out)
    print(f"wrote {len(train_ex)} examples to {out}")
    if args.valid_out:
        write_tsv(valid_ex, args.valid_out)
        print(f"wrote {len(valid_ex)} examples to {args.valid_out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmsfd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration and write metrics, checkpoint and summary")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out-dir", help="override out_dir from the config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="per-pair deltas and win ratio between two run summaries")
    p.add_argument("baseline")
    p.add_argument("candidate")
    p.add_argument("--baseline-route", default="ls", choices=["ls", "shared"])
    p.add_argument("--candidate-route", default="ls", choices=["ls", "shared"])
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("budget", help="extra parameters and FLOPs per method for one projection shape")
    p.add_argument("--L", type=int, required=True, help="languages")
    p.add_argument("--r", type=int, required=True, help="projection rows")
    p.add_argument("--c", type=int, required=True, help="projection columns")
    p.add_argument("--d", type=int, required=True, help="LMS rank")
    p.add_argument("--E", type=int, default=0, help="experts for the MoE column")
    p.add_argument("--N", type=int, default=1, help="FFN layers for the full-model count")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_budget)

    p = sub.add_parser("gen-data", help="write a cipher-task corpus as TSV")
    p.add_argument("--out", required=True)
    p.add_argument("--valid-out")
    p.add_argument("--languages", type=int, default=4)
    p.add_argument("--latent-vocab", type=int, default=48)
    p.add_argument("--pair-sizes", type=int, nargs="+")
    p.add_argument("--valid-per-pair", type=int, default=64)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ComparisonError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())
