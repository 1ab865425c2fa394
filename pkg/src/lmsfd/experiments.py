"""The synthetic-task ordering experiment shared by the calibration demo and the acceptance suite.

Four variants are trained on the default cipher task with one step budget:
a dense baseline, pair-wise and language-wise LMS, and LMS+FD evaluated on
both routes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .data import Vocab, default_task, gen_cipher_corpus
from .model import ModelConfig, build_model
from .training import TrainConfig, train

VARIANTS: dict[str, dict] = {
    "dense": {"ffn_strategy": "dense"},
    "lms_pair": {"ffn_strategy": "lms", "lms_mode": "pair-wise"},
    "lms_lang": {"ffn_strategy": "lms", "lms_mode": "language-wise"},
    "lms_fd": {"ffn_strategy": "lms_fd", "lms_mode": "pair-wise"},
}

# A model narrow enough that the dense baseline is still short of its ceiling
# when the budget runs out, and a validation set large enough (256 sentences
# per pair) that the evaluation noise sits well under the gaps being compared.
ORDERING_MODEL = {"embed_dim": 32, "ffn_dim": 64}
ORDERING_VALID_PER_PAIR = 256
ORDERING_TRAIN = TrainConfig(steps=2400, batch_size=32, lr=3e-3, warmup=100, temperature=5.0, eval_batch_size=128)


@dataclass
class VariantResult:
    variant: str
    seed: int
    steps: int
    seconds: float
    curve: list[dict]  # {"step", "route", "mean"} for every evaluation

    def mean_at(self, step: int | None = None, route: str = "ls") -> float:
        rows = [r for r in self.curve if r["route"] == route and (step is None or r["step"] == step)]
        if not rows:
            raise KeyError(f"no evaluation for route {route!r} at step {step}")
        return rows[-1]["mean"]


def ordering_corpus(seed: int):
    task = replace(default_task(seed), valid_per_pair=ORDERING_VALID_PER_PAIR)
    train_ex, valid_ex = gen_cipher_corpus(task, seed)
    return train_ex, valid_ex, Vocab.build(train_ex + valid_ex, task.languages)


def run_variant(
    variant: str,
    seed: int,
    steps: int | None = None,
    eval_every: int | None = None,
    base: TrainConfig = ORDERING_TRAIN,
) -> VariantResult:
    """Train one variant on the seed's task; evaluate every ``eval_every`` steps (default: only at the end)."""
    train_ex, valid_ex, vocab = ordering_corpus(seed)
    steps = steps or base.steps
    cfg = replace(
        base,
        steps=steps,
        eval_every=eval_every or steps,
        seed=seed,
        fd_enabled=VARIANTS[variant]["ffn_strategy"] == "lms_fd",
    )
    model = build_model(ModelConfig(vocab_size=len(vocab), n_languages=4, seed=seed, **ORDERING_MODEL, **VARIANTS[variant]))
    t0 = time.perf_counter()
    result = train(model, train_ex, valid_ex, vocab, cfg)
    seconds = time.perf_counter() - t0
    curve = [{"step": e["step"], "route": e["route"], "mean": e["mean"]} for e in result.evals]
    return VariantResult(variant, seed, steps, seconds, curve)


@dataclass
class OrderingVerdict:
    lms_beats_dense: list[bool]
    pair_ge_lang: list[bool]
    share_ge_dense: list[bool]
    share_close_to_ls: list[bool]

    @property
    def a(self) -> bool:
        return all(self.lms_beats_dense)

    @property
    def b(self) -> bool:
        return sum(self.pair_ge_lang) >= 2

    @property
    def c(self) -> bool:
        return all(self.share_ge_dense) and all(self.share_close_to_ls)


def judge(results: dict[tuple[str, int], VariantResult], seeds, step: int | None = None, gap: float = 2.0) -> OrderingVerdict:
    """Apply the three ordering checks to per-(variant, seed) results at one step."""
    v = OrderingVerdict([], [], [], [])
    for s in seeds:
        dense = results["dense", s].mean_at(step)
        pair = results["lms_pair", s].mean_at(step)
        lang = results["lms_lang", s].mean_at(step)
        fd_ls = results["lms_fd", s].mean_at(step, "ls")
        fd_sh = results["lms_fd", s].mean_at(step, "shared")
        v.lms_beats_dense.append(pair > dense)
        v.pair_ge_lang.append(pair >= lang)
        v.share_ge_dense.append(fd_sh >= dense)
        v.share_close_to_ls.append(fd_sh >= fd_ls - gap)
    return v


def table(results: dict[tuple[str, int], VariantResult], seeds, step: int | None = None) -> str:
    cols = ["dense", "lms_pair", "lms_lang", "fd_ls", "fd_share"]
    lines = [f"{'seed':<6}" + "".join(f"{c:>10}" for c in cols)]
    for s in seeds:
        row = [
            results["dense", s].mean_at(step),
            results["lms_pair", s].mean_at(step),
            results["lms_lang", s].mean_at(step),
            results["lms_fd", s].mean_at(step, "ls"),
            results["lms_fd", s].mean_at(step, "shared"),
        ]
        lines.append(f"{s:<6}" + "".join(f"{x:>10.2f}" for x in row))
    means = np.mean([[float(x) for x in ln.split()[1:]] for ln in lines[1:]], axis=0)
    lines.append(f"{'mean':<6}" + "".join(f"{x:>10.2f}" for x in means))
    return "\n".join(lines)
