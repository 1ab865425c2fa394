"""Acceptance gate: one test and one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``. Criterion 7 trains
twelve models and takes the bulk of the time.
"""

import json
import time
from fractions import Fraction

import numpy as np
import pytest

from lmsfd import numerics as nx
from lmsfd.budget import ShapeParams, budget_full_model, budget_single_projection, flops_ratio, model_params
from lmsfd.cli import main
from lmsfd.data import default_task, gen_cipher_corpus, make_batches, temperature_sample, Vocab
from lmsfd.experiments import ORDERING_TRAIN, VARIANTS, judge, run_variant, table
from lmsfd.lms import new_lms_linear
from lmsfd.model import PLACEMENTS, STRATEGIES, ModelConfig, build_model
from lmsfd.training import fd_losses

from toy import frozen_teacher_loss, perturb, random_batch, tiny

SEEDS = (0, 1, 2)


def test_criterion_1_budget_exactness(report, capsys):
    t0 = time.perf_counter()
    code = main(["budget", "--L", "15", "--r", "4096", "--c", "1024", "--E", "8", "--d", "32", "--json"])
    seconds = time.perf_counter() - t0
    m = json.loads(capsys.readouterr().out)["methods"]
    got = (
        m["ls"]["train_extra_params"],
        m["moe"]["train_extra_params"],
        m["lms"]["train_extra_params"],
        m["lms_fd"]["inference_extra_params"],
    )
    ok = code == 0 and got == (62_914_560, 33_554_432, 2_457_600, 163_840) and seconds < 1
    assert report(1, ok, f"LS/MoE/LMS/FD-inference = {got} in {seconds:.3f}s")


def test_criterion_2_flops_ratio(report):
    t0 = time.perf_counter()
    ratio = flops_ratio(2048, 512, 20)
    seconds = time.perf_counter() - t0
    ok = ratio == Fraction(2048, 100) and float(ratio) == 20.48 and round(ratio) == 20 and seconds < 1
    assert report(2, ok, f"rc/(d(r+c)) = {ratio} = {float(ratio)} in {seconds:.4f}s")


def _random_configs(n=20, seed=0):
    rng = np.random.default_rng(seed)
    combos = [(s, "ffn_only") for s in STRATEGIES] + [(s, p) for s in ("lms", "lms_fd") for p in PLACEMENTS[1:]]
    configs = []
    for i in range(n):
        strategy, placement = combos[i] if i < len(combos) else combos[rng.integers(len(combos))]
        heads = int(rng.choice([1, 2, 4]))
        c = heads * int(rng.integers(2, 6)) * 2
        r = int(rng.integers(c, 3 * c))
        configs.append(
            ModelConfig(
                vocab_size=int(rng.integers(12, 40)),
                embed_dim=c,
                ffn_dim=r,
                n_layers=int(rng.integers(1, 4)),
                n_heads=heads,
                n_languages=int(rng.integers(2, 6)),
                ffn_strategy=strategy,
                lms_rank=int(rng.integers(1, min(c, r) // 2 + 1)),
                lms_mode=str(rng.choice(["pair-wise", "language-wise"])),
                placement=placement,
                n_experts=int(rng.integers(1, 5)),
                seed=i,
            )
        )
    return configs


def test_criterion_3_census_equals_closed_form(report):
    t0 = time.perf_counter()
    mismatches = []
    for cfg in _random_configs():
        model = build_model(cfg)
        census = model.census()
        if census != model_params(cfg):
            mismatches.append((cfg.ffn_strategy, cfg.placement, "census"))
        # per-side language-specific weights against the budget formulas directly
        side = model.census_by_side()
        N, L, c, r, d = cfg.n_layers, cfg.n_languages, cfg.embed_dim, cfg.ffn_dim, cfg.lms_rank
        n_dense = N - (N // 2 if cfg.ffn_strategy == "switch_top1" else 0)
        expected = 0
        if cfg.lms_on_ffn():
            expected += budget_full_model(ShapeParams(L=L, r=r, c=c, d=d, N=n_dense))
        if cfg.lms_on_attn():
            blocks_per_side = {"enc": 1, "dec": 2}
            per = budget_single_projection(ShapeParams(L=L, r=c, c=c, d=d)).methods["lms"].train_extra_params
            attn = {k: 4 * N * b * per for k, b in blocks_per_side.items()}
        else:
            attn = {"enc": 0, "dec": 0}
        if cfg.ffn_strategy == "full_rank_ls":
            expected += 2 * N * budget_single_projection(ShapeParams(L=L, r=r, c=c, d=0)).methods["ls"].train_extra_params
        if side != {k: expected + attn[k] for k in side}:
            mismatches.append((cfg.ffn_strategy, cfg.placement, "per-side"))
    seconds = time.perf_counter() - t0
    spanned = {(c.ffn_strategy, c.placement) for c in _random_configs()}
    ok = not mismatches and seconds < 10 and len(spanned) == 9
    assert report(3, ok, f"20 configs, {len(spanned)} strategy/placement combos, mismatches={mismatches}, {seconds:.2f}s")


def test_criterion_4_zero_init_identity(report):
    t0 = time.perf_counter()
    task = default_task(0)
    train_ex, valid_ex = gen_cipher_corpus(task, 0)
    vocab = Vocab.build(train_ex + valid_ex, task.languages)
    stream = make_batches(train_ex, vocab, 16, 5.0, seed=11)
    batches = [next(stream) for _ in range(10)]
    cfg = dict(vocab_size=len(vocab), n_languages=4)
    dense = build_model(ModelConfig(**cfg))
    worst = 0.0
    equal = True
    for strategy in ("lms", "lms_fd"):
        model = build_model(ModelConfig(ffn_strategy=strategy, **cfg))
        for b in batches:
            ref = dense.forward(b).logits.value
            for route in ("ls", "shared") if strategy == "lms_fd" else ("ls",):
                out = model.forward(b, route).logits.value
                equal &= np.array_equal(out, ref)
                worst = max(worst, float(np.abs(out - ref).max()))
    seconds = time.perf_counter() - t0
    assert report(4, equal and seconds < 10, f"10 batches, lms and lms_fd (both routes), max |diff| = {worst}, {seconds:.2f}s")


def _probe(model):
    keep = ("embed", "enc.0.ffn.up.", "dec.1.ffn.down.", "dec.0.cross_attn.q.base", "enc.1.norm2.gain")
    return [p for n, p in model.params.items() if n.startswith(keep)]


def test_criterion_5_gradient_fidelity(report):
    t0 = time.perf_counter()
    errs = {"lms_forward": [], "eq3_total": [], "eq4_total": []}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        layer = new_lms_linear(6, 5, 2, 3, "pair-wise", True, seed=seed)
        for p in layer.parameters():
            p.value += rng.normal(scale=0.3, size=p.shape)
        x = nx.parameter(rng.normal(size=(5, 4)))
        w = nx.constant(rng.normal(size=(6, 4)))
        for route in ("ls", "shared"):
            build = lambda: nx.total(nx.mul(layer.forward(x, 0, 2, route), w))  # noqa: E731
            errs["lms_forward"].append(nx.grad_check(build, layer.parameters() + [x]))

        model = build_model(tiny(ffn_strategy="full_rank_ls"))
        perturb(model, seed=seed)
        b = random_batch(seed, size=2)
        real = fd_losses(model, b, symmetric=False).total
        for p in model.parameters():
            p.zero_grad()
        real.backward()
        g_real = [p.grad.copy() for p in model.parameters()]
        build = frozen_teacher_loss(model, b)
        for p in model.parameters():
            p.zero_grad()
        build().backward()
        same = all(np.allclose(a, p.grad, atol=1e-13, rtol=0) for a, p in zip(g_real, model.parameters()))
        errs["eq3_total"].append(nx.grad_check(build, _probe(model), eps=1e-5, max_entries=4, seed=seed) if same else np.inf)

        model = build_model(tiny(ffn_strategy="lms_fd"))
        perturb(model, seed=seed)
        b = random_batch(seed, size=2)
        build = lambda: fd_losses(model, b, symmetric=True).total  # noqa: E731
        errs["eq4_total"].append(nx.grad_check(build, _probe(model), eps=1e-5, max_entries=4, seed=seed))
    seconds = time.perf_counter() - t0
    worst = {k: max(v) for k, v in errs.items()}
    ok = all(v < 1e-5 for v in worst.values()) and seconds < 30
    assert report(5, ok, "max rel err " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f", 5 seeds, {seconds:.1f}s")


def test_criterion_6_stop_gradient_contract(report):
    t0 = time.perf_counter()
    zero = True
    both = True
    for seed in range(5):
        b = random_batch(100 + seed)
        for strategy in ("full_rank_ls", "lms_fd"):
            model = build_model(tiny(ffn_strategy=strategy))
            perturb(model, seed=seed)
            for p in model.parameters():
                p.zero_grad()
            fd_losses(model, b, symmetric=False).fd.backward()
            for p in model.language_parameters():
                zero &= bool((p.grad == 0).all())
        model = build_model(tiny(ffn_strategy="lms_fd"))
        perturb(model, seed=seed)
        for p in model.parameters():
            p.zero_grad()
        fd_losses(model, b, symmetric=True).fd.backward()
        ls = [model.params[n] for n in model.params if n.endswith((f".flat.{b.tgt_lang}", f".vertical.{b.src_lang}"))]
        shared = model.shared_factor_parameters()
        both &= all(np.abs(p.grad).max() > 0 for p in ls + shared)
    seconds = time.perf_counter() - t0
    ok = zero and both and seconds < 10
    assert report(6, ok, f"stop-gradient LS grads exactly zero: {zero}; symmetric reaches both routes: {both}; {seconds:.2f}s")


@pytest.fixture(scope="module")
def ordering():
    results = {}
    for seed in SEEDS:
        for variant in VARIANTS:
            results[variant, seed] = run_variant(variant, seed)
    return results


def test_criterion_7_synthetic_task_ordering(report, ordering):
    v = judge(ordering, SEEDS)
    slowest = max(r.seconds for r in ordering.values())
    print(table(ordering, SEEDS))
    ok = v.a and v.b and v.c and slowest < 300
    detail = (
        f"{ORDERING_TRAIN.steps} steps x 3 seeds; "
        f"(a) {v.a} {v.lms_beats_dense}; (b) {v.b} {v.pair_ge_lang}; "
        f"(c) {v.c} share>=dense {v.share_ge_dense} share>=ls-2 {v.share_close_to_ls}; "
        f"slowest run {slowest:.0f}s"
    )
    assert report(7, ok, detail)


def test_criterion_8_homogeneity_and_sampling(report):
    t0 = time.perf_counter()
    task = default_task(0)
    train_ex, _ = gen_cipher_corpus(task, 0)
    vocab = Vocab.build(train_ex, task.languages)
    stream = make_batches(train_ex, vocab, 32, 5.0, seed=0)
    counts = dict.fromkeys(task.pairs, 0)
    homogeneous = True
    for _ in range(10_000):
        b = next(stream)
        homogeneous &= np.ndim(b.src_lang) == 0 and b.pair in counts
        counts[b.pair] += 1
    expected = temperature_sample(task.pair_sizes, 5.0)
    gap = max(abs(counts[p] / 10_000 - e) for p, e in zip(task.pairs, expected))
    seconds = time.perf_counter() - t0
    ok = homogeneous and gap < 0.02 and seconds < 20
    assert report(8, ok, f"10,000 batches single-pair: {homogeneous}; max |freq - p| = {gap:.4f}; {seconds:.2f}s")


def test_criterion_9_determinism(report, tmp_path):
    identical = []
    for strategy in ("lms_fd", "switch_top1"):
        cfg = {
            "model": {"ffn_strategy": strategy, "embed_dim": 32, "ffn_dim": 64},
            "train": {"steps": 20, "batch_size": 16, "eval_every": 10, "fd_enabled": strategy == "lms_fd"},
            "data": {"kind": "cipher", "seed": 3},
            "out_dir": f"out-{strategy}",
        }
        path = tmp_path / f"{strategy}.json"
        path.write_text(json.dumps(cfg))
        blobs = []
        for _ in range(2):
            assert main(["run", "--config", str(path)]) == 0
            blobs.append((tmp_path / f"out-{strategy}" / "summary.json").read_bytes())
        identical.append(blobs[0] == blobs[1])
    assert report(9, all(identical), f"lms_fd and switch_top1 runs repeated: byte-identical summaries {identical}")
