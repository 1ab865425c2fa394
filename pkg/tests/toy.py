"""Small shared fixtures: a 3-language cipher corpus and tiny model configs."""

import numpy as np

from lmsfd.data import CipherTask, Vocab, gen_cipher_corpus, make_batch
from lmsfd.model import ModelConfig

TASK = CipherTask.random(3, 10, seed=0, min_len=2, max_len=5, pair_sizes=40, valid_per_pair=8)
TRAIN, VALID = gen_cipher_corpus(TASK, seed=0)
VOCAB = Vocab.build(TRAIN + VALID, TASK.languages)


def tiny(**kw) -> ModelConfig:
    base = dict(
        vocab_size=len(VOCAB),
        embed_dim=8,
        ffn_dim=16,
        n_layers=2,
        n_heads=2,
        n_languages=3,
        lms_rank=2,
        n_experts=3,
    )
    base.update(kw)
    return ModelConfig(**base)


def random_batch(seed: int, size: int = 3):
    """A homogeneous batch of ``size`` training examples for one random pair."""
    rng = np.random.default_rng(seed)
    pairs = sorted({ex.pair for ex in TRAIN})
    pair = pairs[rng.integers(len(pairs))]
    pool = [ex for ex in TRAIN if ex.pair == pair]
    idx = rng.choice(len(pool), size=size, replace=False)
    return make_batch([pool[i] for i in idx], VOCAB)


def perturb(model, scale: float = 0.1, seed: int = 0) -> None:
    """Move every parameter off its init so zero factors stop hiding bugs."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.value += rng.normal(scale=scale, size=p.value.shape)


def frozen_teacher_loss(model, batch, ce_weight=0.5, fd_weight=1.0):
    """Stop-gradient distillation loss rebuilt with the teacher as a constant.

    Finite differences cannot see a detach, so the gradient of the real loss
    is compared against this function, whose teacher is frozen at the values
    it had when the closure was made.
    """
    from lmsfd import numerics as nx
    from lmsfd.data import PAD

    teacher = nx.constant(model.forward(batch, "ls").logits.value.copy())

    def build():
        out_l = model.forward(batch, "ls")
        out_s = model.forward(batch, "shared")
        ce = nx.add(nx.cross_entropy(out_l.logits, out_l.targets, PAD), nx.cross_entropy(out_s.logits, out_s.targets, PAD))
        return nx.add(nx.scale(ce, ce_weight), nx.scale(nx.kl_rows(teacher, out_s.logits), fd_weight))

    return build
