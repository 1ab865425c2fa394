"""The synthetic translation task that stands in for real multilingual data.

Every language is a permutation of one latent vocabulary, so translating
from language i to j means applying perm_j after inverse(perm_i). The
knowledge needed is specific to the pair, which is what pair-wise
synthesis is built to capture.
"""

from collections import Counter

import numpy as np

from lmsfd.data import default_task, gen_cipher_corpus, make_batches, temperature_sample, Vocab

task = default_task(seed=0)
train, valid = gen_cipher_corpus(task, seed=0)
print(f"{task.n_languages} languages, {task.latent_vocab} latent words, pairs {task.pairs}")
print(f"train sizes {task.pair_sizes}, {len(valid)} validation sentences")

ex = train[0]
print("\nexample", ex.pair)
print("  src:", " ".join(ex.src))
print("  tgt:", " ".join(ex.tgt))

# a lookup table solves the task perfectly
words = lambda toks: np.array([int(t[1:]) for t in toks])  # noqa: E731
solved = sum(
    np.array_equal(task.translate(words(e.src[1:]), int(e.src_lang[1:]), int(e.tgt_lang[1:])), words(e.tgt))
    for e in valid
)
print(f"\nlookup oracle: {solved}/{len(valid)} validation sentences exact")

# temperature sampling flattens the skewed pair sizes
for T in (1, 5, 100):
    print(f"T={T:<4}", np.round(temperature_sample(task.pair_sizes, T), 3))

vocab = Vocab.build(train + valid, task.languages)
stream = make_batches(train, vocab, batch_size=32, temperature=5.0, seed=0)
seen = Counter(next(stream).pair for _ in range(2000))
print("\nfirst 2000 batches by pair (index form):", dict(sorted(seen.items())))
