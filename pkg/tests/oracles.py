"""Independent reference implementations used by several test modules."""

import itertools
import math

import numpy as np

from eoaug.captioner import BOS, EOS, CaptionLM
from eoaug.rng import SplitMix64


def random_lm(seed: int, classes: int, vocab: int, concentration: float = 1.0) -> CaptionLM:
    r = SplitMix64(seed)
    probs = r.uniform((classes, vocab, vocab)) ** (1.0 / concentration) + 1e-3
    return CaptionLM.from_probs(probs)


def seq_logprob(lm, c, seq):
    prev, total = BOS, 0.0
    for tok in (*seq, EOS):
        total += lm.logp[c, prev, tok]
        prev = tok
    return total


def exhaustive_best(lm, c, min_len, max_len, penalty):
    """Argmax of logprob / len**penalty over every content sequence, ties to the smaller sequence."""
    best = None
    for n in range(min_len, max_len + 1):
        for seq in itertools.product(range(EOS + 1, lm.vocab_size), repeat=n):
            score = seq_logprob(lm, c, seq) / n ** penalty
            key = (-score, seq)
            if best is None or key < best:
                best = key
    return best[1], -best[0]


def greedy(lm, c, min_len, max_len, penalty):
    """Pick the single best next option (a content token or stopping) at every step.

    Options are compared by the length-normalized score of the hypothesis
    they produce; at equal score the smaller token wins (stopping counts as
    EOS, the smallest emittable token).
    """
    seq, lp = (), 0.0
    while True:
        n = len(seq)
        row = lm.logp[c, seq[-1] if seq else BOS]
        options = []
        if n >= min_len:
            options.append(((lp + row[EOS]) / max(n, 1) ** penalty, EOS))
        if n < max_len:
            for tok in range(EOS + 1, lm.vocab_size):
                options.append(((lp + row[tok]) / (n + 1) ** penalty, tok))
        score, tok = min(options, key=lambda o: (-o[0], o[1]))
        if tok == EOS:
            return seq, score
        seq, lp = seq + (tok,), lp + row[tok]


def nearest_neighbor_accuracy(train_x, train_y, test_x, test_y) -> float:
    a = train_x.reshape(len(train_x), -1)
    b = test_x.reshape(len(test_x), -1)
    d = (b * b).sum(1)[:, None] - 2 * b @ a.T + (a * a).sum(1)[None, :]
    return float(np.mean(np.asarray(train_y)[d.argmin(1)] == np.asarray(test_y)))


def binomial_interval(n: int, p: float, level: float = 0.99):
    """Central interval [lo, hi] of successes holding at least ``level`` of Binomial(n, p) mass."""
    pmf = [math.comb(n, k) * p ** k * (1 - p) ** (n - k) for k in range(n + 1)]
    tail = (1 - level) / 2
    lo, acc = 0, 0.0
    while acc + pmf[lo] <= tail:
        acc += pmf[lo]
        lo += 1
    hi, acc = n, 0.0
    while acc + pmf[hi] <= tail:
        acc += pmf[hi]
        hi -= 1
    return lo, hi
