"""Reference implementations used only by the tests.

They deliberately avoid the package's batching, segmentation and selection
helpers so that agreement is evidence of correctness.
"""

from __future__ import annotations

import itertools
import math
import re

import torch

from come import model as M

_SEG = re.compile(r"<(SS|SP|AD|AF)> (.*?) </\1>")


def segment_texts(trace_text: str) -> list[str]:
    """Delimited stage segments found by regex on the decoded trace."""
    found = [m.group(0) for m in _SEG.finditer(trace_text)]
    if len(found) != 4:
        raise ValueError("trace does not contain four segments")
    return found


@torch.no_grad()
def prefix_logprob(rm, cfg, context: list[int], target: list[int]) -> float:
    """Sum of log-probs, one forward per target token on the growing prefix."""
    total = 0.0
    seq = list(context)
    for t in target:
        logits = M.dense_forward(rm, cfg.dense(), torch.tensor([seq]))[0, -1].double()
        total += float(logits[t] - torch.logsumexp(logits, 0))
        seq.append(t)
    return total


def ig_oracle(models64, cfg, tok, prompt: list[int], trace_text: str, target_text: str) -> list[float]:
    """Three stage gains, contexts rebuilt from text."""
    segs = segment_texts(trace_text)
    target = tok.encode(target_text)
    logp = []
    for k in range(4):
        ctx = list(prompt) + (tok.encode(" ".join(segs[:k])) if k else [])
        logp.append(prefix_logprob(models64[k], cfg, ctx, target))
    return [logp[s + 1] - logp[s] for s in range(3)]


def brute_force_pair(samples, strategies):
    """Enumerate every (chosen, rejected) index pair and keep the one the rules admit.

    ``samples`` is a list of ``(correct, r_ig_plus, r_cot, r_ig)``.  Returns
    ``(case, chosen, rejected)`` with chosen ``-1`` meaning the gold trace, or None.
    """
    n = len(samples)
    n_ok = sum(1 for s in samples if s[0])
    case = "cc" if n_ok == n else ("lw" if n_ok == 0 else "cw")
    if case not in strategies:
        return None

    def wins(i, pool, key, maximize):
        # i beats every other member (strictly better, or equal with a higher index)
        for j in pool:
            if j == i:
                continue
            a, b = key(i), key(j)
            if (b > a if maximize else b < a) or (a == b and j < i):
                return False
        return True

    cot = lambda i: samples[i][2]  # noqa: E731
    ig = lambda i: samples[i][3]  # noqa: E731
    if case == "lw":
        pool = range(n)
        return [(case, -1, r) for r in pool if wins(r, pool, ig, False)][0]
    if case == "cc":
        chosen_pool = [i for i in range(n) if samples[i][1] == 1]
        rej_pool = [i for i in range(n) if samples[i][1] == 0]
    else:
        ok = [i for i in range(n) if samples[i][0]]
        plus = [i for i in ok if samples[i][1] == 1]
        chosen_pool = plus if plus else ok
        rej_pool = [i for i in range(n) if not samples[i][0]]
    hits = [(case, c, r) for c, r in itertools.product(chosen_pool, rej_pool)
            if wins(c, chosen_pool, cot, True) and wins(r, rej_pool, ig, False)]
    assert len(hits) <= 1
    return hits[0] if hits else None


def random_bundle_values(gen, n, n_levels=3):
    """Random per-sample values on a coarse grid so that ties are common."""
    out = []
    for _ in range(n):
        correct = bool(gen.random() < 0.5)
        gains = [float(gen.integers(-n_levels, n_levels + 1)) / 10 for _ in range(3)]
        acc = float(gen.integers(1, 4)) / 3 if correct else 0.0
        out.append((correct, gains, acc))
    return out


def dpo_loss_oracle(lp_pc, lp_pr, lp_rc, lp_rr, beta):
    """Per-pair preference loss from scalar log-probs."""
    out = []
    for a, b, c, d in zip(lp_pc, lp_pr, lp_rc, lp_rr):
        z = beta * ((a - b) - (c - d))
        out.append(math.log1p(math.exp(-z)) if z > -30 else -z)
    return sum(out) / len(out)
