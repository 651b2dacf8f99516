"""Trajectory sampling, preference-pair construction and the Info-DPO objective."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import model as M
from . import numerics as nx
from .evaluate import action_match, decode_steps, evaluate_policy
from .numerics import ParamStore
from .reward import RewardBundle, RewardConfig, RewardModelSet, request_for, score_bundles
from .synthgui import Step, TraceParseError, action_from_ids, label_stages, serialize_step, trace_ids
from .tokenizer import Tokenizer
from .training import Example, collate, router_norm_loss

STRATEGIES = ("cc", "cw", "lw")


# ---------------------------------------------------------------------------
# sampled sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    bundle: RewardBundle
    correct: bool


@dataclass
class SampledSet:
    step_ref: str
    prompt: tuple[int, ...]
    samples: list[Sample]
    gold: Sample

    @property
    def n_correct(self) -> int:
        return sum(s.correct for s in self.samples)


def step_stream(ref: str, k: int) -> int:
    """Sampling stream of sample ``k`` of a step; independent of batch layout."""
    return (zlib.crc32(ref.encode()) << 8) + k


def sample_sets(
    policy: ParamStore,
    cfg: M.ComeConfig,
    steps: Sequence[Step],
    tok: Tokenizer,
    rms: RewardModelSet,
    K: int = 10,
    temperature: float = 1.0,
    seed: int = 0,
    rcfg: RewardConfig = RewardConfig(),
    max_new: int = 48,
    batch_size: int = 64,
) -> list[SampledSet]:
    """Sample ``K`` traces per step and score each one (plus the gold trace)."""
    if K < 2:
        raise ValueError("K must be at least 2")
    flat = [s for s in steps for _ in range(K)]
    streams = [step_stream(s.ref, k) for s in steps for k in range(K)]
    gens = decode_steps(policy, cfg, flat, tok, batch_size, max_new, temperature, seed, streams)
    reqs = []
    for i, s in enumerate(steps):
        for k in range(K):
            reqs.append(request_for(s, gens[i * K + k].tokens, tok, cfg.max_len))
        reqs.append(request_for(s, trace_ids(s.gold_trace, tok), tok, cfg.max_len))
    bundles = score_bundles(rms, reqs, tok, rcfg)
    out = []
    for i, s in enumerate(steps):
        bboxes = [w.bbox for w in s.screen.widgets]
        samples = []
        for k in range(K):
            j = i * (K + 1) + k
            b = bundles[j]
            ok = b.well_formed and action_match(action_from_ids(reqs[j].trace, tok), s.gold_action, bboxes=bboxes)
            samples.append(Sample(reqs[j].trace, b, bool(ok)))
        g = i * (K + 1) + K
        out.append(SampledSet(s.ref, reqs[g].prompt, samples, Sample(reqs[g].trace, bundles[g], True)))
    return out


def sample_k(policy, cfg, step: Step, tok, rms, K=10, temperature=1.0, seed=0, rcfg=RewardConfig()) -> SampledSet:
    return sample_sets(policy, cfg, [step], tok, rms, K, temperature, seed, rcfg)[0]


# ---------------------------------------------------------------------------
# pair construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DpoPair:
    step_ref: str
    strategy: str
    prompt: tuple[int, ...]
    chosen: Sample
    rejected: Sample
    chosen_index: int  # -1 for the gold trace
    rejected_index: int

    def to_json(self, tok: Tokenizer) -> dict:
        def side(s: Sample) -> dict:
            return {"text": tok.decode(s.tokens), "ids": list(s.tokens), "bundle": s.bundle.to_json()}

        return {"step_ref": self.step_ref, "strategy": self.strategy, "prompt_ids": list(self.prompt),
                "chosen": side(self.chosen), "rejected": side(self.rejected),
                "chosen_index": self.chosen_index, "rejected_index": self.rejected_index}

    @classmethod
    def from_json(cls, d: dict) -> "DpoPair":
        def side(x: dict, correct: bool) -> Sample:
            return Sample(tuple(x["ids"]), RewardBundle.from_json(x["bundle"]), correct)

        return cls(d["step_ref"], d["strategy"], tuple(d["prompt_ids"]), side(d["chosen"], True),
                   side(d["rejected"], d["strategy"] == "cc"), d["chosen_index"], d["rejected_index"])


def _argbest(idx: Sequence[int], key, maximize: bool) -> int:
    # strict comparison keeps the lowest index on ties
    best = idx[0]
    for i in idx[1:]:
        if (key(i) > key(best)) if maximize else (key(i) < key(best)):
            best = i
    return best


def pair_case(ss: SampledSet) -> str:
    n = ss.n_correct
    return "cc" if n == len(ss.samples) else "lw" if n == 0 else "cw"


def build_pair(ss: SampledSet, strategies: Sequence[str] = STRATEGIES) -> DpoPair | None:
    """Chosen/rejected selection for one sampled set, or None."""
    s = ss.samples
    case = pair_case(ss)
    if case not in strategies:
        return None
    r_cot = lambda i: s[i].bundle.r_cot  # noqa: E731
    r_ig = lambda i: s[i].bundle.r_ig  # noqa: E731
    if case == "cc":
        pos = [i for i in range(len(s)) if s[i].bundle.r_ig_plus == 1]
        neg = [i for i in range(len(s)) if s[i].bundle.r_ig_plus == 0]
        if not pos or not neg:
            return None
        c, r = _argbest(pos, r_cot, True), _argbest(neg, r_ig, False)
    elif case == "cw":
        good = [i for i in range(len(s)) if s[i].correct]
        wrong = [i for i in range(len(s)) if not s[i].correct]
        pos = [i for i in good if s[i].bundle.r_ig_plus == 1] or [i for i in good if s[i].bundle.r_ig_plus == 0]
        c, r = _argbest(pos, r_cot, True), _argbest(wrong, r_ig, False)
    else:
        r = _argbest(list(range(len(s))), r_ig, False)
        return DpoPair(ss.step_ref, case, ss.prompt, ss.gold, s[r], -1, r)
    return DpoPair(ss.step_ref, case, ss.prompt, s[c], s[r], c, r)


def build_dpo_dataset(sets: Sequence[SampledSet], strategies: Sequence[str] = ("cc", "cw")) -> list[DpoPair]:
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ValueError(f"unknown strategies {sorted(unknown)}")
    return [p for p in (build_pair(ss, strategies) for ss in sets) if p is not None]


def write_pairs(path: str | Path, pairs: Sequence[DpoPair], tok: Tokenizer) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(tok), sort_keys=True) + "\n")


def read_pairs(path: str | Path) -> list[DpoPair]:
    with open(path, encoding="utf-8") as fh:
        return [DpoPair.from_json(json.loads(line)) for line in fh if line.strip()]


def write_sets(path: str | Path, sets: Sequence[SampledSet]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ss in sets:
            rec = {"step_ref": ss.step_ref, "prompt_ids": list(ss.prompt),
                   "gold": {"ids": list(ss.gold.tokens), "bundle": ss.gold.bundle.to_json()},
                   "samples": [{"ids": list(x.tokens), "bundle": x.bundle.to_json(), "correct": x.correct}
                               for x in ss.samples]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_sets(path: str | Path) -> list[SampledSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            gold = Sample(tuple(d["gold"]["ids"]), RewardBundle.from_json(d["gold"]["bundle"]), True)
            samples = [Sample(tuple(x["ids"]), RewardBundle.from_json(x["bundle"]), x["correct"]) for x in d["samples"]]
            out.append(SampledSet(d["step_ref"], tuple(d["prompt_ids"]), samples, gold))
    return out


# ---------------------------------------------------------------------------
# Info-DPO objective
# ---------------------------------------------------------------------------

def _pair_example(prompt: Sequence[int], trace: Sequence[int], tok: Tokenizer, labeled: bool) -> Example:
    ids = list(prompt) + list(trace)
    if labeled:
        stages = [int(x) for x in label_stages(ids, tok)]
    else:
        # only the output mask matters for log-probabilities
        stages = [-1] * len(prompt) + [0] * len(trace)
    return Example(tuple(ids), tuple(stages), len(prompt))


@dataclass
class PairBatch:
    chosen: object
    rejected: object

    @classmethod
    def build(cls, pairs: Sequence[DpoPair], tok: Tokenizer) -> "PairBatch":
        ch = [_pair_example(p.prompt, p.chosen.tokens, tok, True) for p in pairs]
        rj = [_pair_example(p.prompt, p.rejected.tokens, tok, False) for p in pairs]
        return cls(collate(ch, tok.pad_id), collate(rj, tok.pad_id))


def _seq_logp(logits: torch.Tensor, batch) -> torch.Tensor:
    lp = nx.token_logprobs(logits, batch.targets)
    return (lp * batch.output_mask.to(lp.dtype)).sum(-1)


@dataclass
class DpoTerms:
    total: torch.Tensor
    pref: torch.Tensor
    sft: torch.Tensor
    rnorm: torch.Tensor


def info_dpo_terms(policy: ParamStore, reference: ParamStore, cfg: M.ComeConfig, batch: PairBatch,
                   beta: float = 0.1, alpha: float = 1.0, gamma: float = 0.1) -> DpoTerms:
    """``-log sigmoid(beta (D_pol - D_ref)) + alpha L_SFT + gamma L_R-Norm``.

    ``D = log pi(chosen | X) - log pi(rejected | X)``; the SFT and router
    terms use the chosen trace only.
    """
    out_c = M.come_forward(policy, cfg, batch.chosen.tokens)
    out_r = M.come_forward(policy, cfg, batch.rejected.tokens)
    with torch.no_grad():
        ref_c = M.come_forward(reference, cfg, batch.chosen.tokens).logits
        ref_r = M.come_forward(reference, cfg, batch.rejected.tokens).logits
        d_ref = _seq_logp(ref_c, batch.chosen) - _seq_logp(ref_r, batch.rejected)
    d_pol = _seq_logp(out_c.logits, batch.chosen) - _seq_logp(out_r.logits, batch.rejected)
    pref = torch.nn.functional.softplus(-beta * (d_pol - d_ref)).mean()
    mask = batch.chosen.output_mask
    sft = nx.cross_entropy(out_c.logits, batch.chosen.targets, mask)
    rnorm = router_norm_loss(out_c.router_logits, batch.chosen.expert_labels(cfg.stage_to_expert), mask)
    return DpoTerms(pref + alpha * sft + gamma * rnorm, pref, sft, rnorm)


def info_dpo_loss(policy, reference, cfg, batch: PairBatch, beta=0.1, alpha=1.0, gamma=0.1) -> torch.Tensor:
    return info_dpo_terms(policy, reference, cfg, batch, beta, alpha, gamma).total


@dataclass
class DpoConfig:
    lr: float = 5e-5
    epochs: int = 1
    batch_size: int = 16
    beta: float = 0.1
    alpha: float = 1.0
    gamma: float = 0.1
    seed: int = 0
    clip: float = 1.0
    warmup: int = 0

    def __post_init__(self) -> None:
        if self.beta < 0 or self.alpha < 0 or self.gamma < 0:
            raise ValueError("beta, alpha and gamma must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs, batch_size and lr must be non-negative / positive")


DPO_REPORT_FIELDS = ("epoch", "loss_pref", "loss_sft", "loss_rnorm", "val_match")


def dpo_train(
    policy: ParamStore,
    reference: ParamStore,
    cfg: M.ComeConfig,
    pairs: Sequence[DpoPair],
    dc: DpoConfig,
    tok: Tokenizer,
    val_steps: Sequence[Step] = (),
) -> tuple[ParamStore, list[dict]]:
    """Epoch loop over pairs; reports mean loss terms and held-out match per epoch."""
    policy = policy.clone()
    reference = reference.clone()
    rows: list[dict] = []
    if not pairs:
        return policy, rows
    names = policy.names()
    per_epoch = math.ceil(len(pairs) / dc.batch_size)
    total = per_epoch * dc.epochs
    step = 0
    for epoch in range(dc.epochs):
        order = nx.rng(dc.seed, "dpo", "shuffle", epoch).permutation(len(pairs))
        sums = np.zeros(3)
        for i in range(0, len(pairs), dc.batch_size):
            batch = PairBatch.build([pairs[j] for j in order[i: i + dc.batch_size]], tok)
            policy.requires_grad_(names)
            t = info_dpo_terms(policy, reference, cfg, batch, dc.beta, dc.alpha, dc.gamma)
            nx.check_finite(t.total, "info-dpo loss")
            grads = torch.autograd.grad(t.total, [policy[n] for n in names], allow_unused=True)
            policy.requires_grad_([])
            gd = {n: (g if g is not None else torch.zeros_like(policy[n])) for n, g in zip(names, grads)}
            if dc.clip > 0:
                nx.clip_grads(gd, dc.clip)
            nx.adam_step(policy, gd, nx.cosine_lr(step, total, dc.lr, dc.warmup))
            step += 1
            sums += [float(t.pref.detach()), float(t.sft.detach()), float(t.rnorm.detach())]
        row = {"epoch": epoch, "loss_pref": sums[0] / per_epoch, "loss_sft": sums[1] / per_epoch,
               "loss_rnorm": sums[2] / per_epoch, "val_match": math.nan}
        if val_steps:
            row["val_match"] = evaluate_policy(policy, cfg, val_steps, tok)[0].match_acc
        rows.append(row)
    return policy, rows
