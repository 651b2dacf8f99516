"""Stage-conditioned reward models, InfoGain and the action accuracy reward.

``RM_k`` (k = 0..3) is a dense LM that predicts the action-function segment
from the prompt plus the first ``k`` reasoning stages.  The InfoGain of
stage ``s`` (SS, SP, AD) is ``log pi_RM(s+1)(T_af | X, T[0:s+1]) -
log pi_RM(s)(T_af | X, T[0:s])``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from . import model as M
from .numerics import ParamStore
from .synthgui import (
    Action,
    StageId,
    Step,
    TraceParseError,
    action_from_ids,
    serialize_step,
    split_segments,
    token_f1,
    trace_ids,
)
from .tokenizer import STAGE_TAGS, Tokenizer
from .training import Example, TrainConfig, dense_sft_loss, collate, evaluate_dense, fit

N_RM = 4
IG_STAGES = (StageId.SS, StageId.SP, StageId.AD)


@dataclass(frozen=True)
class RewardConfig:
    delta_d: float = 50.0
    delta_f: float = 0.5
    mode: str = "continuous"
    training_free: bool = False
    ig_target: str = "gold"  # score the gold action function or the trace's own

    def __post_init__(self) -> None:
        if self.delta_d <= 0:
            raise ValueError("delta_d must be positive")
        if not 0 <= self.delta_f <= 1:
            raise ValueError("delta_f must lie in [0, 1]")
        if self.mode not in ("continuous", "discrete"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if self.ig_target not in ("gold", "own"):
            raise ValueError(f"unknown ig_target {self.ig_target!r}")


# ---------------------------------------------------------------------------
# action accuracy reward
# ---------------------------------------------------------------------------

def r_acc(pred: Action, gold: Action, cfg: RewardConfig = RewardConfig()) -> float:
    """Action-level accuracy reward in ``[0, 1]``."""
    if pred.malformed or pred.kind != gold.kind:
        value = 0.0
    elif gold.kind == "CLICK":
        value = 1.0 - min(math.dist((pred.x, pred.y), (gold.x, gold.y)) / cfg.delta_d, 1.0)
    elif gold.kind == "TYPE":
        f1 = token_f1(pred.arg, gold.arg)
        value = max(f1, 0.0) if f1 > cfg.delta_f else 0.0
    else:
        value = float(pred == gold)
    if cfg.mode == "discrete":
        return 1.0 if value > 0 else 0.0
    return value


# ---------------------------------------------------------------------------
# reward model data and training
# ---------------------------------------------------------------------------

def rm_context(prompt: Sequence[int], segments: dict[str, list[int]], k: int) -> list[int]:
    """Prompt followed by the first ``k`` stage segments."""
    out = list(prompt)
    for tag in STAGE_TAGS[:k]:
        out += segments[tag]
    return out


def rm_example(prompt: Sequence[int], segments: dict[str, list[int]], k: int, target: Sequence[int]) -> Example:
    ctx = rm_context(prompt, segments, k)
    ids = ctx + list(target)
    stages = [-1] * len(ctx) + [int(StageId.AF)] * len(target)
    return Example(tuple(ids), tuple(stages), len(ctx))


def build_rm_examples(steps: Sequence[Step], tok: Tokenizer, k: int, max_len: int = 256) -> list[Example]:
    out = []
    for s in steps:
        tr = trace_ids(s.gold_trace, tok)
        seg = split_segments(tr, tok)
        prompt = serialize_step(s, tok, max_len, len(tr)).ids
        out.append(rm_example(prompt, seg, k, seg["AF"]))
    return out


def train_rm(k: int, init: ParamStore, cfg: M.ComeConfig, train: Sequence[Example], tc: TrainConfig, pad_id: int,
             val: Sequence[Example] = ()) -> tuple[ParamStore, list[float]]:
    """Fine-tune a dense LM on ``(X, T[0:k]) -> T_af``; returns per-epoch val NLL."""
    if not 0 <= k < N_RM:
        raise ValueError("reward model index must be in 0..3")
    p = init.clone()
    losses: list[float] = []

    def report(epoch: int) -> None:
        if val:
            losses.append(evaluate_dense(p, cfg, list(val), pad_id, int(StageId.AF)))

    fit(p, p.names(), len(train), lambda idx: collate([train[i] for i in idx], pad_id),
        lambda s, b: dense_sft_loss(s, cfg, b, int(StageId.AF)), tc, f"rm{k}", report)
    return p, losses


@dataclass
class RewardModelSet:
    """Four stage-conditioned dense LMs (one shared LM when training-free)."""

    models: list[ParamStore]
    cfg: M.ComeConfig

    def __post_init__(self) -> None:
        if len(self.models) != N_RM:
            raise ValueError("a reward model set holds exactly four models")
        # scoring runs in float64 so batched and single-sequence results agree
        cache: dict[int, ParamStore] = {}
        self._scoring = [cache.setdefault(id(m), m.clone(torch.float64)) for m in self.models]

    @classmethod
    def training_free(cls, base: ParamStore, cfg: M.ComeConfig) -> "RewardModelSet":
        return cls([base] * N_RM, cfg)

    def scoring(self, k: int) -> ParamStore:
        return self._scoring[k]


# ---------------------------------------------------------------------------
# sequence log-probabilities
# ---------------------------------------------------------------------------

def _validate(context: Sequence[int], target: Sequence[int], vocab: int) -> None:
    if not target:
        raise ValueError("target must be non-empty")
    if not context:
        raise ValueError("context must be non-empty")
    if any(t < 0 or t >= vocab for t in list(context) + list(target)):
        raise ValueError("token id out of vocabulary")


@torch.no_grad()
def seq_logprobs(rm: ParamStore, cfg: M.ComeConfig, items: Sequence[tuple[Sequence[int], Sequence[int]]],
                 pad_id: int = 0, batch_size: int = 64) -> np.ndarray:
    """Teacher-forced ``sum_t log p(target_t | context, target_<t)`` per item, in nats."""
    dcfg = cfg.dense()
    out = np.zeros(len(items), dtype=np.float64)
    order = sorted(range(len(items)), key=lambda i: len(items[i][0]) + len(items[i][1]))
    for start in range(0, len(order), batch_size):
        idx = order[start: start + batch_size]
        seqs = []
        for i in idx:
            ctx, tgt = items[i]
            _validate(ctx, tgt, dcfg.vocab_size)
            seqs.append(list(ctx) + list(tgt))
        n = max(len(s) for s in seqs)
        tokens = torch.full((len(seqs), n), pad_id, dtype=torch.long)
        for r, s in enumerate(seqs):
            tokens[r, : len(s)] = torch.tensor(s)
        logp = torch.log_softmax(M.dense_forward(rm, dcfg, tokens[:, :-1]).double(), -1)
        for r, i in enumerate(idx):
            ctx, tgt = items[i]
            pos = torch.arange(len(ctx) - 1, len(ctx) + len(tgt) - 1)
            out[i] = float(logp[r, pos, torch.tensor(list(tgt))].sum())
    return out


def seq_logprob(rm: ParamStore, cfg: M.ComeConfig, context: Sequence[int], target: Sequence[int]) -> float:
    return float(seq_logprobs(rm, cfg, [(context, target)])[0])


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardBundle:
    ig_ss: float
    ig_sp: float
    ig_ad: float
    r_ig: float
    r_ig_plus: int
    r_acc: float
    r_cot: float
    well_formed: bool = True

    @classmethod
    def from_gains(cls, gains: Sequence[float], acc: float) -> "RewardBundle":
        ig_ss, ig_sp, ig_ad = (float(g) for g in gains)
        r_ig = ig_ss + ig_sp + ig_ad
        plus = int(ig_ss > 0 and ig_sp > 0 and ig_ad > 0)
        return cls(ig_ss, ig_sp, ig_ad, r_ig, plus, float(acc), r_ig * float(acc))

    @classmethod
    def malformed(cls) -> "RewardBundle":
        return cls(0.0, 0.0, 0.0, 0.0, 0, 0.0, 0.0, False)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RewardBundle":
        return cls(**d)


@dataclass(frozen=True)
class ScoreRequest:
    prompt: tuple[int, ...]
    trace: tuple[int, ...]  # generated or gold trace tokens (may end in <eos>)
    gold: Action
    gold_af: tuple[int, ...]  # gold action-function segment, delimiters included


def request_for(step: Step, trace: Sequence[int], tok: Tokenizer, max_len: int = 256) -> ScoreRequest:
    gold_tr = trace_ids(step.gold_trace, tok)
    prompt = serialize_step(step, tok, max_len, len(gold_tr)).ids
    return ScoreRequest(tuple(prompt), tuple(int(t) for t in trace), step.gold_action,
                        tuple(split_segments(gold_tr, tok)["AF"]))


def ig_queries(req: ScoreRequest, tok: Tokenizer, cfg: RewardConfig) -> list[tuple[int, list[int], list[int]]] | None:
    """The four ``(rm index, context, target)`` log-prob queries of one trace, or None if malformed."""
    try:
        seg = split_segments(list(req.trace), tok)
    except TraceParseError:
        return None
    target = list(req.gold_af) if cfg.ig_target == "gold" else seg["AF"]
    return [(k, rm_context(req.prompt, seg, k), target) for k in range(N_RM)]


def score_bundles(rms: RewardModelSet, reqs: Sequence[ScoreRequest], tok: Tokenizer,
                  cfg: RewardConfig = RewardConfig()) -> list[RewardBundle]:
    """Score many traces with batched reward-model queries."""
    queries = [ig_queries(r, tok, cfg) for r in reqs]
    per_rm: list[list[tuple[int, list[int], list[int]]]] = [[] for _ in range(N_RM)]
    for qi, q in enumerate(queries):
        if q is not None:
            for k, ctx, tgt in q:
                per_rm[k].append((qi, ctx, tgt))
    logp = np.zeros((len(reqs), N_RM), dtype=np.float64)
    for k in range(N_RM):
        if per_rm[k]:
            vals = seq_logprobs(rms.scoring(k), rms.cfg, [(c, t) for _, c, t in per_rm[k]], tok.pad_id)
            for (qi, _, _), v in zip(per_rm[k], vals):
                logp[qi, k] = v
    out = []
    for qi, (req, q) in enumerate(zip(reqs, queries)):
        if q is None:
            out.append(RewardBundle.malformed())
            continue
        gains = [logp[qi, s + 1] - logp[qi, s] for s in range(3)]
        acc = r_acc(action_from_ids(list(req.trace), tok), req.gold, cfg)
        out.append(RewardBundle.from_gains(gains, acc))
    return out


def score_bundle(rms: RewardModelSet, req: ScoreRequest, tok: Tokenizer, cfg: RewardConfig = RewardConfig()) -> RewardBundle:
    return score_bundles(rms, [req], tok, cfg)[0]


def info_gain(rms: RewardModelSet, req: ScoreRequest, stage: StageId, tok: Tokenizer,
              cfg: RewardConfig = RewardConfig()) -> float:
    """InfoGain of one reasoning stage (SS, SP or AD) in nats."""
    if stage not in IG_STAGES:
        raise ValueError("InfoGain is defined for SS, SP and AD only")
    q = ig_queries(req, tok, cfg)
    if q is None:
        raise TraceParseError("malformed trace segmentation")
    s = int(stage)
    _, c_hi, t_hi = q[s + 1]
    _, c_lo, t_lo = q[s]
    return seq_logprob(rms.scoring(s + 1), rms.cfg, c_hi, t_hi) - seq_logprob(rms.scoring(s), rms.cfg, c_lo, t_lo)
