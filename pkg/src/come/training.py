"""Progressive curriculum: dense base SFT, Expert-FT, Router-FT and CoT-FT.

Every stage trains a named subset of parameters with Adam under a cosine
schedule; parameters outside the subset are never written, which makes the
freeze contracts exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import model as M
from . import numerics as nx
from .numerics import ParamStore
from .synthgui import StageId, Step, label_stages, serialize_step, trace_ids
from .tokenizer import Tokenizer

STAGES = ("base", "expert", "router", "cot")
REPORT_FIELDS = ("stage", "epoch", "split", "loss_sft", "loss_rce", "loss_rnorm", "selection_acc")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Example:
    """Prompt followed by a trace, with a stage label per token."""

    ids: tuple[int, ...]
    stages: tuple[int, ...]
    prompt_len: int
    ref: str = ""


def make_example(prompt: Sequence[int], trace: Sequence[int], tok: Tokenizer, ref: str = "") -> Example:
    ids = list(prompt) + list(trace)
    labels = label_stages(ids, tok)
    return Example(tuple(ids), tuple(int(s) for s in labels), len(prompt), ref)


def build_examples(steps: Sequence[Step], tok: Tokenizer, max_len: int = 256) -> list[Example]:
    out = []
    for s in steps:
        trace = trace_ids(s.gold_trace, tok)
        prompt = serialize_step(s, tok, max_len, trace_budget=len(trace)).ids
        out.append(make_example(prompt, trace, tok, s.ref))
    return out


@dataclass
class Batch:
    tokens: torch.Tensor   # (B, N) inputs
    targets: torch.Tensor  # (B, N) next tokens
    stages: torch.Tensor   # (B, N) StageId of each target, -1 for PROMPT/padding

    @property
    def output_mask(self) -> torch.Tensor:
        return self.stages >= 0

    def stage_mask(self, stage: int) -> torch.Tensor:
        return self.stages == stage

    def expert_labels(self, mapping: Sequence[int]) -> torch.Tensor:
        table = torch.tensor(list(mapping), dtype=torch.long)
        return table[self.stages.clamp(min=0)]


def collate(examples: Sequence[Example], pad_id: int, stop_after: int | None = None) -> Batch:
    """Right-padded teacher-forcing batch.

    With ``stop_after`` set, each sequence is cut after the last token of
    that stage (later tokens cannot influence earlier logits).
    """
    rows = []
    for ex in examples:
        ids, st = list(ex.ids), list(ex.stages)
        if stop_after is not None:
            last = max(i for i, s in enumerate(st) if s == stop_after)
            ids, st = ids[: last + 1], st[: last + 1]
        rows.append((ids, st))
    n = max(len(ids) for ids, _ in rows) - 1
    tokens = torch.full((len(rows), n), pad_id, dtype=torch.long)
    targets = torch.full((len(rows), n), pad_id, dtype=torch.long)
    stages = torch.full((len(rows), n), -1, dtype=torch.long)
    for i, (ids, st) in enumerate(rows):
        k = len(ids) - 1
        tokens[i, :k] = torch.tensor(ids[:-1])
        targets[i, :k] = torch.tensor(ids[1:])
        stages[i, :k] = torch.tensor(st[1:])
    return Batch(tokens, targets, stages)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def router_ce_loss(logits_c: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between channel logits and expert labels."""
    return nx.cross_entropy(logits_c, labels, mask)


def router_norm_loss(logits_c: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared distance ``||softmax(c) - onehot||^2`` over masked positions."""
    count = int(mask.sum())
    if count == 0:
        raise ValueError("router_norm_loss: every position is masked")
    probs = nx.softmax(logits_c, -1)
    onehot = torch.nn.functional.one_hot(labels, logits_c.shape[-1]).to(probs.dtype)
    per_tok = (probs - onehot).pow(2).sum(-1)
    return (per_tok * mask.to(per_tok.dtype)).sum() / count


def selection_counts(logits_c: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> tuple[int, int]:
    hit = (logits_c.argmax(-1) == labels) & mask
    return int(hit.sum()), int(mask.sum())


def dense_sft_loss(p: ParamStore, cfg: M.ComeConfig, batch: Batch, stage: int | None = None) -> torch.Tensor:
    """SFT loss of a dense model on all output tokens or on one stage."""
    mask = batch.output_mask if stage is None else batch.stage_mask(stage)
    return nx.cross_entropy(M.dense_forward(p, cfg.dense(), batch.tokens), batch.targets, mask)


def expert_ft_loss(p: ParamStore, cfg: M.ComeConfig, batch: Batch, stage: int) -> torch.Tensor:
    return dense_sft_loss(p, cfg, batch, stage)


def router_ft_loss(p: ParamStore, cfg: M.ComeConfig, batch: Batch) -> torch.Tensor:
    out = M.come_forward(p, cfg, batch.tokens)
    labels, mask = batch.expert_labels(cfg.stage_to_expert), batch.output_mask
    return router_ce_loss(out.router_logits, labels, mask) + router_norm_loss(out.router_logits, labels, mask)


def cot_ft_terms(p: ParamStore, cfg: M.ComeConfig, batch: Batch) -> dict[str, torch.Tensor]:
    out = M.come_forward(p, cfg, batch.tokens)
    labels, mask = batch.expert_labels(cfg.stage_to_expert), batch.output_mask
    return {
        "sft": nx.cross_entropy(out.logits, batch.targets, mask),
        "rce": router_ce_loss(out.router_logits, labels, mask),
        "rnorm": router_norm_loss(out.router_logits, labels, mask),
        "router_logits": out.router_logits,
    }


def cot_ft_loss(p: ParamStore, cfg: M.ComeConfig, batch: Batch, gamma: float = 0.1) -> torch.Tensor:
    t = cot_ft_terms(p, cfg, batch)
    return t["sft"] + gamma * t["rnorm"]


# ---------------------------------------------------------------------------
# configs and reports
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    gamma: float = 0.1
    expert: int | None = None
    seed: int = 0
    warmup: int = 0
    clip: float = 1.0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if (self.expert is not None) != (self.stage == "expert"):
            raise ValueError("target expert is required iff stage == 'expert'")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs, batch_size and lr must be non-negative / positive")


@dataclass
class ReportRow:
    stage: str
    epoch: int
    split: str
    loss_sft: float = math.nan
    loss_rce: float = math.nan
    loss_rnorm: float = math.nan
    selection_acc: float = math.nan

    def as_csv(self) -> dict:
        out = {"stage": self.stage, "epoch": self.epoch, "split": self.split}
        for k in REPORT_FIELDS[3:]:
            v = getattr(self, k)
            out[k] = "" if math.isnan(v) else f"{v:.6f}"
        return out


def write_report(path: str | Path, rows: Sequence[ReportRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())


# ---------------------------------------------------------------------------
# generic loop
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, gen: np.random.Generator | None) -> list[np.ndarray]:
    order = np.arange(n) if gen is None else gen.permutation(n)
    return [order[i: i + batch_size] for i in range(0, n, batch_size)]


def fit(
    store: ParamStore,
    trainable: Sequence[str],
    n_items: int,
    make_batch: Callable[[np.ndarray], object],
    loss_fn: Callable[[ParamStore, object], torch.Tensor],
    tc: TrainConfig,
    tag: str,
    on_epoch: Callable[[int], None] | None = None,
) -> ParamStore:
    """Minibatch Adam over ``n_items`` with a cosine schedule.

    Only tensors named in ``trainable`` are updated.  ``on_epoch`` runs
    after each epoch (for reporting).
    """
    if n_items == 0:
        raise ValueError(f"{tag}: empty dataset")
    trainable = list(trainable)
    per_epoch = math.ceil(n_items / tc.batch_size)
    total = per_epoch * tc.epochs
    step = 0
    for epoch in range(tc.epochs):
        gen = nx.rng(tc.seed, tag, "shuffle", epoch)
        for idx in _batches(n_items, tc.batch_size, gen):
            store.requires_grad_(trainable)
            loss = loss_fn(store, make_batch(idx))
            nx.check_finite(loss, f"{tag} loss")
            grads = torch.autograd.grad(loss, [store[n] for n in trainable], allow_unused=True)
            store.requires_grad_([])
            gdict = {n: (g if g is not None else torch.zeros_like(store[n])) for n, g in zip(trainable, grads)}
            if tc.clip > 0:
                nx.clip_grads(gdict, tc.clip)
            nx.adam_step(store, gdict, nx.cosine_lr(step, total, tc.lr, tc.warmup))
            step += 1
        if on_epoch is not None:
            on_epoch(epoch)
    store.requires_grad_([])
    return store


@torch.no_grad()
def _evaluate_batches(examples, pad_id, batch_size, fn, stop_after=None) -> dict[str, float]:
    sums: dict[str, float] = {}
    for i in range(0, len(examples), batch_size):
        b = collate(examples[i: i + batch_size], pad_id, stop_after)
        for k, (num, den) in fn(b).items():
            s = sums.setdefault(k, [0.0, 0.0])
            s[0] += num
            s[1] += den
    return {k: (v[0] / v[1] if v[1] else math.nan) for k, v in sums.items()}


def evaluate_come(p: ParamStore, cfg: M.ComeConfig, examples, pad_id: int, batch_size: int = 64) -> dict[str, float]:
    """Token-weighted SFT/router losses and selection accuracy of a CoME store."""
    def fn(b: Batch):
        t = cot_ft_terms(p, cfg, b)
        n = int(b.output_mask.sum())
        hit, cnt = selection_counts(t["router_logits"], b.expert_labels(cfg.stage_to_expert), b.output_mask)
        return {"sft": (float(t["sft"]) * n, n), "rce": (float(t["rce"]) * n, n),
                "rnorm": (float(t["rnorm"]) * n, n), "acc": (hit, cnt)}
    return _evaluate_batches(examples, pad_id, batch_size, fn)


def evaluate_dense(p: ParamStore, cfg: M.ComeConfig, examples, pad_id: int, stage: int | None = None,
                   batch_size: int = 64) -> float:
    def fn(b: Batch):
        mask = b.output_mask if stage is None else b.stage_mask(stage)
        n = int(mask.sum())
        return {"sft": (float(dense_sft_loss(p, cfg, b, stage)) * n, n)}
    return _evaluate_batches(examples, pad_id, batch_size, fn, stop_after=stage)["sft"]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def base_ft(p: ParamStore, cfg: M.ComeConfig, train: Sequence[Example], tc: TrainConfig, pad_id: int,
            val: Sequence[Example] = ()) -> tuple[ParamStore, list[ReportRow]]:
    """Full-parameter SFT of the dense parent on complete traces."""
    p = p.clone()
    rows: list[ReportRow] = []

    def report(epoch: int) -> None:
        if val:
            rows.append(ReportRow("base", epoch, "val", loss_sft=evaluate_dense(p, cfg, list(val), pad_id)))

    fit(p, p.names(), len(train), lambda idx: collate([train[i] for i in idx], pad_id),
        lambda s, b: dense_sft_loss(s, cfg, b), tc, "base", report)
    return p, rows


def expert_ft(p: ParamStore, cfg: M.ComeConfig, train: Sequence[Example], tc: TrainConfig, pad_id: int,
              val: Sequence[Example] = ()) -> tuple[ParamStore, list[ReportRow]]:
    """Train only the FFN stack of a dense model on one stage's targets."""
    stage = int(tc.expert)
    data = [ex for ex in train if stage in ex.stages]
    if not data:
        raise ValueError("expert_ft: empty dataset")
    p = p.clone()
    rows: list[ReportRow] = []
    tag = f"expert{stage}"

    def report(epoch: int) -> None:
        if val:
            rows.append(ReportRow(tag, epoch, "val", loss_sft=evaluate_dense(p, cfg, list(val), pad_id, stage)))

    fit(p, [n for n in p.names() if M.is_ffn_param(n)], len(data),
        lambda idx: collate([data[i] for i in idx], pad_id, stop_after=stage),
        lambda s, b: expert_ft_loss(s, cfg, b, stage), tc, tag, report)
    return p, rows


@torch.no_grad()
def channel_features(p: ParamStore, cfg: M.ComeConfig, examples: Sequence[Example], pad_id: int,
                     batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenated channel states ``(M, E*D)`` and expert labels at output positions."""
    feats, labels = [], []
    for i in range(0, len(examples), batch_size):
        b = collate(examples[i: i + batch_size], pad_id)
        states = M.channel_states(p, cfg, b.tokens)
        mask = b.output_mask
        feats.append(torch.cat(states, -1)[mask])
        labels.append(b.expert_labels(cfg.stage_to_expert)[mask])
    return torch.cat(feats), torch.cat(labels)


def router_ft(p: ParamStore, cfg: M.ComeConfig, train: Sequence[Example], tc: TrainConfig, pad_id: int,
              val: Sequence[Example] = ()) -> tuple[ParamStore, list[ReportRow]]:
    """Train only ``W_c`` with ``L_R-CE + L_R-Norm``.

    The channel states do not depend on ``W_c``, so they are computed once
    and the router is fit on the cached token features; ``batch_size``
    counts tokens here.
    """
    p = p.clone()
    feats, labels = channel_features(p, cfg, train, pad_id)
    ones = torch.ones(len(labels), dtype=torch.bool)
    rows: list[ReportRow] = []
    vfeats = vlabels = None
    if val:
        vfeats, vlabels = channel_features(p, cfg, val, pad_id)

    def loss_fn(s: ParamStore, idx) -> torch.Tensor:
        logits_c = nx.matmul(feats[idx], s["router"])
        return router_ce_loss(logits_c, labels[idx], ones[idx]) + router_norm_loss(logits_c, labels[idx], ones[idx])

    def report(epoch: int) -> None:
        for split, f, l in (("train", feats, labels), ("val", vfeats, vlabels)):
            if f is None:
                continue
            with torch.no_grad():
                lc = nx.matmul(f, p["router"])
                m = torch.ones(len(l), dtype=torch.bool)
                rows.append(ReportRow("router", epoch, split, loss_rce=float(router_ce_loss(lc, l, m)),
                                      loss_rnorm=float(router_norm_loss(lc, l, m)),
                                      selection_acc=float((lc.argmax(-1) == l).double().mean())))

    fit(p, ["router"], len(labels), lambda idx: torch.as_tensor(idx), loss_fn, tc, "router", report)
    return p, rows


def cot_ft(p: ParamStore, cfg: M.ComeConfig, train: Sequence[Example], tc: TrainConfig, pad_id: int,
           val: Sequence[Example] = (), trainable: Sequence[str] | None = None) -> tuple[ParamStore, list[ReportRow]]:
    """``L_SFT + gamma * L_R-Norm`` over full traces; all parameters by default."""
    p = p.clone()
    rows: list[ReportRow] = []

    def report(epoch: int) -> None:
        if val:
            m = evaluate_come(p, cfg, list(val), pad_id)
            rows.append(ReportRow("cot", epoch, "val", m["sft"], m["rce"], m["rnorm"], m["acc"]))

    fit(p, p.names() if trainable is None else trainable, len(train),
        lambda idx: collate([train[i] for i in idx], pad_id),
        lambda s, b: cot_ft_loss(s, cfg, b, tc.gamma), tc, "cot", report)
    return p, rows


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------

@dataclass
class CurriculumConfig:
    base: TrainConfig = field(default_factory=lambda: TrainConfig("base", lr=3e-3, epochs=3))
    expert: TrainConfig = field(default_factory=lambda: TrainConfig("expert", lr=1e-3, epochs=2, expert=0))
    router: TrainConfig = field(default_factory=lambda: TrainConfig("router", lr=1e-2, epochs=3, batch_size=256))
    cot: TrainConfig = field(default_factory=lambda: TrainConfig("cot", lr=1e-3, epochs=2))
    skip_expert_ft: bool = False
    skip_router_ft: bool = False
    init_seed: int = 0


@dataclass
class CurriculumResult:
    params: ParamStore
    base: ParamStore
    specialists: list[ParamStore]
    assembled: ParamStore
    reports: list[ReportRow]


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # re-raised with the failing stage attached
        raise StageError(name, exc) from exc


def train_specialists(base: ParamStore, cfg: M.ComeConfig, train, cc: CurriculumConfig, pad_id: int, val=()):
    specialists, rows = [], []
    stage_of_expert = {e: s for s, e in enumerate(cfg.stage_to_expert)}
    for e in range(cfg.n_experts):
        tc = TrainConfig(**{**cc.expert.__dict__, "expert": stage_of_expert[e]})
        if cc.skip_expert_ft:
            specialists.append(base.clone())
            continue
        sp, r = _stage(f"expert_ft[{e}]", expert_ft, base, cfg, train, tc, pad_id, val)
        specialists.append(sp)
        rows += r
    return specialists, rows


def run_curriculum(cfg: M.ComeConfig, train: Sequence[Example], cc: CurriculumConfig, pad_id: int,
                   val: Sequence[Example] = (), base: ParamStore | None = None,
                   specialists: list[ParamStore] | None = None) -> CurriculumResult:
    """Base SFT -> Expert-FT x E -> assemble -> Router-FT -> CoT-FT.

    ``base``/``specialists`` may be passed in to share work between
    ablation arms.
    """
    rows: list[ReportRow] = []
    if base is None:
        init = M.init_params(cfg.dense(), cc.init_seed, router=False)
        base, r = _stage("base_ft", base_ft, init, cfg, train, cc.base, pad_id, val)
        rows += r
    if specialists is None:
        specialists, r = train_specialists(base, cfg, train, cc, pad_id, val)
        rows += r
    assembled = _stage("assemble", M.assemble_from_experts, specialists, cfg, router_seed=cc.init_seed)
    p = assembled
    if not cc.skip_router_ft:
        p, r = _stage("router_ft", router_ft, p, cfg, train, cc.router, pad_id, val)
        rows += r
    p, r = _stage("cot_ft", cot_ft, p, cfg, train, cc.cot, pad_id, val)
    rows += r
    return CurriculumResult(p, base, specialists, assembled, rows)
