"""Diagnostics: action metrics, router alignment, InfoGain statistics, FLOPs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import model as M
from . import numerics as nx
from .numerics import ParamStore
from .synthgui import ACTION_KINDS, Action, Step, action_from_ids, serialize_step, token_f1
from .tokenizer import STAGE_TAGS, Tokenizer

MATCH_THRESHOLD = 140.0
F1_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# action match
# ---------------------------------------------------------------------------

def action_type_match(pred: Action, gold: Action) -> bool:
    return not pred.malformed and pred.kind == gold.kind


def action_match(
    pred: Action,
    gold: Action,
    threshold: float = MATCH_THRESHOLD,
    bboxes: Iterable[tuple[int, int, int, int]] = (),
    f1_threshold: float = F1_THRESHOLD,
) -> bool:
    """Evaluation correctness of one predicted action.

    CLICK is correct within ``threshold`` (Euclidean, 0-1000 grid) or when
    both points fall in one of ``bboxes``; TYPE needs token F1 above
    ``f1_threshold``; every other kind must match exactly.
    """
    if not action_type_match(pred, gold):
        return False
    if gold.kind == "CLICK":
        if math.dist((pred.x, pred.y), (gold.x, gold.y)) < threshold:
            return True
        return any(_inside(b, pred.x, pred.y) and _inside(b, gold.x, gold.y) for b in bboxes)
    if gold.kind == "TYPE":
        return token_f1(pred.arg, gold.arg) > f1_threshold
    return pred == gold


def _inside(b, x, y) -> bool:
    return b[0] <= x <= b[2] and b[1] <= y <= b[3]


@dataclass
class TypeStats:
    count: int = 0
    type_hits: int = 0
    match_hits: int = 0

    @property
    def type_acc(self) -> float:
        return self.type_hits / self.count if self.count else math.nan

    @property
    def match_acc(self) -> float:
        return self.match_hits / self.count if self.count else math.nan


@dataclass
class MetricReport:
    per_type: dict[str, TypeStats] = field(default_factory=lambda: {k: TypeStats() for k in ACTION_KINDS})

    def add(self, pred: Action, gold: Action, match: bool) -> None:
        st = self.per_type[gold.kind]
        st.count += 1
        st.type_hits += action_type_match(pred, gold)
        st.match_hits += bool(match)

    @property
    def count(self) -> int:
        return sum(s.count for s in self.per_type.values())

    @property
    def type_acc(self) -> float:
        return sum(s.type_hits for s in self.per_type.values()) / self.count if self.count else math.nan

    @property
    def match_acc(self) -> float:
        return sum(s.match_hits for s in self.per_type.values()) / self.count if self.count else math.nan

    def rows(self) -> list[dict]:
        out = [{"action": k, "count": s.count, "type_acc": _fmt(s.type_acc), "match_acc": _fmt(s.match_acc)}
               for k, s in self.per_type.items()]
        out.append({"action": "overall", "count": self.count, "type_acc": _fmt(self.type_acc),
                    "match_acc": _fmt(self.match_acc)})
        return out

    def to_dict(self) -> dict:
        return {r["action"]: {k: r[k] for k in ("count", "type_acc", "match_acc")} for r in self.rows()}


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.6f}"


def aggregate(preds: Sequence[Action], steps: Sequence[Step], threshold: float = MATCH_THRESHOLD) -> tuple[MetricReport, list[bool]]:
    report, flags = MetricReport(), []
    for pred, step in zip(preds, steps):
        ok = action_match(pred, step.gold_action, threshold, [w.bbox for w in step.screen.widgets])
        report.add(pred, step.gold_action, ok)
        flags.append(ok)
    return report, flags


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    ref: str
    tokens: list[int]
    experts: list[int]
    action: Action
    match: bool = False


def decode_steps(
    p: ParamStore,
    cfg: M.ComeConfig,
    steps: Sequence[Step],
    tok: Tokenizer,
    batch_size: int = 64,
    max_new: int = 48,
    temperature: float = 0.0,
    seed: int = 0,
    stream_ids: Sequence[int] | None = None,
) -> list[M.Generation]:
    """Generate one trace per step, batching prompts of similar length.

    Row ``i`` samples from stream ``stream_ids[i]`` (default ``i``).
    """
    stream_ids = list(range(len(steps))) if stream_ids is None else list(stream_ids)
    prompts = [serialize_step(s, tok, cfg.max_len, max_new).ids for s in steps]
    order = sorted(range(len(steps)), key=lambda i: (len(prompts[i]), i))
    out: list[M.Generation | None] = [None] * len(steps)
    for i in range(0, len(order), batch_size):
        idx = order[i: i + batch_size]
        gens = M.generate(p, cfg, [prompts[j] for j in idx], temperature, seed, max_new, tok.eos_id,
                          tok.pad_id, stream_ids=[stream_ids[j] for j in idx])
        for j, g in zip(idx, gens):
            out[j] = g
    return out  # type: ignore[return-value]


def evaluate_policy(
    p: ParamStore, cfg: M.ComeConfig, steps: Sequence[Step], tok: Tokenizer, batch_size: int = 64, max_new: int = 48
) -> tuple[MetricReport, list[Prediction]]:
    """Greedy decoding on ``steps`` and action-match aggregation."""
    gens = decode_steps(p, cfg, steps, tok, batch_size, max_new)
    preds = [Prediction(s.ref, g.tokens, g.experts, action_from_ids(g.tokens, tok)) for s, g in zip(steps, gens)]
    report, flags = aggregate([x.action for x in preds], steps)
    for x, f in zip(preds, flags):
        x.match = f
    return report, preds


def write_metric_csv(path: str | Path, report: MetricReport) -> None:
    write_csv(path, ("action", "count", "type_acc", "match_acc"), report.rows())


def write_csv(path: str | Path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------------------
# router alignment
# ---------------------------------------------------------------------------

@dataclass
class SelectionReport:
    accuracy: float
    confusion: np.ndarray  # (4 stages, E experts): argmax-channel counts per stage
    stage_to_expert: tuple[int, ...]

    @property
    def stage_counts(self) -> np.ndarray:
        return self.confusion.sum(1)

    def rows(self) -> list[dict]:
        out = []
        for s, tag in enumerate(STAGE_TAGS):
            row = {"stage": tag, "label_expert": self.stage_to_expert[s], "tokens": int(self.confusion[s].sum())}
            row.update({f"expert_{e}": int(c) for e, c in enumerate(self.confusion[s])})
            out.append(row)
        return out


def selection_from_logits(router_logits: torch.Tensor, stages: torch.Tensor, mapping: Sequence[int]) -> SelectionReport:
    """Selection accuracy and confusion from ``(..., E)`` logits and stage ids (-1 = ignore)."""
    E = router_logits.shape[-1]
    mask = stages >= 0
    chosen = router_logits.argmax(-1)[mask]
    st = stages[mask]
    labels = torch.tensor(list(mapping))[st]
    conf = np.zeros((len(STAGE_TAGS), E), dtype=np.int64)
    np.add.at(conf, (st.numpy(), chosen.numpy()), 1)
    total = int(mask.sum())
    acc = float((chosen == labels).sum()) / total if total else math.nan
    return SelectionReport(acc, conf, tuple(mapping))


@torch.no_grad()
def router_selection_accuracy(p: ParamStore, cfg: M.ComeConfig, examples, pad_id: int, batch_size: int = 64) -> SelectionReport:
    """Fraction of output tokens whose argmax channel is the stage's expert."""
    from .training import collate

    total = None
    for i in range(0, len(examples), batch_size):
        b = collate(examples[i: i + batch_size], pad_id)
        logits_c = M.come_forward(p, cfg, b.tokens).router_logits
        rep = selection_from_logits(logits_c, b.stages, cfg.stage_to_expert)
        total = rep.confusion if total is None else total + rep.confusion
    assert total is not None
    hits = sum(int(total[s, e]) for s, e in enumerate(cfg.stage_to_expert))
    return SelectionReport(hits / int(total.sum()), total, tuple(cfg.stage_to_expert))


def expert_distribution(preds: Sequence[Prediction], tok: Tokenizer, n_experts: int) -> np.ndarray:
    """(4 stages, E) histogram of the argmax channel of generated tokens."""
    from .synthgui import TraceParseError, label_stages

    hist = np.zeros((len(STAGE_TAGS), n_experts), dtype=np.int64)
    for x in preds:
        try:
            labels = label_stages(x.tokens, tok)
        except TraceParseError:
            continue
        for lab, e in zip(labels, x.experts):
            if lab >= 0:
                hist[int(lab), e] += 1
    return hist


def moe_route_histogram(p: ParamStore, cfg: M.ComeConfig, examples, pad_id: int, layer: int = -1) -> np.ndarray:
    """(4 stages, E) histogram of the input-routed gate decisions at one layer."""
    from .training import collate

    hist = np.zeros((len(STAGE_TAGS), cfg.n_experts), dtype=np.int64)
    with torch.no_grad():
        for i in range(0, len(examples), 64):
            b = collate(examples[i: i + 64], pad_id)
            routes = M.moe_forward(p, cfg, b.tokens).routes[layer]
            mask = b.stages >= 0
            np.add.at(hist, (b.stages[mask].numpy(), routes[mask].numpy()), 1)
    return hist


# ---------------------------------------------------------------------------
# InfoGain statistics
# ---------------------------------------------------------------------------

IG_FIELDS = ("ig_ss", "ig_sp", "ig_ad", "r_ig")
IG_STAT_FIELDS = ("group", "quantity", "count", "mean", "std")


def infogain_stats(groups: dict[str, Sequence]) -> list[dict]:
    """Per-group mean/std of the three stage gains and their total.

    ``groups`` maps a label (e.g. "chosen") to a sequence of reward bundles.
    """
    if not groups or all(len(v) == 0 for v in groups.values()):
        raise ValueError("infogain_stats: empty input")
    rows = []
    for name, bundles in groups.items():
        if not bundles:
            continue
        for q in IG_FIELDS:
            vals = np.array([getattr(b, q) for b in bundles], dtype=np.float64)
            rows.append({"group": name, "quantity": q, "count": len(vals),
                         "mean": float(vals.mean()), "std": float(vals.std())})
    return rows


def pair_ig_stats(pairs) -> list[dict]:
    return infogain_stats({"chosen": [p.chosen.bundle for p in pairs], "rejected": [p.rejected.bundle for p in pairs]})


def write_ig_csv(path: str | Path, rows: Sequence[dict]) -> None:
    write_csv(path, IG_STAT_FIELDS, [{**r, "mean": f"{r['mean']:.9f}", "std": f"{r['std']:.9f}"} for r in rows])


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModelInput:
    hidden: int
    seq_len: int
    intermediate: int
    n_experts: int = 4
    n_layers: int = 1

    def __post_init__(self) -> None:
        if min(self.hidden, self.seq_len, self.intermediate, self.n_experts, self.n_layers) <= 0:
            raise ValueError("cost model inputs must be positive")


def flops_analytic(c: CostModelInput) -> dict[str, dict[str, int]]:
    """Per-layer multiply-adds: attention ``4LH^2 + 2L^2H``, FFN ``2LHI``."""
    H, L, I, E = c.hidden, c.seq_len, c.intermediate, c.n_experts
    attn = 4 * L * H * H + 2 * L * L * H
    ffn = 2 * L * H * I
    return {
        "dense": {"attn": attn, "ffn": ffn, "total": attn + ffn},
        "come": {"attn": E * attn, "ffn": E * ffn, "total": E * (attn + ffn)},
    }


def flops_measured(c: CostModelInput, kind: str = "come", seed: int = 0) -> dict[str, int]:
    """Count matmul multiply-adds of a real forward, per layer.

    Runs ``c.n_layers`` blocks of the dense or CoME stack on one sequence of
    length ``c.seq_len`` (embedding lookups and norms issue no matmuls) and
    divides by the layer count.
    """
    heads = 4 if c.hidden % 4 == 0 else 1
    cfg = M.ComeConfig(vocab_size=8, d_model=c.hidden, n_layers=c.n_layers, n_heads=heads, d_ff=c.intermediate,
                       max_len=c.seq_len, n_experts=c.n_experts if kind == "come" else 1)
    p = M.init_params(cfg, seed, router=False)
    tokens = torch.zeros(1, c.seq_len, dtype=torch.long)
    with torch.no_grad():
        x = M.embed(p, cfg, tokens)
        mask = M.attention_mask(tokens, None)
        attn = ffn = 0
        E = cfg.n_experts
        for e in range(E):
            h = x
            for l in range(cfg.n_layers):
                with nx.FlopCounter() as fc:
                    h = M.self_attention(p, cfg, l, h, mask)
                attn += fc.macs
                with nx.FlopCounter() as fc:
                    h = M.ffn(p, cfg, l, e, h)
                ffn += fc.macs
    n = c.n_layers
    return {"attn": attn // n, "ffn": ffn // n, "total": (attn + ffn) // n}


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------

def _svg(fig) -> str:
    import matplotlib.pyplot as plt

    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "come"
    import matplotlib.pyplot as plt

    return plt


def plot_expert_distribution(hist: np.ndarray, path: str | Path, title: str = "argmax channel per stage") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    frac = hist / np.maximum(hist.sum(1, keepdims=True), 1)
    bottom = np.zeros(len(STAGE_TAGS))
    for e in range(hist.shape[1]):
        ax.bar(STAGE_TAGS, frac[:, e], bottom=bottom, label=f"expert {e}")
        bottom += frac[:, e]
    ax.set_ylabel("fraction of tokens")
    ax.set_title(title)
    ax.legend(fontsize=7)
    Path(path).write_text(_svg(fig), encoding="utf-8")


def plot_ig_boxes(groups: dict[str, Sequence], path: str | Path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(IG_FIELDS), figsize=(10, 3))
    for ax, q in zip(axes, IG_FIELDS):
        data = [[getattr(b, q) for b in v] or [0.0] for v in groups.values()]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(groups) + 1), list(groups))
        ax.set_title(q)
    fig.tight_layout()
    Path(path).write_text(_svg(fig), encoding="utf-8")
