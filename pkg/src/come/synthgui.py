"""Seeded generator of text-serialized mobile GUI episodes with gold traces.

Every step carries a four-stage gold trace (screen summary, subtask plan,
action decision, action function).  The screen is a handful of widgets laid
out on a 3x4 grid of the normalized 0-1000 canvas; widget centres are
jittered inside their cell so that centres of distinct widgets are always
more than 140 units apart.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable

from .numerics import rng
from .tokenizer import APPS, CLOSE, DIRECTIONS, KEYS, LEXICON, OPEN, STAGE_TAGS, Tokenizer

VERSION = "synthgui/1"
DIFFICULTIES = ("easy", "medium", "hard")

_WIDGETS = {"easy": (3, 5), "medium": (5, 7), "hard": (7, 10)}
_STEPS = {"easy": (2, 3), "medium": (3, 5), "hard": (5, 8)}
_CONFUSER = {"easy": 0.3, "medium": 0.5, "hard": 0.7}
_COLS, _ROWS = 3, 4
_X0, _Y0, _CELL_W, _CELL_H = 50, 80, 300, 225


class StageId(IntEnum):
    PROMPT = -1
    SS = 0
    SP = 1
    AD = 2
    AF = 3


class TraceParseError(ValueError):
    """Delimiters of a reasoning trace are missing, repeated or out of order."""


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------

ACTION_KINDS = ("SCROLL", "CLICK", "TYPE", "PRESS", "STOP")


@dataclass(frozen=True)
class Action:
    """One GUI action; ``kind == "MALFORMED"`` marks unparseable output."""

    kind: str
    x: int | None = None
    y: int | None = None
    arg: str | None = None

    @property
    def malformed(self) -> bool:
        return self.kind == "MALFORMED"

    def render(self) -> str:
        if self.kind == "CLICK":
            return f"CLICK({self.x},{self.y})"
        if self.kind == "TYPE":
            return f'TYPE("{self.arg}")'
        if self.kind in ("SCROLL", "PRESS"):
            return f"{self.kind}({self.arg})"
        if self.kind == "STOP":
            return "STOP"
        return self.arg or ""


def click(x: int, y: int) -> Action:
    return Action("CLICK", x=x, y=y)


def malformed(text: str) -> Action:
    return Action("MALFORMED", arg=text)


_ACTION_RE = [
    (re.compile(r"CLICK\((\d+),(\d+)\)"), lambda m: Action("CLICK", x=int(m[1]), y=int(m[2]))),
    (re.compile(r"SCROLL\((up|down|left|right)\)"), lambda m: Action("SCROLL", arg=m[1])),
    (re.compile(r'TYPE\("([a-z_]+(?: [a-z_]+)*)"\)'), lambda m: Action("TYPE", arg=m[1])),
    (re.compile(r"PRESS\((back|home|enter)\)"), lambda m: Action("PRESS", arg=m[1])),
    (re.compile(r"STOP"), lambda m: Action("STOP")),
]


def parse_action(text: str) -> Action:
    """Parse an action-function string; never raises."""
    text = text.strip()
    for pattern, build in _ACTION_RE:
        m = pattern.fullmatch(text)
        if m:
            return build(m)
    return malformed(text)


def token_f1(a: str, b: str) -> float:
    """Whitespace-token F1 between two strings (multiset overlap)."""
    ta, tb = a.split(), b.split()
    if not ta or not tb:
        return float(ta == tb)
    common = sum((Counter(ta) & Counter(tb)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(ta), common / len(tb)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# screens and episodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Widget:
    id: int
    kind: str
    label: str
    bbox: tuple[int, int, int, int]

    @property
    def center(self) -> tuple[int, int]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) // 2, (y0 + y1) // 2

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bbox
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass(frozen=True)
class Screen:
    app: str
    widgets: tuple[Widget, ...]

    def find(self, label: str) -> Widget:
        for w in self.widgets:
            if w.label == label:
                return w
        raise KeyError(label)


@dataclass(frozen=True)
class ReasoningTrace:
    ss: str
    sp: str
    ad: str
    af: str

    def segments(self) -> tuple[str, str, str, str]:
        return (self.ss, self.sp, self.ad, self.af)

    def render(self) -> str:
        return " ".join(f"{OPEN[s]} {t} {CLOSE[s]}" for s, t in zip(STAGE_TAGS, self.segments()))


@dataclass(frozen=True)
class Step:
    episode_id: int
    step_idx: int
    instruction: str
    screen: Screen
    history: tuple[str, ...]
    gold_action: Action
    gold_trace: ReasoningTrace

    @property
    def ref(self) -> str:
        return f"{self.episode_id}:{self.step_idx}"

    def to_json(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "step_idx": self.step_idx,
            "instruction": self.instruction,
            "screen": {
                "app": self.screen.app,
                "widgets": [
                    {"id": w.id, "kind": w.kind, "label": w.label, "bbox": list(w.bbox)} for w in self.screen.widgets
                ],
            },
            "history": list(self.history),
            "gold_action": self.gold_action.render(),
            "gold_trace": dict(zip(("ss", "sp", "ad", "af"), self.gold_trace.segments())),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Step":
        screen = Screen(
            d["screen"]["app"],
            tuple(Widget(w["id"], w["kind"], w["label"], tuple(w["bbox"])) for w in d["screen"]["widgets"]),
        )
        t = d["gold_trace"]
        return cls(
            d["episode_id"], d["step_idx"], d["instruction"], screen, tuple(d["history"]),
            parse_action(d["gold_action"]), ReasoningTrace(t["ss"], t["sp"], t["ad"], t["af"]),
        )


@dataclass(frozen=True)
class Episode:
    episode_id: int
    instruction: str
    difficulty: str
    steps: tuple[Step, ...] = field(default_factory=tuple)


def _place_widget(g, wid: int, cell: int, kind: str, label: str) -> Widget:
    col, row = cell % _COLS, cell // _COLS
    cx = _X0 + col * _CELL_W + _CELL_W // 2 + 5 * int(g.integers(-9, 10))
    cy = _Y0 + row * _CELL_H + _CELL_H // 2 + 5 * int(g.integers(-6, 7))
    hw = 5 * int(g.integers(6, 26))
    hh = 5 * int(g.integers(4, 17))
    return Widget(wid, kind, label, (cx - hw, cy - hh, cx + hw, cy + hh))


def _subtask_phrase(sub: dict) -> str:
    kind = sub["kind"]
    if kind == "click":
        return f"open {sub['label']}"
    if kind == "type":
        return f"write {sub['text']}"
    if kind == "scroll":
        return f"scroll {sub['dir']}"
    return f"press {sub['key']}"


def gen_episode(seed: int, difficulty: str = "medium", episode_id: int | None = None) -> Episode:
    """Generate one episode; a pure function of ``(seed, difficulty)``."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    g = rng(seed, "episode", difficulty)
    episode_id = seed if episode_id is None else episode_id
    app = APPS[int(g.integers(len(APPS)))]
    lo, hi = _STEPS[difficulty]
    n_steps = int(g.integers(lo, hi + 1))

    kinds = g.choice(["click", "type", "scroll", "press"], size=n_steps - 1, p=[0.55, 0.15, 0.15, 0.15])
    click_labels = list(g.choice(LEXICON, size=n_steps - 1, replace=False))
    subtasks = []
    for k, label in zip(kinds, click_labels):
        if k == "click":
            subtasks.append({"kind": "click", "label": str(label)})
        elif k == "type":
            n_words = int(g.integers(1, 4))
            words = g.choice(LEXICON, size=n_words, replace=False)
            subtasks.append({"kind": "type", "text": " ".join(str(w) for w in words)})
        elif k == "scroll":
            subtasks.append({"kind": "scroll", "dir": str(DIRECTIONS[int(g.integers(4))])})
        else:
            subtasks.append({"kind": "press", "key": str(KEYS[int(g.integers(3))])})
    instruction = f"in {app} " + " then ".join(_subtask_phrase(s) for s in subtasks)
    other_click_labels = [s["label"] for s in subtasks if s["kind"] == "click"]

    steps = []
    history: list[str] = []
    wlo, whi = _WIDGETS[difficulty]
    for t in range(n_steps):
        sub = subtasks[t] if t < len(subtasks) else {"kind": "stop"}
        n_w = int(g.integers(wlo, whi + 1))
        specs: list[tuple[str, str]] = []
        used: set[str] = set()
        field_label = None
        if sub["kind"] == "click":
            specs.append((str(g.choice(["button", "icon", "list_item"])), sub["label"]))
            used.add(sub["label"])
        elif sub["kind"] == "type":
            field_label = str(g.choice([w for w in LEXICON if w not in sub["text"].split()]))
            specs.append(("textfield", field_label))
            used.add(field_label)
        confusers = [lab for lab in other_click_labels if lab not in used]
        if confusers and g.random() < _CONFUSER[difficulty]:
            lab = str(confusers[int(g.integers(len(confusers)))])
            specs.append((str(g.choice(["button", "icon", "list_item"])), lab))
            used.add(lab)
        pool = [w for w in LEXICON if w not in used and w not in other_click_labels]
        fillers = g.choice(pool, size=max(0, n_w - len(specs)), replace=False)
        for lab in fillers:
            specs.append((str(g.choice(["button", "icon", "list_item", "textfield"], p=[0.4, 0.25, 0.25, 0.1])), str(lab)))
        order = g.permutation(len(specs))
        cells = sorted(int(c) for c in g.choice(_COLS * _ROWS, size=len(specs), replace=False))
        placed = [(cells[i], specs[j]) for i, j in enumerate(order)]
        widgets = tuple(_place_widget(g, wid, cell, kind, label) for wid, (cell, (kind, label)) in enumerate(placed))
        screen = Screen(app, widgets)

        if sub["kind"] == "click":
            w = screen.find(sub["label"])
            action = click(*w.center)
            ss = f"page {app} shows {w.label} {w.kind} at {w.center[0]} {w.center[1]}"
            ad = f"click {w.label} {w.kind}"
        elif sub["kind"] == "type":
            w = screen.find(field_label)
            action = Action("TYPE", arg=sub["text"])
            ss = f"page {app} shows {w.label} textfield at {w.center[0]} {w.center[1]}"
            ad = f"type {sub['text']}"
        elif sub["kind"] == "scroll":
            action = Action("SCROLL", arg=sub["dir"])
            ss = f"page {app} shows no target"
            ad = f"scroll {sub['dir']}"
        elif sub["kind"] == "press":
            action = Action("PRESS", arg=sub["key"])
            ss = f"page {app} shows no target"
            ad = f"press {sub['key']}"
        else:
            action = Action("STOP")
            ss = f"page {app} shows task done"
            ad = "stop"
        sp = "next finish task" if sub["kind"] == "stop" else f"next {_subtask_phrase(sub)}"
        trace = ReasoningTrace(ss, sp, ad, action.render())
        steps.append(Step(episode_id, t, instruction, screen, tuple(history), action, trace))
        history.append(ad)
    return Episode(episode_id, instruction, difficulty, tuple(steps))


# ---------------------------------------------------------------------------
# serialization and stage labels
# ---------------------------------------------------------------------------

def screen_text(screen: Screen) -> str:
    return " ".join(f"{w.kind} {w.label} {w.center[0]} {w.center[1]}" for w in screen.widgets)


def prompt_text(step: Step, history: Iterable[str] | None = None) -> str:
    history = step.history if history is None else tuple(history)
    text = f"INSTRUCTION {step.instruction} SCREEN {screen_text(step.screen)} HISTORY"
    if history:
        text += " " + " then ".join(history)
    return text


@dataclass(frozen=True)
class SerializedPrompt:
    ids: list[int]
    truncated: bool
    dropped_history: int


def serialize_step(step: Step, tok: Tokenizer, max_len: int = 256, trace_budget: int = 48) -> SerializedPrompt:
    """Prompt ids ``<bos> INSTRUCTION ... SCREEN ... HISTORY ...``.

    If prompt plus ``trace_budget`` exceeds ``max_len`` the oldest history
    entries are dropped and the result is flagged as truncated.
    """
    history = list(step.history)
    dropped = 0
    while True:
        ids = [tok.bos_id] + tok.encode(prompt_text(step, history))
        if len(ids) + trace_budget <= max_len or not history:
            break
        history.pop(0)
        dropped += 1
    if len(ids) + trace_budget > max_len:
        raise ValueError("prompt does not fit even without history")
    return SerializedPrompt(ids, dropped > 0, dropped)


def trace_ids(trace: ReasoningTrace, tok: Tokenizer, eos: bool = True) -> list[int]:
    ids = tok.encode(trace.render())
    return ids + [tok.eos_id] if eos else ids


def label_stages(ids, tok: Tokenizer, complete: bool = False) -> list[StageId]:
    """Stage label per token; delimiters carry the label of their stage.

    Tokens before the first ``<SS>`` are PROMPT; a trailing ``<eos>`` is
    labeled AF and padding after it PROMPT.  A trace may stop after any
    closed segment unless ``complete`` demands all four.
    """
    labels: list[StageId] = []
    ids = [int(i) for i in ids]
    open_of = {v: StageId[s] for s, v in tok.open_ids.items()}
    close_of = {v: StageId[s] for s, v in tok.close_ids.items()}
    if tok.open_ids["SS"] not in ids:
        raise TraceParseError("no <SS> delimiter")
    start = ids.index(tok.open_ids["SS"])
    labels += [StageId.PROMPT] * start
    expected = 0
    current: StageId | None = None
    i = start
    while i < len(ids):
        t = ids[i]
        if current is None:
            if expected == 4:
                break
            if t != tok.open_ids[STAGE_TAGS[expected]]:
                raise TraceParseError(f"expected {OPEN[STAGE_TAGS[expected]]} at position {i}")
            current = open_of[t]
            labels.append(current)
        else:
            if t in open_of:
                raise TraceParseError(f"nested delimiter at position {i}")
            labels.append(current)
            if t in close_of:
                if close_of[t] != current:
                    raise TraceParseError(f"mismatched close at position {i}")
                current = None
                expected += 1
        i += 1
    if current is not None:
        raise TraceParseError(f"unclosed {OPEN[STAGE_TAGS[expected]]} segment")
    if complete and expected != 4:
        raise TraceParseError("trace ends before </AF>")
    rest = ids[i:]
    if rest and rest[0] == tok.eos_id:
        labels.append(StageId.AF)
        rest = rest[1:]
    if any(t != tok.pad_id for t in rest):
        raise TraceParseError("tokens after the action function")
    labels += [StageId.PROMPT] * len(rest)
    return labels


def split_segments(ids, tok: Tokenizer) -> dict[str, list[int]]:
    """Token ids of each stage segment, delimiters included."""
    labels = label_stages(ids, tok, complete=True)
    out = {s: [] for s in STAGE_TAGS}
    for t, lab in zip(ids, labels):
        if lab != StageId.PROMPT and int(t) != tok.eos_id:
            out[STAGE_TAGS[lab]].append(int(t))
    return out


def action_from_ids(ids, tok: Tokenizer) -> Action:
    """Extract the action from generated trace tokens (malformed on failure)."""
    ids = [int(i) for i in ids]
    a, b = tok.open_ids["AF"], tok.close_ids["AF"]
    if a not in ids:
        return malformed(tok.decode(ids))
    start = ids.index(a) + 1
    stop = ids.index(b, start) if b in ids[start:] else None
    if stop is None:
        return malformed(tok.decode(ids[start:]))
    return parse_action(tok.decode(ids[start:stop]))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def episode_seed(base_seed: int, index: int) -> int:
    return int(rng(base_seed, "episode_seed", index).integers(0, 2**31 - 1))


def difficulty_of(index: int, mix: tuple[float, float, float] = (0.3, 0.4, 0.3)) -> str:
    # deterministic interleave matching the mix on every prefix of 10
    slots = [d for d, p in zip(DIFFICULTIES, mix) for _ in range(round(p * 10))]
    return slots[index % len(slots)]


def gen_dataset(seed: int, n_episodes: int, split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> dict[str, list[Step]]:
    """Episodes ``0..n-1`` split by index range into train/val/test steps."""
    n_train = int(math.floor(split[0] * n_episodes))
    n_val = int(math.floor(split[1] * n_episodes))
    out: dict[str, list[Step]] = {"train": [], "val": [], "test": []}
    for i in range(n_episodes):
        ep = gen_episode(episode_seed(seed, i), difficulty_of(i), episode_id=i)
        name = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        out[name].extend(ep.steps)
    return out


def write_jsonl(path: str | Path, steps: Iterable[Step]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in steps:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[Step]:
    with open(path, encoding="utf-8") as fh:
        return [Step.from_json(json.loads(line)) for line in fh if line.strip()]
