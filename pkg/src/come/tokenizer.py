"""Closed word-level vocabulary for the synthetic GUI task."""

from __future__ import annotations

import re

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
STAGE_TAGS = ("SS", "SP", "AD", "AF")
OPEN = {s: f"<{s}>" for s in STAGE_TAGS}
CLOSE = {s: f"</{s}>" for s in STAGE_TAGS}

APPS = ("mail", "maps", "shop", "news", "music", "notes", "chat", "photos", "clock", "files", "bank", "weather")

LEXICON = (
    "account", "album", "alarm", "archive", "artist", "basket", "battery", "bell", "book", "calendar",
    "camera", "card", "cart", "chart", "city", "coffee", "contact", "coupon", "dinner", "draft",
    "eggs", "event", "filter", "flight", "folder", "friend", "garden", "gift", "hotel", "inbox",
    "invoice", "jacket", "kitchen", "label", "lamp", "list", "menu", "milk", "movie", "office",
    "order", "paper", "payment", "photo", "pizza", "playlist", "profile", "radio", "receipt", "recipe",
    "report", "review", "ride", "search", "settings", "share", "song", "ticket", "timer", "wallet",
)

KINDS = ("button", "textfield", "list_item", "icon")
DIRECTIONS = ("up", "down", "left", "right")
KEYS = ("back", "home", "enter")
ACTION_WORDS = ("CLICK", "SCROLL", "TYPE", "PRESS", "STOP")
HEADERS = ("INSTRUCTION", "SCREEN", "HISTORY")
TEMPLATE_WORDS = (
    "in", "then", "open", "write", "scroll", "press", "next", "page", "shows", "at", "no", "target",
    "task", "done", "finish", "click", "type", "stop",
)
PUNCT = ("(", ")", ",", '"')
DIGITS = tuple("0123456789")

_TOKEN_RE = re.compile(r'</?[A-Z]{2}>|<[a-z]+>|\d|[A-Za-z_]+|[(),"]|\S')


def _build_vocab() -> list[str]:
    words = [PAD, BOS, EOS]
    for s in STAGE_TAGS:
        words += [OPEN[s], CLOSE[s]]
    words += list(DIGITS) + list(PUNCT) + list(ACTION_WORDS) + list(HEADERS)
    for group in (TEMPLATE_WORDS, KINDS, DIRECTIONS, KEYS, APPS, LEXICON):
        for w in group:
            if w not in words:
                words.append(w)
    return words


class Tokenizer:
    """Deterministic encoder/decoder over a fixed vocabulary.

    Numbers are spelled digit by digit; decoding glues digit runs back
    together in groups of three, which is the only width the task uses.
    """

    def __init__(self) -> None:
        self.vocab = _build_vocab()
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.open_ids = {s: self.index[OPEN[s]] for s in STAGE_TAGS}
        self.close_ids = {s: self.index[CLOSE[s]] for s in STAGE_TAGS}

    def __len__(self) -> int:
        return len(self.vocab)

    def split(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text)

    def encode(self, text: str) -> list[int]:
        out = []
        for piece in self.split(text):
            if piece not in self.index:
                raise ValueError(f"out-of-vocabulary token {piece!r}")
            out.append(self.index[piece])
        return out

    def decode(self, ids) -> str:
        words = [self.vocab[int(i)] for i in ids]
        parts: list[str] = []
        digit_run = 0
        in_quote = False
        prev = None
        for w in words:
            is_digit = w in DIGITS
            closing_quote = w == '"' and in_quote
            glue = prev is not None and (
                w in (")", ",", "(")
                or prev in ("(", ",")
                or (prev == '"' and in_quote)
                or closing_quote
                or (is_digit and prev in DIGITS and digit_run < 3)
            )
            if prev is not None and not glue:
                parts.append(" ")
            parts.append(w)
            if w == '"':
                in_quote = not in_quote
            digit_run = digit_run + 1 if (is_digit and prev in DIGITS and digit_run < 3) else (1 if is_digit else 0)
            prev = w
        return "".join(parts)
