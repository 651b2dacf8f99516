"""Channel-of-Mobile-Experts transformer, its dense parent and an MoE baseline.

All networks are pure functions of a :class:`~come.numerics.ParamStore`.
Parameter names::

    embed.tok, embed.pos
    layers.{l}.attn_norm, layers.{l}.attn.{wq,wk,wv,wo}
    layers.{l}.ffn_norm, layers.{l}.ffn.{e}.{w_in,w_out}
    layers.{l}.gate                      (MoE baseline only)
    final_norm, head
    router                               (CoME only, shape (E*D, E))

A dense model is the same layout with a single expert ``e = 0`` and no
router.  In CoME every channel runs the shared attention on its own stream
and its own FFN; channels meet only in the router fusion before the head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import numerics as nx
from .numerics import ParamStore

FFN_KEYS = ("w_in", "w_out")


@dataclass(frozen=True)
class ComeConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 256
    n_experts: int = 4
    stage_to_expert: tuple[int, ...] = (0, 1, 2, 3)
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_experts < 1:
            raise ValueError("n_experts must be positive")
        if self.n_experts > 1 and sorted(self.stage_to_expert) != list(range(self.n_experts)):
            raise ValueError("stage_to_expert must be a bijection onto the experts")

    def dense(self) -> "ComeConfig":
        return ComeConfig(**{**asdict(self), "n_experts": 1, "stage_to_expert": (0, 0, 0, 0)})

    def with_experts(self, n: int) -> "ComeConfig":
        mapping = (0, 0, 0, 0) if n == 1 else tuple(range(n))
        return ComeConfig(**{**asdict(self), "n_experts": n, "stage_to_expert": mapping})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_to_expert"] = list(self.stage_to_expert)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ComeConfig":
        d = dict(d)
        d["stage_to_expert"] = tuple(d["stage_to_expert"])
        return cls(**d)


def ffn_name(layer: int, expert: int, key: str) -> str:
    return f"layers.{layer}.ffn.{expert}.{key}"


def is_ffn_param(name: str) -> bool:
    return ".ffn." in name


def init_params(cfg: ComeConfig, seed: int, router: bool | None = None, gate: bool = False) -> ParamStore:
    """Random initialization drawn from named PCG64 streams.

    ``router`` defaults to ``cfg.n_experts > 1``.  ``gate`` adds per-layer
    token gates for the input-routed MoE baseline.
    """
    router = cfg.n_experts > 1 if router is None else router
    D, I, s = cfg.d_model, cfg.d_ff, cfg.init_std
    out_std = s / math.sqrt(2 * cfg.n_layers)
    p = ParamStore()
    p["embed.tok"] = nx.normal(nx.rng(seed, "embed.tok"), (cfg.vocab_size, D), s)
    p["embed.pos"] = nx.normal(nx.rng(seed, "embed.pos"), (cfg.max_len, D), s)
    for l in range(cfg.n_layers):
        p[f"layers.{l}.attn_norm"] = torch.ones(D)
        for w in ("wq", "wk", "wv"):
            p[f"layers.{l}.attn.{w}"] = nx.normal(nx.rng(seed, f"layers.{l}.attn.{w}"), (D, D), s)
        p[f"layers.{l}.attn.wo"] = nx.normal(nx.rng(seed, f"layers.{l}.attn.wo"), (D, D), out_std)
        p[f"layers.{l}.ffn_norm"] = torch.ones(D)
        for e in range(cfg.n_experts):
            p[ffn_name(l, e, "w_in")] = nx.normal(nx.rng(seed, ffn_name(l, e, "w_in")), (D, I), s)
            p[ffn_name(l, e, "w_out")] = nx.normal(nx.rng(seed, ffn_name(l, e, "w_out")), (I, D), out_std)
        if gate:
            p[f"layers.{l}.gate"] = nx.normal(nx.rng(seed, f"layers.{l}.gate"), (D, cfg.n_experts), s)
    p["final_norm"] = torch.ones(D)
    p["head"] = nx.normal(nx.rng(seed, "head"), (D, cfg.vocab_size), s)
    if router:
        p["router"] = init_router(cfg, seed)
    return p


def init_router(cfg: ComeConfig, seed: int) -> torch.Tensor:
    return nx.normal(nx.rng(seed, "router"), (cfg.n_experts * cfg.d_model, cfg.n_experts), cfg.init_std)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def attention_mask(tokens: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
    """Boolean ``(B, 1, N, N)`` mask; True where attention is allowed."""
    n = tokens.shape[1]
    causal = torch.ones(n, n, dtype=torch.bool).tril()
    mask = causal.view(1, 1, n, n)
    if pad_mask is not None:
        # padding queries see only themselves so no row is fully masked
        mask = (mask & pad_mask.view(pad_mask.shape[0], 1, 1, n)) | torch.eye(n, dtype=torch.bool)
    return mask


def embed(p: ParamStore, cfg: ComeConfig, tokens: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
    if tokens.shape[1] > cfg.max_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {cfg.max_len}")
    if positions is None:
        positions = torch.arange(tokens.shape[1]).expand_as(tokens)
    return nx.embedding(p["embed.tok"], tokens) + nx.embedding(p["embed.pos"], positions)


def self_attention(p: ParamStore, cfg: ComeConfig, layer: int, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    B, N, D = x.shape
    H, dh = cfg.n_heads, D // cfg.n_heads
    h = nx.rms_norm(x, p[f"layers.{layer}.attn_norm"], cfg.norm_eps)

    def heads(w: str) -> torch.Tensor:
        return nx.matmul(h, p[f"layers.{layer}.attn.{w}"]).view(B, N, H, dh).transpose(1, 2)

    ctx = nx.attention(heads("wq"), heads("wk"), heads("wv"), mask).transpose(1, 2).reshape(B, N, D)
    return x + nx.matmul(ctx, p[f"layers.{layer}.attn.wo"])


def ffn(p: ParamStore, cfg: ComeConfig, layer: int, expert: int, x: torch.Tensor) -> torch.Tensor:
    """Residual expert FFN ``x + W_out silu(W_in rms(x))``."""
    return x + ffn_delta(p, cfg, layer, expert, x)


def ffn_delta(p: ParamStore, cfg: ComeConfig, layer: int, expert: int, x: torch.Tensor) -> torch.Tensor:
    h = nx.rms_norm(x, p[f"layers.{layer}.ffn_norm"], cfg.norm_eps)
    return nx.matmul(nx.silu(nx.matmul(h, p[ffn_name(layer, expert, "w_in")])), p[ffn_name(layer, expert, "w_out")])


# ---------------------------------------------------------------------------
# dense and CoME forwards
# ---------------------------------------------------------------------------

def dense_hidden(p: ParamStore, cfg: ComeConfig, tokens, pad_mask=None, positions=None) -> torch.Tensor:
    mask = attention_mask(tokens, pad_mask)
    x = embed(p, cfg, tokens, positions)
    for l in range(cfg.n_layers):
        x = ffn(p, cfg, l, 0, self_attention(p, cfg, l, x, mask))
    return nx.rms_norm(x, p["final_norm"], cfg.norm_eps)


def dense_forward(p: ParamStore, cfg: ComeConfig, tokens, pad_mask=None, positions=None) -> torch.Tensor:
    """Logits ``(B, N, V)`` of the single-FFN parent model."""
    return lm_logits(p, dense_hidden(p, cfg, tokens, pad_mask, positions))


def channel_states(p: ParamStore, cfg: ComeConfig, tokens, pad_mask=None, positions=None) -> list[torch.Tensor]:
    """Last-layer, final-normed hidden state of every channel, each ``(B, N, D)``."""
    mask = attention_mask(tokens, pad_mask)
    x0 = embed(p, cfg, tokens, positions)
    states = []
    for e in range(cfg.n_experts):
        x = x0
        for l in range(cfg.n_layers):
            x = ffn(p, cfg, l, e, self_attention(p, cfg, l, x, mask))
        states.append(nx.rms_norm(x, p["final_norm"], cfg.norm_eps))
    return states


def router_logits(p: ParamStore, states: list[torch.Tensor]) -> torch.Tensor:
    """Channel logits ``flatten(H) @ W_c`` with shape ``(B, N, E)``."""
    return nx.matmul(nx.concat(states, -1), p["router"])


def route_and_fuse(states, logits: torch.Tensor) -> torch.Tensor:
    """Softmax-weighted sum of channel states.

    ``states`` is a list of ``(B, N, D)`` tensors or a ``(B, N, E, D)``
    channel state.
    """
    return fuse_with_weights(states, nx.softmax(logits, -1))


def fuse_with_weights(states, weights: torch.Tensor) -> torch.Tensor:
    if isinstance(states, torch.Tensor):
        states = list(states.unbind(2))
    if len(states) != weights.shape[-1]:
        raise ValueError("number of channels and fusion weights differ")
    out = states[0] * weights[..., 0:1]
    for e in range(1, len(states)):
        out = out + states[e] * weights[..., e: e + 1]
    return out


def lm_logits(p: ParamStore, fused: torch.Tensor) -> torch.Tensor:
    return nx.matmul(fused, p["head"])


@dataclass
class ComeOutput:
    logits: torch.Tensor
    router_logits: torch.Tensor
    states: list[torch.Tensor] = field(repr=False)

    def channel_state(self) -> torch.Tensor:
        """The ``(B, N, E, D)`` channel hidden state."""
        return torch.stack(self.states, dim=2)


def come_forward(
    p: ParamStore,
    cfg: ComeConfig,
    tokens: torch.Tensor,
    pad_mask=None,
    positions=None,
    fusion_weights: torch.Tensor | None = None,
) -> ComeOutput:
    """Full CoME pass.  ``fusion_weights`` overrides the router (e.g. one-hot)."""
    states = channel_states(p, cfg, tokens, pad_mask, positions)
    logits_c = router_logits(p, states)
    weights = nx.softmax(logits_c, -1) if fusion_weights is None else fusion_weights
    return ComeOutput(lm_logits(p, fuse_with_weights(states, weights)), logits_c, states)


def forward_channels(tokens, p: ParamStore, cfg: ComeConfig) -> tuple[torch.Tensor, torch.Tensor]:
    states = channel_states(p, cfg, tokens)
    return torch.stack(states, dim=2), router_logits(p, states)


def model_logits(p: ParamStore, cfg: ComeConfig, tokens, pad_mask=None, positions=None) -> torch.Tensor:
    """Next-token logits for either a dense or a CoME store."""
    if "router" in p:
        return come_forward(p, cfg, tokens, pad_mask, positions).logits
    return dense_forward(p, cfg, tokens, pad_mask, positions)


# ---------------------------------------------------------------------------
# input-routed MoE baseline
# ---------------------------------------------------------------------------

@dataclass
class MoeOutput:
    logits: torch.Tensor
    routes: list[torch.Tensor]  # per layer, (B, N) top-1 expert of each input position


def moe_forward(
    p: ParamStore,
    cfg: ComeConfig,
    tokens: torch.Tensor,
    top_k: int = 1,
    force_expert: int | None = None,
    pad_mask=None,
    positions=None,
) -> MoeOutput:
    """Token-choice MoE: each position's FFN is picked by a gate on its own state.

    The top-k gate probabilities are renormalized, so top-1 weights are
    exactly 1.  ``force_expert`` replaces the gate decision everywhere.
    """
    mask = attention_mask(tokens, pad_mask)
    x = embed(p, cfg, tokens, positions)
    routes = []
    E = cfg.n_experts
    for l in range(cfg.n_layers):
        x = self_attention(p, cfg, l, x, mask)
        if force_expert is not None:
            weights = torch.zeros(*x.shape[:2], E, dtype=x.dtype)
            weights[..., force_expert] = 1.0
        elif E == 1:
            weights = torch.ones(*x.shape[:2], 1, dtype=x.dtype)
        else:
            h = nx.rms_norm(x, p[f"layers.{l}.ffn_norm"], cfg.norm_eps)
            probs = nx.softmax(nx.matmul(h, p[f"layers.{l}.gate"]), -1)
            top = probs.topk(min(top_k, E), dim=-1)
            kept = torch.zeros_like(probs).scatter(-1, top.indices, top.values)
            weights = kept / kept.sum(-1, keepdim=True)
        routes.append(weights.argmax(-1))
        if E == 1 or force_expert is not None and top_k == 1:
            e = 0 if E == 1 else force_expert
            delta = ffn_delta(p, cfg, l, e, x) * weights[..., e: e + 1]
        else:
            delta = sum(ffn_delta(p, cfg, l, e, x) * weights[..., e: e + 1] for e in range(E))
        x = x + delta
    h = nx.rms_norm(x, p["final_norm"], cfg.norm_eps)
    return MoeOutput(lm_logits(p, h), routes)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def assemble_from_experts(
    specialists: list[ParamStore], cfg: ComeConfig, donor: int = 0, router_seed: int = 0
) -> ParamStore:
    """CoME store whose channel ``e`` FFNs come from ``specialists[e]``.

    Shared weights (embeddings, attention, norms, head) are copied once from
    the donor specialist.
    """
    if len(specialists) != cfg.n_experts:
        raise ValueError(f"need {cfg.n_experts} specialists, got {len(specialists)}")
    dense_cfg = cfg.dense()
    reference = set(init_params(dense_cfg, 0, router=False).names())
    for i, s in enumerate(specialists):
        if set(s.names()) != reference:
            raise ValueError(f"specialist {i} does not match the dense layout")
        for name in s.names():
            if s[name].shape != specialists[donor][name].shape:
                raise ValueError(f"specialist {i} shape mismatch for {name}")
    out = ParamStore()
    for name in specialists[donor].names():
        if not is_ffn_param(name):
            out[name] = specialists[donor][name].detach().clone()
    for l in range(cfg.n_layers):
        for e, s in enumerate(specialists):
            for key in FFN_KEYS:
                out[ffn_name(l, e, key)] = s[ffn_name(l, 0, key)].detach().clone()
    out["router"] = init_router(cfg, router_seed)
    return out


def extract_expert(p: ParamStore, cfg: ComeConfig, expert: int) -> ParamStore:
    """Dense store built from channel ``expert`` of a CoME/MoE store."""
    out = ParamStore()
    for name in p.names():
        if name == "router" or name.endswith(".gate") or is_ffn_param(name):
            continue
        out[name] = p[name].detach().clone()
    for l in range(cfg.n_layers):
        for key in FFN_KEYS:
            out[ffn_name(l, 0, key)] = p[ffn_name(l, expert, key)].detach().clone()
    return out


# ---------------------------------------------------------------------------
# batching helpers and generation
# ---------------------------------------------------------------------------

def left_pad(seqs: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Left-padded tokens, validity mask and position ids."""
    n = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), n), pad_id, dtype=torch.long)
    valid = torch.zeros(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        if s:
            tokens[i, n - len(s):] = torch.tensor(s, dtype=torch.long)
            valid[i, n - len(s):] = True
    positions = (valid.long().cumsum(1) - 1).clamp(min=0)
    return tokens, valid, positions


@dataclass
class Generation:
    tokens: list[int]
    experts: list[int]


def _sample(logits: np.ndarray, temperature: float, gen: np.random.Generator) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / temperature
    z -= z.max()
    probs = np.exp(z)
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"), len(cdf) - 1))


@torch.no_grad()
def generate(
    p: ParamStore,
    cfg: ComeConfig,
    prefixes: list[list[int]],
    temperature: float = 0.0,
    seed: int = 0,
    max_new: int = 48,
    stop_id: int | None = None,
    pad_id: int = 0,
    stream_ids: list[int] | None = None,
) -> list[Generation]:
    """Autoregressive decoding of a batch of prefixes.

    Row ``i`` draws from the PCG64 stream ``(seed, "generate",
    stream_ids[i])`` so sampled output does not depend on batch order.
    Temperature 0 is greedy.  For CoME stores the argmax channel of the
    router at every emitted token is recorded.
    """
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    stream_ids = list(range(len(prefixes))) if stream_ids is None else stream_ids
    gens = [nx.rng(seed, "generate", int(s)) for s in stream_ids]
    outs = [Generation([], []) for _ in prefixes]
    active = [i for i in range(len(prefixes)) if len(prefixes[i]) < cfg.max_len]
    has_router = "router" in p
    for _ in range(max_new):
        if not active:
            break
        seqs = [prefixes[i] + outs[i].tokens for i in active]
        tokens, valid, positions = left_pad(seqs, pad_id)
        if has_router:
            out = come_forward(p, cfg, tokens, valid, positions)
            last, experts = out.logits[:, -1], out.router_logits[:, -1].argmax(-1).tolist()
        else:
            last, experts = dense_forward(p, cfg, tokens, valid, positions)[:, -1], [0] * len(active)
        last = last.float().numpy()
        still = []
        for row, i in enumerate(active):
            t = _sample(last[row], temperature, gens[i])
            outs[i].tokens.append(t)
            outs[i].experts.append(int(experts[row]))
            if t != stop_id and len(prefixes[i]) + len(outs[i].tokens) < cfg.max_len:
                still.append(i)
        active = still
    return outs
