"""Array primitives, parameter storage, optimizer and checkpoint I/O.

Tensors are ``torch.Tensor`` objects (float32 unless a caller casts a whole
store to float64 for finite-difference checks) and the autograd tape is
torch's.  Every projection and attention product in the model goes through
:func:`matmul` so that :class:`FlopCounter` can account for it.
"""

from __future__ import annotations

import json
import math
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

DTYPE = torch.float32


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


# ---------------------------------------------------------------------------
# random number streams
# ---------------------------------------------------------------------------

def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng(seed: int, *names: str | int) -> np.random.Generator:
    """Independent PCG64 stream for ``seed`` and a path of names.

    Streams are split with ``numpy.random.SeedSequence`` spawn keys, so
    ``rng(7, "init", "layers")`` is reproducible on every platform and
    statistically independent of ``rng(7, "data")``.
    """
    key = tuple(n if isinstance(n, int) else _name_key(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def normal(gen: np.random.Generator, shape, std: float) -> torch.Tensor:
    return torch.from_numpy((gen.standard_normal(shape) * std).astype(np.float32))


# ---------------------------------------------------------------------------
# flop accounting
# ---------------------------------------------------------------------------

class FlopCounter:
    """Counts multiply-adds of every :func:`matmul` issued while active."""

    _active: list["FlopCounter"] = []

    def __init__(self) -> None:
        self.macs = 0

    def __enter__(self) -> "FlopCounter":
        FlopCounter._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        FlopCounter._active.remove(self)


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------

def _count(macs: int) -> None:
    for counter in FlopCounter._active:
        counter.macs += macs


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)``."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    if FlopCounter._active:
        batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        _count(math.prod(batch) * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return a @ b


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d) | mask) v`` through the fused kernel.

    ``mask`` is boolean and True where attention is allowed.  The two
    products are counted as matmuls: ``N*N*d`` multiply-adds each per head.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError("attention shape mismatch")
    if FlopCounter._active:
        batch = math.prod(q.shape[:-2])
        _count(batch * q.shape[-2] * k.shape[-2] * q.shape[-1] + batch * q.shape[-2] * k.shape[-2] * v.shape[-1])
    return torch.nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=mask)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a * b


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # the aten kernel subtracts the row maximum before exponentiating
    return torch.softmax(x, dim=axis)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=axis)


def rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * weight


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ValueError("embedding index out of range")
    return table[ids]


def concat(tensors: list[torch.Tensor], axis: int) -> torch.Tensor:
    return torch.cat(tensors, dim=axis)


def slice_axis(x: torch.Tensor, axis: int, start: int, stop: int) -> torch.Tensor:
    return x.narrow(axis, start, stop - start)


def token_logprobs(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """``log p(target)`` at every position; ``logits`` is ``(..., V)``."""
    return log_softmax(logits, -1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` has shape ``(..., V)`` and ``targets``/``mask`` the leading
    shape.  Raises ``ValueError`` when every position is masked out.
    """
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= logits.shape[-1]):
        raise ValueError("target id out of range")
    nll = -token_logprobs(logits, targets)
    if mask is None:
        mask = torch.ones_like(nll, dtype=torch.bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked")
    return (nll * mask.to(nll.dtype)).sum() / count


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0


@dataclass
class ParamStore:
    """Named parameter tensors plus per-parameter Adam state."""

    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    opt: dict[str, AdamState] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: torch.Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def clone(self, dtype: torch.dtype | None = None) -> "ParamStore":
        """Detached deep copy without optimizer state."""
        return ParamStore({k: v.detach().clone().to(dtype or v.dtype) for k, v in self.tensors.items()})

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def requires_grad_(self, names=None) -> "ParamStore":
        chosen = set(self.tensors if names is None else names)
        for k, v in self.tensors.items():
            v.requires_grad_(k in chosen)
        return self

    def zero_grad(self) -> None:
        for v in self.tensors.values():
            v.grad = None


def cosine_lr(step: int, total: int, peak: float, warmup: int = 0, floor: float = 0.0) -> float:
    """Linear warmup then cosine decay from ``peak`` to ``floor``."""
    if total <= 0:
        return peak
    if step < warmup:
        return peak * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


def adam_step(
    store: ParamStore,
    grads: dict[str, torch.Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update of the parameters named in ``grads``.

    Checks every gradient before touching anything, so a non-finite gradient
    aborts the whole step with :class:`NumericError`.
    """
    for name, g in grads.items():
        if g.shape != store[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    with torch.no_grad():
        for name, g in grads.items():
            p = store[name]
            st = store.opt.get(name)
            if st is None:
                st = store.opt[name] = AdamState(torch.zeros_like(p), torch.zeros_like(p))
            st.step += 1
            st.m.mul_(beta1).add_(g, alpha=1 - beta1)
            st.v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = st.m / (1 - beta1**st.step)
            v_hat = st.v / (1 - beta2**st.step)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return store


def clip_grads(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    checked: int
    ok: bool


def grad_check(
    f: Callable[[ParamStore], torch.Tensor],
    params: ParamStore,
    eps: float = 1e-6,
    tol: float = 1e-3,
    names: list[str] | None = None,
    max_entries: int | None = None,
    floor: float = 1e-4,
    seed: int = 0,
) -> dict[str, GradCheckResult]:
    """Compare tape gradients of ``f`` with central finite differences.

    The relative error of an entry is ``|g - fd| / max(|g|, |fd|, floor)``.
    ``params`` is evaluated as given, so pass a float64 clone for a tight
    check.  ``max_entries`` samples that many entries per tensor (all when
    ``None``).  Reduce the report with :func:`grad_check_passed`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = params.names() if names is None else names
    work = params.clone()
    work.requires_grad_(names)
    value = f(work)
    if not torch.isfinite(value):
        raise NumericError("grad_check: non-finite objective")
    value.backward()
    tape = {n: (work[n].grad if work[n].grad is not None else torch.zeros_like(work[n])).detach().clone() for n in names}
    work.requires_grad_([])

    gen = rng(seed, "grad_check")
    report: dict[str, GradCheckResult] = {}
    with torch.no_grad():
        for name in names:
            flat = work[name].view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = np.sort(gen.choice(flat.numel(), size=max_entries, replace=False))
            worst_rel = worst_abs = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = f(work).item()
                flat[i] = orig - eps
                lo = f(work).item()
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NumericError(f"grad_check: non-finite objective perturbing {name}[{i}]")
                fd = (hi - lo) / (2 * eps)
                g = tape[name].view(-1)[i].item()
                err = abs(g - fd)
                worst_abs = max(worst_abs, err)
                worst_rel = max(worst_rel, err / max(abs(g), abs(fd), floor))
            report[name] = GradCheckResult(name, worst_rel, worst_abs, len(idx), worst_rel < tol)
    return report


def grad_check_passed(report: dict[str, GradCheckResult]) -> bool:
    return all(r.ok for r in report.values())


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian f32 blob
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (tensor blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(store.tensors):
        arr = store[name].detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "come-ckpt/1", "blob": path.name + ".bin", "meta": meta or {}, "tensors": entries}
    with open(str(path) + ".bin", "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    path = Path(path)
    manifest_path = Path(str(path) + ".json")
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    store = ParamStore()
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            raise ValueError(f"unsupported dtype {e['dtype']}")
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        store[e["name"]] = torch.from_numpy(arr.copy())
    return store, manifest["meta"]


def checkpoint_exists(path: str | Path) -> bool:
    return Path(str(path) + ".json").exists() and Path(str(path) + ".bin").exists()


@contextmanager
def no_grad() -> Iterator[None]:
    with torch.no_grad():
        yield


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t
