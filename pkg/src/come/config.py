"""Nested run configuration with strict key validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class DataSection:
    n_episodes: int = 1000
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    eval_steps: int = 0  # held-out test steps used by `eval` (0 = all)
    val_steps: int = 150


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    n_experts: int = 4
    max_len: int = 256


@dataclass
class StageSection:
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    gamma: float = 0.1
    warmup: int = 20  # optimizer steps of linear warmup


@dataclass
class AblationSection:
    skip_expert_ft: bool = False
    skip_router_ft: bool = False


@dataclass
class RewardSection:
    delta_d: float = 50.0
    delta_f: float = 0.5
    mode: str = "continuous"
    training_free: bool = False
    ig_target: str = "gold"
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    warmup: int = 20


@dataclass
class SampleSection:
    K: int = 10
    temperature: float = 1.0
    n_steps: int = 200
    max_new: int = 48


@dataclass
class DpoSection:
    strategies: list[str] = field(default_factory=lambda: ["cc", "cw"])
    lr: float = 5e-5
    epochs: int = 1
    batch_size: int = 16
    beta: float = 0.1
    alpha: float = 1.0
    gamma: float = 0.1
    warmup: int = 2


@dataclass
class EvalSection:
    checkpoint: str = "dpo"
    threshold: float = 140.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    base: StageSection = field(default_factory=lambda: StageSection(lr=3e-3, epochs=12, warmup=50))
    expert: StageSection = field(default_factory=lambda: StageSection(lr=1e-3, epochs=1))
    router: StageSection = field(default_factory=lambda: StageSection(lr=3e-2, epochs=10, batch_size=256))
    cot: StageSection = field(default_factory=lambda: StageSection(lr=1e-3, epochs=2))
    ablation: AblationSection = field(default_factory=AblationSection)
    reward: RewardSection = field(default_factory=RewardSection)
    sample: SampleSection = field(default_factory=SampleSection)
    dpo: DpoSection = field(default_factory=DpoSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")


def _build(cls, data: Any, prefix: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{prefix or '<root>'}: expected a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            problems.append(f"{path}: unknown key")
            continue
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, path + ".", problems)
        else:
            kwargs[key] = _coerce(value, default, path, problems)
    return cls(**kwargs)


def _coerce(value: Any, default: Any, path: str, problems: list[str]) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):  # YAML 1.1 reads "1e-3" as a string
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    problems.append(f"{path}: expected {type(default).__name__}, got {value!r}")
    return default


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([f"{dotted}: cannot descend into a scalar"])
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None,
                out: str | None = None) -> RunConfig:
    """Defaults, then the YAML file, then ``key=value`` overrides, then flags.

    Every invalid key or value is collected before raising :class:`ConfigError`.
    """
    tree: dict = {}
    problems: list[str] = []
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        if not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        tree = loaded
    for item in overrides:
        if "=" not in item:
            problems.append(f"--set {item!r}: expected key=value")
            continue
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["out"] = out
    cfg = _build(RunConfig, tree, "", problems)
    problems += _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate(cfg: RunConfig) -> list[str]:
    bad = []
    m = cfg.model
    if m.d_model % m.n_heads:
        bad.append("model.d_model: must be divisible by model.n_heads")
    if m.n_experts != 4:
        bad.append("model.n_experts: the stage curriculum needs exactly 4 experts")
    if len(cfg.data.split) != 3 or abs(sum(cfg.data.split) - 1) > 1e-9:
        bad.append("data.split: three fractions summing to 1")
    for s in cfg.dpo.strategies:
        if s not in ("cc", "cw", "lw"):
            bad.append(f"dpo.strategies: unknown strategy {s!r}")
    if cfg.reward.mode not in ("continuous", "discrete"):
        bad.append("reward.mode: continuous or discrete")
    if cfg.reward.ig_target not in ("gold", "own"):
        bad.append("reward.ig_target: gold or own")
    if cfg.sample.K < 2:
        bad.append("sample.K: at least 2")
    for name in ("base", "expert", "router", "cot"):
        st = getattr(cfg, name)
        if st.epochs < 0 or st.batch_size < 1 or st.lr < 0 or st.gamma < 0 or st.warmup < 0:
            bad.append(f"{name}: epochs/lr/gamma/warmup must be >= 0 and batch_size >= 1")
    for name in ("reward", "dpo"):
        if getattr(cfg, name).warmup < 0:
            bad.append(f"{name}.warmup: must be >= 0")
    return bad
