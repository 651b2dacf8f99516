"""Artifact-level pipeline: one function per CLI subcommand plus an in-process experiment runner.

Every stage reads its inputs from a :class:`Workspace`, fails fast with
:class:`MissingArtifact` (naming the producing subcommand) when one is
absent, and writes only its declared outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import dpo as D
from . import evaluate as E
from . import model as M
from . import numerics as nx
from . import reward as R
from . import synthgui as G
from . import training as T
from .config import RunConfig, StageSection
from .numerics import ParamStore
from .synthgui import StageId, Step
from .tokenizer import STAGE_TAGS, Tokenizer

RM_NAMES = tuple(f"rm{k}" for k in range(R.N_RM))
EVAL_CHECKPOINTS = ("base", "assembled", "router", "cot", "dpo", "gold")


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `come {producer}` first")
        self.path = path
        self.producer = producer


# ---------------------------------------------------------------------------
# workspace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Workspace:
    root: Path

    def data(self, split: str) -> Path:
        return self.root / "data" / f"{split}.jsonl"

    def ckpt(self, name: str) -> Path:
        return self.root / "ckpt" / name

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    @property
    def samples(self) -> Path:
        return self.root / "dpo" / "samples.jsonl"

    @property
    def pairs(self) -> Path:
        return self.root / "dpo" / "pairs.jsonl"

    def manifest(self, command: str) -> Path:
        return self.root / "manifests" / f"{command}.json"

    # -- inputs -------------------------------------------------------------

    def steps(self, split: str) -> list[Step]:
        path = self.data(split)
        if not path.exists():
            raise MissingArtifact(path, "gen-data")
        return G.read_jsonl(path)

    def load(self, name: str, producer: str) -> tuple[ParamStore, M.ComeConfig]:
        path = self.ckpt(name)
        if not nx.checkpoint_exists(path):
            raise MissingArtifact(Path(str(path) + ".json"), producer)
        store, meta = nx.load_checkpoint(path)
        return store, M.ComeConfig.from_dict(meta["model"])

    def save(self, name: str, store: ParamStore, cfg: M.ComeConfig, stage: str) -> list[Path]:
        path = self.ckpt(name)
        nx.save_checkpoint(path, store, {"model": cfg.to_dict(), "stage": stage})
        return [Path(str(path) + ".json"), Path(str(path) + ".bin")]

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifact(path, producer)
        return path


def source_tag() -> str:
    """``v<version>+<hash of the package sources>``."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"v{__version__}+{h.hexdigest()[:10]}"


def write_manifest(ws: Workspace, command: str, rc: RunConfig, outputs: Sequence[Path], wall: float) -> Path:
    rec = {"command": command, "config_hash": rc.digest(), "seed": rc.seed, "version": source_tag(),
           "wall_time_s": round(wall, 3), "outputs": sorted(str(Path(p).relative_to(ws.root)) for p in outputs)}
    path = ws.manifest(command)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# config translation
# ---------------------------------------------------------------------------

def model_config(rc: RunConfig, tok: Tokenizer) -> M.ComeConfig:
    m = rc.model
    return M.ComeConfig(vocab_size=len(tok), d_model=m.d_model, n_layers=m.n_layers, n_heads=m.n_heads,
                        d_ff=m.d_ff, max_len=m.max_len, n_experts=m.n_experts)


def train_config(sec: StageSection, stage: str, seed: int, expert: int | None = None) -> T.TrainConfig:
    return T.TrainConfig(stage, lr=sec.lr, epochs=sec.epochs, batch_size=sec.batch_size, gamma=sec.gamma,
                         expert=expert, seed=seed, warmup=sec.warmup)


def reward_config(rc: RunConfig) -> R.RewardConfig:
    r = rc.reward
    return R.RewardConfig(r.delta_d, r.delta_f, r.mode, r.training_free, r.ig_target)


def dpo_config(rc: RunConfig) -> D.DpoConfig:
    d = rc.dpo
    return D.DpoConfig(lr=d.lr, epochs=d.epochs, batch_size=d.batch_size, beta=d.beta, alpha=d.alpha,
                       gamma=d.gamma, seed=rc.seed, warmup=d.warmup)


def _head(items: list, n: int) -> list:
    return items if n <= 0 else items[:n]


@dataclass
class Data:
    train: list[Step]
    val: list[Step]
    test: list[Step]
    tok: Tokenizer
    max_len: int

    def examples(self, split: str, limit: int = 0) -> list[T.Example]:
        return T.build_examples(_head(getattr(self, split), limit), self.tok, self.max_len)


def load_data(rc: RunConfig, ws: Workspace) -> Data:
    return Data(ws.steps("train"), ws.steps("val"), ws.steps("test"), Tokenizer(), rc.model.max_len)


def sample_steps(rc: RunConfig, train: Sequence[Step]) -> list[Step]:
    n = min(rc.sample.n_steps, len(train))
    idx = np.sort(nx.rng(rc.seed, "sample", "steps").choice(len(train), size=n, replace=False))
    return [train[i] for i in idx]


# ---------------------------------------------------------------------------
# stages (one per subcommand); each returns the paths it wrote
# ---------------------------------------------------------------------------

def gen_data(rc: RunConfig, ws: Workspace) -> list[Path]:
    d = G.gen_dataset(rc.seed, rc.data.n_episodes, tuple(rc.data.split))
    out = []
    for split in ("train", "val", "test"):
        G.write_jsonl(ws.data(split), d[split])
        out.append(ws.data(split))
    return out


def train_base(rc: RunConfig, ws: Workspace) -> list[Path]:
    data = load_data(rc, ws)
    cfg = model_config(rc, data.tok)
    init = M.init_params(cfg.dense(), rc.seed, router=False)
    p, rows = T.base_ft(init, cfg, data.examples("train"), train_config(rc.base, "base", rc.seed), data.tok.pad_id,
                        data.examples("val", rc.data.val_steps))
    T.write_report(ws.report("base.csv"), rows)
    return ws.save("base", p, cfg.dense(), "base") + [ws.report("base.csv")]


def train_expert(rc: RunConfig, ws: Workspace, stage: str) -> list[Path]:
    tag = stage.upper()
    if tag not in STAGE_TAGS:
        raise ValueError(f"unknown stage {stage!r}")
    data = load_data(rc, ws)
    base, _ = ws.load("base", "train-base")
    cfg = model_config(rc, data.tok)
    tc = train_config(rc.expert, "expert", rc.seed, expert=int(StageId[tag]))
    sp, rows = T.expert_ft(base, cfg, data.examples("train"), tc, data.tok.pad_id,
                           data.examples("val", rc.data.val_steps))
    T.write_report(ws.report(f"expert_{tag.lower()}.csv"), rows)
    return ws.save(f"expert_{tag.lower()}", sp, cfg.dense(), f"expert_{tag.lower()}") + \
        [ws.report(f"expert_{tag.lower()}.csv")]


def assemble(rc: RunConfig, ws: Workspace) -> list[Path]:
    cfg = model_config(rc, Tokenizer())
    if rc.ablation.skip_expert_ft:
        base, _ = ws.load("base", "train-base")
        specialists = [base] * cfg.n_experts
    else:
        by_stage = {t: ws.load(f"expert_{t.lower()}", f"train-expert --stage {t.lower()}")[0] for t in STAGE_TAGS}
        # channel e holds the specialist of the stage mapped to it
        specialists = [by_stage[STAGE_TAGS[cfg.stage_to_expert.index(e)]] for e in range(cfg.n_experts)]
    p = M.assemble_from_experts(specialists, cfg, router_seed=rc.seed)
    return ws.save("assembled", p, cfg, "assembled")


def train_router(rc: RunConfig, ws: Workspace) -> list[Path]:
    data = load_data(rc, ws)
    p, cfg = ws.load("assembled", "assemble")
    val = data.examples("val", rc.data.val_steps)
    q, rows = T.router_ft(p, cfg, data.examples("train"), train_config(rc.router, "router", rc.seed),
                          data.tok.pad_id, val)
    T.write_report(ws.report("router.csv"), rows)
    sel = E.router_selection_accuracy(q, cfg, val, data.tok.pad_id)
    E.write_csv(ws.report("selection_router.csv"), list(sel.rows()[0]), sel.rows())
    return ws.save("router", q, cfg, "router") + [ws.report("router.csv"), ws.report("selection_router.csv")]


def train_cot(rc: RunConfig, ws: Workspace) -> list[Path]:
    data = load_data(rc, ws)
    if rc.ablation.skip_router_ft:
        p, cfg = ws.load("assembled", "assemble")
    else:
        p, cfg = ws.load("router", "train-router")
    q, rows = T.cot_ft(p, cfg, data.examples("train"), train_config(rc.cot, "cot", rc.seed), data.tok.pad_id,
                       data.examples("val", rc.data.val_steps))
    T.write_report(ws.report("cot.csv"), rows)
    return ws.save("cot", q, cfg, "cot") + [ws.report("cot.csv")]


RM_REPORT_FIELDS = ("rm", "epoch", "val_nll")


def train_rm(rc: RunConfig, ws: Workspace) -> list[Path]:
    data = load_data(rc, ws)
    base, bcfg = ws.load("base", "train-base")
    cfg = model_config(rc, data.tok)
    out: list[Path] = []
    rows = []
    sec = rc.reward
    tc = T.TrainConfig("base", lr=sec.lr, epochs=sec.epochs, batch_size=sec.batch_size, seed=rc.seed,
                         warmup=sec.warmup)
    for k in range(R.N_RM):
        if rc.reward.training_free:
            rm, losses = base, []
        else:
            tr = R.build_rm_examples(data.train, data.tok, k, cfg.max_len)
            va = R.build_rm_examples(_head(data.val, rc.data.val_steps), data.tok, k, cfg.max_len)
            rm, losses = R.train_rm(k, base, cfg, tr, tc, data.tok.pad_id, va)
        rows += [{"rm": k, "epoch": e, "val_nll": f"{v:.6f}"} for e, v in enumerate(losses)]
        out += ws.save(RM_NAMES[k], rm, bcfg, RM_NAMES[k])
    E.write_csv(ws.report("rm.csv"), RM_REPORT_FIELDS, rows)
    return out + [ws.report("rm.csv")]


def load_rms(rc: RunConfig, ws: Workspace) -> R.RewardModelSet:
    if rc.reward.training_free:
        base, bcfg = ws.load("base", "train-base")
        return R.RewardModelSet.training_free(base, bcfg)
    models = [ws.load(name, "train-rm") for name in RM_NAMES]
    return R.RewardModelSet([m for m, _ in models], models[0][1])


def sample(rc: RunConfig, ws: Workspace) -> list[Path]:
    data = load_data(rc, ws)
    policy, cfg = ws.load("cot", "train-cot")
    rms = load_rms(rc, ws)
    s = rc.sample
    sets = D.sample_sets(policy, cfg, sample_steps(rc, data.train), data.tok, rms, s.K, s.temperature, rc.seed,
                         reward_config(rc), s.max_new)
    D.write_sets(ws.samples, sets)
    return [ws.samples]


def build_dpo(rc: RunConfig, ws: Workspace) -> list[Path]:
    sets = D.read_sets(ws.require(ws.samples, "sample"))
    pairs = D.build_dpo_dataset(sets, rc.dpo.strategies)
    D.write_pairs(ws.pairs, pairs, Tokenizer())
    out = [ws.pairs]
    if pairs:
        E.write_ig_csv(ws.report("pairs_ig.csv"), E.pair_ig_stats(pairs))
        out.append(ws.report("pairs_ig.csv"))
    return out


DPO_FIELDS = D.DPO_REPORT_FIELDS


def train_dpo(rc: RunConfig, ws: Workspace) -> list[Path]:
    data = load_data(rc, ws)
    policy, cfg = ws.load("cot", "train-cot")
    pairs = D.read_pairs(ws.require(ws.pairs, "build-dpo"))
    q, rows = D.dpo_train(policy, policy, cfg, pairs, dpo_config(rc), data.tok,
                          _head(data.val, rc.data.val_steps))
    E.write_csv(ws.report("dpo.csv"), DPO_FIELDS, [_fmt_row(r) for r in rows])
    return ws.save("dpo", q, cfg, "dpo") + [ws.report("dpo.csv")]


def _fmt_row(r: dict) -> dict:
    return {k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()}


PRED_FIELDS = ("ref", "match", "action", "trace")


def gold_predictions(steps: Sequence[Step], tok: Tokenizer) -> list[E.Prediction]:
    """Score the gold traces themselves (an oracle policy)."""
    out = []
    for s in steps:
        ids = G.trace_ids(s.gold_trace, tok)
        out.append(E.Prediction(s.ref, ids, [], G.action_from_ids(ids, tok)))
    return out


def evaluate(rc: RunConfig, ws: Workspace, checkpoint: str | None = None) -> list[Path]:
    name = checkpoint or rc.eval.checkpoint
    if name not in EVAL_CHECKPOINTS:
        raise ValueError(f"eval checkpoint must be one of {EVAL_CHECKPOINTS}")
    tok = Tokenizer()
    steps = _head(ws.steps("test"), rc.data.eval_steps)
    out = []
    if name == "gold":
        preds = gold_predictions(steps, tok)
        cfg = None
    else:
        producer = {"base": "train-base", "assembled": "assemble", "router": "train-router", "cot": "train-cot",
                    "dpo": "train-dpo"}[name]
        p, cfg = ws.load(name, producer)
        if cfg.n_experts == 1:
            p = M.assemble_from_experts([p], cfg)
        _, preds = E.evaluate_policy(p, cfg, steps, tok)
    report, flags = E.aggregate([x.action for x in preds], steps, rc.eval.threshold)
    for x, f in zip(preds, flags):
        x.match = f
    E.write_metric_csv(ws.report(f"metrics_{name}.csv"), report)
    E.write_csv(ws.report(f"predictions_{name}.csv"), PRED_FIELDS,
                 [{"ref": x.ref, "match": int(x.match), "action": x.action.render(), "trace": tok.decode(x.tokens)}
                  for x in preds])
    out += [ws.report(f"metrics_{name}.csv"), ws.report(f"predictions_{name}.csv")]
    if cfg is not None and cfg.n_experts > 1:
        hist = E.expert_distribution(preds, tok, cfg.n_experts)
        E.write_csv(ws.report(f"experts_{name}.csv"), ["stage"] + [f"expert_{e}" for e in range(cfg.n_experts)],
                     [{"stage": t, **{f"expert_{e}": int(hist[i, e]) for e in range(cfg.n_experts)}}
                      for i, t in enumerate(STAGE_TAGS)])
        out.append(ws.report(f"experts_{name}.csv"))
    return out


SUMMARY_FIELDS = ("checkpoint", "count", "type_acc", "match_acc")
FLOPS_FIELDS = ("hidden", "seq_len", "intermediate", "model", "attn", "ffn", "total")


def report(rc: RunConfig, ws: Workspace) -> list[Path]:
    rows = []
    for name in EVAL_CHECKPOINTS:
        path = ws.report(f"metrics_{name}.csv")
        if path.exists():
            overall = [r for r in csv.DictReader(open(path, encoding="utf-8")) if r["action"] == "overall"][0]
            rows.append({"checkpoint": name, **{k: overall[k] for k in SUMMARY_FIELDS[1:]}})
    if not rows:
        raise MissingArtifact(ws.report("metrics_<checkpoint>.csv"), "eval")
    E.write_csv(ws.report("summary.csv"), SUMMARY_FIELDS, rows)
    out = [ws.report("summary.csv")]

    m = rc.model
    flops = []
    c = E.CostModelInput(m.d_model, m.max_len, m.d_ff, m.n_experts)
    for kind, v in E.flops_analytic(c).items():
        flops.append({"hidden": c.hidden, "seq_len": c.seq_len, "intermediate": c.intermediate, "model": kind, **v})
    E.write_csv(ws.report("flops.csv"), FLOPS_FIELDS, flops)
    out.append(ws.report("flops.csv"))

    exp = ws.report(f"experts_{rc.eval.checkpoint}.csv")
    if exp.exists():
        table = list(csv.DictReader(open(exp, encoding="utf-8")))
        hist = np.array([[int(r[k]) for k in r if k != "stage"] for r in table])
        E.plot_expert_distribution(hist, ws.report("expert_distribution.svg"))
        out.append(ws.report("expert_distribution.svg"))
    if ws.pairs.exists():
        pairs = D.read_pairs(ws.pairs)
        if pairs:
            E.plot_ig_boxes({"chosen": [p.chosen.bundle for p in pairs],
                             "rejected": [p.rejected.bundle for p in pairs]}, ws.report("infogain_boxes.svg"))
            out.append(ws.report("infogain_boxes.svg"))
    return out


# ---------------------------------------------------------------------------
# in-process experiment: curriculum ablations and DPO strategies for one seed
# ---------------------------------------------------------------------------

EXPERIMENT_ARMS = ("cot_full", "cot_no_expert", "cot_no_router", "dpo_cc_cw", "dpo_cw")


@dataclass
class ExperimentResult:
    seed: int
    match: dict[str, float]
    selection_acc: float
    pair_ig: dict[str, dict[str, float]]  # strategy set -> {"chosen": mean r_ig, "rejected": ..., "pairs": n}
    timings: dict[str, float]

    def to_json(self) -> dict:
        return {"seed": self.seed, "match": self.match, "selection_acc": self.selection_acc,
                "pair_ig": self.pair_ig, "timings": self.timings}

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentResult":
        return cls(d["seed"], d["match"], d["selection_acc"], d["pair_ig"], d["timings"])


def experiment_key(rc: RunConfig) -> str:
    """Identifies an experiment result: resolved config (minus ``out``) and package sources."""
    return f"{replace(rc, out='').digest()}@{source_tag()}"


def save_experiment(path: Path, rc: RunConfig, res: ExperimentResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    rec = {"key": experiment_key(rc), "result": res.to_json()}
    path.write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_experiment(path: Path, rc: RunConfig) -> ExperimentResult | None:
    """The stored result if it was produced by this config and these sources, else None."""
    try:
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None
    if rec.get("key") != experiment_key(rc):
        return None
    return ExperimentResult.from_json(rec["result"])


def _mean_ig(pairs: Sequence[D.DpoPair]) -> dict[str, float]:
    if not pairs:
        return {"chosen": float("nan"), "rejected": float("nan"), "pairs": 0}
    return {"chosen": float(np.mean([p.chosen.bundle.r_ig for p in pairs])),
            "rejected": float(np.mean([p.rejected.bundle.r_ig for p in pairs])), "pairs": len(pairs)}


def run_experiment(rc: RunConfig, log: Callable[[str], None] = lambda s: None) -> ExperimentResult:
    """Train every arm needed for the direction checks, sharing common stages.

    Arms: full curriculum, without Expert-FT, without Router-FT (all end
    with CoT-FT), and Info-DPO from the full arm with cc+cw and cw-only
    pairs.  All arms are scored by greedy match accuracy on the test split.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()

    def tick(name: str) -> None:
        nonlocal t0
        now = time.perf_counter()
        timings[name] = round(now - t0, 2)
        log(f"{name}: {timings[name]:.1f}s")
        t0 = now

    tok = Tokenizer()
    d = G.gen_dataset(rc.seed, rc.data.n_episodes, tuple(rc.data.split))
    data = Data(d["train"], d["val"], d["test"], tok, rc.model.max_len)
    cfg = model_config(rc, tok)
    train, val = data.examples("train"), data.examples("val", rc.data.val_steps)
    test = _head(data.test, rc.data.eval_steps)
    pad = tok.pad_id
    cc = T.CurriculumConfig(
        base=train_config(rc.base, "base", rc.seed),
        expert=train_config(rc.expert, "expert", rc.seed, expert=0),
        router=train_config(rc.router, "router", rc.seed),
        cot=train_config(rc.cot, "cot", rc.seed),
        init_seed=rc.seed,
    )
    base, _ = T.base_ft(M.init_params(cfg.dense(), rc.seed, router=False), cfg, train, cc.base, pad)
    tick("base")
    specialists, _ = T.train_specialists(base, cfg, train, cc, pad)
    tick("experts")

    arms: dict[str, ParamStore] = {}
    selection = float("nan")
    for arm, skip_e, skip_r in (("cot_full", False, False), ("cot_no_expert", True, False),
                                ("cot_no_router", False, True)):
        p = M.assemble_from_experts([base] * cfg.n_experts if skip_e else specialists, cfg, router_seed=rc.seed)
        if not skip_r:
            p, _ = T.router_ft(p, cfg, train, cc.router, pad)
            if arm == "cot_full":
                selection = E.router_selection_accuracy(p, cfg, val, pad).accuracy
        arms[arm], _ = T.cot_ft(p, cfg, train, cc.cot, pad)
        tick(arm)

    rcfg = reward_config(rc)
    if rc.reward.training_free:
        rms = R.RewardModelSet.training_free(base, cfg.dense())
    else:
        sec = rc.reward
        tc = T.TrainConfig("base", lr=sec.lr, epochs=sec.epochs, batch_size=sec.batch_size, seed=rc.seed,
                         warmup=sec.warmup)
        rms = R.RewardModelSet([R.train_rm(k, base, cfg, R.build_rm_examples(data.train, tok, k, cfg.max_len), tc,
                                           pad)[0] for k in range(R.N_RM)], cfg.dense())
    tick("reward_models")
    s = rc.sample
    sets = D.sample_sets(arms["cot_full"], cfg, sample_steps(rc, data.train), tok, rms, s.K, s.temperature, rc.seed,
                         rcfg, s.max_new)
    tick("sample")

    pair_ig = {}
    for arm, strategies in (("dpo_cc_cw", ("cc", "cw")), ("dpo_cw", ("cw",))):
        pairs = D.build_dpo_dataset(sets, strategies)
        pair_ig[arm] = _mean_ig(pairs)
        arms[arm], _ = D.dpo_train(arms["cot_full"], arms["cot_full"], cfg, pairs, dpo_config(rc), tok)
        tick(arm)

    match = {}
    for arm in EXPERIMENT_ARMS:
        match[arm] = E.evaluate_policy(arms[arm], cfg, test, tok)[0].match_acc
    tick("eval")
    return ExperimentResult(rc.seed, match, selection, pair_ig, timings)
