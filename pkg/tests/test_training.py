import math

import pytest
import torch

from come import model as M
from come import numerics as nx
from come import synthgui as G
from come import training as T
from come.synthgui import StageId
from come.tokenizer import Tokenizer


@pytest.fixture(scope="module")
def tok():
    return Tokenizer()


@pytest.fixture(scope="module")
def data(tok):
    d = G.gen_dataset(0, 12)
    return T.build_examples(d["train"], tok), T.build_examples(d["val"], tok)


def tiny_cfg(tok, **kw):
    base = dict(vocab_size=len(tok), d_model=16, n_layers=2, n_heads=2, d_ff=24, max_len=256)
    base.update(kw)
    return M.ComeConfig(**base)


def assembled(cfg, seed=0):
    sp = [M.init_params(cfg.dense(), seed + i, router=False) for i in range(4)]
    for s in sp[1:]:
        for n in s.names():
            if not M.is_ffn_param(n):
                s[n] = sp[0][n].clone()
    return M.assemble_from_experts(sp, cfg, router_seed=seed)


# ---------------------------------------------------------------------------
# batching and labels
# ---------------------------------------------------------------------------

def test_collate_shifts_and_labels(data, tok):
    ex = data[0][0]
    b = T.collate([ex], tok.pad_id)
    n = len(ex.ids) - 1
    assert b.tokens[0].tolist() == list(ex.ids[:-1])
    assert b.targets[0].tolist() == list(ex.ids[1:])
    # routing label at t is the stage of the token being predicted
    for t in range(n):
        s = ex.stages[t + 1]
        assert int(b.stages[0, t]) == (-1 if s == StageId.PROMPT else s)
    # last output token is EOS labelled AF
    assert ex.ids[-1] == tok.eos_id and int(b.stages[0, n - 1]) == StageId.AF


def test_collate_padding_masked(data, tok):
    exs = data[0][:5]
    b = T.collate(exs, tok.pad_id)
    for i, ex in enumerate(exs):
        k = len(ex.ids) - 1
        assert not b.output_mask[i, k:].any()
        n_out = sum(1 for s in ex.stages[1:] if s != StageId.PROMPT)
        assert int(b.output_mask[i].sum()) == n_out


def test_collate_stop_after(data, tok):
    ex = data[0][0]
    b = T.collate([ex], tok.pad_id, stop_after=int(StageId.SP))
    labels = set(b.stages[0].tolist()) - {-1}
    assert labels == {int(StageId.SS), int(StageId.SP)}
    full = T.collate([ex], tok.pad_id)
    k = b.tokens.shape[1]
    assert torch.equal(b.tokens[0], full.tokens[0, :k])


def test_expert_labels_follow_mapping(data, tok):
    b = T.collate(data[0][:3], tok.pad_id)
    lab = b.expert_labels((3, 2, 1, 0))
    m = b.output_mask
    assert torch.equal(lab[m], 3 - b.stages[m])


# ---------------------------------------------------------------------------
# loss oracles
# ---------------------------------------------------------------------------

def test_router_norm_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 5, 4, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 4, (3, 5), generator=g)
    mask = torch.rand(3, 5, generator=g) > 0.3
    total, n = 0.0, 0
    for i in range(3):
        for j in range(5):
            if not mask[i, j]:
                continue
            z = [math.exp(v) for v in logits[i, j].tolist()]
            p = [v / sum(z) for v in z]
            total += sum((p[e] - (1.0 if e == labels[i, j] else 0.0)) ** 2 for e in range(4))
            n += 1
    assert abs(float(T.router_norm_loss(logits, labels, mask)) - total / n) < 1e-12


def test_router_norm_fixed_points():
    labels = torch.tensor([[2]])
    mask = torch.ones(1, 1, dtype=torch.bool)
    assert float(T.router_norm_loss(torch.tensor([[[0.0, 0.0, 0.0, 0.0]]]), labels, mask)) == pytest.approx(0.75)
    assert float(T.router_norm_loss(torch.tensor([[[0.0, 0.0, 40.0, 0.0]]]), labels, mask)) < 1e-15
    with pytest.raises(ValueError):
        T.router_norm_loss(torch.zeros(1, 1, 4), labels, torch.zeros(1, 1, dtype=torch.bool))


def test_router_ce_oracle():
    logits = torch.tensor([[[math.log(2.0), 0.0, 0.0, 0.0]]], dtype=torch.float64)
    mask = torch.ones(1, 1, dtype=torch.bool)
    assert float(T.router_ce_loss(logits, torch.tensor([[0]]), mask)) == pytest.approx(-math.log(0.4), abs=1e-12)
    assert float(T.router_ce_loss(logits, torch.tensor([[3]]), mask)) == pytest.approx(-math.log(0.2), abs=1e-12)


def test_cot_loss_composition(data, tok):
    cfg = tiny_cfg(tok)
    p = assembled(cfg)
    b = T.collate(data[0][:4], tok.pad_id)
    out = M.come_forward(p, cfg, b.tokens)
    lp = torch.log_softmax(out.logits.double(), -1).gather(-1, b.targets[..., None])[..., 0]
    m = b.output_mask
    sft = float(-(lp[m]).mean())
    probs = torch.softmax(out.router_logits.double(), -1)
    oh = torch.nn.functional.one_hot(b.expert_labels(cfg.stage_to_expert), 4).double()
    rn = float(((probs - oh) ** 2).sum(-1)[m].mean())
    assert float(T.cot_ft_loss(p, cfg, b, 0.1)) == pytest.approx(sft + 0.1 * rn, rel=1e-5)
    assert float(T.cot_ft_loss(p, cfg, b, 0.0)) == pytest.approx(sft, rel=1e-5)


def test_expert_loss_masks_other_stages(data, tok):
    cfg = tiny_cfg(tok)
    p = M.init_params(cfg.dense(), 0, router=False)
    b = T.collate(data[0][:4], tok.pad_id)
    logits = M.dense_forward(p, cfg.dense(), b.tokens).double()
    lp = torch.log_softmax(logits, -1).gather(-1, b.targets[..., None])[..., 0]
    for stage in range(4):
        m = b.stages == stage
        assert float(T.expert_ft_loss(p, cfg, b, stage)) == pytest.approx(float(-lp[m].mean()), rel=1e-5)


# ---------------------------------------------------------------------------
# gradient checks of the stage losses
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def grad_setup(tok, data):
    cfg = tiny_cfg(tok, d_model=8, d_ff=12, n_layers=1)
    short = sorted(data[0], key=lambda e: len(e.ids))[:2]
    b = T.collate(short, tok.pad_id)
    return cfg, assembled(cfg).clone(torch.float64), b


def _check(loss, store, names=None):
    rep = nx.grad_check(loss, store, names=names, max_entries=8)
    assert nx.grad_check_passed(rep), {k: v.max_rel_err for k, v in rep.items() if not v.ok}


def test_grad_expert_loss(grad_setup):
    cfg, p, b = grad_setup
    dense = M.extract_expert(p, cfg, 1)
    _check(lambda s: T.expert_ft_loss(s, cfg, b, int(StageId.SP)), dense,
           [n for n in dense.names() if M.is_ffn_param(n)])


def test_grad_router_loss(grad_setup):
    cfg, p, b = grad_setup
    _check(lambda s: T.router_ft_loss(s, cfg, b), p, ["router"])


def test_grad_cot_loss(grad_setup):
    cfg, p, b = grad_setup
    _check(lambda s: T.cot_ft_loss(s, cfg, b, 0.1), p)


# ---------------------------------------------------------------------------
# freeze contracts
# ---------------------------------------------------------------------------

def _changed(a, b):
    return {n for n in a.names() if not torch.equal(a[n], b[n])}


def test_expert_ft_step_freezes_non_ffn(data, tok):
    cfg = tiny_cfg(tok)
    base = M.init_params(cfg.dense(), 0, router=False)
    tc = T.TrainConfig("expert", lr=1e-2, epochs=1, batch_size=10_000, expert=int(StageId.AD))
    sp, _ = T.expert_ft(base, cfg, data[0], tc, tok.pad_id)
    changed = _changed(base, sp)
    ffn = {n for n in base.names() if M.is_ffn_param(n)}
    assert changed == ffn


def test_router_ft_step_freezes_all_but_router(data, tok):
    cfg = tiny_cfg(tok)
    p = assembled(cfg)
    tc = T.TrainConfig("router", lr=1e-2, epochs=1, batch_size=100_000)
    q, _ = T.router_ft(p, cfg, data[0], tc, tok.pad_id)
    assert _changed(p, q) == {"router"}


def test_router_ft_cached_features_match_full_forward(data, tok):
    cfg = tiny_cfg(tok)
    p = assembled(cfg)
    exs = data[0][:6]
    feats, labels = T.channel_features(p, cfg, exs, tok.pad_id)
    b = T.collate(exs, tok.pad_id)
    full = T.router_ft_loss(p, cfg, b)
    lc = nx.matmul(feats, p["router"])
    ones = torch.ones(len(labels), dtype=torch.bool)
    cached = T.router_ce_loss(lc, labels, ones) + T.router_norm_loss(lc, labels, ones)
    assert float(cached) == pytest.approx(float(full), rel=1e-5)


def test_fit_deterministic(data, tok):
    cfg = tiny_cfg(tok)
    p = assembled(cfg)
    tc = T.TrainConfig("cot", lr=1e-3, epochs=1, batch_size=8, seed=4)
    a, _ = T.cot_ft(p, cfg, data[0][:20], tc, tok.pad_id)
    b, _ = T.cot_ft(p, cfg, data[0][:20], tc, tok.pad_id)
    assert _changed(a, b) == set()
    assert _changed(p, a) == set(p.names())


def test_cot_reports_rows(data, tok):
    cfg = tiny_cfg(tok)
    tc = T.TrainConfig("cot", lr=1e-3, epochs=2, batch_size=16)
    _, rows = T.cot_ft(assembled(cfg), cfg, data[0][:16], tc, tok.pad_id, data[1][:4])
    assert [(r.stage, r.epoch, r.split) for r in rows] == [("cot", 0, "val"), ("cot", 1, "val")]
    assert all(0 <= r.selection_acc <= 1 and r.loss_sft > 0 for r in rows)


def test_write_report(tmp_path):
    rows = [T.ReportRow("router", 0, "val", loss_rce=0.5, selection_acc=0.25)]
    T.write_report(tmp_path / "r.csv", rows)
    assert (tmp_path / "r.csv").read_text() == (
        "stage,epoch,split,loss_sft,loss_rce,loss_rnorm,selection_acc\n"
        "router,0,val,,0.500000,,0.250000\n"
    )


@pytest.mark.parametrize("kw", [
    dict(stage="expert"),
    dict(stage="cot", expert=1),
    dict(stage="bogus"),
    dict(stage="cot", gamma=-1.0),
    dict(stage="cot", batch_size=0),
])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        T.TrainConfig(**kw)


def test_stage_error_names_stage(data, tok):
    cfg = tiny_cfg(tok)
    cc = T.CurriculumConfig(base=T.TrainConfig("base", epochs=0), expert=T.TrainConfig("expert", epochs=0, expert=0),
                            router=T.TrainConfig("router", epochs=0), cot=T.TrainConfig("cot", epochs=0))
    bad = [M.init_params(cfg.dense(), 0, router=False)] * 3
    with pytest.raises(T.StageError) as err:
        T.run_curriculum(cfg, data[0], cc, tok.pad_id, specialists=bad)
    assert err.value.stage == "assemble"


def test_skip_flags(data, tok):
    cfg = tiny_cfg(tok)
    zero = dict(epochs=0)
    cc = T.CurriculumConfig(base=T.TrainConfig("base", **zero), expert=T.TrainConfig("expert", lr=1e-2, epochs=1, expert=0),
                            router=T.TrainConfig("router", lr=1e-2, epochs=1, batch_size=4096),
                            cot=T.TrainConfig("cot", **zero), skip_expert_ft=True, skip_router_ft=True)
    res = T.run_curriculum(cfg, data[0], cc, tok.pad_id)
    assert all(not _changed(res.base, s) for s in res.specialists)
    assert not _changed(res.assembled, res.params)
