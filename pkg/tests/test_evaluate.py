import csv

import numpy as np
import pytest
import torch

from come import evaluate as E
from come import model as M
from come import synthgui as G
from come import training as T
from come.reward import RewardBundle
from come.synthgui import Action
from come.tokenizer import Tokenizer


@pytest.fixture(scope="module")
def tok():
    return Tokenizer()


@pytest.mark.parametrize("pred,gold,bboxes,ok", [
    (Action("CLICK", 239, 100), Action("CLICK", 100, 100), (), True),
    (Action("CLICK", 240, 100), Action("CLICK", 100, 100), (), False),
    (Action("CLICK", 184, 184), Action("CLICK", 100, 100), (), True),   # 118.8 away
    (Action("CLICK", 300, 100), Action("CLICK", 100, 100), [(50, 50, 320, 150)], True),
    (Action("CLICK", 300, 100), Action("CLICK", 100, 100), [(50, 50, 200, 150)], False),
    (Action("TYPE", arg="a b c"), Action("TYPE", arg="a b"), (), True),
    (Action("TYPE", arg="a c"), Action("TYPE", arg="a b"), (), False),
    (Action("SCROLL", arg="up"), Action("SCROLL", arg="down"), (), False),
    (Action("PRESS", arg="back"), Action("PRESS", arg="back"), (), True),
    (Action("STOP"), Action("PRESS", arg="back"), (), False),
    (G.malformed("x"), Action("STOP"), (), False),
])
def test_action_match(pred, gold, bboxes, ok):
    assert E.action_match(pred, gold, bboxes=bboxes) == ok


def test_action_type_match():
    assert E.action_type_match(Action("CLICK", 1, 2), Action("CLICK", 900, 900))
    assert not E.action_type_match(G.malformed("CLICK"), Action("CLICK", 1, 1))


def test_aggregate_counts(tmp_path):
    steps = [s for ep in (G.gen_episode(i, "medium") for i in range(8)) for s in ep.steps]
    preds = [s.gold_action if i % 3 else Action("STOP") for i, s in enumerate(steps)]
    rep, flags = E.aggregate(preds, steps)
    # hand tally
    want_match = sum(1 for i, s in enumerate(steps) if i % 3 or s.gold_action.kind == "STOP")
    assert rep.count == len(steps) and sum(flags) == want_match
    assert rep.match_acc == pytest.approx(want_match / len(steps))
    for kind, st in rep.per_type.items():
        idx = [i for i, s in enumerate(steps) if s.gold_action.kind == kind]
        assert st.count == len(idx)
        assert st.type_hits == sum(1 for i in idx if i % 3 or kind == "STOP")
    E.write_metric_csv(tmp_path / "m.csv", rep)
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [r["action"] for r in rows] == ["SCROLL", "CLICK", "TYPE", "PRESS", "STOP", "overall"]
    assert float(rows[-1]["match_acc"]) == pytest.approx(rep.match_acc, abs=1e-6)


def test_selection_from_logits_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 7, 4, generator=g)
    stages = torch.randint(-1, 4, (3, 7), generator=g)
    mapping = (1, 0, 3, 2)
    rep = E.selection_from_logits(logits, stages, mapping)
    conf = np.zeros((4, 4), int)
    hit = tot = 0
    for i in range(3):
        for j in range(7):
            s = int(stages[i, j])
            if s < 0:
                continue
            e = int(logits[i, j].argmax())
            conf[s, e] += 1
            hit += e == mapping[s]
            tot += 1
    assert (rep.confusion == conf).all() and rep.accuracy == pytest.approx(hit / tot)
    assert [r["tokens"] for r in rep.rows()] == conf.sum(1).tolist()


def test_router_selection_accuracy_matches_logits(tok):
    d = G.gen_dataset(0, 10)
    ex = T.build_examples(d["train"], tok)[:12]
    cfg = M.ComeConfig(vocab_size=len(tok), d_model=16, n_layers=1, n_heads=2, d_ff=16)
    p = M.init_params(cfg, 0)
    rep = E.router_selection_accuracy(p, cfg, ex, tok.pad_id, batch_size=5)
    b = T.collate(ex, tok.pad_id)
    whole = E.selection_from_logits(M.come_forward(p, cfg, b.tokens).router_logits, b.stages, cfg.stage_to_expert)
    assert (rep.confusion == whole.confusion).all()
    assert rep.accuracy == pytest.approx(whole.accuracy)


def test_infogain_stats(tmp_path):
    bs = [RewardBundle.from_gains(g, 1) for g in ([0.1, 0.2, 0.3], [0.3, -0.2, 0.0], [0.0, 0.0, 0.6])]
    rows = E.infogain_stats({"chosen": bs, "rejected": bs[:1], "empty": []})
    by = {(r["group"], r["quantity"]): r for r in rows}
    assert by[("chosen", "ig_ss")]["mean"] == pytest.approx(0.4 / 3)
    assert by[("chosen", "r_ig")]["mean"] == pytest.approx(1.3 / 3)
    assert by[("chosen", "ig_sp")]["std"] == pytest.approx(np.std([0.2, -0.2, 0.0]))
    assert by[("rejected", "r_ig")]["count"] == 1 and ("empty", "r_ig") not in by
    E.write_ig_csv(tmp_path / "ig.csv", rows)
    assert open(tmp_path / "ig.csv").readline().strip() == "group,quantity,count,mean,std"
    with pytest.raises(ValueError):
        E.infogain_stats({})


@pytest.mark.parametrize("H,L,I", [(64, 128, 128), (32, 16, 48), (16, 40, 64)])
def test_flops_analytic_equals_measured(H, L, I):
    c = E.CostModelInput(H, L, I, n_layers=2)
    a = E.flops_analytic(c)
    assert a["dense"]["total"] == 4 * L * H * H + 2 * L * L * H + 2 * L * H * I
    assert a["come"]["total"] == 16 * L * H * H + 8 * L * L * H + 8 * L * H * I
    assert E.flops_measured(c, "dense") == a["dense"]
    assert E.flops_measured(c, "come") == a["come"]


def test_flops_reference_values():
    a = E.flops_analytic(E.CostModelInput(64, 128, 128))
    assert (a["dense"]["total"], a["come"]["total"]) == (6_291_456, 25_165_824)
    with pytest.raises(ValueError):
        E.CostModelInput(0, 1, 1)


def test_plots_are_byte_stable(tmp_path):
    hist = np.array([[5, 1, 0, 0], [0, 4, 1, 0], [0, 0, 3, 0], [1, 0, 0, 6]])
    E.plot_expert_distribution(hist, tmp_path / "a.svg")
    E.plot_expert_distribution(hist, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    groups = {"chosen": [RewardBundle.from_gains([0.1, 0.2, 0.3], 1)], "rejected": []}
    E.plot_ig_boxes(groups, tmp_path / "c.svg")
    assert (tmp_path / "c.svg").read_text().startswith("<?xml")


def test_evaluate_policy_consistent(tok):
    cfg = M.ComeConfig(vocab_size=len(tok), d_model=16, n_layers=1, n_heads=2, d_ff=16)
    p = M.init_params(cfg, 3)
    steps = G.gen_dataset(1, 10)["test"][:6]
    rep, preds = E.evaluate_policy(p, cfg, steps, tok, max_new=10)
    rep2, preds2 = E.evaluate_policy(p, cfg, steps, tok, max_new=10, batch_size=2)
    assert [x.tokens for x in preds] == [x.tokens for x in preds2]
    assert rep.count == len(steps) and [x.ref for x in preds] == [s.ref for s in steps]
    agg, flags = E.aggregate([x.action for x in preds], steps)
    assert flags == [x.match for x in preds] and agg.match_acc == rep.match_acc
    hist = E.expert_distribution(preds, tok, 4)
    assert hist.shape == (4, 4) and hist.sum() <= sum(len(x.tokens) for x in preds)


def test_moe_route_histogram(tok):
    cfg = M.ComeConfig(vocab_size=len(tok), d_model=16, n_layers=1, n_heads=2, d_ff=16)
    p = M.init_params(cfg, 0, router=False, gate=True)
    ex = T.build_examples(G.gen_dataset(0, 10)["train"], tok)[:4]
    hist = E.moe_route_histogram(p, cfg, ex, tok.pad_id)
    b = T.collate(ex, tok.pad_id)
    assert hist.shape == (4, 4) and hist.sum() == int(b.output_mask.sum())
