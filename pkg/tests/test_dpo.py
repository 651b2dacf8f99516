import math

import numpy as np
import pytest
import torch

from come import dpo as D
from come import model as M
from come import numerics as nx
from come import reward as R
from come import synthgui as G
from come.reward import RewardBundle
from come.tokenizer import Tokenizer

import oracles


@pytest.fixture(scope="module")
def tok():
    return Tokenizer()


def make_set(values, ref="s0"):
    samples = [D.Sample((i + 1,), RewardBundle.from_gains(g, acc), ok) for i, (ok, g, acc) in enumerate(values)]
    gold = D.Sample((99,), RewardBundle.from_gains([1.0, 1.0, 1.0], 1.0), True)
    return D.SampledSet(ref, (7, 8), samples, gold)


def as_tuple(pair):
    return None if pair is None else (pair.strategy, pair.chosen_index, pair.rejected_index)


def oracle_of(ss, strategies):
    vals = [(s.correct, s.bundle.r_ig_plus, s.bundle.r_cot, s.bundle.r_ig) for s in ss.samples]
    return oracles.brute_force_pair(vals, strategies)


# ---------------------------------------------------------------------------
# pair selection
# ---------------------------------------------------------------------------

def test_partially_correct_example():
    ss = make_set([(True, [0.1, 0.2, 0.1], 1.0), (True, [0.3, -0.1, 0.2], 1.0), (False, [-0.2, -0.2, -0.1], 0.0)])
    p = D.build_pair(ss)
    assert as_tuple(p) == ("cw", 0, 2)
    assert p.chosen is ss.samples[0] and p.rejected is ss.samples[2]


def test_all_correct_example():
    # A: IG+ with R_CoT 0.4, B: IG+ with R_CoT 0.6, C: IG+ = 0 with R_IG -0.2
    ss = make_set([(True, [0.1, 0.2, 0.1], 1.0), (True, [0.2, 0.2, 0.2], 1.0), (True, [0.1, -0.4, 0.1], 1.0)])
    assert [s.bundle.r_cot for s in ss.samples] == pytest.approx([0.4, 0.6, -0.2])
    assert as_tuple(D.build_pair(ss)) == ("cc", 1, 2)


def test_all_wrong_uses_gold():
    ss = make_set([(False, [0.1, 0.1, 0.1], 0.0), (False, [-0.3, 0.0, 0.0], 0.0), (False, [-0.3, 0.1, -0.1], 0.0)])
    p = D.build_pair(ss)
    assert as_tuple(p) == ("lw", -1, 1)  # tie at -0.3, lowest index wins
    assert p.chosen is ss.gold


def test_all_correct_all_positive_gives_none():
    ss = make_set([(True, [0.1, 0.1, 0.1], 1.0), (True, [0.2, 0.1, 0.1], 1.0)])
    assert D.build_pair(ss) is None


def test_partially_correct_fallback_to_non_positive():
    ss = make_set([(True, [0.1, -0.1, 0.1], 0.5), (True, [0.5, -0.1, 0.1], 0.5), (False, [0.0, 0.0, 0.0], 0.0)])
    assert as_tuple(D.build_pair(ss)) == ("cw", 1, 2)


def test_strategy_filter():
    cc = make_set([(True, [0.1, 0.2, 0.1], 1.0), (True, [0.1, -0.4, 0.1], 1.0)])
    lw = make_set([(False, [0.1, 0.1, 0.1], 0.0), (False, [-0.3, 0.0, 0.0], 0.0)])
    cw = make_set([(True, [0.1, 0.2, 0.1], 1.0), (False, [0.1, -0.4, 0.1], 0.0)])
    assert [p.strategy for p in D.build_dpo_dataset([cc, lw, cw], ("cw",))] == ["cw"]
    assert [p.strategy for p in D.build_dpo_dataset([cc, lw, cw], ("cc", "cw", "lw"))] == ["cc", "lw", "cw"]
    with pytest.raises(ValueError):
        D.build_dpo_dataset([cc], ("xx",))


@pytest.mark.parametrize("strategies", [("cc", "cw", "lw"), ("cc", "cw"), ("cw",), ("lw",)])
def test_build_pair_matches_brute_force(strategies):
    gen = np.random.default_rng(len(strategies))
    outcomes = set()
    for trial in range(150):
        K = int(gen.integers(2, 7))
        ss = make_set(oracles.random_bundle_values(gen, K), ref=f"t{trial}")
        got, want = as_tuple(D.build_pair(ss, strategies)), oracle_of(ss, strategies)
        assert got == want, (trial, [(s.correct, s.bundle) for s in ss.samples])
        outcomes.add("none" if want is None else want[0])
    assert "none" in outcomes


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_pairs_and_sets_roundtrip(tmp_path, tok):
    ss = make_set([(True, [0.1, 0.2, 0.1], 1.0), (False, [-0.3, 0.1, -0.1], 0.0)])
    pairs = D.build_dpo_dataset([ss], ("cw",))
    D.write_pairs(tmp_path / "p.jsonl", pairs, tok)
    back = D.read_pairs(tmp_path / "p.jsonl")
    assert [as_tuple(p) for p in back] == [as_tuple(p) for p in pairs]
    assert back[0].chosen.tokens == pairs[0].chosen.tokens and back[0].rejected.bundle == pairs[0].rejected.bundle
    D.write_sets(tmp_path / "s.jsonl", [ss])
    again = D.read_sets(tmp_path / "s.jsonl")
    assert again[0].samples == ss.samples and again[0].gold == ss.gold and again[0].prompt == ss.prompt
    D.write_sets(tmp_path / "s2.jsonl", again)
    assert (tmp_path / "s.jsonl").read_bytes() == (tmp_path / "s2.jsonl").read_bytes()


# ---------------------------------------------------------------------------
# Info-DPO objective
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small(tok):
    cfg = M.ComeConfig(vocab_size=len(tok), d_model=16, n_layers=1, n_heads=2, d_ff=16)
    steps = G.gen_episode(4, "medium").steps
    pairs = []
    for i, s in enumerate(steps[:3]):
        other = steps[(i + 1) % len(steps)]
        req = R.request_for(s, G.trace_ids(s.gold_trace, tok), tok)
        good = D.Sample(tuple(G.trace_ids(s.gold_trace, tok)), RewardBundle.from_gains([.1, .1, .1], 1), True)
        bad = D.Sample(tuple(G.trace_ids(other.gold_trace, tok)), RewardBundle.from_gains([-.1, 0, 0], 0), False)
        pairs.append(D.DpoPair(s.ref, "cw", req.prompt, good, bad, 0, 1))
    return cfg, pairs


def test_identical_policy_and_reference_give_ln2(small, tok):
    cfg, pairs = small
    p = M.init_params(cfg, 0)
    batch = D.PairBatch.build(pairs, tok)
    t = D.info_dpo_terms(p, p, cfg, batch)
    assert float(t.pref) == pytest.approx(math.log(2), abs=1e-7)


def test_loss_matches_scalar_oracle(small, tok):
    cfg, pairs = small
    pol, ref = M.init_params(cfg, 1).clone(torch.float64), M.init_params(cfg, 2).clone(torch.float64)
    batch = D.PairBatch.build(pairs, tok)

    def seq_lp(p, prompt, trace):
        ids = list(prompt) + list(trace)
        logits = M.come_forward(p, cfg, torch.tensor([ids[:-1]])).logits[0]
        lp = torch.log_softmax(logits, -1)
        return sum(float(lp[t - 1, ids[t]]) for t in range(len(prompt), len(ids)))

    pc = [seq_lp(pol, pr.prompt, pr.chosen.tokens) for pr in pairs]
    prj = [seq_lp(pol, pr.prompt, pr.rejected.tokens) for pr in pairs]
    rc = [seq_lp(ref, pr.prompt, pr.chosen.tokens) for pr in pairs]
    rr = [seq_lp(ref, pr.prompt, pr.rejected.tokens) for pr in pairs]
    for beta in (0.1, 1.0):
        t = D.info_dpo_terms(pol, ref, cfg, batch, beta=beta, alpha=0.7, gamma=0.3)
        assert float(t.pref) == pytest.approx(oracles.dpo_loss_oracle(pc, prj, rc, rr, beta), abs=1e-9)
        assert float(t.total) == pytest.approx(float(t.pref) + 0.7 * float(t.sft) + 0.3 * float(t.rnorm), abs=1e-12)


def test_info_dpo_grad_check(small, tok):
    cfg, pairs = small
    pol, ref = M.init_params(cfg, 1).clone(torch.float64), M.init_params(cfg, 2).clone(torch.float64)
    batch = D.PairBatch.build(pairs[:2], tok)
    rep = nx.grad_check(lambda s: D.info_dpo_loss(s, ref, cfg, batch, beta=0.5), pol, max_entries=6)
    assert nx.grad_check_passed(rep), {k: v.max_rel_err for k, v in rep.items() if not v.ok}


def test_dpo_train_deterministic_and_moves(small, tok):
    cfg, pairs = small
    p = M.init_params(cfg, 0)
    dc = D.DpoConfig(lr=1e-3, epochs=2, batch_size=2)
    a, rows = D.dpo_train(p, p, cfg, pairs, dc, tok)
    b, _ = D.dpo_train(p, p, cfg, pairs, dc, tok)
    assert all(torch.equal(a[n], b[n]) for n in p.names())
    assert any(not torch.equal(a[n], p[n]) for n in p.names())
    assert [r["epoch"] for r in rows] == [0, 1] and rows[0]["loss_pref"] == pytest.approx(math.log(2), abs=0.05)
    same, none = D.dpo_train(p, p, cfg, [], dc, tok)
    assert none == [] and all(torch.equal(same[n], p[n]) for n in p.names())


@pytest.mark.parametrize("kw", [dict(beta=-1), dict(batch_size=0), dict(epochs=-1)])
def test_dpo_config_validation(kw):
    with pytest.raises(ValueError):
        D.DpoConfig(**kw)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sampler(tok):
    cfg = M.ComeConfig(vocab_size=len(tok), d_model=16, n_layers=1, n_heads=2, d_ff=16, max_len=200)
    policy = M.init_params(cfg, 0)
    rms = R.RewardModelSet.training_free(M.init_params(cfg.dense(), 1, router=False), cfg)
    steps = G.gen_episode(9, "easy").steps[:2]
    return cfg, policy, rms, steps


def test_greedy_samples_identical(sampler, tok):
    cfg, policy, rms, steps = sampler
    ss = D.sample_k(policy, cfg, steps[0], tok, rms, K=3, temperature=0.0)
    assert len({s.tokens for s in ss.samples}) == 1
    assert ss.gold.tokens == tuple(G.trace_ids(steps[0].gold_trace, tok))


def test_sampling_seeded(sampler, tok):
    cfg, policy, rms, steps = sampler
    a = D.sample_sets(policy, cfg, steps, tok, rms, K=3, seed=5, max_new=12)
    b = D.sample_sets(policy, cfg, steps, tok, rms, K=3, seed=5, max_new=12)
    assert [x.samples for x in a] == [x.samples for x in b]
    # a step's samples do not depend on what else is in the batch
    c = D.sample_sets(policy, cfg, steps[1:], tok, rms, K=3, seed=5, max_new=12)
    assert c[0].samples == a[1].samples
    with pytest.raises(ValueError):
        D.sample_sets(policy, cfg, steps, tok, rms, K=1)
