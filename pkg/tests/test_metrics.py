import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradrecon.errors import ConfigError, IncompatibleError
from gradrecon.metrics import (AttackHyper, MetricsReport, Prop1Audit, attack_prompts, audit_prop1,
                               evaluate, fact_accuracy, gur, mia, mia_from_probs, rap, total_variation,
                               usr, usr_from_answers)
from gradrecon.model import attach_lora, greedy_answers
from gradrecon.unlearn import UnlearnRequest, run_method

from conftest import tiny_model


def test_usr_closed_forms():
    ans = [1, 2, 3, 4]
    assert usr_from_answers(ans, ans, ans).usr == 0.0
    assert usr_from_answers(ans, [0, 0, 0, 0], ans).usr == 100.0
    assert usr_from_answers(ans, [0, 0, 0, 4], ans).usr == 75.0


def test_usr_excludes_targets_already_wrong():
    r = usr_from_answers([1, 9, 3], [0, 0, 3], [1, 2, 3], ids=[10, 11, 12])
    assert r.excluded == [11] and r.scored == [10, 12]
    assert r.usr == 50.0
    with pytest.raises(ConfigError):
        usr_from_answers([], [], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=20),
       st.randoms())
def test_usr_is_permutation_invariant_and_bounded(items, rnd):
    b, a, y = map(list, zip(*items))
    u = usr_from_answers(b, a, y).usr
    rnd.shuffle(items)
    b2, a2, y2 = map(list, zip(*items))
    assert usr_from_answers(b2, a2, y2).usr == pytest.approx(u)
    assert 0.0 <= u <= 100.0


def test_identity_model_metrics(toy):
    c = toy.corpus
    assert usr(toy.target, toy.target, c.target_facts).usr == 0.0
    g = gur(toy.target, c.retain_facts, toy.target)
    assert g.drop == 0.0 and g.gur == g.before
    m = mia(toy.target, toy.target, c.probe_prompts(50))
    assert m.cosine == pytest.approx(1.0, abs=1e-12) and m.tv == pytest.approx(0.0, abs=1e-12)


def test_gur_arithmetic(toy):
    facts = toy.corpus.retain_facts[:10]
    acc, ok = fact_accuracy(toy.target, facts)
    assert acc == 10.0 * sum(ok)
    with pytest.raises(ConfigError):
        gur(toy.target, [])


def test_tv_uniform_versus_one_hot():
    V = 37
    onehot = np.zeros((1, V))
    onehot[0, 5] = 1.0
    uni = np.full((1, V), 1 / V)
    r = mia_from_probs(onehot, uni)
    assert r.tv == pytest.approx(1 - 1 / V, abs=1e-12)
    assert r.cosine == pytest.approx(1 / np.sqrt(V), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(0, 1000))
def test_tv_is_symmetric_and_bounded(V, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(V), 3), rng.dirichlet(np.ones(V), 3)
    np.testing.assert_allclose(total_variation(p, q), total_variation(q, p))
    assert np.all((total_variation(p, q) >= 0) & (total_variation(p, q) <= 1))
    c = mia_from_probs(p, q).cosine
    assert -1 <= c <= 1


def test_rap_on_original_model_is_total(toy):
    keys = sorted(a.key for a in toy.adapters(toy.target))
    r = rap(toy.target, toy.corpus, toy.corpus.target_facts[:3], keys, AttackHyper(steps=2))
    assert r.rap == 100.0


def test_rap_with_zero_steps_restates_usr(toy):
    c = toy.corpus
    ads = toy.adapters(toy.target)
    keys = sorted(a.key for a in ads)
    out = run_method(toy.target, c, UnlearnRequest(c.target, 0.05, method="full_grad"), adapters=ads)
    u = usr(toy.target, out.params, c.target_facts)
    scored = [c.fact(i) for i in u.scored]
    r = rap(out.params, c, scored, keys, AttackHyper(steps=0))
    assert r.rap == pytest.approx(100.0 - u.usr)


def test_attack_moves_toward_the_answer(toy):
    c = toy.corpus
    ads = toy.adapters(toy.target)
    keys = sorted(a.key for a in ads)
    out = run_method(toy.target, c, UnlearnRequest(c.target, 0.2, method="full_grad"), adapters=ads)
    weak = rap(out.params, c, c.target_facts, keys, AttackHyper(steps=0)).rap
    strong = rap(out.params, c, c.target_facts, keys, AttackHyper(steps=20, lr=1e-2)).rap
    assert strong >= weak


def test_attack_prompts_exclude_canonical(toy):
    f = toy.corpus.facts[0]
    ps = attack_prompts(toy.corpus, f, 5)
    assert len(ps) == 5 and f.prompt not in ps
    with pytest.raises(ConfigError):
        attack_prompts(toy.corpus, f, 10)
    with pytest.raises(ConfigError):
        AttackHyper(n_paraphrases=0)


def test_report_ranges_and_serialisation(toy):
    c = toy.corpus
    keys = sorted(a.key for a in toy.adapters(toy.target))
    rep = evaluate(toy.target, toy.target, c, keys, "identity", AttackHyper(steps=1), n_probes=40)
    assert rep.usr == 0.0 and rep.mia_cosine == pytest.approx(1.0) and rep.rap == 100.0
    kinds = [d["kind"] for d in rep.details]
    assert kinds.count("target") == len(c.target) and kinds.count("retain") == len(c.retain)
    assert kinds.count("probe_tv") == rep.n_probes
    assert rep.to_json() == evaluate(toy.target, toy.target, c, keys, "identity", AttackHyper(steps=1),
                                     n_probes=40).to_json()
    assert rep.to_csv().splitlines()[0] == "kind,fact_id,prompt,before,after,value"
    bad = MetricsReport("x", 101.0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        bad.check()


def _audit_samples(toy, n=12):
    y = toy.corpus.unlearning_label()
    return [(p, y) for p, _ in toy.corpus.training_examples()[:n]]


def test_audit_degenerate_pair(toy, toy_decoder):
    ads = toy.adapters(toy.proxy)
    aud = audit_prop1(toy_decoder, toy.proxy, ads, toy.proxy, ads, _audit_samples(toy))
    assert np.all(aud.term_c <= 1e-6)
    assert aud.dis_hat == 0.0
    np.testing.assert_allclose(aud.lhs, aud.term_a_pro, rtol=1e-12)
    assert aud.e_lhs == pytest.approx(aud.e_term_a_pro)
    assert aud.bound_satisfied


def test_audit_triangle_inequality_on_proxy_target_pair(toy, toy_decoder):
    aud = audit_prop1(toy_decoder, toy.proxy, toy.adapters(toy.proxy), toy.target,
                      toy.adapters(toy.target), _audit_samples(toy))
    assert aud.layers == [0, 1]
    assert np.all(aud.lhs <= aud.term_a + aud.term_c + 1e-5)
    assert np.all(aud.lhs >= 0) and np.all(aud.term_c > 0)
    assert aud.bound_satisfied
    back = Prop1Audit.from_csv(aud.to_csv(), aud.layers)
    assert back.summary() == aud.summary()


def test_audit_rejects_mismatched_models(toy, toy_decoder):
    other = tiny_model(vocab=len(toy.corpus.vocab), d=8, dtype=np.float32)
    with pytest.raises(IncompatibleError):
        audit_prop1(toy_decoder, toy.proxy, toy.adapters(toy.proxy), other, attach_lora(other, 2),
                    _audit_samples(toy, 2))
