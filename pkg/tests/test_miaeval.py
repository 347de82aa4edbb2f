import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedgc import graphstore as G
from fedgc import miaeval as A
from fedgc import models as M
from fedgc import tensor as T
from fedgc.graphstore import ParameterError
from fedgc.tensor import ContractError

from oracles import mann_whitney_auc, rel_err, stencil_grad

# --- AUC --------------------------------------------------------------------


def test_auc_hand_cases():
    assert A.auc([0.9, 0.1], [1, 0]) == 1.0
    assert A.auc([0.1, 0.9], [1, 0]) == 0.0
    assert A.auc(np.full(6, 0.3), [1, 0, 1, 0, 0, 1]) == 0.5
    # one tie between a positive and a negative: (1 + 0.5 + 1 + 1) / 4
    assert A.auc([0.8, 0.5, 0.5, 0.2], [1, 1, 0, 0]) == pytest.approx(0.875)


def test_auc_single_class_is_contract_error():
    with pytest.raises(ContractError):
        A.auc([0.1, 0.2], [1, 1])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pairwise_oracle_and_swap(pairs):
    scores = np.array([s for s, _ in pairs], dtype=float)
    labels = np.array([b for _, b in pairs])
    if labels.all() or not labels.any():
        return
    a = A.auc(scores, labels)
    assert a == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-12)
    assert A.auc(scores, ~labels) == pytest.approx(1 - a, abs=1e-12)
    assert 0 <= a <= 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, 12, elements=st.integers(-50, 50)), st.integers(0, 2**12 - 1))
def test_auc_invariant_to_monotone_transform(ticks, bits):
    scores = ticks / 10.0
    labels = np.array([(bits >> i) & 1 for i in range(12)], bool)
    if labels.all() or not labels.any():
        return
    a = A.auc(scores, labels)
    assert A.auc(np.exp(scores) * 3 + 1, labels) == pytest.approx(a, abs=1e-12)
    assert A.auc(np.tanh(scores / 10), labels) == pytest.approx(a, abs=1e-12)


def test_random_scores_average_half():
    rng = np.random.default_rng(0)
    vals = [A.auc(rng.random(20), np.r_[np.ones(10), np.zeros(10)]) for _ in range(10**4)]
    assert abs(np.mean(vals) - 0.5) <= 0.02


# --- accuracy ----------------------------------------------------------------


def test_accuracy_cases():
    labels = np.array([0, 2, 1])
    assert A.accuracy(np.eye(3)[labels], labels) == 1.0
    assert A.accuracy(np.eye(3)[(labels + 1) % 3], labels) == 0.0
    with pytest.raises(ContractError):
        A.accuracy(np.eye(3), labels, np.zeros(3, bool))


def test_accuracy_hand_tally_ten_rows():
    logits = np.array([
        [2, 1, 0], [0, 3, 1], [1, 1, 0], [0, 0, 5], [4, 4, 4],
        [0, 1, 2], [3, 0, 0], [1, 2, 2], [0, 5, 1], [2, 2, 3],
    ], dtype=float)
    labels = np.array([0, 1, 1, 2, 0, 1, 0, 2, 1, 2])
    # argmax (ties -> lowest): 0 1 0 2 0 2 0 1 1 2 -> hits at rows 0,1,3,4,6,8,9
    assert A.accuracy(logits, labels) == 0.7
    mask = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], bool)
    assert A.accuracy(logits, labels, mask) == 0.75


def test_sorted_posteriors_are_distributions():
    p = A.sorted_posteriors(np.random.default_rng(1).normal(size=(20, 5)) * 10)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)
    assert np.all(np.diff(p, axis=1) <= 0)


# --- shadow data --------------------------------------------------------------


@pytest.fixture(scope="module")
def sbm():
    return G.sbm_generate(4, 60, 0.15, 0.01, 16, 1.0, 4)


def test_shadow_disjoint_and_equal(sbm):
    for seed in range(10):
        sp = A.build_shadow(sbm, 20, seed)
        nodes = sp.nodes
        tr, out = set(nodes[sp.train]), set(nodes[sp.out])
        assert len(tr) == len(out) == 20 and not tr & out
        assert not (sbm.train_mask | sbm.test_mask)[nodes].any()
    a, b = A.build_shadow(sbm, 20, 3), A.build_shadow(sbm, 20, 3)
    np.testing.assert_array_equal(a.nodes, b.nodes)
    np.testing.assert_array_equal(a.train, b.train)


def test_shadow_induced_edges_match_filter(sbm):
    sp = A.build_shadow(sbm, 15, 1)
    keep = set(int(v) for v in sp.nodes)
    brute = sorted((int(u), int(v)) for u, v in sbm.edges if u in keep and v in keep)
    got = sorted((int(sp.nodes[a]), int(sp.nodes[b])) for a, b in sp.edges)
    assert got == brute


def test_shadow_size_errors(sbm):
    pool = int((~(sbm.train_mask | sbm.test_mask)).sum())
    with pytest.raises(ParameterError, match=str(pool)):
        A.build_shadow(sbm, pool, 0)
    assert A.build_shadow(sbm, 0, 0).size == 0
    with pytest.raises(ContractError):
        A.train_shadow_and_attack(A.build_shadow(sbm, 0, 0), sbm)


# --- attack model ------------------------------------------------------------


def test_attack_mlp_gradcheck():
    rng = np.random.default_rng(2)
    x = rng.random((8, 4))
    y = rng.integers(0, 2, 8)
    ws = A.init_attack(4, 5, seed=0)
    ws[1] = rng.normal(scale=0.1, size=ws[1].shape)
    with T.Tape() as tape:
        leaves = [tape.watch(w) for w in ws]
        grads = tape.gradient(A.bce_with_logits(A.mlp3_forward(leaves, x), y), leaves)
    for i in range(6):
        def f(v, i=i):
            cur = list(ws)
            cur[i] = v
            return A.bce_with_logits(A.mlp3_forward(cur, x), y).item()
        assert rel_err(grads[i].value, stencil_grad(f, ws[i])) < 1e-4


def test_bce_closed_form():
    s = T.Tensor(np.array([[0.0], [2.0]]))
    expect = (np.log(2) + np.log1p(np.exp(-2))) / 2
    assert A.bce_with_logits(s, [1, 1]).item() == pytest.approx(expect, rel=1e-12)


@pytest.fixture(scope="module")
def attack(sbm):
    sp = A.build_shadow(sbm, 24, 0)
    return A.train_shadow_and_attack(sp, sbm, epochs=200, attack_epochs=200, hidden=32, seed=0), sp


def test_attack_learns_its_training_signal(sbm, attack):
    model, sp = attack
    adj = G.normalize_adj(sp.edges, len(sp.nodes))
    post = A.sorted_posteriors(M.predict(model.shadow, adj, sbm.features[sp.nodes]))
    idx = np.r_[sp.train, sp.out]
    member = np.r_[np.ones(len(sp.train)), np.zeros(len(sp.out))]
    pred = model.score(post[idx]) > 0.5
    assert (pred == member).mean() > 0.5
    assert model.shadow_train_acc > 0.9


def test_constant_attack_gives_half(sbm, attack):
    model, _ = attack
    flat = A.AttackModel([np.zeros_like(w) for w in model.weights], model.shadow)
    target = M.init_params("gcn2", sbm.d, 4, seed=0)
    members = np.flatnonzero(sbm.train_mask)[:10]
    rep = A.run_attack(flat, target, sbm, members, np.flatnonzero(sbm.test_mask)[:10])
    assert rep.auc == 0.5
    with pytest.raises(ContractError):
        A.run_attack(flat, target, sbm, members, [])


def test_overfit_target_is_detected(sbm, attack):
    model, _ = attack
    members = np.flatnonzero(sbm.train_mask)
    target, _ = M.train(M.init_params("gcn2", sbm.d, 4, hidden=64, seed=1), sbm.norm_adj(), sbm.features, sbm.labels, sbm.train_mask, 300, lr=0.01)
    m, n = A.probe_sets(sbm, members, 0)
    rep = A.run_attack(model, target, sbm, m, n, rewire=0.0)
    assert rep.auc > 0.6
    again = A.run_attack(model, target, sbm, m, n, rewire=0.5, seed=3)
    assert again.auc == A.run_attack(model, target, sbm, m, n, rewire=0.5, seed=3).auc
    np.testing.assert_array_equal(again.scores, A.run_attack(model, target, sbm, m, n, rewire=0.5, seed=3).scores)


def test_probe_sets(sbm):
    members = np.flatnonzero(sbm.train_mask)
    m, n = A.probe_sets(sbm, members[::-1], 5)
    np.testing.assert_array_equal(m, np.sort(members))
    assert len(n) == len(m) and sbm.test_mask[n].all()


# --- rewiring -------------------------------------------------------------------


def _degrees(edges, n):
    return np.bincount(np.asarray(edges).reshape(-1), minlength=n)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1))
def test_rewiring_preserves_probe_degrees(seed, prob):
    g = G.sbm_generate(2, 20, 0.3, 0.05, 2, 1.0, seed % 13)
    probes = np.arange(0, 40, 3)
    out = A.rewire_probe_edges(g.edges, g.n, probes, prob, seed)
    before, after = _degrees(g.edges, g.n), _degrees(out, g.n)
    np.testing.assert_array_equal(before[probes], after[probes])
    assert len(out) == len(g.edges)
    assert np.all(out[:, 0] < out[:, 1])
    if prob == 0:
        np.testing.assert_array_equal(out, g.edges)


def test_rewiring_moves_edges():
    g = G.sbm_generate(2, 30, 0.3, 0.05, 2, 1.0, 0)
    probes = np.arange(10)
    out = A.rewire_probe_edges(g.edges, g.n, probes, 1.0, 0)
    touched = lambda e: {tuple(x) for x in e if x[0] in probes or x[1] in probes}
    assert touched(out) != touched(g.edges)


# --- reports -------------------------------------------------------------------


def test_report_rows_csv():
    rep = A.AttackReport(np.array([0.2]), np.array([1]), 0.625, 0.9)
    text = A.write_reports([rep.row("r1", 0.1, "ib", 0.04, 0)])
    assert text.split("\r\n")[0] == ",".join(A.REPORT_FIELDS)
    assert text.split("\r\n")[1] == "r1,0.1,ib,0.04,0.900000,0.625000,0"
