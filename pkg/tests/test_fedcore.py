import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gatedfl import lora
from gatedfl.autodiff import Tape
from gatedfl.fedcore import (ClientState, DefenseConfig, MessageQueue, OptimizerConfig, RoundError,
                             ServerState, UploadRefused, comm_cost, local_train, momentum_step,
                             run_round, view_tokens, weighted_average, with_params)
from gatedfl.lora import Role
from gatedfl.optim import AdamW
from gatedfl.privacy import ClientDataset
from gatedfl.seeding import derive_seed
from gatedfl.tinylm import ModelConfig, TinyLM, init_weights, lm_loss_graph, mean_loss

SCRUB = DefenseConfig.from_name("scrub")
FAST = OptimizerConfig(eta_local=5e-3, epochs_K=1, batch_size=8)


def _scalar_server(w, v, m, eta):
    ad = lora.LowRankAdapter({"p": np.array([[w]])}, {"p": np.array([[0.0]])}, 1, 4.0)
    return ServerState(ad, {"p.A": np.array([[v]]), "p.B": np.array([[0.0]])}, 0, m, eta, 20)


def test_worked_momentum_example():
    s = _scalar_server(1.0, 0.5, 0.5, 0.01)
    new_w, new_v = momentum_step(s, {"p.A": np.array([[2.0]]), "p.B": np.array([[0.0]])})
    assert new_v["p.A"][0, 0] == 0.2575
    assert new_w["p.A"][0, 0] == 1.2575


def _ref_step(w, v, m, eta, avg):
    p = w + m * v
    v2 = m * v + eta * (avg - p)
    return w + v2, v2


@settings(max_examples=1000, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 0.999), st.floats(1e-4, 1.0),
       st.floats(-10, 10))
def test_momentum_matches_scalar_reference(w, v, m, eta, avg):
    s = _scalar_server(w, v, m, eta)
    nw, nv = momentum_step(s, {"p.A": np.array([[avg]]), "p.B": np.array([[0.0]])})
    rw, rv = _ref_step(w, v, m, eta, avg)
    assert abs(nw["p.A"][0, 0] - rw) <= 1e-12 and abs(nv["p.A"][0, 0] - rv) <= 1e-12


def test_momentum_special_cases():
    s = _scalar_server(0.3, -0.7, 0.0, 1.0)
    nw, _ = momentum_step(s, {"p.A": np.array([[5.0]]), "p.B": np.array([[0.0]])})
    assert nw["p.A"][0, 0] == 5.0
    s = _scalar_server(1.0, 0.5, 0.5, 0.01)
    _, nv = momentum_step(s, {"p.A": np.array([[1.25]]), "p.B": np.array([[0.0]])})
    assert nv["p.A"][0, 0] == 0.25


def test_server_state_validation():
    with pytest.raises(ValueError, match=r"m must be in \[0,1\)"):
        _scalar_server(0, 0, 1.2, 0.01)
    ad = lora.LowRankAdapter({"p": np.ones((1, 2))}, {"p": np.ones((2, 1))}, 1, 4.0)
    with pytest.raises(ValueError, match="momentum"):
        ServerState(ad, {"p.A": np.ones((1, 3)), "p.B": np.ones((2, 1))})


def test_weighted_average_examples():
    u = [{"x": np.array([2.0])}, {"x": np.array([6.0])}]
    assert weighted_average(u, [1, 3])["x"][0] == 5.0
    assert weighted_average(u, [2, 2])["x"][0] == 4.0
    assert weighted_average(u[:1], [7])["x"][0] == 2.0
    with pytest.raises(ValueError):
        weighted_average(u, [1])
    with pytest.raises(ValueError):
        weighted_average(u, [1, 0])


def test_adamw_single_step_by_hand():
    p = {"w": np.array([0.5, -1.0])}
    g = {"w": np.array([0.2, -3.0])}
    opt = AdamW(lr=0.1, weight_decay=0.0)
    opt.step(p, g)
    # first step: m_hat = g, v_hat = g^2
    expect = np.array([0.5, -1.0]) - 0.1 * np.array([0.2, -3.0]) / (np.abs([0.2, -3.0]) + 1e-8)
    assert np.allclose(p["w"], expect, atol=1e-15)


def test_adamw_decoupled_decay():
    p = {"w": np.array([2.0])}
    AdamW(lr=0.1, weight_decay=0.5).step(p, {"w": np.array([0.0])})
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


@pytest.fixture(scope="module")
def fed_setup(small_model, corpus, tok):
    return small_model, corpus, tok


def test_local_train_accounting_and_descent(fed_setup):
    model, corpus, tok = fed_setup
    seqs = view_tokens(corpus[0], "masked", tok, 128)
    start = lora.init_adapter(model, 4, Role.SECURE, 0)
    cfg = OptimizerConfig(eta_local=1e-2, epochs_K=3, batch_size=8)
    res = local_train(model, start, seqs, cfg, seed=1)
    assert res.steps == 3 * int(np.ceil(len(seqs) / 8))
    assert mean_loss(model, res.adapter, seqs) < mean_loss(model, start, seqs)
    assert all(np.array_equal(start.A[p], lora.init_adapter(model, 4, Role.SECURE, 0).A[p]) for p in start.points)
    with pytest.raises(ValueError):
        local_train(model, start, [], cfg, 0)
    with pytest.raises(ValueError):
        view_tokens(corpus[0], "other", tok, 128)


def test_local_train_single_step_is_one_adamw_step(fed_setup):
    model, corpus, tok = fed_setup
    seqs = view_tokens(corpus[0], "raw", tok, 128)[:4]
    start = lora.init_adapter(model, 4, Role.SECURE, 2, dropout_p=0.0)
    for p in start.points:
        start.B[p] = np.full_like(start.B[p], 0.01)
    cfg = OptimizerConfig(eta_local=1e-3, weight_decay=0.0, epochs_K=1, batch_size=4)
    res = local_train(model, start, seqs, cfg, seed=3)
    tape = Tape()
    probe = start.copy()
    g = tape.backward(lm_loss_graph(model, tape, seqs, probe, training=True, train_adapter=True))
    for k, v in start.params().items():
        expect = v - 1e-3 * g[k] / (np.abs(g[k]) + 1e-8)
        assert np.allclose(res.adapter.params()[k], expect, atol=1e-12)


def test_comm_cost():
    m = TinyLM(ModelConfig(), init_weights(ModelConfig(), 0))
    n8, b8 = comm_cost(lora.init_adapter(m, 8, Role.SECURE, 0))
    n16, _ = comm_cost(lora.init_adapter(m, 16, Role.SECURE, 0))
    assert (n8, b8) == (4096, 16384) and n16 == 2 * n8
    dense = lora.fuse([lora.init_adapter(m, 8, Role.SECURE, 0)], [1.0])
    assert comm_cost(dense)[0] == 4 * 64 * 64


def _clients(corpus, with_revealing=None):
    out = []
    for ds in corpus:
        c = ClientState(ds.client_id, ds)
        if with_revealing is not None:
            c.revealing_adapter = with_revealing(ds.client_id)
        out.append(c)
    return out


def _oracle_fedavg(model, corpus, tok, start, cfg, seed, rounds):
    """Plain weighted FedAvg written out by hand: each client trains from the
    current global, the server receives f32 copies and takes a size-weighted mean."""
    g = start.copy(role=Role.GLOBAL)
    order = sorted(corpus, key=lambda d: d.client_id)
    total = sum(d.size for d in order)
    for t in range(rounds):
        acc = None
        for ds in order:
            seqs = view_tokens(ds, "masked", tok, model.config.context_len)
            local = local_train(model, g.copy(role=Role.SECURE, adapter_id=f"secure-{ds.client_id}"),
                                seqs, cfg, derive_seed(seed, "client", ds.client_id, "round", t)).adapter
            sent = lora.from_bytes(lora.to_bytes(local)).params()
            part = {k: (ds.size / total) * v for k, v in sent.items()}
            acc = part if acc is None else {k: acc[k] + part[k] for k in acc}
        g = with_params(g, acc)
    return g


def test_fedavg_degeneracy_matches_oracle(fed_setup):
    model, corpus, tok = fed_setup
    start = lora.init_adapter(model, 4, Role.GLOBAL, 5)
    server = ServerState.start(start, m=0.0, eta_global=1.0, T=5)
    clients = _clients(corpus)
    for _ in range(5):
        server, _ = run_round(server, clients, model, FAST, SCRUB, seed=9, tokenizer=tok)
    oracle = _oracle_fedavg(model, corpus, tok, start, FAST, 9, 5)
    for k, v in oracle.params().items():
        assert np.abs(server.global_adapter.params()[k] - v).max() <= 1e-12


def test_single_client_round_equals_its_update(fed_setup):
    model, corpus, tok = fed_setup
    start = lora.init_adapter(model, 4, Role.GLOBAL, 6)
    server = ServerState.start(start, m=0.0, eta_global=1.0, T=3)
    client = _clients(corpus[:1])
    for _ in range(3):
        server, _ = run_round(server, client, model, FAST, SCRUB, seed=2, tokenizer=tok)
        sent = lora.round_trip(client[0].secure_adapter).params()
        # w + (avg - w) differs from avg only by rounding
        assert all(np.abs(server.global_adapter.params()[k] - sent[k]).max() <= 1e-12 for k in sent)


def test_round_log_isolation_and_determinism(fed_setup):
    model, corpus, tok = fed_setup
    start = lora.init_adapter(model, 8, Role.GLOBAL, 7)

    def rev(cid):
        ad = lora.init_adapter(model, 8, Role.REVEALING, 100 + cid)
        for p in ad.points:
            ad.B[p] = np.full_like(ad.B[p], 0.003 * (cid + 1))
        return ad

    runs = []
    for jobs in (1, 2):
        clients = _clients(corpus, rev)
        before = [lora.to_bytes(c.revealing_adapter) for c in clients]
        queue = MessageQueue()
        server, log = run_round(ServerState.start(start), list(reversed(clients)), model, FAST, SCRUB,
                                seed=4, queue=queue, tokenizer=tok, jobs=jobs)
        assert [lora.to_bytes(c.revealing_adapter) for c in clients] == before
        assert [e["client_id"] for e in log["clients"]] == sorted(ds.client_id for ds in corpus)
        params = comm_cost(start)[0]
        assert all(e["message_bytes"] == 4 * params for e in log["clients"])
        blob = queue.dump()
        for b in before:
            tensor_bytes = b[-64:]
            assert tensor_bytes not in blob
        assert server.t == 1 and "wall_time_s" in log
        runs.append(lora.to_bytes(server.global_adapter))
    assert runs[0] == runs[1]


def test_round_after_T_is_refused(fed_setup):
    model, corpus, tok = fed_setup
    server = ServerState.start(lora.init_adapter(model, 4, Role.GLOBAL, 0), T=1)
    server, _ = run_round(server, _clients(corpus[:1]), model, FAST, SCRUB, seed=0, tokenizer=tok)
    with pytest.raises(RoundError):
        run_round(server, _clients(corpus[:1]), model, FAST, SCRUB, seed=0, tokenizer=tok)


def test_queue_refuses_private_objects(fed_setup):
    model, _, _ = fed_setup
    q = MessageQueue()
    with pytest.raises(UploadRefused):
        q.send(0, 0, lora.init_adapter(model, 4, Role.REVEALING, 0))
    d = lora.fuse([lora.init_adapter(model, 4, Role.SECURE, 0)], [1.0])
    with pytest.raises(UploadRefused):
        q.send(0, 0, d)
    d.local_only = True
    with pytest.raises(UploadRefused):
        q.send(0, 0, d)
    assert q.transcript == []


def test_dp_defense_changes_upload_but_not_local_state(fed_setup):
    model, corpus, tok = fed_setup
    start = lora.init_adapter(model, 4, Role.GLOBAL, 8)
    outs = {}
    for name in ("scrub", "scrub+dp"):
        clients = _clients(corpus[:1])
        q = MessageQueue()
        run_round(ServerState.start(start), clients, model, FAST, DefenseConfig.from_name(name),
                  seed=1, queue=q, tokenizer=tok)
        outs[name] = (lora.to_bytes(clients[0].secure_adapter), q.transcript[0][2])
    assert outs["scrub"][0] == outs["scrub+dp"][0]
    assert outs["scrub"][1] != outs["scrub+dp"][1]
    with pytest.raises(ValueError):
        DefenseConfig.from_name("none")


def test_optimizer_config_validation():
    with pytest.raises(ValueError, match="beta1"):
        OptimizerConfig(beta1=1.0)
    with pytest.raises(ValueError, match="eta_local"):
        OptimizerConfig(eta_local=0.0)
    assert OptimizerConfig().eta_local == 1e-4 and OptimizerConfig().epochs_K == 3


def test_unequal_views_rejected():
    with pytest.raises(ValueError):
        ClientDataset(0, [object()], [])
