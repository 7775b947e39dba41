import math

import numpy as np
import pytest

from idkd.engine import (
    ExperimentData,
    Simulation,
    build_data,
    consensus_eval,
    dsgd_step,
    dsgdm_step,
    normalize_gradient,
    qg_dsgdm_n_step,
    run_experiment,
)
from idkd.errors import ConfigError
from idkd.metrics import replay_ledger
from idkd.model import MlpModel, evaluate
from idkd.topology import MixingMatrix, build_complete, build_ring, metropolis_weights

from engine_helpers import tiny_config, vector_nodes

HALF = MixingMatrix(np.full((2, 2), 0.5))


def params(nodes):
    return np.stack([n.model.params for n in nodes])


def test_dsgd_two_node_hand_trace():
    nodes = vector_nodes([0.0, 2.0])
    dsgd_step(nodes, [np.zeros(2), np.zeros(2)], HALF, 0.1)
    assert np.all(params(nodes) == 1.0)


def test_dsgd_uses_premix_gradient():
    nodes = vector_nodes([0.0, 2.0])
    dsgd_step(nodes, [np.full(2, 1.0), np.full(2, -1.0)], HALF, 0.5)
    np.testing.assert_array_equal(params(nodes)[:, 0], [0.5, 1.5])


def test_dsgdm_beta_zero_equals_dsgd():
    rng = np.random.default_rng(0)
    w = metropolis_weights(build_ring(5))
    a, b = vector_nodes(rng.standard_normal(5)), vector_nodes(rng.standard_normal(5))
    for k, nd in enumerate(b):
        nd.model.params[...] = a[k].model.params
    for _ in range(5):
        grads = list(rng.standard_normal((5, 2)))
        dsgd_step(a, grads, w, 0.1)
        dsgdm_step(b, grads, w, 0.1, 0.0)
    np.testing.assert_array_equal(params(a), params(b))


def test_dsgdm_geometric_buffer():
    nodes = vector_nodes([0.0])
    g, beta = np.array([0.5, -2.0]), 0.9
    for t in range(1, 20):
        dsgdm_step(nodes, [g], MixingMatrix.identity(1), 0.01, beta)
        np.testing.assert_allclose(nodes[0].momentum_buf, g * (1 - beta ** t) / (1 - beta), rtol=1e-12)


def test_dsgdm_three_node_scripted_trace():
    w = np.array([[0.5, 0.25, 0.25], [0.25, 0.5, 0.25], [0.25, 0.25, 0.5]])
    grads = np.random.default_rng(3).standard_normal((3, 3, 2))
    nodes = vector_nodes([1.0, -1.0, 4.0])
    x = params(nodes).copy()
    m = np.zeros_like(x)
    lr, beta = 0.2, 0.5
    for t in range(3):
        dsgdm_step(nodes, list(grads[t]), MixingMatrix(w), lr, beta)
        for i in range(3):
            m[i] = beta * m[i] + grads[t, i]
        x = np.array([sum(w[i, j] * x[j] for j in range(3)) - lr * m[i] for i in range(3)])
    np.testing.assert_allclose(params(nodes), x, rtol=1e-14)


def test_qg_two_node_scalar_trace():
    """Hand-derived trace of g_hat = g/|g|, d = g_hat + b*m, m <- b*m + (1-b)(x_prev - x_new)/lr."""
    lr, beta = 0.5, 0.5
    nodes = vector_nodes([0.0, 4.0])
    gs = [(np.array([3.0, 4.0]), np.array([0.0, -2.0])),
          (np.array([0.0, 1.0]), np.array([1.0, 0.0])),
          (np.array([-6.0, 8.0]), np.array([5.0, 0.0]))]
    # step 1: mix -> (2,2); d0 = (.6,.8), d1 = (0,-1)
    # step 2 etc. written out in scalars per coordinate below
    x = np.array([[0.0, 0.0], [4.0, 4.0]])
    m = np.zeros((2, 2))
    expected = []
    for g0, g1 in gs:
        ghat = np.array([g0 / math.hypot(*g0), g1 / math.hypot(*g1)])
        d = ghat + beta * m
        new = np.full((2, 2), x.mean(0)) - lr * d
        m = beta * m + (1 - beta) * (x - new) / lr
        x = new
        expected.append((x.copy(), m.copy()))
    first = expected[0][0]
    np.testing.assert_allclose(first, [[2 - 0.3, 2 - 0.4], [2.0, 2.5]])
    for (g0, g1), (ex, em) in zip(gs, expected):
        qg_dsgdm_n_step(nodes, [g0, g1], HALF, lr, beta)
        np.testing.assert_allclose(params(nodes), ex, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(np.stack([n.qg_momentum_buf for n in nodes]), em, rtol=1e-6, atol=1e-6)


def test_normalize_gradient():
    np.testing.assert_allclose(normalize_gradient(np.array([3.0, 4.0])), [0.6, 0.8])
    assert np.all(normalize_gradient(np.zeros(3)) == 0)


@pytest.mark.parametrize("step", ["dsgd", "dsgdm", "qg"])
def test_zero_gradients_reach_consensus(step):
    w = metropolis_weights(build_ring(6))
    nodes = vector_nodes(np.arange(6.0))
    for nd in nodes:
        nd.qg_momentum_buf[...] = 1.0
    for _ in range(3000):
        z = [np.zeros(2)] * 6
        if step == "dsgd":
            dsgd_step(nodes, z, w, 0.1)
        elif step == "dsgdm":
            dsgdm_step(nodes, z, w, 0.1, 0.9)
        else:
            qg_dsgdm_n_step(nodes, z, w, 0.1, 0.9)
    x = params(nodes)
    assert np.abs(x - x.mean(0)).max() < 1e-6
    if step == "qg":
        assert np.abs(np.stack([n.qg_momentum_buf for n in nodes])).max() < 1e-6


def test_gossip_contraction_is_monotone():
    for g in (build_ring(8), build_complete(5)):
        w = metropolis_weights(g)
        nodes = vector_nodes(np.random.default_rng(1).standard_normal(g.n))
        prev = np.inf
        for _ in range(200):
            dsgd_step(nodes, [np.zeros(2)] * g.n, w, 0.0)
            x = params(nodes)
            dis = np.abs(x - x.mean(0)).max()
            assert dis <= prev + 1e-12
            prev = dis


def test_consensus_eval_examples():
    sim = Simulation(tiny_config(), 4)
    test = sim.data.test
    for nd in sim.nodes:
        nd.model.params[...] = sim.nodes[0].model.params
    assert consensus_eval(sim.nodes, test) == evaluate(sim.nodes[0].model, test.features, test.labels)
    p = sim.nodes[0].model.params.copy()
    for k, nd in enumerate(sim.nodes):
        nd.model.params[...] = p if k % 2 == 0 else -p
    acc, _ = consensus_eval(sim.nodes, test)
    assert acc == pytest.approx(1 / 4)


def test_consensus_matches_explicit_average():
    sim = Simulation(tiny_config(), 4)
    rng = np.random.default_rng(0)
    for nd in sim.nodes:
        nd.model.params[...] = rng.standard_normal(nd.model.params.size)
    manual = np.zeros(sim.nodes[0].model.params.size)
    for nd in sim.nodes:
        manual += nd.model.params.astype(np.float64)
    avg = MlpModel(sim.nodes[0].model.layer_dims, params=(manual / 4).astype(np.float32))
    test = sim.data.test
    assert consensus_eval(sim.nodes, test)[0] == evaluate(avg, test.features, test.labels)[0]


def test_iso_iteration_budget_is_exact():
    for enabled in (False, True):
        cfg = tiny_config(run={"iso": "iso_iteration", "iteration_budget": 37},
                          idkd={"enabled": enabled, "exchange_start_epoch": 2})
        rec = run_experiment(cfg, 4)
        assert rec.iterations == 37
        assert len(rec.ledger.gossip_by_iter) == 37


def test_iso_epoch_grows_after_exchange():
    cfg = tiny_config(idkd={"exchange_start_epoch": 3})
    rec = run_experiment(cfg, 4)
    per_epoch = {}
    for e in rec.events:
        if "train_loss" in e:
            per_epoch[e["epoch"]] = e["iter"]
    steps = np.diff([0] + [per_epoch[k] for k in sorted(per_epoch)])
    pool_after = sum(rec.exchanges[0]["pool_sizes"])
    assert steps[-1] == math.ceil(pool_after / (4 * 32))
    assert steps[-1] >= steps[0]


def test_late_exchange_is_exact_baseline():
    base = run_experiment(tiny_config(idkd={"enabled": False}), 4)
    late = run_experiment(tiny_config(idkd={"exchange_start_epoch": 50}), 4)
    strip = lambda events: [{k: v for k, v in e.items() if k != "idkd"} for e in events]
    assert strip(base.events) == strip(late.events)
    assert late.exchanges == []


def test_exchange_schedule_with_period():
    rec = run_experiment(tiny_config(idkd={"exchange_start_epoch": 2, "exchange_period": 2}), 4)
    assert [e["epoch"] for e in rec.exchanges] == [2, 4, 6]


def test_repeated_exchange_replaces_public_pool():
    sim = Simulation(tiny_config(idkd={"exchange_start_epoch": 1}), 4)
    sim.idkd_event(1, 0)
    sizes = [nd.pool.n_private for nd in sim.nodes]
    sim.idkd_event(2, 0)
    assert [nd.pool.n_private for nd in sim.nodes] == sizes
    assert all(nd.pool.n_public <= len(sim.data.public) for nd in sim.nodes)


def test_run_is_deterministic_across_workers():
    cfg = tiny_config(idkd={"exchange_start_epoch": 3})
    a = run_experiment(cfg, 4, workers=1).to_jsonl()
    b = run_experiment(cfg, 4, workers=3).to_jsonl()
    assert a == b


def test_ledger_replays_from_events():
    rec = run_experiment(tiny_config(idkd={"exchange_start_epoch": 3}), 4)
    again = replay_ledger(rec.events)
    assert again == rec.ledger
    per_iter = rec.ledger.gossip_by_iter[0]
    assert per_iter == sum(2 * sim_params(rec) * 4 for _ in range(4))
    assert rec.ledger.gossip_bytes == rec.iterations * per_iter


def sim_params(rec):
    return next(e for e in rec.events if e.get("event") == "run_start")["n_params"]


def test_idkd_event_record_contents():
    rec = run_experiment(tiny_config(idkd={"exchange_start_epoch": 3}), 4)
    ex = rec.exchanges[0]
    assert len(ex["subset_sizes"]) == 4 and len(ex["t_opt"]) == 4
    assert all(abs(sum(h) - 1) < 1e-9 for h in ex["hist_post"])
    for s, n_bytes in zip(ex["subset_sizes"], ex["message_bytes"]):
        assert n_bytes == 2 * (4 + s * (4 + 4 * 4))


def test_shared_data_object_is_reused():
    cfg = tiny_config()
    data = build_data(cfg)
    assert isinstance(data, ExperimentData)
    a = run_experiment(cfg, 4, data=data)
    b = run_experiment(cfg, 4)
    assert a.to_jsonl() == b.to_jsonl()


def test_invalid_config_rejected_before_work():
    with pytest.raises(ConfigError):
        tiny_config(optimizer={"lr": -1.0})


def test_iid_ring4_idkd_matches_baseline():
    gaps = []
    for seed in (4, 34, 5):
        cfg = tiny_config(data={"alpha": 1e6}, run={"total_epochs": 10}, idkd={"exchange_start_epoch": 6})
        base = run_experiment(cfg.replace(idkd={"enabled": False}), seed)
        idkd = run_experiment(cfg, seed)
        gaps.append(idkd.final_acc - base.final_acc)
    assert abs(np.mean(gaps)) < 0.05
