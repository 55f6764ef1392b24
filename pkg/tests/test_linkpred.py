import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import auprc_by_thresholds, central_difference, relative_error, snapshot
from tvlnet.linkpred import (
    GRU_WIDTHS, Embeddings, NodeStateBank, TgnnModel, TrainConfig, auprc, balanced_bce,
    expected_parameter_count, forward, graph_inputs, link_loss, positive_pairs,
    sample_negatives, score, train_live,
)


def test_parameter_count_is_a_function_of_widths():
    linear = (1 * 256 + 256) + (256 * 128 + 128) + (128 * 64 + 64) + (64 * 32 + 32)
    gru = 3 * (2 * 64 * 64 + 2 * 64) + 3 * (2 * 32 * 32 + 2 * 32)
    assert expected_parameter_count() == linear + gru
    assert TgnnModel(0).parameter_count() == linear + gru


def test_single_node_shape():
    emb = forward(TgnnModel(0), NodeStateBank(), snapshot([], nodes=["solo"]))
    assert tuple(emb.h.shape) == (1, 32)


def test_isomorphic_nodes_embed_identically():
    emb = forward(TgnnModel(1), NodeStateBank(), snapshot([("a", "b"), ("b", "a")]))
    assert torch.equal(emb.vector("a"), emb.vector("b"))


def test_zero_weights_give_constant_embeddings():
    model = TgnnModel(2)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    g = snapshot([(0, 1), (1, 2), (3, 0)], sizes={0: 5, 1: 1e6, 2: 30, 3: 1})
    emb = forward(model, NodeStateBank(), g)
    assert torch.equal(emb.h, emb.h[:1].expand_as(emb.h))


def test_score_closed_forms():
    h = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 1.0]], dtype=torch.float64)
    emb = Embeddings(["p", "q", "r"], h)
    assert score(emb, "p", "q") == 0.5
    assert score(emb, "r", "r") == pytest.approx(1 / (1 + math.exp(-3)))
    assert score(emb, "r", "r") == pytest.approx(0.9526, abs=1e-4)
    assert score(emb, "p", "r") == score(emb, "r", "p")
    with pytest.raises(KeyError):
        score(emb, "p", "ghost")


def five_node_instance():
    g = snapshot([(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)],
                 sizes={0: 10, 1: 200, 2: 3, 3: 4000, 4: 55})
    inp = graph_inputs(g)
    rng = np.random.default_rng(0)
    h1p = torch.tensor(rng.normal(0, 0.3, size=(5, GRU_WIDTHS[0])), dtype=torch.float64)
    h2p = torch.tensor(rng.normal(0, 0.3, size=(5, GRU_WIDTHS[1])), dtype=torch.float64)
    pos = np.array([[0, 1], [2, 3], [1, 4]])
    neg = np.array([[0, 3], [2, 4]])
    return inp, h1p, h2p, pos, neg


@pytest.mark.parametrize("block", [name for name, _ in TgnnModel(0).named_parameters()])
def test_parameter_gradients_match_finite_differences(block):
    model = TgnnModel(3)
    inp, h1p, h2p, pos, neg = five_node_instance()
    param = dict(model.named_parameters())[block]
    model.zero_grad()
    link_loss(model, inp, h1p, h2p, pos, neg).backward()
    analytic = param.grad.detach().numpy().reshape(-1)
    # a fixed random subset of coordinates keeps the check quick on the big blocks
    coords = np.random.default_rng(len(block)).choice(param.numel(), min(param.numel(), 60),
                                                     replace=False)
    base = param.detach().clone().reshape(-1)

    def loss_at(sub):
        flat = base.clone()
        flat[coords] = torch.tensor(sub, dtype=torch.float64)
        with torch.no_grad():
            param.copy_(flat.reshape(param.shape))
            return float(link_loss(model, inp, h1p, h2p, pos, neg))

    fd = central_difference(loss_at, base[coords].numpy(), step=1e-5)
    assert relative_error(analytic[coords], fd) < 1e-4


def test_balanced_bce_at_one_to_one_is_plain_mean():
    h = torch.tensor(np.random.default_rng(1).normal(size=(6, 4)))
    pos, neg = np.array([[0, 1], [2, 3]]), np.array([[0, 5], [1, 4]])
    logits = torch.stack([h[0] @ h[1], h[2] @ h[3], h[0] @ h[5], h[1] @ h[4]])
    plain = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64))
    assert float(balanced_bce(h, pos, neg)) == pytest.approx(float(plain), abs=1e-14)


def ring_series(n_snaps=3, n=10):
    edges = [(i, (i + 1) % n) for i in range(n)] + [(0, 5), (2, 7)]
    return [snapshot(edges, date=f"2022-01-{3 + 7 * k:02d}", sizes={i: 10 ** (i % 4) for i in range(n)})
            for k in range(n_snaps)]


def test_zero_learning_rate_leaves_parameters_unchanged():
    model = TgnnModel(4)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train_live(model, ring_series(), TrainConfig(learning_rate=0.0, epochs=5, tolerance=0.0))
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_gradient_descent_loss_non_increasing_on_static_graph():
    model = TgnnModel(5)
    g = ring_series(1)[0]
    inp = graph_inputs(g)
    bank = NodeStateBank()
    h1p, h2p = bank.gather(inp.ids)
    pos = positive_pairs(g, inp.index)
    taken = {tuple(p) for p in pos}
    neg = np.array([(i, j) for i in range(10) for j in range(i + 1, 10) if (i, j) not in taken])
    opt = torch.optim.SGD(model.parameters(), lr=0.01)
    losses = []
    for _ in range(30):
        opt.zero_grad()
        loss = link_loss(model, inp, h1p, h2p, pos, neg)
        losses.append(float(loss.detach()))
        loss.backward()
        opt.step()
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    runs = [train_live(TgnnModel(6), ring_series(4), TrainConfig(seed=9)) for _ in range(2)]
    assert runs[0].reports == runs[1].reports
    assert runs[0].losses == runs[1].losses


def test_new_nodes_start_from_zero_state():
    model, bank = TgnnModel(7), NodeStateBank()
    forward(model, bank, snapshot([("a", "b")]))
    assert "a" in bank and "c" not in bank
    h1, h2 = bank.gather(["c"])
    assert not h1.any() and not h2.any()
    emb = forward(model, bank, snapshot([("a", "b"), ("b", "c")]))
    assert "c" in bank and tuple(emb.h.shape) == (3, 32)


def test_empty_snapshot_is_skipped_with_note():
    snaps = [snapshot([], date="2022-01-03")] + ring_series(2)
    res = train_live(TgnnModel(8), snaps, TrainConfig(epochs=2))
    assert res.reports[0].auprc is None and res.reports[0].note == "empty input snapshot"
    assert res.reports[1].auprc is not None
    with pytest.raises(ValueError):
        train_live(TgnnModel(8), snaps[:1])


def test_checkpoint_round_trip():
    model = TgnnModel(10)
    again = TgnnModel.from_json(model.state_json())
    for (k, v), w in zip(model.state_dict().items(), again.state_dict().values()):
        assert torch.equal(v, w), k
    with pytest.raises(ValueError):
        TgnnModel.from_json('{"version": 99, "params": {}}')


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 5, "momentum": 0.9})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"optimizer": "lbfgs"})


def test_negative_sampling_avoids_edges():
    pos = np.array([[0, 1], [1, 2]])
    neg = sample_negatives(4, pos, 4, np.random.default_rng(0))
    assert len(neg) == 4 and not ({tuple(p) for p in neg} & {(0, 1), (1, 2)})
    assert len(sample_negatives(3, pos, 10, np.random.default_rng(0))) == 1


def test_auprc_examples():
    assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auprc([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)
    assert auprc([0.5] * 8, [1, 0, 0, 1, 0, 0, 0, 0]) == pytest.approx(0.25, abs=1e-12)
    with pytest.raises(ValueError):
        auprc([0.3, 0.2], [0, 0])


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=1, max_size=300))
def test_auprc_matches_threshold_enumeration(rows):
    scores = [s / 20 for s, _ in rows]
    labels = [l for _, l in rows]
    if not any(labels):
        labels[0] = 1
    assert auprc(scores, labels) == pytest.approx(auprc_by_thresholds(scores, labels), abs=1e-12)
