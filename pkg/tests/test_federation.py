"""Federated round mechanics: local training, uploads, aggregation, determinism."""
import logging

import numpy as np
import pytest

from fedrecsim.defense import DefenseConfig
from fedrecsim.federation import (BenignClient, ClientUpdate, RoundPlan, round_rng,
                                  run_round, select_clients, zero_update)
from fedrecsim.model import ItemGrads, ModelGrads, backward, sgd_step

from conftest import make_params


def fed_params(rng, **kwargs):
    return make_params(rng, **kwargs)[1]


def make_clients(params, positives_by_id, seed=7, negatives_per_positive=2):
    clients = {}
    for cid, pos in positives_by_id.items():
        clients[cid] = BenignClient(
            cid, pos, params.num_items, params.embed_dim,
            init_rng=np.random.default_rng([seed, 1, cid]),
            negatives_per_positive=negatives_per_positive)
    return clients


def plan_for(clients, round_index=0, lr=0.05, local_epochs=1, batch_size=256):
    return RoundPlan(round_index=round_index,
                     selected_client_ids=tuple(sorted(clients)),
                     learning_rate=lr, local_epochs=local_epochs,
                     batch_size=batch_size)


def local_train_oracle(params, u0, epochs, lr, batch_size):
    """Sequential-SGD reference built on the standalone backward(); returns
    the locally trained full parameter copy, the trained user embedding, and
    the accumulated per-step gradient sums."""
    p = params.copy()
    u = u0.copy()
    acc_items: dict[int, np.ndarray] = {}
    acc_w = [np.zeros_like(w) for w in p.weights]
    acc_b = [np.zeros_like(b) for b in p.biases]
    for ids, labels in epochs:
        for start in range(0, ids.size, batch_size):
            b_ids = ids[start: start + batch_size]
            b_y = labels[start: start + batch_size]
            g = backward(u, b_ids, b_y, p)
            u = u - lr * g.d_user
            for item, vec in g.d_items.as_dict().items():
                acc_items[item] = acc_items.get(item, np.zeros_like(vec)) + vec
                p.item_embeddings[item] = p.item_embeddings[item] - lr * vec
            for w, dw, a in zip(p.weights, g.d_model.d_weights, acc_w):
                w -= lr * dw
                a += dw
            for b, db, a in zip(p.biases, g.d_model.d_biases, acc_b):
                b -= lr * db
                a += db
    return p, u, acc_items, acc_w, acc_b


class ScriptedClient:
    """Duck-typed client returning a canned update, for server-side tests."""

    def __init__(self, client_id, update):
        self.client_id = client_id
        self.update = update

    def train_round(self, params, rng, plan):
        return self.update


def scripted_item_update(client_id, params, scale=1.0, rng=None):
    rng = rng or np.random.default_rng(client_id)
    ids = np.array([0, 2], dtype=np.int64)
    vecs = scale * rng.normal(size=(2, params.embed_dim))
    d_w = [scale * rng.normal(size=w.shape) for w in params.weights]
    d_b = [scale * rng.normal(size=b.shape) for b in params.biases]
    return ClientUpdate(client_id, ItemGrads(ids, vecs), ModelGrads(d_w, d_b))


# ---------------------------------------------------------------- plan / client basics

def test_round_plan_validation():
    with pytest.raises(ValueError, match="learning_rate"):
        RoundPlan(0, (1, 2), learning_rate=0.0)
    with pytest.raises(ValueError, match="unique"):
        RoundPlan(0, (1, 1), learning_rate=0.1)
    with pytest.raises(ValueError, match="batch_size"):
        RoundPlan(0, (1,), learning_rate=0.1, batch_size=0)
    with pytest.raises(ValueError, match="local_epochs"):
        RoundPlan(0, (1,), learning_rate=0.1, local_epochs=-1)
    with pytest.raises(ValueError, match="round_index"):
        RoundPlan(-1, (1,), learning_rate=0.1)


def test_client_requires_positives(rng):
    params = fed_params(rng)
    with pytest.raises(ValueError, match="no training positives"):
        BenignClient(3, set(), params.num_items, params.embed_dim, rng)


def test_zero_local_epochs_is_a_no_op(rng):
    params = fed_params(rng)
    clients = make_clients(params, {0: {1, 2}, 1: {3}})
    plan = plan_for(clients, local_epochs=0)
    new_params, log = run_round(params, plan, clients, master_seed=11)
    assert np.array_equal(new_params.item_embeddings, params.item_embeddings)
    for w0, w1 in zip(params.weights, new_params.weights):
        assert np.array_equal(w0, w1)
    assert log.client_norms == {0: 0.0, 1: 0.0}


# ---------------------------------------------------------------- upload semantics

def test_single_pair_upload_is_the_analytic_gradient(rng):
    """One positive, no negatives, one step: the pseudo-gradient upload must
    equal backward() on that pair bit for bit, and the private embedding must
    take exactly one SGD step."""
    params = fed_params(rng)
    client = BenignClient(0, {4}, params.num_items, params.embed_dim,
                          init_rng=np.random.default_rng([7, 1, 0]),
                          negatives_per_positive=0)
    u0 = client.embedding.copy()
    plan = RoundPlan(0, (0,), learning_rate=0.05)
    update = client.train_round(params, round_rng(11, 0, 0), plan)

    ref = backward(u0, np.array([4]), np.array([1.0]), params)
    assert np.array_equal(update.d_items.ids, ref.d_items.ids)
    assert np.array_equal(update.d_items.vecs, ref.d_items.vecs)
    for got, want in zip(update.d_model.d_weights, ref.d_model.d_weights):
        assert np.array_equal(got, want)
    for got, want in zip(update.d_model.d_biases, ref.d_model.d_biases):
        assert np.array_equal(got, want)
    assert np.array_equal(client.embedding, u0 - 0.05 * ref.d_user)


def test_upload_is_the_sum_of_per_step_gradients(rng):
    params = fed_params(rng, num_items=10)
    client = BenignClient(2, {1, 5, 8}, params.num_items, params.embed_dim,
                          init_rng=np.random.default_rng([7, 1, 2]),
                          negatives_per_positive=2)
    u0 = client.embedding.copy()
    plan = RoundPlan(0, (2,), learning_rate=0.05, local_epochs=2, batch_size=4)
    client_rng = round_rng(11, 0, 2)
    epochs = client._draw_epochs(np.random.default_rng([11, 2, 0, 2]), plan)
    update = client.train_round(params, client_rng, plan)

    p_local, u_local, acc_items, acc_w, acc_b = local_train_oracle(
        params, u0, epochs, lr=0.05, batch_size=4)
    assert set(update.d_items.as_dict()) == set(acc_items)
    for item, vec in update.d_items.as_dict().items():
        assert np.array_equal(vec, acc_items[item])
    for got, want in zip(update.d_model.d_weights, acc_w):
        assert np.array_equal(got, want)
    for got, want in zip(update.d_model.d_biases, acc_b):
        assert np.array_equal(got, want)
    assert np.array_equal(client.embedding, u_local)


def test_single_client_round_lands_near_its_local_result(rng):
    """With one participant the server re-applies the summed gradients in one
    shot, which matches the client's own sequential result up to float
    reassociation."""
    params = fed_params(rng, num_items=10)
    clients = make_clients(params, {2: {1, 5, 8}})
    plan = plan_for(clients, lr=0.05, local_epochs=2, batch_size=4)
    epochs = clients[2]._draw_epochs(np.random.default_rng([11, 2, 0, 2]), plan)
    u0 = clients[2].embedding.copy()
    p_local, _, _, _, _ = local_train_oracle(params, u0, epochs, lr=0.05, batch_size=4)

    new_params, _ = run_round(params, plan, clients, master_seed=11)
    np.testing.assert_allclose(new_params.item_embeddings, p_local.item_embeddings,
                               rtol=1e-12, atol=1e-14)
    for got, want in zip(new_params.weights, p_local.weights):
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)
    touched = np.concatenate([ids for ids, _ in epochs])
    untouched = np.setdiff1d(np.arange(params.num_items), touched)
    assert np.array_equal(new_params.item_embeddings[untouched],
                          params.item_embeddings[untouched])


def test_single_step_round_equals_centralized_sgd(rng):
    """local_epochs=1 with everything in one batch reduces the whole protocol
    to sgd_step on the analytic gradient, exactly."""
    params = fed_params(rng)
    client = BenignClient(0, {1, 3}, params.num_items, params.embed_dim,
                          init_rng=np.random.default_rng([7, 1, 0]),
                          negatives_per_positive=0)
    clients = {0: client}
    u0 = client.embedding.copy()
    plan = plan_for(clients, lr=0.05)
    epochs = client._draw_epochs(np.random.default_rng([11, 2, 0, 0]), plan)
    ids, labels = epochs[0]

    new_params, _ = run_round(params, plan, clients, master_seed=11)
    bundle = backward(u0, ids, labels, params, wrt=("items", "model"))
    ref = sgd_step(params, bundle, 0.05)
    assert np.array_equal(new_params.item_embeddings, ref.item_embeddings)
    for got, want in zip(new_params.weights, ref.weights):
        assert np.array_equal(got, want)
    for got, want in zip(new_params.biases, ref.biases):
        assert np.array_equal(got, want)


def test_uploads_never_alias_or_leak_the_user_embedding(rng):
    params = fed_params(rng)
    client = BenignClient(0, {1, 2, 3}, params.num_items, params.embed_dim,
                          init_rng=np.random.default_rng([7, 1, 0]))
    plan = RoundPlan(0, (0,), learning_rate=0.05)
    update = client.train_round(params, round_rng(11, 0, 0), plan)
    assert not hasattr(update, "embedding")
    for arr in [update.d_items.vecs, *update.d_model.d_weights, *update.d_model.d_biases]:
        assert not np.shares_memory(arr, client.embedding)
    # vector fields are gradients w.r.t. public parameters, not the embedding
    assert update.d_items.vecs.shape[1] == params.embed_dim
    assert all(row.shape != client.embedding.shape or
               not np.array_equal(row, client.embedding)
               for row in update.d_items.vecs)


def test_input_params_are_never_mutated(rng):
    params = fed_params(rng)
    snapshot = params.copy()
    clients = make_clients(params, {0: {1}, 1: {2, 3}})
    run_round(params, plan_for(clients), clients, master_seed=11)
    assert np.array_equal(params.item_embeddings, snapshot.item_embeddings)
    for w0, w1 in zip(params.weights, snapshot.weights):
        assert np.array_equal(w0, w1)
    for b0, b1 in zip(params.biases, snapshot.biases):
        assert np.array_equal(b0, b1)


# ---------------------------------------------------------------- aggregation

def test_opposite_updates_cancel_exactly(rng):
    params = fed_params(rng)
    stream = np.random.default_rng(5)
    up = scripted_item_update(0, params, rng=stream)
    down = ClientUpdate(1, ItemGrads(up.d_items.ids.copy(), -up.d_items.vecs),
                        ModelGrads([-w for w in up.d_model.d_weights],
                                   [-b for b in up.d_model.d_biases]))
    clients = {0: ScriptedClient(0, up), 1: ScriptedClient(1, down)}
    plan = plan_for(clients)
    new_params, _ = run_round(params, plan, clients, master_seed=11)
    assert np.array_equal(new_params.item_embeddings, params.item_embeddings)
    for w0, w1 in zip(params.weights, new_params.weights):
        assert np.array_equal(w0, w1)


def test_selected_id_order_does_not_change_the_result(rng):
    params = fed_params(rng)
    clients = make_clients(params, {0: {1}, 1: {2}, 2: {3, 4}})
    forward_plan = RoundPlan(0, (0, 1, 2), learning_rate=0.05)
    scrambled_plan = RoundPlan(0, (2, 0, 1), learning_rate=0.05)
    a, _ = run_round(params, forward_plan, make_clients(params, {0: {1}, 1: {2}, 2: {3, 4}}),
                     master_seed=11)
    b, _ = run_round(params, scrambled_plan, clients, master_seed=11)
    assert np.array_equal(a.item_embeddings, b.item_embeddings)
    for w0, w1 in zip(a.weights, b.weights):
        assert np.array_equal(w0, w1)


def test_identical_updates_make_median_defense_match_plain_sum(rng):
    """With unanimous clients the rescaled coordinate median is exactly the
    plain sum, so the defended round must land on the undefended result."""
    params = fed_params(rng)
    shared = scripted_item_update(0, params, rng=np.random.default_rng(3))
    clients = {cid: ScriptedClient(cid, ClientUpdate(
        cid, shared.d_items, shared.d_model)) for cid in range(3)}
    plan = plan_for(clients)
    plain, _ = run_round(params, plan, clients, master_seed=11)
    defended, log = run_round(params, plan, clients, master_seed=11,
                              defense_config=DefenseConfig(kind="median"))
    assert np.array_equal(plain.item_embeddings, defended.item_embeddings)
    for w0, w1 in zip(plain.weights, defended.weights):
        assert np.array_equal(w0, w1)
    assert log.defense_info["kind"] == "median"


def test_non_finite_upload_is_dropped_and_logged(rng, caplog):
    params = fed_params(rng)
    poisoned = scripted_item_update(1, params, rng=np.random.default_rng(4))
    poisoned.d_items.vecs[0, 0] = np.nan
    good = {0: {1, 2}, 2: {3}}
    clients = {**make_clients(params, good), 1: ScriptedClient(1, poisoned)}
    plan = plan_for(clients)
    with caplog.at_level(logging.WARNING):
        new_params, log = run_round(params, plan, clients, master_seed=11)
    assert log.dropped_clients == [1]
    assert "non-finite" in caplog.text

    only_good = make_clients(params, good)
    ref_plan = RoundPlan(0, tuple(sorted(only_good)), learning_rate=0.05)
    ref_params, _ = run_round(params, ref_plan, only_good, master_seed=11)
    assert np.array_equal(new_params.item_embeddings, ref_params.item_embeddings)


# ---------------------------------------------------------------- selection

def test_selection_full_participation_returns_all_sorted():
    got = select_clients([5, 1, 3], 1.0, np.random.default_rng(0))
    assert got == (1, 3, 5)


def test_selection_count_is_ceil_of_fraction():
    ids = list(range(10))
    got = select_clients(ids, 0.25, np.random.default_rng(0))
    assert len(got) == 3
    assert set(got) <= set(ids)
    assert got == tuple(sorted(got))


def test_selection_is_deterministic_per_seed():
    ids = list(range(50))
    a = select_clients(ids, 0.3, np.random.default_rng(42))
    b = select_clients(ids, 0.3, np.random.default_rng(42))
    c = select_clients(ids, 0.3, np.random.default_rng(43))
    assert a == b
    assert a != c  # overwhelmingly likely for 15-of-50 draws


def test_selection_rejects_bad_fraction():
    with pytest.raises(ValueError, match="fraction"):
        select_clients([1, 2], 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="fraction"):
        select_clients([1, 2], 1.5, np.random.default_rng(0))


# ---------------------------------------------------------------- determinism

def test_round_rng_streams_replay_identically(rng):
    params = fed_params(rng, num_items=20)

    def fresh():
        return BenignClient(3, {1, 4}, params.num_items, params.embed_dim,
                            init_rng=np.random.default_rng([7, 1, 3]))

    plan = RoundPlan(0, (3,), learning_rate=0.05)
    a = fresh().train_round(params, round_rng(11, 0, 3), plan)
    b = fresh().train_round(params, round_rng(11, 0, 3), plan)
    c = fresh().train_round(params, round_rng(11, 5, 3), plan)
    assert np.array_equal(a.d_items.ids, b.d_items.ids)
    assert np.array_equal(a.d_items.vecs, b.d_items.vecs)
    # a later round draws different negatives for the same client
    assert not np.array_equal(a.d_items.ids, c.d_items.ids) or \
        not np.array_equal(a.d_items.vecs, c.d_items.vecs)


def test_parallel_execution_matches_serial_bit_for_bit(rng):
    params = fed_params(rng, num_items=12)
    positives = {cid: set(np.random.default_rng(cid).choice(12, size=3, replace=False).tolist())
                 for cid in range(6)}

    def run_chain(parallel):
        ps = params.copy()
        clients = make_clients(params, positives)
        for r in range(3):
            plan = RoundPlan(r, tuple(sorted(clients)), learning_rate=0.05)
            ps, _ = run_round(ps, plan, clients, master_seed=11, parallel=parallel)
        return ps, clients

    serial_params, serial_clients = run_chain(False)
    parallel_params, parallel_clients = run_chain(True)
    assert np.array_equal(serial_params.item_embeddings, parallel_params.item_embeddings)
    for w0, w1 in zip(serial_params.weights, parallel_params.weights):
        assert np.array_equal(w0, w1)
    for cid in serial_clients:
        assert np.array_equal(serial_clients[cid].embedding,
                              parallel_clients[cid].embedding)


def test_round_log_reports_norms_and_loss(rng):
    params = fed_params(rng)
    clients = make_clients(params, {0: {1, 2}, 1: {3, 4}})
    new_params, log = run_round(params, plan_for(clients), clients, master_seed=11)
    assert set(log.client_norms) == {0, 1}
    assert all(n > 0 for n in log.client_norms.values())
    assert log.max_norm() >= log.mean_norm() > 0
    assert log.mean_train_loss is not None and log.mean_train_loss > 0
    assert log.wall_ms > 0
    assert zero_update(9, params).norm() == 0.0
