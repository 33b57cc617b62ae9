import math

import numpy as np
import pytest

from emucascade import autodiff as ad
from emucascade import gnn
from emucascade.gnn import (
    GnnEdgeClassifier,
    GraphTensors,
    ModelConfig,
    SingleClassError,
    TrainConfig,
    adam_step,
    classifier_forward,
    edgeconv_forward,
    emulsionconv_forward,
    focal_loss,
    init_model,
    load_model,
    model_forward,
    predict_probabilities,
    roc_auc,
    save_model,
    train,
)
from emucascade.graphbuild import TrackGraph, build_graph
from helpers import block_params, chain_track_graph, make_graph, passthrough_block_params


# ---------------------------------------------------------------------------
# EdgeConv


def test_edgeconv_no_edges_applies_zero_message():
    g = make_graph(3, [])
    gt = GraphTensors(g)
    d = 4
    rng = np.random.default_rng(5)
    params = block_params(d, rng)
    h = ad.const(rng.normal(size=(3, d)))
    e = ad.const(np.zeros((0, d)))
    out = edgeconv_forward(gt, h, e, params, "b0_")
    # manual: U(concat(h, zeros))
    from emucascade.gnn import _mlp2

    want = _mlp2(ad.concat([h, ad.const(np.zeros((3, d)))]), params, "b0_U").data
    assert np.array_equal(out.data, want)


def test_edgeconv_edge_affects_only_destination():
    d = 4
    rng = np.random.default_rng(6)
    params = block_params(d, rng)
    g1 = make_graph(3, [(0, 1)], seed=1)
    g0 = make_graph(3, [], seed=1)
    g0.vertex_feats = g1.vertex_feats.copy()
    h = ad.const(rng.normal(size=(3, d)))
    e = ad.const(rng.normal(size=(1, d)))
    out1 = edgeconv_forward(GraphTensors(g1), h, e, params, "b0_").data
    out0 = edgeconv_forward(GraphTensors(g0), h, ad.const(np.zeros((0, d))), params, "b0_").data
    assert not np.allclose(out1[1], out0[1])
    assert np.array_equal(out1[0], out0[0])
    assert np.array_equal(out1[2], out0[2])


def test_edgeconv_mean_duplicate_idempotent():
    d = 3
    rng = np.random.default_rng(7)
    params = block_params(d, rng)
    single = make_graph(2, [(0, 1)], seed=2)
    double = make_graph(2, [(0, 1), (0, 1)], seed=2)
    double.vertex_feats = single.vertex_feats.copy()
    h = ad.const(rng.normal(size=(2, d)))
    e1 = rng.normal(size=(1, d))
    out1 = edgeconv_forward(GraphTensors(single), h, ad.const(e1), params, "b0_").data
    out2 = edgeconv_forward(GraphTensors(double), h, ad.const(np.vstack([e1, e1])), params, "b0_").data
    assert np.allclose(out1, out2, atol=1e-14)


# ---------------------------------------------------------------------------
# EmulsionConv


def test_emulsionconv_one_pass_spans_the_brick():
    n = 58
    d = 4
    rng = np.random.default_rng(8)
    params = passthrough_block_params(d)
    g = chain_track_graph(n)
    gt = GraphTensors(g)
    assert len(gt.groups) == 57
    h0 = rng.normal(size=(n, d))
    e = ad.const(rng.normal(size=(n - 1, d)))
    base = emulsionconv_forward(gt, ad.const(h0), e, params, "b0_").data
    bumped = h0.copy()
    bumped[0] += 0.5
    out = emulsionconv_forward(gt, ad.const(bumped), e, params, "b0_").data
    assert np.abs(out[57] - base[57]).max() > 1e-3


def test_emulsionconv_short_chain_generic_weights():
    # with generic weights the response decays but must reach a few hops
    n, d = 6, 4
    rng = np.random.default_rng(8)
    params = block_params(d, rng)
    gt = GraphTensors(chain_track_graph(n))
    h0 = rng.normal(size=(n, d))
    e = ad.const(rng.normal(size=(n - 1, d)))
    base = emulsionconv_forward(gt, ad.const(h0), e, params, "b0_").data
    bumped = h0.copy()
    bumped[0] += 0.5
    out = emulsionconv_forward(gt, ad.const(bumped), e, params, "b0_").data
    assert np.abs(out[n - 1] - base[n - 1]).max() > 0.0


def test_edgeconv_one_pass_is_single_hop():
    n = 58
    d = 4
    rng = np.random.default_rng(9)
    params = block_params(d, rng)
    g = chain_track_graph(n)
    gt = GraphTensors(g)
    h0 = rng.normal(size=(n, d))
    e = ad.const(rng.normal(size=(n - 1, d)))
    base = edgeconv_forward(gt, ad.const(h0), e, params, "b0_").data
    bumped = h0.copy()
    bumped[0] += 0.5
    out = edgeconv_forward(gt, ad.const(bumped), e, params, "b0_").data
    assert np.abs(out[1] - base[1]).max() > 0.0
    assert np.abs(out[2:] - base[2:]).max() <= 1e-12


def test_emulsionconv_same_plane_updates_commute():
    # two destinations on one plane with independent sources: swapping their
    # storage order inside the group leaves the result unchanged
    planes = np.array([0, 0, 1, 1])
    edges_a = [(0, 2), (1, 3)]
    edges_b = [(1, 3), (0, 2)]
    d = 3
    rng = np.random.default_rng(10)
    params = block_params(d, rng)
    h = rng.normal(size=(4, d))
    e = rng.normal(size=(2, d))

    def run(edges, e_rows):
        g = TrackGraph(
            track_ids=np.arange(4),
            vertex_feats=np.zeros((4, 10)),
            plane=planes,
            src=np.array([s for s, _ in edges]),
            dst=np.array([t for _, t in edges]),
            edge_feats=np.zeros((2, 6)),
        )
        return emulsionconv_forward(GraphTensors(g), ad.const(h), ad.const(e_rows), params, "b0_").data

    assert np.array_equal(run(edges_a, e), run(edges_b, e[::-1].copy()))


# ---------------------------------------------------------------------------
# classifier head + focal loss


def test_classifier_zero_weights_gives_half():
    cfg = ModelConfig(d_hidden=4, n_emulsion=1, n_edge=1, seed=0)
    model = init_model(cfg, edge_dim=6)
    for k in ("head1_W", "head1_b", "head2_W", "head2_b"):
        model.params[k] = np.zeros_like(model.params[k])
    g = make_graph(5, [(0, 2), (1, 3), (2, 4)])
    probs = predict_probabilities(model, g)
    assert np.allclose(probs, 0.5)
    assert np.all((probs > 0) & (probs < 1))


def test_classifier_invariant_under_vertex_relabeling():
    g = make_graph(12, [(0, 3), (1, 4), (3, 7), (4, 8), (7, 11), (2, 5)], seed=4)
    cfg = ModelConfig(d_hidden=6, n_emulsion=1, n_edge=1, seed=3)
    model = init_model(cfg, edge_dim=6)
    p1 = predict_probabilities(model, g)
    # relabel ids in reverse, keep geometry; canonical ordering resorts edges
    perm = np.arange(12)[::-1].copy()
    g2 = TrackGraph(
        track_ids=perm[g.track_ids],
        vertex_feats=g.vertex_feats,
        plane=g.plane,
        src=g.src,
        dst=g.dst,
        edge_feats=g.edge_feats,
    )
    order = np.lexsort((g2.track_ids[g2.src], g2.track_ids[g2.dst], g2.plane[g2.dst]))
    pairs1 = {(int(g.track_ids[s]), int(g.track_ids[d])): p for s, d, p in zip(g.src, g.dst, p1)}
    g2.src, g2.dst, g2.edge_feats = g2.src[order], g2.dst[order], g2.edge_feats[order]
    p2 = predict_probabilities(model, g2)
    pairs2 = {(int(g2.track_ids[s]), int(g2.track_ids[d])): p for s, d, p in zip(g2.src, g2.dst, p2)}
    mapped = {(int(perm[a]), int(perm[b])): v for (a, b), v in pairs1.items()}
    for key, v in mapped.items():
        assert pairs2[key] == pytest.approx(v, abs=1e-9)


def test_focal_perfect_prediction_is_zero():
    loss = focal_loss(np.array([1.0]), np.array([1]), gamma=3.0)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


def test_focal_gamma_zero_is_cross_entropy():
    rng = np.random.default_rng(11)
    p = rng.uniform(1e-6, 1 - 1e-6, size=10_000)
    y = rng.integers(0, 2, size=10_000)
    got = float(focal_loss(p, y, gamma=0.0).data)
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    pt = np.where(y == 1, pc, 1 - pc)
    want = float(np.mean(-np.log(pt)))
    assert got == pytest.approx(want, abs=1e-12)


def test_focal_closed_form_value():
    loss = focal_loss(np.array([0.5]), np.array([1]), gamma=3.0)
    assert float(loss.data) == pytest.approx(0.5**3 * math.log(2.0), abs=1e-9)


def test_focal_gradient_at_half():
    logit = ad.param(np.array([[0.0]]))
    loss = focal_loss(ad.sigmoid(logit), np.array([[1]]), gamma=0.0)
    ad.backward(loss)
    assert logit.grad[0, 0] == pytest.approx(-0.5, abs=1e-12)


def test_zero_loss_gives_zero_gradients():
    logit = ad.param(np.array([[40.0], [40.0]]))
    loss = focal_loss(ad.sigmoid(logit), np.array([[1], [1]]), gamma=3.0)
    ad.backward(loss)
    assert np.allclose(logit.grad, 0.0)


# ---------------------------------------------------------------------------
# gradient check through the full model


def finite_difference_check(model, gt, gamma, names, step=1e-4, rtol=1e-4):
    from emucascade.gnn import graph_loss

    loss, tparams = graph_loss(model, gt, gamma)
    ad.backward(loss)
    for name in names:
        analytic = tparams[name].grad
        arr = model.params[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(graph_loss(model, gt, gamma)[0].data)
            flat[i] = orig - step
            lo = float(graph_loss(model, gt, gamma)[0].data)
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            an = analytic.reshape(-1)[i]
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom <= rtol, (name, i, fd, an)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    edges = [(i, j) for i in range(20) for j in (i + 1, i + 3) if j < 20]
    g = make_graph(20, edges, seed=13)
    g.labels = rng.integers(0, 2, size=len(g.src)).astype(np.int8)
    cfg = ModelConfig(d_hidden=3, n_emulsion=1, n_edge=1, seed=1)
    model = init_model(cfg, edge_dim=6, train_graphs=[g])
    gt = GraphTensors(g)
    names = ["enc_v_W", "enc_e_W", "b0_M1_W", "b0_U2_W", "b1_M2_W", "b1_U1_b", "head1_W", "head2_b"]
    finite_difference_check(model, gt, gamma=3.0, names=names)


def test_gradients_max_aggregation():
    rng = np.random.default_rng(14)
    edges = [(0, 2), (1, 2), (2, 3), (1, 3)]
    g = make_graph(4, edges, seed=15)
    g.labels = np.array([1, 0, 1, 0], dtype=np.int8)[: len(g.src)]
    cfg = ModelConfig(d_hidden=3, n_emulsion=1, n_edge=1, aggregation="max", seed=2)
    model = init_model(cfg, edge_dim=6, train_graphs=[g])
    finite_difference_check(model, GraphTensors(g), 2.0, ["b0_M1_W", "b1_M1_W"])


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.zeros(2)}
    out, _ = adam_step(params, grads, {}, lr=0.1)
    assert np.array_equal(out["w"], params["w"])


def test_adam_first_step_magnitude():
    params = {"w": np.zeros(3)}
    grads = {"w": np.array([0.5, -2.0, 10.0])}
    out, _ = adam_step(params, grads, {}, lr=1e-3)
    assert np.allclose(np.abs(out["w"]), 1e-3, rtol=1e-6)
    assert np.all(np.sign(out["w"]) == -np.sign(grads["w"]))


def test_adam_deterministic():
    params = {"w": np.array([0.3])}
    grads = {"w": np.array([0.7])}
    a, _ = adam_step(params, grads, {}, lr=0.01)
    b, _ = adam_step(params, grads, {}, lr=0.01)
    assert np.array_equal(a["w"], b["w"])


# ---------------------------------------------------------------------------
# ROC-AUC


def brute_force_auc(scores, labels):
    num = 0.0
    den = 0.0
    for i in range(len(scores)):
        for j in range(len(scores)):
            if labels[i] > labels[j]:
                den += 1.0
                if scores[i] > scores[j]:
                    num += 1.0
                elif scores[i] == scores[j]:
                    num += 0.5
    return num / den


def test_auc_perfect():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0


def test_auc_all_ties():
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_auc_single_class_error():
    with pytest.raises(SingleClassError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_exactly():
    rng = np.random.default_rng(16)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # mix continuous and heavily tied scores
        if rng.random() < 0.5:
            scores = rng.choice([0.1, 0.3, 0.5, 0.7], size=n)
        else:
            scores = rng.random(n)
        assert roc_auc(scores, labels) == brute_force_auc(scores, labels)


# ---------------------------------------------------------------------------
# training loop


def labeled_toy_graph(separated_brick):
    brick, _truths = separated_brick
    return build_graph(brick)


def test_train_patience_one_stops_after_two_epochs(separated_brick):
    g = labeled_toy_graph(separated_brick)
    cfg = ModelConfig(d_hidden=4, n_emulsion=1, n_edge=1, seed=0)
    # lr=0 freezes the model, so the val metric never improves after epoch 1
    tcfg = TrainConfig(lr=1e-30, max_epochs=50, patience=1, seed=0)
    _, history = train([g], [g], cfg, tcfg)
    assert len(history) == 2


def test_train_deterministic(separated_brick):
    g = labeled_toy_graph(separated_brick)
    cfg = ModelConfig(d_hidden=4, n_emulsion=1, n_edge=1, seed=1)
    tcfg = TrainConfig(lr=1e-3, max_epochs=4, patience=10, seed=1)
    m1, h1 = train([g], [g], cfg, tcfg)
    m2, h2 = train([g], [g], cfg, tcfg)
    assert h1 == h2
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)


def test_train_empty_split_error():
    with pytest.raises(ValueError):
        train([], [], ModelConfig(), TrainConfig())


def test_train_separable_brick_reaches_high_auc(separated_brick):
    g = labeled_toy_graph(separated_brick)
    clf = GnnEdgeClassifier(
        d_hidden=8, n_emulsion=2, n_edge=2, max_epochs=60, patience=60, seed=3
    )
    clf.fit([g], [g])
    assert max(h[2] for h in clf.history_) >= 0.95


# ---------------------------------------------------------------------------
# serialization


def test_model_round_trip(tmp_path, separated_brick):
    g = labeled_toy_graph(separated_brick)
    cfg = ModelConfig(d_hidden=4, n_emulsion=1, n_edge=1, seed=5)
    model = init_model(cfg, edge_dim=6, train_graphs=[g])
    p = tmp_path / "model.json"
    save_model(model, p)
    loaded = load_model(p)
    assert loaded.config == model.config
    assert all(np.array_equal(loaded.params[k], model.params[k]) for k in model.params)
    assert np.array_equal(loaded.v_mean, model.v_mean)
    assert np.array_equal(predict_probabilities(loaded, g), predict_probabilities(model, g))
    # saving again is byte-identical
    p2 = tmp_path / "model2.json"
    save_model(loaded, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_model_version_check(tmp_path):
    import json

    cfg = ModelConfig(d_hidden=2, n_emulsion=1, n_edge=0, seed=0)
    model = init_model(cfg, edge_dim=6)
    p = tmp_path / "model.json"
    save_model(model, p)
    doc = json.loads(p.read_text())
    doc["format_version"] = 99
    p.write_text(json.dumps(doc))
    with pytest.raises(gnn.ModelFormatError):
        load_model(p)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_hidden=0)
    with pytest.raises(ValueError):
        ModelConfig(n_emulsion=0, n_edge=0)
    with pytest.raises(ValueError):
        ModelConfig(block_order="sideways")
    with pytest.raises(ValueError):
        ModelConfig(aggregation="median")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(gamma_focal=-1.0)


def test_block_kinds_orders():
    assert ModelConfig(n_emulsion=2, n_edge=3, block_order="emulsion_first").block_kinds() == [
        "emulsion", "emulsion", "edge", "edge", "edge",
    ]
    assert ModelConfig(n_emulsion=2, n_edge=3, block_order="edge_first").block_kinds() == [
        "edge", "edge", "edge", "emulsion", "emulsion",
    ]
    assert ModelConfig(n_emulsion=2, n_edge=3, block_order="interleaved").block_kinds() == [
        "emulsion", "edge", "emulsion", "edge", "edge",
    ]
