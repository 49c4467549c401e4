import numpy as np
import pytest

from c2r import diffcore as dc
from c2r.diffcore import Tensor
from c2r.graphdata import Graph, collate, gen_spurious_motif
from c2r.models import (RATIONALE, Architecture, CheckpointError, EnvGenerator, GCNLayer, GINLayer,
                        GNN, Predictor, Separator, build_model, encode_graph,
                        generate_counterfactual, gumbel_noise, gumbel_softmax_sample,
                        load_checkpoint, predict, save_checkpoint, separate)


def graph(n, edges, x=None):
    x = np.ones((n, 1)) if x is None else np.asarray(x, dtype=float)
    return Graph(n_nodes=n, edges=edges, node_features=x, label=0)


def identity_gin(d=1):
    """GIN layer whose MLP is the identity on nonnegative inputs."""
    layer = GINLayer(d, d, np.random.default_rng(0))
    for lin in layer.mlp.layers:
        lin.weight.data = np.eye(d)
        lin.bias.data = np.zeros((1, d))
    return layer


# ---------------------------------------------------------------- layers

def test_gin_no_edges_is_plain_mlp():
    b = collate([graph(1, [], [[3.0]])])
    out = identity_gin()(Tensor(b.x), b)
    np.testing.assert_array_equal(out.data, [[3.0]])


def test_gin_star_hub_sums_leaves():
    k = 4
    b = collate([graph(k + 1, [[0, i] for i in range(1, k + 1)])])
    out = identity_gin()(Tensor(b.x), b).data[:, 0]
    assert out[0] == 1 + k
    np.testing.assert_array_equal(out[1:], 2.0)


def test_gin_eps_minus_one_drops_self():
    b = collate([graph(2, [[0, 1]], [[5.0], [2.0]])])
    layer = identity_gin()
    layer.eps.data[:] = -1.0
    np.testing.assert_array_equal(layer(Tensor(b.x), b).data, [[2.0], [5.0]])
    lone = collate([graph(1, [], [[7.0]])])
    np.testing.assert_array_equal(layer(Tensor(lone.x), lone).data, [[0.0]])


def test_gcn_path_normalised_adjacency():
    b = collate([graph(3, [[0, 1], [1, 2]], np.eye(3))])
    layer = GCNLayer(3, 3, np.random.default_rng(0))
    layer.weight.data = np.eye(3)
    out = layer(Tensor(b.x), b, activate=False).data
    s2, s3 = 1 / np.sqrt(2), 1 / np.sqrt(3)
    expect = np.array([[0.5, s2 * s3, 0], [s2 * s3, 1 / 3, s2 * s3], [0, s2 * s3, 0.5]])
    np.testing.assert_allclose(out, expect, atol=1e-15)


@pytest.mark.parametrize("backbone", ["gin", "gcn"])
def test_readout_permutation_invariant(backbone):
    rng = np.random.default_rng(1)
    g = gen_spurious_motif(1, 0.9, seed=3).graphs[0]
    perm = rng.permutation(g.n_nodes)
    inv = np.argsort(perm)
    g2 = Graph(n_nodes=g.n_nodes, edges=inv[g.edges], node_features=g.node_features[perm],
               label=g.label)
    enc = GNN(backbone, 4, 8, 3, np.random.default_rng(2))
    _, a = encode_graph(enc, collate([g]))
    _, b = encode_graph(enc, collate([g2]))
    np.testing.assert_allclose(a.data, b.data, atol=1e-10)


def test_gnn_input_width_checked():
    b = collate([graph(2, [[0, 1]])])
    with pytest.raises(dc.DimensionError):
        GNN("gin", 4, 8, 2, np.random.default_rng(0))(b)


# -------------------------------------------------------------- separator

def _separator(d=8):
    rng = np.random.default_rng(0)
    return Separator("gin", 4, d, 2, 1.0, rng), GNN("gin", 4, d, 2, rng)


def test_separator_rows_are_distributions():
    sep, _ = _separator()
    b = collate(gen_spurious_motif(4, 0.9, seed=0).graphs)
    m = sep(b).data
    assert m.shape == (b.n_nodes, 2) and np.all(m >= 0)
    np.testing.assert_allclose(m.sum(1), 1.0, atol=1e-12)


@pytest.mark.parametrize("hard", [False, True])
def test_masks_are_complementary(hard):
    sep, gnn_g = _separator()
    b = collate(gen_spurious_motif(5, 0.9, seed=1).graphs)
    out = separate(sep, gnn_g, b, np.random.default_rng(0), hard=hard)
    full = dc.segment_mean(out.H_g, b.segment_ids, b.n_graphs).data
    np.testing.assert_allclose(out.h_r.data + out.h_n.data, full, atol=1e-12)


def test_degenerate_distribution_always_selected():
    lp = dc.log_softmax(Tensor([[50.0, -50.0]] * 1000))
    noise = gumbel_noise(np.random.default_rng(0), lp.shape)
    assert gumbel_softmax_sample(lp, 1.0, noise, hard=True).data[:, RATIONALE].all()


def test_gumbel_max_frequency():
    n = 100_000
    lp = dc.log(Tensor(np.tile([0.7, 0.3], (n, 1))))
    noise = gumbel_noise(np.random.default_rng(123), lp.shape)
    hard = gumbel_softmax_sample(lp, 0.5, noise, hard=True).data
    assert abs(hard[:, RATIONALE].mean() - 0.7) <= 0.01
    soft = gumbel_softmax_sample(lp, 0.5, noise).data
    np.testing.assert_allclose(soft.sum(1), 1.0, atol=1e-12)


def test_gumbel_rejects_bad_temperature():
    with pytest.raises(ValueError):
        gumbel_softmax_sample(Tensor([[0.0, 0.0]]), 0.0, None)


# ------------------------------------------------------- predictor and EG

def test_zero_predictor_is_uniform():
    phi = Predictor(4, 3, np.random.default_rng(0))
    for p in phi.parameters():
        p.data[:] = 0.0
    p = dc.row_softmax(predict(phi, Tensor(np.random.default_rng(1).normal(size=(5, 4))))).data
    np.testing.assert_allclose(p, 1 / 3, atol=1e-15)


def test_shared_predictor_accumulates_both_paths():
    rng = np.random.default_rng(0)
    phi = Predictor(3, 3, rng)
    a, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    y = [0, 1, 2, 0]

    def grads(*inputs):
        dc.zero_grads(phi.parameters())
        loss = None
        for h in inputs:
            t = dc.cross_entropy_with_logits(predict(phi, h), y)
            loss = t if loss is None else loss + t
        dc.backward(loss)
        return [p.grad.copy() for p in phi.parameters()]

    ga, gb, gab = grads(a), grads(b), grads(a, b)
    for x, y_, z in zip(ga, gb, gab):
        np.testing.assert_allclose(z, x + y_, atol=1e-14)


def test_env_generator_zero_output_layer():
    eg = EnvGenerator(4, np.random.default_rng(0))
    last = eg.layers[-1]
    last.weight.data[:] = 0.0
    last.bias.data[:] = 0.0
    rng = np.random.default_rng(1)
    out = generate_counterfactual(eg, Tensor(rng.normal(size=(3, 4))), rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_env_generator_width_checked():
    eg = EnvGenerator(4, np.random.default_rng(0))
    with pytest.raises(dc.DimensionError):
        generate_counterfactual(eg, Tensor(np.ones((2, 4))), np.ones((2, 3)))


# ---------------------------------------------------------------- bundle

def test_model_kinds_have_expected_parts():
    full = build_model(Architecture(kind="c2r"), 0)
    van = build_model(Architecture(kind="vanilla"), 0)
    rat = build_model(Architecture(kind="vanilla-rat"), 0)
    assert full.has_classifier and full.has_rationalizer and full.eg is not None
    assert van.has_classifier and not van.has_rationalizer
    assert rat.has_rationalizer and not rat.has_classifier
    assert {k.split(".")[0] for k in full.named_parameters()} == \
        {"gnn_en", "separator", "gnn_g", "phi", "eg"}


def test_build_model_is_seeded():
    a = build_model(Architecture(d=8), 3).named_parameters()
    b = build_model(Architecture(d=8), 3).named_parameters()
    c = build_model(Architecture(d=8), 4).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_checkpoint_round_trip(tmp_path):
    m = build_model(Architecture(d=8, n_layers=2), 5)
    save_checkpoint(m, tmp_path / "ck", config_hash="abc")
    back = load_checkpoint(tmp_path / "ck", config_hash="abc")
    assert back.arch == m.arch
    pa, pb = m.named_parameters(), back.named_parameters()
    assert list(pa) == list(pb)
    assert all(pa[k].data.tobytes() == pb[k].data.tobytes() for k in pa)


def test_checkpoint_refuses_wrong_config(tmp_path):
    save_checkpoint(build_model(Architecture(d=8), 0), tmp_path / "ck", config_hash="abc")
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(tmp_path / "ck", config_hash="xyz")


def test_checkpoint_detects_corrupted_blob(tmp_path):
    save_checkpoint(build_model(Architecture(d=8), 0), tmp_path / "ck")
    raw = bytearray((tmp_path / "ck.bin").read_bytes())
    raw[0] ^= 1
    (tmp_path / "ck.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "ck")


def test_straight_through_forward_hard_backward_soft():
    sep, gnn_g = _separator()
    b = collate(gen_spurious_motif(3, 0.9, seed=2).graphs)
    st = separate(sep, gnn_g, b, np.random.default_rng(4), straight_through=True)
    hard = separate(sep, gnn_g, b, np.random.default_rng(4), hard=True)
    np.testing.assert_array_equal(st.mask.data, hard.mask.data)

    def grads(**kw):
        dc.zero_grads(sep.parameters())
        out = separate(sep, gnn_g, b, np.random.default_rng(4), **kw)
        dc.backward(dc.tsum(dc.hadamard(out.mask, Tensor(np.arange(b.n_nodes)[:, None] / 10.0))))
        return [p.grad.copy() for p in sep.parameters()]

    for a, s in zip(grads(straight_through=True), grads()):
        np.testing.assert_allclose(a, s, atol=1e-14)
