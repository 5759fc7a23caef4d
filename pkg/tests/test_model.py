import numpy as np
import pytest

from hgwavenet import autodiff as ad
from hgwavenet.config import RunConfig
from hgwavenet.graph_data import EdgeSampleBatch, Snapshot, synthetic_dynamic_graph
from hgwavenet.manifold import PoincareGeometry as G
from hgwavenet.model import (CheckpointError, HGWaveNet, HistoryBuffer, cross_entropy_loss, edge_scores,
                             fermi_dirac_score, htc_loss, load_checkpoint, save_checkpoint, total_loss)
from hgwavenet.training import SnapshotCache, gradcheck_config, gradcheck_fixture, snapshot_losses, train


# ---------------------------------------------------------------- decoder

def test_score_half_at_radius():
    x = np.array([[0.0, 0.0]])
    y = np.array([[np.tanh(1.0), 0.0]])  # distance 2 from the origin at c=1
    assert abs(float(ad.value(fermi_dirac_score(x, y, 2.0, 1.0, 1.0)).ravel()[0]) - 0.5) < 1e-9


def test_score_at_zero_distance():
    x = np.array([[0.3, -0.1]])
    p = float(ad.value(fermi_dirac_score(x, x, 2.0, 1.0, 1.0)).ravel()[0])
    assert abs(p - 0.880797) < 1e-6


def test_score_range(rng):
    from conftest import random_ball
    X, Y = random_ball(rng, 200, 3, 1.0, 0.99999), random_ball(rng, 200, 3, 1.0, 0.99999)
    p = ad.value(fermi_dirac_score(X, Y, 2.0, 1.0, 1.0))
    assert np.all((p > 0) & (p < 1))


# ---------------------------------------------------------------- losses

def _points_at_distance(dists):
    """Pairs (origin, x_i) with hyperbolic distance dists[i] at c=1."""
    Z = [[0.0, 0.0]] + [[np.tanh(d / 2), 0.0] for d in dists]
    return np.array(Z)


def test_ce_balanced_example():
    Z = _points_at_distance([2.0, 2.0])  # both pairs score 0.5
    batch = EdgeSampleBatch(np.array([[0, 1]]), np.array([[0, 2]]))
    assert abs(float(ad.value(cross_entropy_loss(Z, batch, 2.0, 1.0, 1.0))) - 1.3863) < 1e-4


def test_ce_positive_term_at_zero_distance():
    Z = np.zeros((3, 2))
    batch = EdgeSampleBatch(np.array([[0, 1], [1, 2]]), np.zeros((0, 2), dtype=int))
    assert abs(float(ad.value(cross_entropy_loss(Z, batch, 2.0, 1.0, 1.0))) - 0.1269) < 1e-4


def test_ce_needs_positives():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((2, 2)), EdgeSampleBatch(np.zeros((0, 2), int), np.zeros((0, 2), int)),
                           2.0, 1.0, 1.0)


def test_ce_clamp_keeps_gradient_finite():
    Z = ad.Tensor(np.zeros((3, 2)), requires_grad=True)
    batch = EdgeSampleBatch(np.array([[1, 2]]), np.array([[0, 1]]))
    with ad.GradientTape() as tape:
        loss = cross_entropy_loss(Z, batch, 60.0, 1.0, 1.0)  # p_neg rounds to 1
    (g,) = tape.gradient(loss, [Z])
    assert np.isfinite(float(ad.value(loss))) and np.all(np.isfinite(g))


def test_htc_examples():
    Zp, Zc = np.zeros((1, 2)), np.array([[0.5, 0.0]])
    assert abs(float(ad.value(htc_loss(Zp, Zc, 1.0))) - 1.098612) < 1e-6
    Z = np.random.default_rng(0).uniform(-0.4, 0.4, size=(5, 3))
    assert float(ad.value(htc_loss(Z, Z, 1.0))) == 0.0


def test_total_loss_examples():
    assert float(ad.value(total_loss([1.0], [0.5], 2.0))) == 2.0
    assert float(ad.value(total_loss([1.0, 0.25], [3.0, 4.0], 0.0))) == 1.25
    with pytest.raises(ValueError):
        total_loss([1.0], [], 1.0)


# ---------------------------------------------------------------- forward pass

@pytest.mark.parametrize("variant", [{}, {"no_hdgc": True}, {"no_hdcc": True}, {"euclidean": True}])
def test_forward_keeps_ball_invariant(variant):
    rng = np.random.default_rng(7)
    trials = 100 if not variant else 10
    for trial in range(trials):
        n = int(rng.integers(2, 21))
        cfg = RunConfig(dim=3, K=int(rng.integers(0, 3)), L=int(rng.integers(1, 3)), seed_init=trial,
                        **variant).validate()
        model = HGWaveNet(n, cfg)
        for p in model.params.values():
            p.value = p.value + rng.normal(0, 2.0, size=p.value.shape)
        snap = Snapshot(0, rng.integers(0, n, size=(2 * n, 2)), n)
        buf = model.new_buffer()
        c = float(ad.value(model.curvature()))
        for _ in range(3):
            Z = ad.value(model.forward_snapshot(model.diffusion_stack(snap), buf))
            assert np.all(np.isfinite(Z))
            if not cfg.euclidean:
                assert np.all(np.linalg.norm(Z, axis=1) < 1 / np.sqrt(c))


def test_history_changes_output():
    g = gradcheck_fixture()
    model = HGWaveNet(g.num_nodes, gradcheck_config())
    st = model.diffusion_stack(g.snapshots[0])
    fresh = ad.value(model.forward_snapshot(st, model.new_buffer()))
    buf = model.new_buffer()
    buf.push(G.exp0(np.random.default_rng(1).normal(0, 0.3, size=(g.num_nodes, 4)), 1.0))
    assert not np.allclose(ad.value(model.forward_snapshot(st, buf)), fresh)


def test_buffer_window_and_order():
    buf = HistoryBuffer(3, 2, 2)
    for i in range(5):
        buf.push(np.full((2, 2), i / 10))
    seq = ad.value(buf.sequence())
    assert seq.shape == (3, 2, 2)
    np.testing.assert_array_equal(seq[:, 0, 0], [0.2, 0.3, 0.4])
    assert buf.latest()[0, 0] == 0.4


def test_random_padding_is_seeded_and_inside():
    cfg = RunConfig(dim=3, padding="random").validate()
    a = ad.value(HGWaveNet(5, cfg).new_buffer().sequence())
    b = ad.value(HGWaveNet(5, cfg).new_buffer().sequence())
    np.testing.assert_array_equal(a, b)
    assert np.any(a != 0) and np.all(np.linalg.norm(a, axis=-1) < 1)


def test_ablation_init_streams_are_independent():
    full = HGWaveNet(10, RunConfig(dim=4).validate())
    flat = HGWaveNet(10, RunConfig(dim=4, no_hdcc=True).validate())
    for k in ("embeddings", "hgru.Wz", "hdgc.0.W0"):
        np.testing.assert_array_equal(full.params[k].value, flat.params[k].value)


def test_no_hdgc_uses_one_step():
    m = HGWaveNet(10, RunConfig(dim=4, no_hdgc=True).validate())
    assert [k for k in m.params if k.startswith("hdgc")] == [
        "hdgc.0.W0", "hdgc.0.b0", "hdgc.0.c0", "hdgc.0.a_nbr", "hdgc.0.a_step"]
    assert m.diffusion_stack(Snapshot(0, [(0, 1)], 10)).K == 0


# ---------------------------------------------------------------- training behaviour

def _losses(cfg, graph, epochs):
    return [r["loss"] for r in train(graph, cfg.replace(epochs=epochs, patience=0)).trace]


def test_determinism_five_epochs():
    g = gradcheck_fixture()
    cfg = gradcheck_config()
    assert _losses(cfg, g, 5) == _losses(cfg, g, 5)


def test_loss_decreases_over_fifty_steps():
    g = synthetic_dynamic_graph(num_nodes=10, num_snapshots=4, split=3, seed=11)
    cfg = gradcheck_config(lr=0.01)
    trace = _losses(cfg, g, 50)
    assert trace[-1] < trace[0]
    assert min(trace[40:]) < min(trace[:10])


def test_snapshot_losses_shape(small_graph):
    model = HGWaveNet(small_graph.num_nodes, RunConfig(dim=4).validate())
    ces, htcs = snapshot_losses(model, small_graph, SnapshotCache.build(model, small_graph), 0)
    assert len(ces) == len(htcs) == small_graph.split - 1
    assert htcs[0] == 0.0 and float(ad.value(htcs[1])) > 0


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    g = gradcheck_fixture()
    cfg = gradcheck_config(epochs=2)
    model = train(g, cfg).model
    path = save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(path, cfg)
    assert back.checksum() == model.checksum()
    assert back.config == model.config
    st = model.diffusion_stack(g.snapshots[0])
    np.testing.assert_array_equal(ad.value(back.forward_snapshot(st, back.new_buffer())),
                                  ad.value(model.forward_snapshot(st, model.new_buffer())))


def test_checkpoint_dimension_mismatch(tmp_path):
    model = HGWaveNet(10, gradcheck_config())
    path = save_checkpoint(model, tmp_path / "m.npz")
    with pytest.raises(CheckpointError, match="dim"):
        load_checkpoint(path, gradcheck_config(dim=8))
    with pytest.raises(CheckpointError):
        model.load_state_dict({"embeddings": np.zeros((10, 4))})
