import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from inferlab import pruning
from inferlab.model import Gates, ModelConfig, forward, init_params


@pytest.fixture(scope="module")
def batch(params):
    return pruning.make_eval_batch(params, 4, 12, seed=0)


# -- gates --------------------------------------------------------------------

def test_gate_examples():
    assert pruning.sample_gate(1.0, 0.7, 0.5) == 0.5
    for a in (0.3, 2.0, 9.0):
        assert pruning.sample_gate(a, 0.4, 0.5) == pytest.approx(expit(np.log(a) / 0.4))
    with pytest.raises(ValueError):
        pruning.concrete_gate(0.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        pruning.concrete_gate(0.0, 0.0, 0.5)


def test_low_temperature_gates_sharpen():
    u = np.random.default_rng(0).uniform(size=1000)
    # read as log alpha = 10 the mean clears 0.95
    assert pruning.concrete_gate(10.0, 0.01, u).mean() > 0.95
    # read as alpha = 10 it tends to P(u > 1/11) = 10/11
    g = pruning.sample_gate(10.0, 0.01, u)
    assert np.mean((g < 1e-3) | (g > 1 - 1e-3)) > 0.97
    assert g.mean() == pytest.approx(10 / 11, abs=3 * np.sqrt(10 / 121 / 1000))


@given(st.floats(-5, 5), st.floats(0.05, 2.0), st.floats(1e-6, 1 - 1e-6))
def test_gate_in_unit_interval(log_alpha, tau, u):
    assert 0.0 <= pruning.concrete_gate(log_alpha, tau, u) <= 1.0


def test_binarize_threshold():
    gs = pruning.GateSet(np.array([0.1, -0.1]), [np.array([2.0, -3.0, 0.0])], temperature=0.5)
    layer, neuron = gs.binarize()
    assert layer.tolist() == [True, False] and neuron[0].tolist() == [True, False, True]


# -- importance -----------------------------------------------------------------

def test_dead_neuron_has_zero_importance(params, batch):
    w = params["layers.0.w_down"].copy()
    w[:, 5] = 0.0
    p = params.replace_tensors({"layers.0.w_down": w})
    assert pruning.neuron_importance(p, batch)[0][5] == 0.0


def test_importance_scales_with_loss(params, batch):
    a = pruning.neuron_importance(params, batch)
    b = pruning.neuron_importance(params, batch, loss_scale=3.0)
    assert all(np.allclose(3 * x, y) for x, y in zip(a, b))
    la = pruning.layer_importance(params, batch)
    assert np.allclose(3 * la, pruning.layer_importance(params, batch, loss_scale=3.0))


def test_duplicated_batch_gives_identical_importance(params, batch):
    for site in ("residual", "block"):
        assert np.allclose(pruning.layer_importance(params, batch, site=site),
                           pruning.layer_importance(params, batch + batch, site=site))


def test_importance_report_shapes(params, batch):
    r = pruning.importance_report(params, batch).to_dict()
    assert len(r["neuron"]) == 2 and len(r["neuron"][0]) == 64 and len(r["layer"]) == 2 and r["num_samples"] == 4


def _ablation_wins(site, seeds=20):
    wins = 0
    for seed in range(seeds):
        p = init_params(ModelConfig(num_layers=4, seed=seed))
        b = pruning.make_eval_batch(p, 8, 16, seed=seed)
        imp = pruning.layer_importance(p, b, site=site)
        base = pruning.batch_loss(p, b)

        def drop(l):
            return pruning.batch_loss(pruning.apply_depth_prune(p, [k for k in range(4) if k != l]), b) - base
        wins += drop(int(np.argmin(imp))) < drop(int(np.argmax(imp)))
    return wins


def test_layer_ablation_ranking_block_site():
    assert _ablation_wins("block") >= 14


@pytest.mark.xfail(strict=True, reason="residual-stream inner product does not rank layers by ablation cost")
def test_layer_ablation_ranking_residual_site():
    assert _ablation_wins("residual") >= 14


# -- objective ------------------------------------------------------------------

def test_objective_arithmetic():
    gates = Gates(np.zeros(2), (np.zeros(4), np.zeros(4)))
    assert pruning.sparsity_objective(1.5, gates, 0.1, 0.01) == pytest.approx(1.5 + 0.2 + 0.08)
    assert pruning.sparsity_objective(1.5, gates, 0.0, 0.0) == 1.5
    ones = Gates(np.ones(2), (np.ones(4), np.ones(4)))
    assert pruning.sparsity_objective(1.5, ones, 0.1, 0.01, penalty="mass") == pytest.approx(1.5 + 0.2 + 0.08)
    with pytest.raises(ValueError):
        pruning.sparsity_objective(1.0, gates, -1, 0)


def _step_logits(params, batch, penalty, steps=3):
    gs = pruning.GateSet.init(params, value=0.0)
    rng = np.random.default_rng(0)
    history = [np.concatenate(gs.neuron_logits)]
    for _ in range(steps):
        gs, _, _ = pruning.prune_train_step(params, gs, batch, 0.0, 100.0, 0.1, rng, penalty=penalty)
        history.append(np.concatenate(gs.neuron_logits))
    return history


def test_large_mass_penalty_lowers_neuron_logits(params, batch):
    h = _step_logits(params, batch, "mass")
    assert all(np.all(b < a) for a, b in zip(h, h[1:]))


def test_large_pruned_penalty_raises_neuron_logits(params, batch):
    h = _step_logits(params, batch, "pruned")
    assert all(np.all(b > a) for a, b in zip(h, h[1:]))


def test_params_frozen_unless_co_trained(params, batch):
    gs = pruning.GateSet.init(params)
    _, same, _ = pruning.prune_train_step(params, gs, batch, 0.1, 0.1, 0.1, np.random.default_rng(0))
    assert same is params
    _, moved, _ = pruning.prune_train_step(params, gs, batch, 0.1, 0.1, 0.1, np.random.default_rng(0),
                                           co_train=True)
    assert not np.array_equal(moved["layers.0.w_up"], params["layers.0.w_up"])


def test_relaxed_gradient_matches_finite_differences(tiny):
    b = pruning.make_eval_batch(tiny, 2, 6, seed=1)
    gs = pruning.GateSet(np.array([0.3, -0.2]), [np.linspace(-1, 1, 8), np.linspace(1, -1, 8)], 0.7)
    rng = np.random.default_rng(3)
    ul, un = gs.draw_uniforms(rng)
    for penalty in ("pruned", "mass"):
        _, dl, dn, _ = pruning.relaxed_objective(tiny, gs, b, ul, un, 0.05, 0.02, penalty)
        h = 1e-6
        for i in range(2):
            def f(d):
                ll = gs.layer_logits.copy()
                ll[i] += d
                g2 = pruning.GateSet(ll, gs.neuron_logits, gs.temperature)
                return pruning.relaxed_objective(tiny, g2, b, ul, un, 0.05, 0.02, penalty)[0]
            assert (f(h) - f(-h)) / (2 * h) == pytest.approx(dl[i], rel=1e-5, abs=1e-9)
        for j in (0, 5):
            def f(d):
                nl = [a.copy() for a in gs.neuron_logits]
                nl[1][j] += d
                g2 = pruning.GateSet(gs.layer_logits, nl, gs.temperature)
                return pruning.relaxed_objective(tiny, g2, b, ul, un, 0.05, 0.02, penalty)[0]
            assert (f(h) - f(-h)) / (2 * h) == pytest.approx(dn[1][j], rel=1e-5, abs=1e-9)


def test_anneal_schedule():
    s = pruning.anneal(0.5, 0.05, 5)
    assert s[0] == 0.5 and s[-1] == pytest.approx(0.05) and all(b < a for a, b in zip(s, s[1:]))


# -- physical pruning -------------------------------------------------------------

def test_zero_gates_equal_physical_removal(params, rng):
    keep = [rng.random(64) < 0.6 for _ in range(2)]
    gates = Gates(np.array([1.0, 0.0]), tuple(m.astype(float) for m in keep))
    pruned = pruning.apply_depth_prune(pruning.apply_width_prune(params, keep), [0])
    x = rng.integers(0, 64, 15)
    assert np.abs(pruning.gated_forward(params, gates, x).logits - forward(pruned, x).logits).max() <= 1e-12


def test_all_layers_off_is_embedding_path(params):
    x = np.array([3, 1, 4])
    gates = Gates(np.zeros(2), tuple(np.ones(64) for _ in range(2)))
    expected = (params["tok_emb"][x] + params["pos_emb"][:3]) @ params["unembed"]
    assert np.allclose(pruning.gated_forward(params, gates, x).logits, expected)


def test_gate_shape_mismatch(params):
    with pytest.raises(ValueError):
        pruning.gated_forward(params, Gates(np.ones(3), (np.ones(64),) * 2), [1])


@given(st.floats(0.5, 99))
def test_width_parameter_law(percent):
    p = init_params(ModelConfig(d_ff=16))
    report = [np.arange(16.0)] * 2
    pruned = pruning.apply_width_prune(p, pruning.width_masks_by_importance(report, percent))
    k = pruning.prune_count(16, percent)
    assert p.num_parameters() - pruned.num_parameters() == 2 * k * 3 * 32
    assert pruning.ffn_parameter_count(pruned) == 2 * (16 - k) * 3 * 32


def test_prune_count():
    assert pruning.prune_count(8, 0) == 0
    assert pruning.prune_count(8, 1) == 1
    assert pruning.prune_count(8, 50) == 4
    assert pruning.prune_count(8, 100) == 7


def test_depth_pruned_weights_round_trip(tmp_path, params):
    from inferlab import weights
    pruned = pruning.apply_depth_prune(params, [1])
    weights.save(pruned, tmp_path / "p.bin")
    back = weights.load(tmp_path / "p.bin")
    assert back.config.num_layers == 1
    assert np.array_equal(forward(back, [1, 2]).logits, forward(pruned, [1, 2]).logits)


def test_invalid_prunes(params):
    with pytest.raises(ValueError):
        pruning.apply_depth_prune(params, [])
    with pytest.raises(ValueError):
        pruning.apply_width_prune(params, [np.zeros(64, bool), np.ones(64, bool)])
