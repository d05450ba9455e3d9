import copy

import numpy as np
import pytest

import cogplan.fusion as fusion
from cogplan.alignment import VideoEncoder
from cogplan.autodiff import Tensor
from cogplan.exceptions import ConfigError, InputError, TrainingDivergedError
from cogplan.fusion import (
    AttnGate,
    BevEncoder,
    PlanHead,
    Planner,
    PlannerConfig,
    SparseTokens,
    TrajectoryPlanner,
    batch_scenes,
    bilinear_occupancy,
    planning_loss,
)
from cogplan.gradcheck import run_gradcheck
from cogplan.synth import gen_scenes

SMALL = dict(channels=16, hidden=32, bev_hw=8, n_v=4)


def planner(framework, seed=0, **kw):
    m = Planner(PlannerConfig(framework, **{**SMALL, **kw}), seed)
    m.eval()
    return m


def cognition(b, d=200, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(b, d)))


@pytest.fixture(scope="module")
def batch(scenes):
    return batch_scenes(scenes[:6])


def fit_small(framework, scenes, epochs=2, **kw):
    enc = VideoEncoder(np.random.default_rng(5), dropout=0.0)
    params = {**SMALL, "epochs": epochs, "seed": 1, **kw}
    cog = None if framework == "baseline" else enc
    return TrajectoryPlanner(framework, **params).fit(scenes, cognition=cog), enc


# -- BEV ---------------------------------------------------------------------------

def test_bev_shapes_determinism_and_sensitivity(scenes):
    enc = BevEncoder(np.random.default_rng(0))
    empty = [s for s in gen_scenes(20, seed=1, difficulty="empty")][:1]
    raster = batch_scenes(empty).raster
    bev, visual = enc(raster)
    assert bev.shape == (1, 256, 32) and visual.shape == (1, 16, 32)
    assert np.array_equal(enc(raster)[0].data, bev.data)
    blocked = raster.copy()
    blocked[0, 40, 32, 0] = 1.0
    assert np.abs(enc(blocked)[0].data - bev.data).max() > 0


def test_visual_tokens_are_block_means():
    enc = BevEncoder(np.random.default_rng(1), grid_cells=8, hw=4, channels=3, n_v=4)
    bev, visual = enc(np.random.default_rng(2).uniform(size=(1, 8, 8, 2)))
    grid = bev.data[0].reshape(4, 4, 3)
    for bi in range(2):
        for bj in range(2):
            ref = grid[2 * bi:2 * bi + 2, 2 * bj:2 * bj + 2].reshape(4, 3).mean(axis=0)
            assert np.allclose(visual.data[0, 2 * bi + bj], ref, atol=1e-12)


def test_bev_layout_errors():
    with pytest.raises(ConfigError):
        BevEncoder(np.random.default_rng(0), grid_cells=64, hw=10)
    with pytest.raises(ConfigError):
        BevEncoder(np.random.default_rng(0), n_v=5)


def test_encoder_gradients_match_finite_differences():
    assert all(r.passed for r in run_gradcheck(seed=3, n_seeds=1, families=["graph_baseline"]))


# -- attention gate ---------------------------------------------------------------------

def test_gate_open_and_closed():
    gate = AttnGate(np.random.default_rng(0), 8, 12)
    bev = Tensor(np.random.default_rng(1).normal(size=(2, 5, 8)))
    v = cognition(2, 12)
    gate.logit_override = float("inf")
    assert np.array_equal(gate(bev, v)[0].data, bev.data)
    gate.logit_override = float("-inf")
    assert np.array_equal(gate(bev, v)[0].data, np.zeros((2, 5, 8)))


def test_gate_scales_each_cell_by_its_gate_value():
    gate = AttnGate(np.random.default_rng(2), 6, 4)
    rng = np.random.default_rng(3)
    B = rng.normal(size=(3, 7, 6))
    out, g = gate(Tensor(B), Tensor(rng.normal(size=(3, 4))))
    assert g.shape == (3, 7, 1) and np.all((g.data > 0) & (g.data < 1))
    for i in range(3):
        for j in range(7):
            for k in range(6):
                assert abs(out.data[i, j, k] - B[i, j, k] * g.data[i, j, 0]) < 1e-12


# -- sparse tokens ------------------------------------------------------------------------

def test_sparse_tokens_of_constant_map_equal_the_constant():
    st = SparseTokens(np.random.default_rng(0), 8, 4, heads=2)
    row = np.random.default_rng(1).normal(size=8)
    tokens = st.pool(Tensor(np.broadcast_to(row, (2, 10, 8)).copy())).data
    assert tokens.shape == (2, 4, 8)
    assert np.allclose(tokens, np.broadcast_to(row, tokens.shape), atol=1e-12)


def test_sparse_token_weights_are_row_stochastic():
    st = SparseTokens(np.random.default_rng(2), 8, 6, heads=2)
    w = st.weights(Tensor(np.random.default_rng(3).normal(size=(3, 10, 8)))).data
    assert w.shape == (3, 6, 10)
    assert np.abs(w.sum(axis=-1) - 1).max() < 1e-12


def test_single_uniform_token_is_spatial_mean():
    st = SparseTokens(np.random.default_rng(4), 8, 1, heads=1)
    st.logits.weight.data[...] = 0.0
    st.logits.bias.data[...] = 0.0
    B = np.random.default_rng(5).normal(size=(2, 9, 8))
    assert np.allclose(st.pool(Tensor(B)).data[:, 0], B.mean(axis=1), atol=1e-12)


def test_sparse_tokens_need_one_token():
    with pytest.raises(ConfigError):
        SparseTokens(np.random.default_rng(0), 8, 0, heads=2)


# -- framework 1 ---------------------------------------------------------------------------

@pytest.mark.parametrize("n_s", [4, 8, 16])
def test_f1_token_counts(batch, n_s):
    out = planner("f1", n_s=n_s)(batch, cognition(len(batch)))
    assert out.features["S_t"].shape == (len(batch), n_s, 16)
    assert out.trajectory.shape == (len(batch), 6, 2) and np.isfinite(out.trajectory.data).all()


def test_f1_closed_gate_on_zero_cognition(batch):
    m = planner("f1")
    m.plan_head.mlp.layers[-1].weight.data[...] = np.random.default_rng(0).normal(size=(32, 12))
    m.gate.logit_override = float("-inf")
    out = m(batch, Tensor(np.zeros((len(batch), 200))))
    assert not out.features["B_brain"].data.any()
    S = out.features["S_t"].data
    attn = m.sparse_attn
    value = (S[:, :1] @ attn.v_proj.weight.data + attn.v_proj.bias.data) @ attn.out_proj.weight.data \
        + attn.out_proj.bias.data
    assert np.allclose(out.features["F_plan_b"].data, value, atol=1e-12)
    assert np.isfinite(out.trajectory.data).all()


def test_f1_merges_both_streams(batch):
    out = planner("f1")(batch, cognition(len(batch)))
    f = out.features
    assert f["plan"].shape == f["F_plan_s"].shape == f["F_plan_b"].shape == (len(batch), 1, 16)


# -- framework 2 ---------------------------------------------------------------------------

def test_f2_single_cognition_token_ignores_the_query(batch):
    m = planner("f2", cognition_tokens=1)
    v = cognition(len(batch))
    a = m(batch, v).features["Q_ego_prime"].data
    other = copy.copy(batch)
    other.history = batch.history[::-1].copy()
    b = m(other, v).features["Q_ego_prime"].data
    assert np.allclose(a, b, atol=1e-12)
    attn = m.ego_attn[0]
    ref = (v.data @ attn.v_proj.weight.data + attn.v_proj.bias.data) @ attn.out_proj.weight.data \
        + attn.out_proj.bias.data
    assert np.allclose(a[:, 0], ref, atol=1e-12)


@pytest.mark.parametrize("heads", [8, 4])
def test_f2_head_counts_run_and_are_echoed(batch, heads):
    out = planner("f2", heads=heads)(batch, cognition(len(batch)))
    assert out.config["heads"] == heads and out.config["framework"] == "f2"
    assert np.isfinite(out.trajectory.data).all()


@pytest.mark.parametrize("framework", ["baseline", "f1", "f2", "f3"])
def test_plan_feature_invariant_to_visual_token_order(batch, framework):
    m = planner(framework, seed=2)
    v = cognition(len(batch))
    ref = m(batch, v).plan_feature.data
    perm = np.random.default_rng(0).permutation(4)
    forward = m.bev.forward

    def permuted(raster):
        bev, visual = forward(raster)
        return bev, visual[:, perm]

    m.bev.forward = permuted
    assert np.allclose(m(batch, v).plan_feature.data, ref, atol=1e-12)


# -- framework 3 ---------------------------------------------------------------------------

def test_f3_defaults():
    cfg = PlannerConfig("f3").resolved()
    assert (cfg.layers, cfg.dropout, cfg.heads) == (4, 0.1, 4)
    f2 = PlannerConfig("f2").resolved()
    assert (f2.layers, f2.dropout, f2.heads) == (1, 0.1, 4)
    assert PlannerConfig("f1").n_s == 8


def test_f3_without_layers_is_the_baseline(batch):
    base, f3 = planner("baseline", seed=4), planner("f3", seed=4, layers=0)
    for (na, pa), (nb, pb) in zip(base.named_parameters(), f3.named_parameters(), strict=True):
        assert na == nb and np.array_equal(pa.data, pb.data)
    base.plan_head.mlp.layers[-1].weight.data[...] = 0.3
    f3.plan_head.mlp.layers[-1].weight.data[...] = 0.3
    assert np.array_equal(base(batch).trajectory.data, f3(batch, cognition(len(batch))).trajectory.data)


def test_f3_positional_encodings_are_live(scenes):
    model, _ = fit_small("f3", scenes[:20], epochs=1, layers=1)
    before = model.predict(scenes[:6])
    model.model_.q_pos.data[...] = 0.0
    model.model_.k_pos.data[...] = 0.0
    assert np.abs(model.predict(scenes[:6]) - before).max() > 0


def test_f3_decoder_shapes(batch):
    out = planner("f3", layers=2, n_q=2)(batch, cognition(len(batch)))
    assert out.features["F_plan"].shape == out.plan_feature.shape == (len(batch), 2, 16)


def test_unknown_framework_and_bad_token_split():
    with pytest.raises(ConfigError):
        PlannerConfig("f4").resolved()
    with pytest.raises(ConfigError):
        PlannerConfig("f2", cognition_tokens=3).resolved()


def test_cognition_required_for_fusion(batch):
    with pytest.raises(ConfigError):
        planner("f2")(batch)


# -- plan head ------------------------------------------------------------------------------

def test_plan_head_zero_init_and_cumsum():
    head = PlanHead(np.random.default_rng(0), 8)
    zero = head(Tensor(np.zeros((2, 1, 8))), ["left", "right"]).data
    assert np.array_equal(zero, np.zeros((2, 6, 2)))
    head.mlp.layers[-1].bias.data[...] = np.tile([1.0, 0.0], 6)
    out = head(Tensor(np.random.default_rng(1).normal(size=(1, 8))), "straight").data[0]
    assert np.array_equal(out[:, 0], np.arange(1.0, 7.0)) and not out[:, 1].any()


def test_plan_head_rejects_unknown_command():
    head = PlanHead(np.random.default_rng(0), 8)
    with pytest.raises(InputError):
        head(Tensor(np.zeros((1, 8))), "reverse")


def test_commands_separate_after_training(scenes):
    model, _ = fit_small("baseline", scenes, epochs=3)
    scene = scenes[0]
    preds = []
    for cmd in ("left", "straight", "right"):
        s = copy.copy(scene)
        s.command = cmd
        preds.append(model.predict([s])[0])
    assert min(np.abs(preds[i] - preds[j]).max() for i, j in [(0, 1), (0, 2), (1, 2)]) > 1e-6


# -- loss ------------------------------------------------------------------------------------

def test_occupancy_reads_cell_centres_and_free_outside():
    grid = np.zeros((1, 4, 4))
    grid[0, 1, 2] = 1.0
    origin, res = (-1.0, -1.0), 0.5
    pts = np.array([[[-1 + 1.5 * 0.5, -1 + 2.5 * 0.5], [-1 + 2.0 * 0.5, -1 + 2.5 * 0.5], [5.0, 5.0]]])
    occ = bilinear_occupancy(Tensor(pts), grid, origin, res).data[0]
    assert occ.tolist() == [1.0, 0.5, 0.0]


def test_planning_loss_without_collision_term_is_mse(batch):
    rng = np.random.default_rng(0)
    traj = batch.expert + rng.normal(size=batch.expert.shape)
    got = planning_loss(Tensor(traj), batch, 1.0, 0.0).item()
    ref = np.mean([[np.sum((traj[i, t] - batch.expert[i, t]) ** 2) for t in range(6)]
                   for i in range(len(batch))])
    assert abs(got - ref) < 1e-12


# -- stage-2 training --------------------------------------------------------------------------

def test_driving_thinking_frozen_through_stage2(scenes, small_aligner):
    before = {k: v.copy() for k, v in small_aligner._state().items()}
    model = TrajectoryPlanner("f1", **SMALL, epochs=2, seed=0).fit(scenes, cognition=small_aligner)
    after = small_aligner._state()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    copied = model.cognition_.state_dict()
    assert all(np.array_equal(before[k], copied[k]) for k in copied)
    assert all(p.frozen for p in model.cognition_.parameters())


def test_unfrozen_cognition_is_trained(scenes, small_aligner):
    before = small_aligner.video_encoder_.state_dict()
    model = TrajectoryPlanner("f2", **SMALL, epochs=1, freeze_cognition=False, seed=0)
    model.fit(scenes, cognition=small_aligner)
    after = model.cognition_.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_zero_learning_rate_keeps_l2(scenes):
    model, _ = fit_small("f2", scenes, epochs=2, lr=0.0)
    assert [r.val_l2 for r in model.history_] == [model.initial_val_l2_] * 2


def test_missing_stage1_checkpoint(scenes):
    with pytest.raises(ConfigError, match="stage-1"):
        TrajectoryPlanner("f1", epochs=1).fit(scenes)


def test_nan_loss_aborts(scenes, monkeypatch):
    monkeypatch.setattr(fusion, "planning_loss", lambda traj, *a, **k: traj.sum() * float("nan"))
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        fit_small("baseline", scenes, epochs=1)


def test_all_outputs_finite_over_1000_scenes():
    batch = batch_scenes(gen_scenes(1000, seed=21))
    v = cognition(len(batch), seed=1)
    for framework in ("baseline", "f1", "f2", "f3"):
        m = planner(framework, seed=5)
        m.plan_head.mlp.layers[-1].weight.data[...] = np.random.default_rng(6).normal(size=(32, 12))
        traj = m(batch, v).trajectory.data
        assert traj.shape == (1000, 6, 2) and np.isfinite(traj).all()


def test_save_load_round_trip(scenes, tmp_path):
    model, _ = fit_small("f2", scenes, epochs=1)
    model.save(tmp_path / "s2.ckpt")
    back = TrajectoryPlanner.load(tmp_path / "s2.ckpt")
    assert back.get_params() == model.get_params()
    assert np.array_equal(back.predict(scenes[:5]), model.predict(scenes[:5]))
    assert all(p.frozen for p in back.cognition_.parameters())


def test_score_is_negative_l2(scenes):
    model, _ = fit_small("baseline", scenes, epochs=1)
    assert model.score(scenes[:8]) < 0
