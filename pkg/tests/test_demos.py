import numpy as np
import pytest

from prefreach import demos
from prefreach.autoencoder import AEConfig, init_autoencoder
from prefreach.demos import (
    PreferencePair,
    Trajectory,
    build_pairs,
    generate_demo_sets,
    generate_expert_trajectory,
    generate_suboptimal_trajectory,
    load_pairs,
    load_trajectories,
    pair_count,
    rank_by_gt,
    save_pairs,
    save_trajectories,
    trajectory_success,
)
from prefreach.sim import ReachEnv, TaskParams, gt_reward, sample_scene

ENC_CFG = AEConfig(input_points=16, latent_dim=8, conv_channels=(8, 8, 8, 8, 8),
                   decoder_hidden=(16,), group_norm_groups=2, lambda_emd=1.0)
TASK = TaskParams(cloud_points=16, pts_per_sphere=64)


@pytest.fixture(scope="module")
def enc_params():
    return init_autoencoder(ENC_CFG, seed=0)


def make_env(enc_params, seed=1):
    return ReachEnv(sample_scene(2, seed, TASK), TASK, enc_params, ENC_CFG)


def test_demo_fixed_length_and_determinism(enc_params):
    env = make_env(enc_params)
    t1 = generate_suboptimal_trajectory(env, "a", seed=3)
    t2 = generate_suboptimal_trajectory(env, "a", seed=3)
    assert t1.length == TASK.horizon
    assert len(t1.actions) == TASK.horizon - 1
    np.testing.assert_array_equal(t1.eef_path(), t2.eef_path())
    np.testing.assert_array_equal(t1.obs_matrix(), t2.obs_matrix())
    assert t1.removal_events == t2.removal_events


def test_demo_pool_contains_failures_and_successes(enc_params):
    env = make_env(enc_params, seed=5)
    outcomes = [trajectory_success(generate_suboptimal_trajectory(env, f"t{s}", seed=s), 2)
                for s in range(40)]
    assert any(outcomes) and not all(outcomes)


def test_expert_trajectory_succeeds(enc_params):
    env = make_env(enc_params, seed=2)
    traj = generate_expert_trajectory(env, "exp")
    assert trajectory_success(traj, 2)


def test_rank_by_gt_orders_touching_above_distant(enc_params):
    env = make_env(enc_params, seed=7)
    scene = env.scene
    toucher = generate_expert_trajectory(env, "touch")
    env2 = ReachEnv(scene, TASK, enc_params, ENC_CFG)
    # a wanderer pinned to the far corner never approaches
    far = scene.workspace_min.copy()
    obs = env2.reset(eef0=far)
    observations = [obs]
    for _ in range(TASK.horizon - 1):
        o, _, _, _ = env2.step(far)
        observations.append(o)
    loafer = Trajectory("loaf", toucher.scene_id, observations,
                        np.tile(far, (TASK.horizon - 1, 1)))
    ranked = rank_by_gt([toucher, loafer], scene, TASK.epsilon)
    assert ranked[0].gt_return > 10 * ranked[1].gt_return


def test_rank_duplicate_is_tie(enc_params):
    env = make_env(enc_params, seed=8)
    a = generate_suboptimal_trajectory(env, "a", seed=1)
    b = generate_suboptimal_trajectory(env, "b", seed=1)
    rank_by_gt([a, b], env.scene, TASK.epsilon)
    assert a.gt_return == b.gt_return


def test_rank_matches_independent_recomputation(enc_params):
    env = make_env(enc_params, seed=9)
    trajs = [generate_suboptimal_trajectory(env, f"t{s}", seed=s) for s in range(30)]
    rank_by_gt(trajs, env.scene, TASK.epsilon)
    pts = env.scene.attachment_points
    for traj in trajs:
        expected = 0.0
        removed_before = {}
        for step, idx in traj.removal_events:
            removed_before[idx] = step
        for t, obs in enumerate(traj.observations):
            live = [pts[i] for i in range(len(pts))
                    if i not in removed_before or removed_before[i] >= t]
            expected += gt_reward(obs.eef, np.array(live) if live else np.zeros((0, 3)),
                                  TASK.epsilon)
        assert traj.gt_return == pytest.approx(expected, rel=1e-12)


def test_rank_rejects_mixed_scenes(enc_params):
    e1, e2 = make_env(enc_params, 1), make_env(enc_params, 2)
    a = generate_suboptimal_trajectory(e1, "a", 0)
    b = generate_suboptimal_trajectory(e2, "b", 0)
    with pytest.raises(ValueError, match="span scenes"):
        rank_by_gt([a, b], e1.scene, TASK.epsilon)


def test_pair_count_formula():
    assert pair_count(30) == 435
    assert pair_count(2) == 1


@pytest.fixture(scope="module")
def small_dataset(enc_params):
    sets, scenes = generate_demo_sets(enc_params, ENC_CFG, TASK, n_sets=5, per_set=8,
                                      base_seed=100)
    for group in sets:
        rank_by_gt(group, scenes[group[0].scene_id], TASK.epsilon)
    return sets, scenes


def test_build_pairs_labels_and_scope(small_dataset):
    sets, scenes = small_dataset
    ds = build_pairs(sets, scenes, m_pairs=60, with_replacement=False, seed=0)
    assert ds.M == 60
    assert set(ds.test_scene_ids).isdisjoint(ds.train_scene_ids)
    for p in ds.pairs + ds.test_pairs:
        ti, tj = ds.trajectories[p.traj_i], ds.trajectories[p.traj_j]
        assert ti.scene_id == tj.scene_id  # never cross-scene
        preferred = tj if p.label else ti
        other = ti if p.label else tj
        assert preferred.gt_return > other.gt_return
    test_scenes = {ds.trajectories[p.traj_i].scene_id for p in ds.test_pairs}
    assert test_scenes == set(ds.test_scene_ids)


def test_build_pairs_without_replacement_cap(small_dataset):
    sets, scenes = small_dataset
    with pytest.raises(ValueError, match="without replacement"):
        build_pairs(sets, scenes, m_pairs=10_000, with_replacement=False, seed=0)
    ds = build_pairs(sets, scenes, m_pairs=200, with_replacement=True, seed=0)
    assert ds.M == 200


def test_build_pairs_requires_ranked(small_dataset, enc_params):
    env = make_env(enc_params, seed=33)
    unranked = [[generate_suboptimal_trajectory(env, "x", 0)]]
    with pytest.raises(ValueError, match="ranked"):
        build_pairs(unranked, {}, m_pairs=1, with_replacement=True, seed=0)


def test_trajectory_persistence_round_trip(tmp_path, small_dataset):
    sets, scenes = small_dataset
    trajs = [t for group in sets for t in group]
    path = tmp_path / "demos.jsonl"
    save_trajectories(path, trajs, scenes, meta={"seed": 1})
    back, back_scenes, meta = load_trajectories(path)
    assert meta == {"seed": 1}
    assert set(back) == {t.traj_id for t in trajs}
    for t in trajs:
        b = back[t.traj_id]
        np.testing.assert_array_equal(b.obs_matrix(), t.obs_matrix())
        np.testing.assert_array_equal(b.actions, t.actions)
        assert b.removal_events == t.removal_events
        assert b.gt_return == t.gt_return
    for sid, sc in scenes.items():
        np.testing.assert_array_equal(back_scenes[sid].attachment_points,
                                      sc.attachment_points)


def test_pair_persistence_and_dangling_reference(tmp_path):
    pairs = [PreferencePair("p0", "ta", "tb", 0), PreferencePair("p1", "tb", "tc", 1, "human")]
    path = tmp_path / "pairs.jsonl"
    save_pairs(path, pairs, meta={"M": 2})
    back, meta = load_pairs(path, known_traj_ids={"ta", "tb", "tc"})
    assert meta == {"M": 2}
    assert [(p.pair_id, p.traj_i, p.traj_j, p.label, p.provenance) for p in back] \
        == [("p0", "ta", "tb", 0, "gt"), ("p1", "tb", "tc", 1, "human")]
    with pytest.raises(ValueError, match="missing trajectory"):
        load_pairs(path, known_traj_ids={"ta", "tb"})


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"magic": "prefreach-pairs", "version": 99, "meta": {}}\n')
    with pytest.raises(ValueError, match="version"):
        load_pairs(path)
    path.write_text('{"magic": "something-else", "version": 1, "meta": {}}\n')
    with pytest.raises(ValueError, match="not a pair file"):
        load_pairs(path)


def test_label_antisymmetry():
    swapped = PreferencePair("p", "B", "A", 0)
    original = PreferencePair("p", "A", "B", 1)
    assert original.preferred() == swapped.preferred() == "B"
