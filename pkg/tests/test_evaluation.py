import numpy as np
import pytest

from morphtask.distill import cg_feature_width
from morphtask.control_graph import build_observation_spec
from morphtask.env import make_env
from morphtask.evaluation import (
    MetricResult,
    OrderingError,
    SplitConfigError,
    Trajectory,
    attention_report,
    evaluate_policy,
    metric_report_csv,
    normalized_final_distance,
    percentage_improvement,
    read_tensor_table,
    rollout,
    rollout_batch,
    split_environments,
    subdomain_of,
    write_attention_export,
)
from morphtask.nn.policies import PolicyConfig, UnsupportedVariantError, init_params

OBS = build_observation_spec(["p", "v", "q", "a", "ja", "jr", "m"])


def tf_params(seed=0, **kw):
    width = cg_feature_width(OBS, kw.get("cg_variant", "v2"),
                             kw.get("history", 1))
    defaults = dict(arch="transformer", feature_width=width, embed=16,
                    attn_hidden=16, heads=2, layers=1, max_nodes=24)
    defaults.update(kw)
    return init_params(defaults["arch"], PolicyConfig(**defaults), seed)


# --- rollouts ---------------------------------------------------------------

def test_zero_policy_constant_distances():
    spec = make_env("ant_reach_2")
    params = tf_params()
    params.tensors["decode/W"].data[:] = 0.0
    params.tensors["decode/b"].data[:] = 0.0
    traj = rollout(params, spec, seed=0, T=20)
    assert np.all(traj.actions == 0.0)
    assert np.allclose(traj.distances, traj.distances[0])
    assert len(traj.states) == 21  # reset state plus one per step
    assert len(traj.cgs) == 20


def test_rollout_deterministic():
    spec = make_env("ant_reach_2")
    params = tf_params(3)
    a = rollout(params, spec, seed=5, T=30)
    b = rollout(params, spec, seed=5, T=30)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.distances, b.distances)


def test_rollout_batch_matches_sequential():
    spec = make_env("ant_reach_2")
    params = tf_params(3)
    batch = rollout_batch(params, spec, [0, 1, 2], T=15)
    for i, seed in enumerate([0, 1, 2]):
        solo = rollout(params, spec, seed=seed, T=15)
        np.testing.assert_array_equal(batch[i].actions, solo.actions)


def test_rollout_respects_horizon():
    spec = make_env("ant_reach_2")
    params = tf_params(3)
    traj = rollout(params, spec, seed=0, T=7)
    assert traj.actions.shape == (7, spec.graph.action_dimension())
    long = rollout(params, spec, seed=0, T=10 ** 6)
    assert long.actions.shape[0] == spec.task.episode_length


def test_rollout_history_policy():
    spec = make_env("ant_reach_2")
    params = tf_params(3, history=3)
    traj = rollout(params, spec, seed=0, T=5)
    assert traj.actions.shape == (5, spec.graph.action_dimension())


def test_expert_style_policy_reaches_goal():
    # scripted expert run through the trajectory plumbing
    from morphtask.env import goal_distance, reset, scripted_expert, step
    spec = make_env("ant_reach_3")
    state = reset(spec, 11)
    for _ in range(spec.task.episode_length):
        state = step(state, scripted_expert(state))
        if goal_distance(state, 0) <= spec.task.d_min[0]:
            break
    assert goal_distance(state, 0) <= spec.task.d_min[0]


# --- metric -----------------------------------------------------------------

def test_metric_endpoints():
    groups = [("ant_reach_2", np.full((4, 1), 0.1), (0.1,), (8.75,))]
    assert normalized_final_distance(groups).aggregate == 0.0
    groups = [("ant_reach_2", np.full((4, 1), 8.75), (0.1,), (8.75,))]
    assert normalized_final_distance(groups).aggregate == 1.0


def test_metric_reference_bounds_midpoint():
    # one env, one goal, d_T = 4.425 with the ant_reach bounds -> exactly 0.5
    groups = [("ant_reach_2", np.full((1, 1), 4.425), (0.1,), (8.75,))]
    assert normalized_final_distance(groups).aggregate == 0.5


def brute_force_metric(groups):
    total = 0.0
    for _, finals, d_min, d_max in groups:
        env_sum = 0.0
        for s in range(finals.shape[0]):
            for g in range(finals.shape[1]):
                env_sum += (finals[s, g] - d_min[g]) / (d_max[g] - d_min[g])
        total += env_sum / finals.shape[0]
    return total / len(groups)


def test_metric_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    groups = []
    for e in range(3):
        G = e + 1
        finals = rng.uniform(0.2, 3.0, size=(8, G))
        d_min = tuple(rng.uniform(0.01, 0.1, size=G))
        d_max = tuple(rng.uniform(2.0, 9.0, size=G))
        groups.append((f"ant_reach_{e + 2}", finals, d_min, d_max))
    result = normalized_final_distance(groups)
    assert abs(result.aggregate - brute_force_metric(groups)) <= 1e-12


def test_metric_rejects_bad_bounds():
    with pytest.raises(SplitConfigError):
        normalized_final_distance([("e", np.ones((1, 1)), (1.0,), (0.5,))])


# --- percentage improvement ---------------------------------------------------

def test_reference_improvement_numbers():
    assert percentage_improvement(0.3128, 0.4069) == pytest.approx(23.13, abs=0.01)
    assert percentage_improvement(0.4066, 0.4940) == pytest.approx(17.69, abs=0.01)


def test_improvement_scale_invariant():
    base = percentage_improvement(0.3, 0.4)
    for c in (0.1, 2.0, 17.0):
        assert percentage_improvement(0.3 * c, 0.4 * c) == pytest.approx(base)


def test_improvement_ordering_error():
    with pytest.raises(OrderingError):
        percentage_improvement(0.4, 0.4)
    with pytest.raises(OrderingError):
        percentage_improvement(0.5, 0.4)


# --- splits -----------------------------------------------------------------------

ANT_REACH = tuple(f"ant_reach_{k}" for k in range(2, 7))


def test_split_holdout_morphology():
    plan = split_environments(ANT_REACH, "compositional_morphology", holdout=[4])
    assert plan.test == ("ant_reach_4",)
    assert plan.train == ("ant_reach_2", "ant_reach_3", "ant_reach_5", "ant_reach_6")
    default = split_environments(ANT_REACH, "compositional_morphology")
    assert default.test == ("ant_reach_4",)


def test_split_in_distribution():
    plan = split_environments(ANT_REACH, "in_distribution")
    assert plan.test == ANT_REACH
    assert plan.train == ANT_REACH


def test_split_task_and_ood():
    universe = ANT_REACH + ("ant_reach_hard_3", "ant_reach_hard_4",
                            "ant_reach_hard_4_mass_0.5_1.0_3.0")
    plan = split_environments(universe, "compositional_task", holdout="reach_hard")
    assert set(plan.test) == {"ant_reach_hard_3", "ant_reach_hard_4",
                              "ant_reach_hard_4_mass_0.5_1.0_3.0"}
    ood = split_environments(universe, "out_of_distribution", holdout="reach_hard")
    assert ood.test == ("ant_reach_hard_4_mass_0.5_1.0_3.0",)
    assert all(parse_task not in ood.train for parse_task in ood.test)


def test_split_everything_held_out_is_error():
    with pytest.raises(SplitConfigError):
        split_environments(ANT_REACH, "compositional_morphology",
                           holdout=[2, 3, 4, 5, 6])


def test_split_deterministic_and_disjoint():
    universe = ANT_REACH + ("claw_reach_3", "claw_reach_4")
    a = split_environments(universe, "compositional_morphology")
    b = split_environments(universe, "compositional_morphology")
    assert a == b
    assert not set(a.train) & set(a.test)


def test_subdomain_names():
    assert subdomain_of("ant_reach_4") == "ant_reach"
    assert subdomain_of("claw_reach_hard_5_mass_0.5_1.0_3.0") == "claw_reach_hard"


# --- attention ------------------------------------------------------------------------

def test_attention_report_shapes_and_mass(tmp_path):
    spec = make_env("ant_reach_2")
    params = tf_params(1, layers=2)
    traj = rollout(params, spec, seed=0, T=4)
    attn, mass = attention_report(params, traj)
    n = spec.graph.n_nodes + 1
    assert attn.shape == (4, 2, 2, n, n)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)
    assert mass.shape == (4,)
    assert np.all((mass >= 0.0) & (mass <= 1.0))
    path = tmp_path / "attn.cgat"
    write_attention_export(path, params, attn, mass)
    table = read_tensor_table(path)
    assert len(table) == 4 * 2 * 2 + 1
    np.testing.assert_array_equal(table["attn/0/1/0"], attn[0, 1, 0])


def test_attention_v1_has_no_goal_mass():
    spec = make_env("ant_reach_2")
    params = tf_params(1, cg_variant="v1")
    traj = rollout(params, spec, seed=0, T=3)
    attn, mass = attention_report(params, traj)
    assert mass is None
    assert attn.shape[3] == spec.graph.n_nodes


def test_attention_rejects_mlp():
    params = init_params("mlp", PolicyConfig(arch="mlp", feature_width=10,
                                             mlp_hidden=4, max_nodes=4,
                                             max_action=4), 0)
    with pytest.raises(UnsupportedVariantError):
        attention_report(params, Trajectory("x", 0, np.zeros((1, 1)),
                                            np.zeros((1, 1))))


# --- end-to-end metric over policies -----------------------------------------------

def test_evaluate_policy_and_report():
    params = tf_params(2)
    result = evaluate_policy(params, ["ant_reach_2"], seeds=[0, 1, 2], T=10)
    assert "ant_reach_2" in result.per_env
    assert result.episodes == 3
    csv = metric_report_csv(result, [0, 1, 2])
    lines = csv.strip().splitlines()
    assert lines[0] == "env_id,goal_index,seed,final_distance,normalized"
    assert sum(1 for ln in lines if not ln.startswith("#")) == 1 + 3
    assert any("aggregate_env_mean" in ln for ln in lines)
    assert any("aggregate_subdomain_mean" in ln for ln in lines)
