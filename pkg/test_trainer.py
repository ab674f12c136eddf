"""
训练流程测试
"""
import os

import numpy as np
import pytest

from actions import ask
from conftest import build_scene, build_task
from cost_metrics import CostParams, Outcome, StepRecord, Trajectory
from episode_env import reset
from errors import ConfigError
from expert_planner import plan
from memory_store import MemoryParams
from oracle_sim import OracleParams
from policy import (
    N_FEATURES, N_TEMPLATES, PolicyParams, action_distribution, featurize, kl_to_reference, sample_action,
)
from scene_model import Difficulty
from trainer import (
    GroupSample, GrpoConfig, SftConfig, clipped_surrogate, cosine_lr, export_curve, group_advantages, grpo_update,
    load_checkpoint, make_group, rollout_seed, save_checkpoint, sft_fit, train_hc_grpo, window_means,
)

COST = CostParams()
ORACLE = OracleParams()

# 单步赌博机：只有前两个模板合法，模板0得奖励1
BANDIT_FEATURES = np.zeros(N_FEATURES)
BANDIT_FEATURES[:2] = [1.0, 0.5]
BANDIT_MASK = np.zeros(N_TEMPLATES, dtype=bool)
BANDIT_MASK[:2] = True


def _bandit_groups(params, rng, n_groups=4, group_size=8):
    groups = []
    for g in range(n_groups):
        trajectories, rewards = [], []
        for _ in range(group_size):
            template, logp = sample_action(params, BANDIT_FEATURES, BANDIT_MASK, rng)
            step = StepRecord(index=0, action=ask("color" if template == 0 else "size"), cost=0.0,
                              location_id="loc_00", n_remaining=2, template=template, log_prob=logp,
                              features=BANDIT_FEATURES.tolist(), mask=BANDIT_MASK.tolist())
            trajectories.append(Trajectory(task_id=f"bandit_{g}", scene_id="s", difficulty=Difficulty.EASY,
                                           policy="bandit", seed=0, steps=[step], outcome=Outcome.SUCCESS))
            rewards.append(1.0 if template == 0 else 0.0)
        groups.append(GroupSample(task_id=f"bandit_{g}", trajectories=trajectories, rewards=rewards,
                                  advantages=group_advantages(rewards)))
    return groups


def _p_first(params):
    return float(action_distribution(params, BANDIT_FEATURES, BANDIT_MASK)[0])


def test_group_advantages_are_standardized():
    assert group_advantages([1.0, 0.0]) == pytest.approx([1.0, -1.0], abs=1e-6)
    adv = group_advantages([0.3, -0.2, 0.9, 0.1])
    assert np.mean(adv) == pytest.approx(0.0, abs=1e-12)
    assert np.std(adv) == pytest.approx(1.0, abs=1e-6)
    assert group_advantages([0.5, 0.5, 0.5]) == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        group_advantages([1.0])


def test_group_uses_trajectory_return():
    steps = [StepRecord(index=0, action=ask("open"), cost=0.5, location_id="l", n_remaining=2)]
    win = Trajectory(task_id="t", scene_id="s", difficulty=Difficulty.EASY, policy="p", seed=0, steps=steps,
                     outcome=Outcome.SUCCESS)
    loss = win.model_copy(update={"outcome": Outcome.FAILURE})
    group = make_group("t", [win, loss], COST, GrpoConfig())
    assert group.rewards == pytest.approx([0.5, -0.6])
    assert group.advantages[0] > 0 > group.advantages[1]


def test_zero_advantage_leaves_params_unchanged():
    rng = np.random.default_rng(0)
    params = PolicyParams()
    groups = _bandit_groups(params, rng)
    groups = [g.model_copy(update={"advantages": [0.0] * len(g.advantages)}) for g in groups]
    cfg = GrpoConfig(entropy_coef=0.0, optimizer="sgd", learning_rate=0.5)
    new_params, stats = grpo_update(params, params.copy(), groups, cfg)
    assert np.array_equal(new_params.weights, params.weights)
    assert stats.mean_kl == pytest.approx(0.0, abs=1e-12)


def test_zero_learning_rate_is_a_no_op():
    rng = np.random.default_rng(1)
    params = PolicyParams(rng.normal(size=(N_TEMPLATES, N_FEATURES)) * 0.1)
    groups = _bandit_groups(params, rng)
    new_params, _ = grpo_update(params, params.copy(), groups, GrpoConfig(learning_rate=0.0, optimizer="sgd"))
    assert np.array_equal(new_params.weights, params.weights)


def test_bandit_learns_rewarded_template():
    rng = np.random.default_rng(2)
    params = PolicyParams()
    reference = params.copy()
    cfg = GrpoConfig(kl_beta=0.0, entropy_coef=0.0, optimizer="sgd", learning_rate=0.5)
    assert _p_first(params) == pytest.approx(0.5)
    for _ in range(40):
        params, _ = grpo_update(params, reference, _bandit_groups(params, rng), cfg)
    assert _p_first(params) > 0.9


def test_larger_kl_weight_stays_closer_to_reference():
    rng = np.random.default_rng(3)
    reference = PolicyParams()
    groups = _bandit_groups(reference, rng)
    final_kl = {}
    for beta in (0.0, 5.0):
        cfg = GrpoConfig(kl_beta=beta, entropy_coef=0.0, optimizer="sgd", learning_rate=0.1)
        params = reference.copy()
        for _ in range(30):
            params, _ = grpo_update(params, reference, groups, cfg)
        final_kl[beta] = kl_to_reference(params, reference, BANDIT_FEATURES, BANDIT_MASK)[0]
    assert final_kl[0.0] > 0.0
    assert final_kl[5.0] < final_kl[0.0]


def test_cosine_schedule_warms_up_and_decays():
    assert cosine_lr(0, 100, 1.0, 0.1) == pytest.approx(0.1)
    assert cosine_lr(9, 100, 1.0, 0.1) == pytest.approx(1.0)
    assert cosine_lr(10, 100, 1.0, 0.1) == pytest.approx(1.0)
    assert cosine_lr(99, 100, 1.0, 0.1) < 0.01
    assert cosine_lr(5, 0, 0.3) == 0.3


def test_rollout_seeds_are_stable_and_distinct():
    assert rollout_seed(0, 1, 2, 3) == rollout_seed(0, 1, 2, 3)
    assert len({rollout_seed(0, 0, t, g) for t in range(5) for g in range(8)}) == 40


@pytest.fixture(scope="module")
def two_mug_scene_module():
    return build_scene(
        [("loc_s", 0.0, 0.0, "desk"), ("loc_a", 5.0, 0.0, "sink"), ("loc_b", -5.0, 0.0, "sofa")],
        [("mug_1", "mug", "red", "small", "loc_a"), ("mug_2", "mug", "blue", "small", "loc_b"),
         ("book_1", "book", "green", "large", "loc_s")],
    )


@pytest.fixture(scope="module")
def corpus(two_mug_scene_module):
    scene = two_mug_scene_module
    traces = []
    for target in ("mug_1", "mug_2"):
        task = build_task(scene, "mug", target, "loc_s", task_id=f"task_{target}")
        for seed in range(4):
            traces.append(plan(task, scene, COST, ORACLE, seed=seed))
    return traces


def test_expert_corpus_asks_first(corpus):
    assert all(t.success for t in corpus)
    assert all(t.steps[0].template == "ask_landmark" for t in corpus)


def test_sft_loss_decreases_with_full_batch_sgd(corpus):
    cfg = SftConfig(lr=0.05, epochs=30, batch_size=1000, warmup_ratio=0.0, optimizer="sgd")
    _, losses = sft_fit(corpus, PolicyParams(), cfg)
    assert len(losses) == 30
    assert all(later <= earlier + 1e-12 for earlier, later in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_sft_with_zero_learning_rate_keeps_init(corpus):
    init = PolicyParams(np.full((N_TEMPLATES, N_FEATURES), 0.01))
    params, losses = sft_fit(corpus, init, SftConfig(lr=0.0, epochs=2, batch_size=1000))
    assert np.array_equal(params.weights, init.weights)
    assert losses[0] == pytest.approx(losses[-1])
    assert params.version == "sft" and init.version == "init"


def test_sft_policy_imitates_first_question(corpus, two_mug_scene_module):
    params, _ = sft_fit(corpus, PolicyParams(), SftConfig(lr=0.05, epochs=200, batch_size=16))
    task = build_task(two_mug_scene_module, "mug", "mug_1", "loc_s")
    obs = reset(task, two_mug_scene_module, COST, ORACLE, MemoryParams(), seed=0).observation
    template = corpus[0].trajectory.steps[0].template
    mask = np.asarray(corpus[0].trajectory.steps[0].mask, dtype=bool)
    assert action_distribution(params, featurize(obs), mask)[template] > 0.9


def test_sft_rejects_empty_corpus():
    with pytest.raises(ConfigError):
        sft_fit([], PolicyParams())


def test_training_loop_smoke(tmp_path, two_mug_scene_module):
    scene = two_mug_scene_module
    tasks = [build_task(scene, "mug", t, "loc_s", task_id=f"task_{t}") for t in ("mug_1", "mug_2")]
    seen = []
    cfg = GrpoConfig(group_size=2, tasks_per_batch=2, iterations=3, updates_per_batch=1)
    params, curve = train_hc_grpo(tasks, {scene.scene_id: scene}, PolicyParams(), COST, ORACLE,
                                  grpo_config=cfg, seed=4, callbacks=[seen.append])
    assert len(curve) == 3 and [p.iteration for p in seen] == [0, 1, 2]
    assert params.version == "hc_grpo-seed4"
    assert all(0.0 <= p.success_rate <= 1.0 for p in curve)

    ckpt = str(tmp_path / "checkpoint.json")
    save_checkpoint(ckpt, params, "rl", 4, settings=cfg, curve=curve)
    loaded, meta = load_checkpoint(ckpt)
    assert np.array_equal(loaded.weights, params.weights)
    assert meta.stage == "rl" and meta.settings["group_size"] == 2 and len(meta.curve) == 3

    df = export_curve(curve, str(tmp_path / "curve.csv"), str(tmp_path / "curve.png"))
    assert list(df["iteration"]) == [0, 1, 2]
    assert os.path.exists(tmp_path / "curve.png")
    windows = window_means(curve, fraction=0.34)
    assert set(windows) == {"mean_return", "mean_length"}


def test_grpo_config_validation():
    with pytest.raises(ValueError):
        GrpoConfig(group_size=1)
    with pytest.raises(ValueError):
        GrpoConfig(clip_eps=1.5)
    with pytest.raises(ValueError):
        GrpoConfig(kl_beta=-1.0)


def test_clipped_surrogate_is_bounded():
    rng = np.random.default_rng(6)
    ratio = np.exp(rng.normal(scale=1.0, size=5000))
    advantage = rng.normal(scale=2.0, size=5000)
    values = clipped_surrogate(ratio, advantage, 0.2)
    assert np.all(values <= 1.2 * np.abs(advantage) + 1e-12)
    assert clipped_surrogate(np.array([1.0]), np.array([0.7]), 0.2)[0] == pytest.approx(0.7)


def test_advantages_are_centered():
    rng = np.random.default_rng(7)
    for size in (2, 5, 8, 16):
        adv = group_advantages(list(rng.normal(size=size)))
        assert abs(sum(adv)) <= 1e-9 * size


def test_degenerate_group_gives_zero_update():
    steps = [StepRecord(index=0, action=ask("color"), cost=0.5, location_id="l", n_remaining=2, template=0,
                        log_prob=float(np.log(0.5)), features=BANDIT_FEATURES.tolist(), mask=BANDIT_MASK.tolist())]
    traj = Trajectory(task_id="t", scene_id="s", difficulty=Difficulty.EASY, policy="p", seed=0, steps=steps,
                      outcome=Outcome.SUCCESS)
    group = make_group("t", [traj, traj.model_copy(deep=True)], COST, GrpoConfig(group_size=2))
    assert group.advantages == [0.0, 0.0]
    params = PolicyParams()
    new_params, _ = grpo_update(params, params.copy(), [group],
                                GrpoConfig(group_size=2, kl_beta=0.0, entropy_coef=0.0, optimizer="sgd"))
    assert np.array_equal(new_params.weights, params.weights)
