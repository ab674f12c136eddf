"""
系统验收测试
桌面规模基准上的端到端检查：专家与启发式的代价对比、示范长度随难度变化、
两阶段训练的曲线走势与消融排序。耗时较长，设置 RUN_SLOW=1 运行
"""
import numpy as np
import pytest
from loguru import logger

from actions import ActionKind
from benchgen import BenchConfig, build_benchmark
from cost_metrics import CostParams
from evaluation import EvalConfig, build_policy_factory, evaluate_policy, run_ablation
from expert_planner import generate_sft_corpus
from memory_store import MemoryParams
from oracle_sim import OracleParams
from policy import PolicyParams
from scene_model import Difficulty
from trainer import GrpoConfig, sft_fit, train_hc_grpo, window_means

pytestmark = pytest.mark.slow

COST = CostParams()
ORACLE = OracleParams()
MEMORY = MemoryParams()


def _banner(title):
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


@pytest.fixture(scope="module")
def bench():
    _banner("生成桌面规模基准")
    return build_benchmark(BenchConfig.from_preset("desk", seed=0), workers=4)


@pytest.fixture(scope="module")
def corpus(bench):
    _banner("生成专家示范")
    traces, dropped = generate_sft_corpus(bench.train_tasks, bench.scenes, COST, ORACLE, MEMORY, seed=0, workers=4)
    logger.info(f"示范 {len(traces)} 条，丢弃 {len(dropped)} 条")
    return traces


@pytest.fixture(scope="module")
def trained(bench, corpus):
    _banner("两阶段训练（种子 0）")
    sft_params, _ = sft_fit(corpus, PolicyParams())
    params, curve = train_hc_grpo(bench.train_tasks, bench.scenes, sft_params, COST, ORACLE, MEMORY,
                                  grpo_config=GrpoConfig(), seed=0, workers=4)
    return sft_params, params, curve


def test_expert_is_cheaper_than_heuristic(bench):
    assert len(bench.test_tasks) >= 200
    eval_config = EvalConfig(workers=4)
    expert = evaluate_policy(build_policy_factory("expert"), "expert", bench.test_tasks, bench.scenes, COST,
                             ORACLE, MEMORY, eval_config=eval_config)
    heuristic = evaluate_policy(build_policy_factory("heuristic"), "heuristic", bench.test_tasks, bench.scenes,
                                COST, ORACLE, MEMORY, eval_config=eval_config)
    logger.info(f"TTC 专家 {expert.aggregate.ttc:.3f} / 启发式 {heuristic.aggregate.ttc:.3f}")
    assert expert.aggregate.ttc <= heuristic.aggregate.ttc


def test_easy_demonstrations_are_shorter_than_hard(corpus):
    lengths = {level: [t.trajectory.length for t in corpus if t.trajectory.difficulty == level]
               for level in (Difficulty.EASY, Difficulty.HARD)}
    assert lengths[Difficulty.EASY] and lengths[Difficulty.HARD]
    assert np.mean(lengths[Difficulty.EASY]) < np.mean(lengths[Difficulty.HARD])


def test_demonstrations_cover_most_tasks(bench, corpus):
    assert len(corpus) >= 0.9 * len(bench.train_tasks)


def test_training_curve_improves(trained):
    _, _, curve = trained
    windows = window_means(curve)
    head_return, tail_return = windows["mean_return"]
    head_length, tail_length = windows["mean_length"]
    logger.info(f"平均回报 {head_return:.3f} → {tail_return:.3f}，平均步数 {head_length:.2f} → {tail_length:.2f}")
    assert tail_return > head_return
    assert tail_length <= head_length
    assert curve[-1].mean_kl < GrpoConfig().kl_bound


def test_memory_share_rises_after_rl(trained):
    _, _, curve = trained
    k = max(1, len(curve) // 10)
    assert np.mean([p.memory_share for p in curve[-k:]]) > np.mean([p.memory_share for p in curve[:k]])


def test_ablation_orderings(bench, trained):
    sft_params, params, _ = trained
    results = run_ablation({0: params}, {0: sft_params}, bench.test_tasks, bench.scenes, COST, ORACLE, MEMORY,
                           eval_config=EvalConfig(seeds=[0, 1, 2], workers=4))
    full, no_mem, no_ask = (results[r].aggregate for r in ("Full", "w/o Memory", "w/o Dialogue"))
    assert full.sr > no_ask.sr
    assert no_mem.ttc > full.ttc
    assert results["w/o Dialogue"].aggregate.action_histogram.get(ActionKind.ASK.value, 0) == 0
