"""
评估
按「测试任务 × 种子」批量运行策略并汇总指标；消融（屏蔽提问/记忆、仅SFT）与代价参数敏感性扫描
"""
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, field_validator
from tqdm import tqdm

import config
from actions import ActionKind
from cost_metrics import CostParams, MetricsReport, Trajectory, aggregate_seeds, compute_metrics
from episode_env import EnvConfig, append_trajectory_log, run_episode
from errors import ConfigError
from expert_planner import ExpertPolicy, PlannerConfig
from external_policy import ChannelConfig, ExternalPolicy
from memory_store import MemoryParams
from oracle_sim import OracleParams
from policy import (
    AskThenExplorePolicy, ExploreOnlyPolicy, LinearSoftmaxPolicy, PolicyParams, RandomPolicy,
)
from scene_model import SceneGraph, Task

POLICY_CHOICES = ("learned", "sft", "heuristic", "random", "explore_only", "expert", "external")
ABLATION_ROWS = ("Full", "w/o Dialogue", "w/o Memory", "w/o HC-GRPO")

# 给定评估种子构造策略（学习策略按种子取对应检查点）
PolicyFactory = Callable[[int], object]


class EvalConfig(BaseModel):
    """评估参数"""

    seeds: List[int] = Field(default_factory=lambda: list(config.EVAL_SEEDS))
    workers: int = 1
    greedy: bool = False  # 学习策略是否取最大概率动作
    log_features: bool = False  # 轨迹日志是否包含特征与掩码

    @field_validator("seeds")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("评估种子列表不能为空")
        if len(set(value)) != len(value):
            raise ValueError(f"评估种子重复: {value}")
        return value

    @field_validator("workers")
    @classmethod
    def _positive(cls, value):
        if value < 1:
            raise ValueError("workers 至少为1")
        return value


class EvalResult(BaseModel):
    label: str
    aggregate: MetricsReport
    per_seed: List[MetricsReport]
    trajectories: Dict[int, List[Trajectory]] = Field(default_factory=dict)


def eval_episode_seed(eval_seed: int, task_index: int) -> int:
    return int(np.random.SeedSequence([eval_seed, 101, task_index]).generate_state(1)[0])


def build_policy_factory(kind: str, checkpoints: Optional[Dict[int, PolicyParams]] = None,
                         disabled_kinds: Sequence[ActionKind] = (), greedy: bool = False,
                         planner_config: Optional[PlannerConfig] = None,
                         channel_config: Optional[ChannelConfig] = None, name: Optional[str] = None) -> PolicyFactory:
    """
    根据策略类型得到工厂函数

    Args:
        kind: 策略类型，见 POLICY_CHOICES
        checkpoints: 评估种子 -> 学习到的参数（learned / sft 需要）；缺少某种子时使用最小种子的检查点
        disabled_kinds: 屏蔽的动作类型（仅对学习策略生效）
        channel_config: 外部策略通道配置（external 需要）

    Returns:
        工厂函数 seed -> 策略
    """
    if kind not in POLICY_CHOICES:
        raise ConfigError(f"未知策略类型: {kind}，可选 {list(POLICY_CHOICES)}")
    if kind in ("learned", "sft"):
        if not checkpoints:
            raise ConfigError(f"策略 {kind} 需要检查点")
        fallback = checkpoints[min(checkpoints)]

        def learned(seed: int):
            return LinearSoftmaxPolicy(checkpoints.get(seed, fallback), name=name or kind,
                                       disabled_kinds=disabled_kinds, greedy=greedy)
        return learned
    if kind == "heuristic":
        return lambda seed: AskThenExplorePolicy()
    if kind == "random":
        return lambda seed: RandomPolicy()
    if kind == "explore_only":
        return lambda seed: ExploreOnlyPolicy()
    if kind == "expert":
        return lambda seed: ExpertPolicy(planner_config)
    if channel_config is None:
        raise ConfigError("策略 external 需要通道配置（command 或 host/port）")
    shared = ExternalPolicy(channel_config)
    return lambda seed: shared


def _shared_channel(factory: PolicyFactory, seed: int) -> Optional[ExternalPolicy]:
    """外部策略在所有回合间共用一个通道，只能串行"""
    policy = factory(seed)
    return policy if isinstance(policy, ExternalPolicy) else None


def evaluate_policy(factory: PolicyFactory, label: str, tasks: Sequence[Task], scenes: Dict[str, SceneGraph],
                    cost_params: CostParams, oracle_params: OracleParams,
                    memory_params: Optional[MemoryParams] = None, env_config: Optional[EnvConfig] = None,
                    eval_config: Optional[EvalConfig] = None, log_dir: Optional[str] = None) -> EvalResult:
    """
    在全部任务 × 全部种子上运行策略

    每个种子的轨迹写入 log_dir/trajectories_seed{种子}.jsonl（由主线程统一写出），
    回合中的任何异常都会终止整个评估

    Returns:
        EvalResult（多种子聚合报告 + 各种子报告）
    """
    eval_config = eval_config or EvalConfig()
    memory_params = memory_params or MemoryParams()
    env_config = env_config or EnvConfig()
    if not tasks:
        raise ConfigError("评估任务为空")
    shared = _shared_channel(factory, eval_config.seeds[0])
    workers = 1 if shared is not None else eval_config.workers

    logger.info("=" * 60)
    logger.info(f"评估策略 {label}: {len(tasks)} 个任务 × {len(eval_config.seeds)} 个种子，{workers} 个线程")
    logger.info("=" * 60)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)

    per_seed: List[MetricsReport] = []
    by_seed: Dict[int, List[Trajectory]] = {}
    for eval_seed in eval_config.seeds:
        def run(index: int) -> Trajectory:
            task = tasks[index]
            return run_episode(factory(eval_seed), task, scenes[task.scene_id], cost_params, oracle_params,
                               memory_params, eval_episode_seed(eval_seed, index), env_config)

        indices = range(len(tasks))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                trajectories = list(tqdm(executor.map(run, indices), total=len(tasks),
                                         desc=f"{label} 种子 {eval_seed}"))
        else:
            trajectories = [run(i) for i in tqdm(indices, desc=f"{label} 种子 {eval_seed}")]

        for traj in trajectories:
            traj.policy = label
        if log_dir:
            path = os.path.join(log_dir, f"trajectories_seed{eval_seed}.jsonl")
            if os.path.exists(path):
                os.remove(path)
            append_trajectory_log(path, trajectories, cost_params, include_features=eval_config.log_features)
        report = compute_metrics(trajectories, cost_params, seed=eval_seed, label=label)
        logger.info(f"{label} 种子 {eval_seed}: SR {report.sr:.3f}，TTC "
                    f"{'-' if report.ttc is None else f'{report.ttc:.3f}'}，SwC {report.swc:.3f}")
        per_seed.append(report)
        by_seed[eval_seed] = trajectories

    if shared is not None:
        shared.close()
    aggregate = aggregate_seeds(per_seed, label=label)
    logger.info(f"{label} 汇总: SR {aggregate.sr:.3f}，SwC {aggregate.swc:.3f}，平均步数 {aggregate.mean_traj_len:.2f}")
    return EvalResult(label=label, aggregate=aggregate, per_seed=per_seed, trajectories=by_seed)


def run_ablation(rl_checkpoints: Dict[int, PolicyParams], sft_checkpoints: Dict[int, PolicyParams],
                 tasks: Sequence[Task], scenes: Dict[str, SceneGraph], cost_params: CostParams,
                 oracle_params: OracleParams, memory_params: Optional[MemoryParams] = None,
                 env_config: Optional[EnvConfig] = None, eval_config: Optional[EvalConfig] = None,
                 log_root: Optional[str] = None) -> Dict[str, EvalResult]:
    """
    四行消融：完整策略、屏蔽提问、屏蔽记忆、仅SFT检查点

    Returns:
        行名 -> EvalResult（行名见 ABLATION_ROWS）
    """
    eval_config = eval_config or EvalConfig()
    variants = {
        "Full": build_policy_factory("learned", rl_checkpoints, greedy=eval_config.greedy, name="Full"),
        "w/o Dialogue": build_policy_factory("learned", rl_checkpoints, disabled_kinds=(ActionKind.ASK,),
                                             greedy=eval_config.greedy, name="w/o Dialogue"),
        "w/o Memory": build_policy_factory("learned", rl_checkpoints, disabled_kinds=(ActionKind.GET_MEMORY,),
                                           greedy=eval_config.greedy, name="w/o Memory"),
        "w/o HC-GRPO": build_policy_factory("sft", sft_checkpoints, greedy=eval_config.greedy, name="w/o HC-GRPO"),
    }
    results = {}
    for row in ABLATION_ROWS:
        log_dir = os.path.join(log_root, label_dirname(row)) if log_root else None
        results[row] = evaluate_policy(variants[row], row, tasks, scenes, cost_params, oracle_params, memory_params,
                                       env_config, eval_config, log_dir)
    return results


def label_dirname(label: str) -> str:
    """报告名 -> 目录名"""
    return label.replace("/", "_").replace(" ", "_").replace("-", "_").lower()


def scaled_cost_params(base: CostParams, parameter: str, factor: float) -> CostParams:
    if parameter not in CostParams.model_fields:
        raise ConfigError(f"未知代价参数: {parameter}")
    return CostParams.model_validate({**base.model_dump(), parameter: getattr(base, parameter) * factor})


def run_sensitivity_sweep(factories: Dict[str, PolicyFactory], tasks: Sequence[Task],
                          scenes: Dict[str, SceneGraph], cost_params: CostParams, oracle_params: OracleParams,
                          memory_params: Optional[MemoryParams] = None, env_config: Optional[EnvConfig] = None,
                          eval_config: Optional[EvalConfig] = None,
                          parameters: Sequence[str] = ("c_nav", "c_ask_base", "alpha"),
                          factors: Sequence[float] = (0.5, 1.0, 2.0)) -> pd.DataFrame:
    """
    代价参数敏感性：逐个缩放代价参数后重新评估各策略

    违反代价序约束（c_nav > c_ask_base > c_mem）的组合会被跳过并记录警告

    Returns:
        DataFrame，列为 parameter/factor/value/policy/SR/TTC/SwC/mean_asks/mean_mems/mean_traj_len
    """
    rows = []
    for parameter in parameters:
        for factor in factors:
            try:
                params = scaled_cost_params(cost_params, parameter, factor)
            except ValidationError as e:
                logger.warning(f"跳过 {parameter}×{factor}: {e.errors()[0]['msg']}")
                continue
            for name, factory in factories.items():
                result = evaluate_policy(factory, f"{name}@{parameter}x{factor:g}", tasks, scenes, params,
                                         oracle_params, memory_params, env_config, eval_config)
                report = result.aggregate
                rows.append({
                    "parameter": parameter,
                    "factor": factor,
                    "value": getattr(params, parameter),
                    "policy": name,
                    "SR": report.sr,
                    "TTC": report.ttc,
                    "SwC": report.swc,
                    "mean_asks": report.mean_asks,
                    "mean_mems": report.mean_mems,
                    "mean_traj_len": report.mean_traj_len,
                })
    logger.info(f"敏感性扫描完成: {len(rows)} 个组合")
    return pd.DataFrame(rows)


def ordering_checks(results: Dict[str, EvalResult]) -> Dict[str, Tuple[bool, str]]:
    """消融表的定性排序检查：{检查名: (是否成立, 说明)}"""
    checks = {}
    if all(row in results for row in ("Full", "w/o Memory", "w/o Dialogue")):
        full, no_mem, no_ask = (results[r].aggregate for r in ("Full", "w/o Memory", "w/o Dialogue"))
        checks["sr_order"] = (full.sr > no_mem.sr > no_ask.sr,
                              f"SR: Full {full.sr:.3f} / w/o Memory {no_mem.sr:.3f} / w/o Dialogue {no_ask.sr:.3f}")
        if full.ttc is not None and no_mem.ttc is not None:
            checks["ttc_memory"] = (no_mem.ttc > full.ttc, f"TTC: w/o Memory {no_mem.ttc:.3f} vs Full {full.ttc:.3f}")
    if "Full" in results and "w/o HC-GRPO" in results:
        full, sft = results["Full"].aggregate, results["w/o HC-GRPO"].aggregate
        checks["swc_rl"] = (full.swc >= sft.swc, f"SwC: Full {full.swc:.3f} vs SFT {sft.swc:.3f}")
    return checks
