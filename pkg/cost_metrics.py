"""
代价与指标
单步动作代价、轨迹回报、成功率/平均完成代价/代价加权成功率及多种子聚合
"""
import math
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, model_validator

import config
from actions import Action, ActionKind
from errors import EpisodeStateError
from scene_model import Difficulty, SceneGraph, Task, distance


class CostParams(BaseModel):
    """代价与回报参数"""

    c_nav: float = config.C_NAV
    c_ask_base: float = config.C_ASK_BASE
    c_mem: float = config.C_MEM
    alpha: float = config.ASK_ALPHA
    lam: float = config.COST_LAMBDA
    r_success: float = config.R_SUCCESS
    r_fail: float = config.R_FAIL
    c_format: float = config.C_FORMAT
    c_ref: float = config.C_REF

    @model_validator(mode="after")
    def _check(self):
        for name, value in self.model_dump().items():
            if not math.isfinite(value):
                raise ValueError(f"代价参数 {name} 必须为有限值")
        if not (self.c_nav > self.c_ask_base > self.c_mem > 0):
            raise ValueError(
                f"代价必须满足 c_nav > c_ask_base > c_mem > 0，实际为 "
                f"{self.c_nav} / {self.c_ask_base} / {self.c_mem}"
            )
        if self.alpha < 0 or self.lam < 0 or self.c_format < 0:
            raise ValueError("alpha、lam、c_format 不能为负")
        if self.c_ref <= 0:
            raise ValueError("c_ref 必须为正")
        if self.r_success <= self.r_fail:
            raise ValueError("r_success 必须大于 r_fail")
        if self.c_ask_base < 10 * self.c_mem:
            logger.warning(f"提问代价 {self.c_ask_base} 与记忆代价 {self.c_mem} 相差不足一个数量级")
        return self


class Outcome(str, Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"
    TIMEOUT = "Timeout"


class StepRecord(BaseModel):
    """一步决策的记录"""

    index: int
    action: Optional[Action] = None
    raw: Optional[str] = None  # 格式错误时的原始输出
    malformed: bool = False
    cost: float
    location_id: str  # 执行后智能体所在位置
    nav_distance: Optional[float] = None
    reply: Optional[Dict[str, Optional[str]]] = None
    n_remaining: int
    template: Optional[int] = None
    log_prob: Optional[float] = None
    features: Optional[List[float]] = None
    mask: Optional[List[bool]] = None
    expert_value: Optional[float] = None


class Trajectory(BaseModel):
    """一个回合的完整轨迹"""

    task_id: str
    scene_id: str
    difficulty: Difficulty
    policy: str
    seed: int
    steps: List[StepRecord] = Field(default_factory=list)
    outcome: Optional[Outcome] = None
    n_format_strikes: int = 0
    unseen_category: bool = False
    memory: List[Dict[str, Any]] = Field(default_factory=list)  # 回合结束时的记忆库内容

    @property
    def total_cost(self) -> float:
        return float(sum(step.cost for step in self.steps))

    @property
    def length(self) -> int:
        return len(self.steps)

    def count(self, kind: ActionKind) -> int:
        return sum(1 for s in self.steps if not s.malformed and s.action is not None and s.action.kind == kind)

    @property
    def nav_distance(self) -> float:
        return float(sum(s.nav_distance or 0.0 for s in self.steps))


class DifficultyStats(BaseModel):
    n: int
    sr: float
    ttc: Optional[float] = None


class SeedRow(BaseModel):
    seed: Optional[int]
    sr: float
    ttc: Optional[float]
    swc: float


class MetricsReport(BaseModel):
    """评估指标报告（单种子或多种子聚合）"""

    label: str = ""
    seed: Optional[int] = None
    n_episodes: int
    n_successes: int
    n_timeouts: int
    sr: float
    ttc: Optional[float]
    swc: float
    mean_traj_len: float
    mean_asks: float
    mean_mems: float
    mean_nav_distance: float
    action_histogram: Dict[str, int]
    by_difficulty: Dict[str, DifficultyStats]
    by_ambiguity: Dict[str, DifficultyStats] = Field(default_factory=dict)  # 按干扰物数量分桶
    ask_rate: float = 0.0  # 至少提问一次的回合占比
    memory_rate: float = 0.0  # 至少检索一次记忆的回合占比
    per_seed: List[SeedRow] = Field(default_factory=list)
    spread: Dict[str, Tuple[float, float]] = Field(default_factory=dict)


def action_cost(action: Action, n_prior_asks: int, nav_distance: Optional[float], params: CostParams) -> float:
    """
    计算单个动作的代价

    Args:
        action: 动作
        n_prior_asks: 本回合此前已提问次数
        nav_distance: 导航距离，仅 Navigate 提供
        params: 代价参数

    Returns:
        非负代价
    """
    if action.kind == ActionKind.NAVIGATE:
        if nav_distance is None:
            raise ValueError("Navigate 必须提供导航距离")
        if nav_distance < 0 or not math.isfinite(nav_distance):
            raise ValueError(f"导航距离非法: {nav_distance}")
        return params.c_nav * nav_distance
    if nav_distance is not None:
        raise ValueError(f"{action.kind.value} 不应提供导航距离")
    if action.kind == ActionKind.ASK:
        if n_prior_asks < 0:
            raise ValueError(f"已提问次数不能为负: {n_prior_asks}")
        return params.c_ask_base * (1.0 + params.alpha * n_prior_asks)
    if action.kind == ActionKind.GET_MEMORY:
        return params.c_mem
    return 0.0


def task_reward(outcome: Outcome, params: CostParams) -> float:
    return params.r_success if outcome == Outcome.SUCCESS else params.r_fail


def trajectory_return(traj: Trajectory, params: CostParams) -> float:
    """轨迹回报 = 任务奖励 - lam * 累计代价（含格式惩罚）"""
    if traj.outcome is None:
        raise EpisodeStateError(f"任务 {traj.task_id} 的轨迹尚未结束，无法计算回报")
    return task_reward(traj.outcome, params) - params.lam * traj.total_cost


def reprice_trajectory(traj: Trajectory, task: Task, scene: SceneGraph, params: CostParams) -> List[float]:
    """仅根据动作序列重新计算每步代价（用于核对日志中的代价记账）"""
    location = task.start_location_id
    n_asks = 0
    costs = []
    for step in traj.steps:
        if step.malformed or step.action is None:
            costs.append(params.c_format)
            continue
        action = step.action
        if action.kind == ActionKind.NAVIGATE:
            d = distance(scene, location, action.arg)
            costs.append(action_cost(action, n_asks, d, params))
            location = action.arg
        else:
            costs.append(action_cost(action, n_asks, None, params))
            if action.kind == ActionKind.ASK:
                n_asks += 1
    return costs


def _success_cost(episodes: Sequence[Trajectory]) -> Optional[float]:
    costs = [t.total_cost for t in episodes if t.outcome == Outcome.SUCCESS]
    return float(np.mean(costs)) if costs else None


def swc_of(sr: float, ttc: Optional[float], c_ref: float) -> float:
    if ttc is None:
        return 0.0
    return sr * c_ref / max(ttc, c_ref)


def _split_stats(episodes: Sequence[Trajectory], levels: Sequence[str]) -> Optional[DifficultyStats]:
    subset = [t for t in episodes if t.difficulty.value in levels]
    if not subset:
        return None
    wins = sum(1 for t in subset if t.outcome == Outcome.SUCCESS)
    return DifficultyStats(n=len(subset), sr=wins / len(subset), ttc=_success_cost(subset))


def _rate(episodes: Sequence[Trajectory], kind: ActionKind) -> float:
    return sum(1 for t in episodes if t.count(kind) > 0) / len(episodes)


def compute_metrics(episodes: Sequence[Trajectory], params: CostParams,
                    seed: Optional[int] = None, label: str = "") -> MetricsReport:
    """
    计算一批回合的指标

    Args:
        episodes: 已结束的轨迹
        params: 代价参数（提供 c_ref）
        seed: 评估种子（用于多种子明细）
        label: 报告名称

    Returns:
        MetricsReport
    """
    if not episodes:
        raise ValueError("回合列表为空，无法计算指标")
    for traj in episodes:
        if traj.outcome is None:
            raise EpisodeStateError(f"任务 {traj.task_id} 的轨迹尚未结束")

    n = len(episodes)
    n_success = sum(1 for t in episodes if t.outcome == Outcome.SUCCESS)
    sr = n_success / n
    ttc = _success_cost(episodes)

    histogram = {kind.value: 0 for kind in ActionKind}
    histogram["Malformed"] = 0
    for traj in episodes:
        for step in traj.steps:
            key = "Malformed" if step.malformed or step.action is None else step.action.kind.value
            histogram[key] += 1

    by_difficulty = {}
    for level in Difficulty:
        stats = _split_stats(episodes, (level.value,))
        if stats is not None:
            by_difficulty[level.value] = stats
    by_ambiguity = {}
    for bucket, levels in config.AMBIGUITY_BUCKETS.items():
        stats = _split_stats(episodes, levels)
        if stats is not None:
            by_ambiguity[bucket] = stats

    return MetricsReport(
        label=label,
        seed=seed,
        n_episodes=n,
        n_successes=n_success,
        n_timeouts=sum(1 for t in episodes if t.outcome == Outcome.TIMEOUT),
        sr=sr,
        ttc=ttc,
        swc=swc_of(sr, ttc, params.c_ref),
        mean_traj_len=float(np.mean([t.length for t in episodes])),
        mean_asks=float(np.mean([t.count(ActionKind.ASK) for t in episodes])),
        mean_mems=float(np.mean([t.count(ActionKind.GET_MEMORY) for t in episodes])),
        mean_nav_distance=float(np.mean([t.nav_distance for t in episodes])),
        action_histogram=histogram,
        by_difficulty=by_difficulty,
        by_ambiguity=by_ambiguity,
        ask_rate=_rate(episodes, ActionKind.ASK),
        memory_rate=_rate(episodes, ActionKind.GET_MEMORY),
        per_seed=[SeedRow(seed=seed, sr=sr, ttc=ttc, swc=swc_of(sr, ttc, params.c_ref))],
    )


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def _mean_present(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _merge_splits(splits: Sequence[Dict[str, DifficultyStats]], keys: Sequence[str]) -> Dict[str, DifficultyStats]:
    merged = {}
    for key in keys:
        rows = [split[key] for split in splits if key in split]
        if rows:
            merged[key] = DifficultyStats(
                n=sum(row.n for row in rows),
                sr=float(np.mean([row.sr for row in rows])),
                ttc=_mean_present([row.ttc for row in rows]),
            )
    return merged


def aggregate_seeds(reports: Sequence[MetricsReport], label: str = "") -> MetricsReport:
    """
    多种子聚合：各指标取均值与样本标准差，SwC 为各种子 SwC 的均值
    """
    if not reports:
        raise ValueError("没有可聚合的报告")

    spread = {
        "sr": _mean_std([r.sr for r in reports]),
        "swc": _mean_std([r.swc for r in reports]),
        "mean_traj_len": _mean_std([r.mean_traj_len for r in reports]),
    }
    ttcs = [r.ttc for r in reports if r.ttc is not None]
    if ttcs:
        spread["ttc"] = _mean_std(ttcs)

    histogram: Dict[str, int] = {}
    for r in reports:
        for key, count in r.action_histogram.items():
            histogram[key] = histogram.get(key, 0) + count

    by_difficulty = _merge_splits([r.by_difficulty for r in reports], [level.value for level in Difficulty])
    by_ambiguity = _merge_splits([r.by_ambiguity for r in reports], list(config.AMBIGUITY_BUCKETS))

    return MetricsReport(
        label=label or reports[0].label,
        n_episodes=sum(r.n_episodes for r in reports),
        n_successes=sum(r.n_successes for r in reports),
        n_timeouts=sum(r.n_timeouts for r in reports),
        sr=spread["sr"][0],
        ttc=spread["ttc"][0] if "ttc" in spread else None,
        swc=spread["swc"][0],
        mean_traj_len=spread["mean_traj_len"][0],
        mean_asks=float(np.mean([r.mean_asks for r in reports])),
        mean_mems=float(np.mean([r.mean_mems for r in reports])),
        mean_nav_distance=float(np.mean([r.mean_nav_distance for r in reports])),
        action_histogram=histogram,
        by_difficulty=by_difficulty,
        by_ambiguity=by_ambiguity,
        ask_rate=float(np.mean([r.ask_rate for r in reports])),
        memory_rate=float(np.mean([r.memory_rate for r in reports])),
        per_seed=[SeedRow(seed=r.seed, sr=r.sr, ttc=r.ttc, swc=r.swc) for r in reports],
        spread=spread,
    )


def table_row(report: MetricsReport) -> Dict[str, Optional[float]]:
    """主结果表的一行：各干扰物分桶与各难度的 SR/TTC + 平均 SR/TTC + SwC"""
    row: Dict[str, Optional[float]] = {}
    for bucket in config.AMBIGUITY_BUCKETS:
        stats = report.by_ambiguity.get(bucket)
        row[f"SR {bucket}"] = stats.sr if stats else None
        row[f"TTC {bucket}"] = stats.ttc if stats else None
    for level in Difficulty:
        stats = report.by_difficulty.get(level.value)
        row[f"SR {level.value}"] = stats.sr if stats else None
        row[f"TTC {level.value}"] = stats.ttc if stats else None
    row["Avg SR"] = report.sr
    row["Avg TTC"] = report.ttc
    row["SwC"] = report.swc
    return row
