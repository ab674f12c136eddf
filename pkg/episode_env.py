"""
回合环境
部分可观测的搜索回合：维护候选信念集、计价、转发提问、检索记忆、判定成功/失败/超时，
并负责轨迹日志的读写
"""
import json
import math
import time
from typing import Any, Dict, List, Optional, Set

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, model_validator

import config
from actions import Action, ActionKind
from cost_metrics import CostParams, Outcome, StepRecord, Trajectory, action_cost, trajectory_return
from errors import ConfigError, EpisodeRunError, EpisodeStateError
from memory_store import (
    MemoryFact, MemoryParams, MemoryStore, dump, retrieve, seed_memory, store_from_seed, write_observation,
)
from oracle_sim import VALID_QUERIES, OracleParams, OracleReply, OracleState
from scene_model import SceneGraph, Task, distance, scene_diameter, validate_task


class EnvConfig(BaseModel):
    """环境参数"""

    horizon: int = config.HORIZON
    decision_timeout: Optional[float] = None  # 单步决策时间预算（秒），None 表示不限

    @model_validator(mode="after")
    def _check(self):
        if self.horizon < 1:
            raise ValueError(f"horizon 必须为正: {self.horizon}")
        if self.decision_timeout is not None and self.decision_timeout <= 0:
            raise ValueError("decision_timeout 必须为正")
        return self


class VisibleObject(BaseModel):
    id: str
    category: str
    attributes: Dict[str, str]


class MemoryView(BaseModel):
    """智能体可见的记忆事实（不含过期标记）"""

    object_id: str
    category: str
    attributes: Dict[str, str]
    recorded_location_id: str
    source: str


class CandidateView(BaseModel):
    """候选槽位：按到推测位置的距离排序，位置未知者排在最后"""

    id: str
    color: str
    size: str
    location_id: Optional[str] = None
    distance: Optional[float] = None
    co_located: bool = False
    memory_hit: bool = False


class BeliefView(BaseModel):
    instruction: str
    category: str
    slots: List[CandidateView]
    constraints: Dict[str, str]
    n_asks: int
    n_mems: int
    steps_elapsed: int
    horizon: int
    memory_queried: bool
    visited: List[str]
    n_locations: int
    nearest_unvisited_id: Optional[str] = None
    nearest_unvisited_distance: Optional[float] = None
    scene_diameter: float
    last_ask_useful: Optional[bool] = None
    format_strikes: int = 0

    @property
    def remaining_count(self) -> int:
        return len(self.slots)


class Observation(BaseModel):
    step: int
    location_id: str
    location_name: str
    visible_objects: List[VisibleObject]
    last_reply: Optional[OracleReply] = None
    last_memory: List[MemoryView] = Field(default_factory=list)
    belief: BeliefView
    done: bool = False
    outcome: Optional[Outcome] = None


class StepResult(BaseModel):
    observation: Observation
    record: StepRecord
    done: bool


class BeliefState:
    """智能体信念状态（候选集、约束、位置知识与计数）"""

    def __init__(self, task: Task, location_id: str):
        self.remaining: List[str] = sorted(task.candidate_ids)
        self.constraints: Dict[str, str] = {}
        self.location_id = location_id
        self.visited: Set[str] = set()
        self.believed_location: Dict[str, Optional[str]] = {c: None for c in task.candidate_ids}
        self.observed: Set[str] = set()
        self.located: Set[str] = set()  # 位置已确定（目视或地标回答）
        self.memory_hits: Set[str] = set()
        self.n_asks = 0
        self.n_mems = 0
        self.steps_elapsed = 0
        self.format_strikes = 0
        self.memory_queried = False
        self.last_ask_useful: Optional[bool] = None

    def copy(self) -> "BeliefState":
        other = BeliefState.__new__(BeliefState)
        other.remaining = list(self.remaining)
        other.constraints = dict(self.constraints)
        other.location_id = self.location_id
        other.visited = set(self.visited)
        other.believed_location = dict(self.believed_location)
        other.observed = set(self.observed)
        other.located = set(self.located)
        other.memory_hits = set(self.memory_hits)
        other.n_asks = self.n_asks
        other.n_mems = self.n_mems
        other.steps_elapsed = self.steps_elapsed
        other.format_strikes = self.format_strikes
        other.memory_queried = self.memory_queried
        other.last_ask_useful = self.last_ask_useful
        return other


class SearchEpisode:
    """
    单个搜索回合

    Args:
        task: 任务
        scene: 场景
        cost_params: 代价参数
        oracle: 神谕（模拟或交互）
        memory: 本回合的记忆库
        env_config: 环境参数
        seed: 回合种子
        policy_name: 写入轨迹的策略名
    """

    def __init__(self, task: Task, scene: SceneGraph, cost_params: CostParams, oracle: Any,
                 memory: MemoryStore, env_config: EnvConfig, seed: int, policy_name: str = ""):
        self.task = task
        self.scene = scene
        self.cost_params = cost_params
        self.oracle = oracle
        self.memory = memory
        self.env_config = env_config
        self.seed = seed
        self.diameter = scene_diameter(scene)
        self.gt_location_id = scene.object(task.gt_target_id).location_id
        self.belief = BeliefState(task, task.start_location_id)
        self.trajectory = Trajectory(
            task_id=task.task_id,
            scene_id=scene.scene_id,
            difficulty=task.difficulty,
            policy=policy_name,
            seed=seed,
            unseen_category=task.unseen_category,
        )
        self.done = False
        self.outcome: Optional[Outcome] = None
        self._last_reply: Optional[OracleReply] = None
        self._last_memory: List[MemoryFact] = []
        self._observe(task.start_location_id)
        self.observation = self._build_observation()

    # ------------------------------------------------------------------ 内部更新

    def _true_location(self, object_id: str) -> str:
        return self.scene.object(object_id).location_id

    def _observe(self, location_id: str) -> None:
        belief = self.belief
        belief.visited.add(location_id)
        write_observation(self.memory, self.scene, location_id)
        for candidate in self.task.candidate_ids:
            if self._true_location(candidate) == location_id:
                belief.believed_location[candidate] = location_id
                belief.observed.add(candidate)
                belief.located.add(candidate)
            elif belief.believed_location[candidate] == location_id:
                # 推测位置已被目视否定
                belief.believed_location[candidate] = None
        self._prune()

    def _prune(self) -> None:
        belief = self.belief
        kept = [
            c for c in belief.remaining
            if all(self.scene.object(c).attributes[k] == v for k, v in belief.constraints.items())
        ]
        belief.remaining = kept

    def _apply_reply(self, reply: OracleReply) -> None:
        belief = self.belief
        belief.last_ask_useful = reply.useful
        if not reply.useful or reply.kind is None:
            return
        previous = dict(belief.constraints)
        belief.constraints[reply.kind] = reply.value
        before = list(belief.remaining)
        self._prune()
        if not belief.remaining:
            logger.warning(f"回答 {reply.kind}={reply.value} 与全部候选矛盾，忽略该约束")
            belief.constraints = previous
            belief.remaining = before
            return
        if reply.kind == "landmark":
            loc = self.scene.location_by_name(reply.value)
            if loc is not None:
                for candidate in belief.remaining:
                    belief.believed_location[candidate] = loc.id
                    belief.located.add(candidate)

    def _apply_memory(self, facts: List[MemoryFact]) -> None:
        belief = self.belief
        for fact in facts:
            candidate = fact.object_id
            if candidate not in belief.believed_location:
                continue
            belief.memory_hits.add(candidate)
            if candidate in belief.located:
                continue
            recorded = fact.recorded_location_id
            if recorded in belief.visited:
                # 已到过该位置且没看到它
                continue
            belief.believed_location[candidate] = recorded

    def _is_malformed(self, action: Optional[Action]) -> bool:
        if action is None:
            return True
        if action.kind == ActionKind.NAVIGATE:
            return not self.scene.has_location(action.arg)
        if action.kind == ActionKind.ASK:
            return action.arg not in VALID_QUERIES
        if action.kind == ActionKind.GET_MEMORY:
            return action.arg not in config.CATEGORIES and not self.scene.has_object(action.arg)
        return not self.scene.has_object(action.arg)

    def _finish(self, outcome: Outcome) -> None:
        self.done = True
        self.outcome = outcome
        self.trajectory.outcome = outcome
        self.trajectory.memory = dump(self.memory)
        self.oracle.close()

    # ------------------------------------------------------------------ 对外接口

    def step(self, action: Optional[Action], raw: Optional[str] = None,
             useful: Optional[bool] = None) -> StepResult:
        """
        执行一步

        Args:
            action: 动作；None 表示无法解析的输出
            raw: 原始输出文本（格式错误时写入轨迹）
            useful: 强制本步提问是否有效（仅穷举搜索使用）

        Returns:
            StepResult(observation, record, done)
        """
        if self.done:
            raise EpisodeStateError(f"任务 {self.task.task_id} 的回合已结束")
        belief = self.belief
        params = self.cost_params
        nav_distance = None
        self._last_reply = None
        self._last_memory = []

        if self._is_malformed(action):
            belief.format_strikes += 1
            belief.steps_elapsed += 1
            self.trajectory.n_format_strikes += 1
            record = StepRecord(
                index=len(self.trajectory.steps),
                action=None,
                raw=raw if raw is not None else (str(action) if action is not None else None),
                malformed=True,
                cost=params.c_format,
                location_id=belief.location_id,
                n_remaining=len(belief.remaining),
            )
            self.trajectory.steps.append(record)
            logger.debug(f"任务 {self.task.task_id} 第 {record.index} 步格式错误（连续 {belief.format_strikes} 次）")
            if belief.format_strikes >= 2:
                self._finish(Outcome.FAILURE)
            elif belief.steps_elapsed >= self.env_config.horizon:
                self._finish(Outcome.TIMEOUT)
            if self.done:
                self.observation = self._build_observation()
            return StepResult(observation=self.observation, record=record, done=self.done)

        belief.format_strikes = 0
        reply_payload = None
        if action.kind == ActionKind.NAVIGATE:
            nav_distance = distance(self.scene, belief.location_id, action.arg)
            cost = action_cost(action, belief.n_asks, nav_distance, params)
            belief.location_id = action.arg
            self._observe(action.arg)
        elif action.kind == ActionKind.ASK:
            cost = action_cost(action, belief.n_asks, None, params)
            reply = self.oracle.answer(action.arg, list(belief.remaining), useful=useful)
            belief.n_asks += 1
            self._apply_reply(reply)
            self._last_reply = reply
            reply_payload = {"kind": reply.kind, "value": reply.value, "text": reply.text}
        elif action.kind == ActionKind.GET_MEMORY:
            cost = action_cost(action, belief.n_asks, None, params)
            belief.n_mems += 1
            belief.memory_queried = True
            self._last_memory = retrieve(self.memory, action.arg)
            self._apply_memory(self._last_memory)
        else:
            cost = 0.0
            success = action.arg == self.task.gt_target_id and belief.location_id == self.gt_location_id
            self._finish(Outcome.SUCCESS if success else Outcome.FAILURE)

        belief.steps_elapsed += 1
        record = StepRecord(
            index=len(self.trajectory.steps),
            action=action,
            cost=cost,
            location_id=belief.location_id,
            nav_distance=nav_distance,
            reply=reply_payload,
            n_remaining=len(belief.remaining),
        )
        self.trajectory.steps.append(record)
        if not self.done and belief.steps_elapsed >= self.env_config.horizon:
            self._finish(Outcome.TIMEOUT)
        self.observation = self._build_observation()
        return StepResult(observation=self.observation, record=record, done=self.done)

    def clone(self) -> "SearchEpisode":
        """复制回合状态（共享不可变的任务/场景），供穷举搜索分支使用"""
        other = SearchEpisode.__new__(SearchEpisode)
        other.task = self.task
        other.scene = self.scene
        other.cost_params = self.cost_params
        other.oracle = self.oracle.clone()
        other.memory = self.memory.clone()
        other.env_config = self.env_config
        other.seed = self.seed
        other.diameter = self.diameter
        other.gt_location_id = self.gt_location_id
        other.belief = self.belief.copy()
        other.trajectory = self.trajectory.model_copy(update={"steps": list(self.trajectory.steps)})
        other.done = self.done
        other.outcome = self.outcome
        other._last_reply = self._last_reply
        other._last_memory = list(self._last_memory)
        other.observation = self.observation
        return other

    def info_key(self) -> tuple:
        """智能体可区分的信息状态（决定后续全部转移与合法动作）"""
        belief = self.belief
        return (
            tuple(belief.remaining),
            belief.location_id,
            belief.n_asks,
            belief.memory_queried,
            tuple(sorted(belief.visited)),
            tuple(sorted(belief.constraints.items())),
            tuple(sorted(belief.believed_location.items(), key=lambda kv: kv[0])),
            belief.steps_elapsed,
            belief.format_strikes,
        )

    def unvisited_locations(self) -> List[str]:
        return [loc.id for loc in self.scene.locations if loc.id not in self.belief.visited]

    def nearest_unvisited(self) -> Optional[str]:
        here = self.belief.location_id
        options = self.unvisited_locations()
        if not options:
            return None
        return min(options, key=lambda loc: (distance(self.scene, here, loc), loc))

    def candidate_slots(self) -> List[CandidateView]:
        belief = self.belief
        slots = []
        for candidate in belief.remaining:
            obj = self.scene.object(candidate)
            loc = belief.believed_location[candidate]
            d = distance(self.scene, belief.location_id, loc) if loc is not None else None
            slots.append(CandidateView(
                id=candidate,
                color=obj.attributes["color"],
                size=obj.attributes["size"],
                location_id=loc,
                distance=d,
                co_located=loc == belief.location_id,
                memory_hit=candidate in belief.memory_hits,
            ))
        slots.sort(key=lambda s: (s.distance if s.distance is not None else math.inf, s.id))
        return slots

    def _build_observation(self) -> Observation:
        belief = self.belief
        here = belief.location_id
        nearest = self.nearest_unvisited()
        view = BeliefView(
            instruction=self.task.instruction,
            category=self.task.category,
            slots=self.candidate_slots(),
            constraints=dict(belief.constraints),
            n_asks=belief.n_asks,
            n_mems=belief.n_mems,
            steps_elapsed=belief.steps_elapsed,
            horizon=self.env_config.horizon,
            memory_queried=belief.memory_queried,
            visited=sorted(belief.visited),
            n_locations=len(self.scene.locations),
            nearest_unvisited_id=nearest,
            nearest_unvisited_distance=distance(self.scene, here, nearest) if nearest else None,
            scene_diameter=self.diameter,
            last_ask_useful=belief.last_ask_useful,
            format_strikes=belief.format_strikes,
        )
        return Observation(
            step=belief.steps_elapsed,
            location_id=here,
            location_name=self.scene.location(here).name,
            visible_objects=[
                VisibleObject(id=o.id, category=o.category, attributes=dict(o.attributes))
                for o in self.scene.objects_at(here)
            ],
            last_reply=self._last_reply,
            last_memory=[
                MemoryView(object_id=f.object_id, category=f.category, attributes=dict(f.attributes),
                           recorded_location_id=f.recorded_location_id, source=f.source.value)
                for f in self._last_memory
            ],
            belief=view,
            done=self.done,
            outcome=self.outcome,
        )


def build_memory(task: Task, scene: SceneGraph, memory_params: MemoryParams, seed: int) -> MemoryStore:
    if memory_params.use_task_seed:
        return store_from_seed(scene, task.memory_seed)
    return seed_memory(scene, memory_params.p_cover, memory_params.p_stale, np.random.default_rng([seed, 2]))


def reset(task: Task, scene: SceneGraph, cost_params: CostParams, oracle_params: OracleParams,
          memory_params: MemoryParams, seed: int, env_config: Optional[EnvConfig] = None,
          oracle: Any = None, policy_name: str = "") -> SearchEpisode:
    """
    开始一个回合：智能体位于起点，信念集为全部候选，记忆已预置

    Args:
        oracle: 自定义神谕（交互模式），为 None 时使用疲劳模型模拟用户
    """
    validate_task(task, scene)
    if oracle is None:
        oracle = OracleState(scene, task.gt_target_id, oracle_params, np.random.default_rng([seed, 1]))
    memory = build_memory(task, scene, memory_params, seed)
    return SearchEpisode(task, scene, cost_params, oracle, memory, env_config or EnvConfig(), seed, policy_name)


def step(episode: SearchEpisode, action: Optional[Action]) -> StepResult:
    return episode.step(action)


def run_episode(policy: Any, task: Task, scene: SceneGraph, cost_params: CostParams,
                oracle_params: OracleParams, memory_params: MemoryParams, seed: int,
                env_config: Optional[EnvConfig] = None, oracle: Any = None) -> Trajectory:
    """
    用策略跑完一个回合

    策略需实现 decide(observation, rng) -> Decision；超出单步时间预算的决策按格式错误处理
    """
    env_config = env_config or EnvConfig()
    episode = reset(task, scene, cost_params, oracle_params, memory_params, seed, env_config,
                    oracle=oracle, policy_name=getattr(policy, "name", type(policy).__name__))
    return drive_episode(policy, episode)


def drive_episode(policy: Any, episode: SearchEpisode) -> Trajectory:
    """
    在已创建的回合上执行 decide→step 循环直到结束

    Raises:
        EpisodeRunError: 策略或环境在回合中抛出的异常（带任务ID与种子）；配置错误原样抛出
    """
    task, seed = episode.task, episode.seed
    try:
        _drive(policy, episode)
    except (EpisodeRunError, ConfigError):
        raise
    except Exception as e:
        raise EpisodeRunError(task.task_id, seed, e) from e
    return episode.trajectory


def _drive(policy: Any, episode: SearchEpisode) -> None:
    task, seed = episode.task, episode.seed
    timeout = episode.env_config.decision_timeout
    begin = getattr(policy, "begin_episode", None)
    if begin is not None:
        begin(episode)
    rng = np.random.default_rng([seed, 3])
    observation = episode.observation
    while not episode.done:
        started = time.perf_counter()
        decision = policy.decide(observation, rng)
        elapsed = time.perf_counter() - started
        action = decision.action
        if timeout is not None and elapsed > timeout:
            logger.warning(f"任务 {task.task_id} 决策耗时 {elapsed:.2f}s 超出预算，按格式错误处理")
            action = None
        result = episode.step(action, raw=decision.raw)
        record = result.record
        record.template = decision.template
        record.log_prob = decision.log_prob
        record.features = decision.features
        record.mask = decision.mask
        record.expert_value = getattr(decision, "expert_value", None)
        observation = result.observation
    end = getattr(policy, "end_episode", None)
    if end is not None:
        end()


def append_trajectory_log(path: str, trajectories: List[Trajectory], cost_params: CostParams,
                          include_features: bool = False) -> None:
    """
    追加写入轨迹日志（JSON Lines，每行一个回合）

    每行含逐步记录、结局、总代价、回报与回合结束时的记忆库内容
    """
    exclude = None if include_features else {"steps": {"__all__": {"features", "mask"}}}
    with open(path, "a", encoding="utf-8") as f:
        for traj in trajectories:
            payload = traj.model_dump(mode="json", exclude=exclude)
            payload["total_cost"] = traj.total_cost
            payload["return"] = trajectory_return(traj, cost_params)
            payload["format_version"] = config.FORMAT_VERSION
            f.write(json.dumps(payload, ensure_ascii=False) + "\n")


def read_trajectory_log(path: str) -> List[Trajectory]:
    trajectories = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            payload = json.loads(line)
            if payload.get("format_version") != config.FORMAT_VERSION:
                raise ConfigError(f"{path} 第 {line_no} 行的格式版本不受支持")
            trajectories.append(Trajectory.model_validate(payload))
    return trajectories
