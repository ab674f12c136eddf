"""
专家规划器
在信念空间上做期望最小化搜索（expectimax），生成监督预热用的示范轨迹；
另提供一个直接驱动回合引擎穷举的独立校验器
"""
import json
import math
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, model_validator
from tqdm import tqdm

import config
from actions import Action, ActionKind, ask, get_memory, navigate
from cost_metrics import CostParams, Outcome, Trajectory, action_cost
from episode_env import EnvConfig, Observation, SearchEpisode, build_memory, drive_episode
from errors import ConfigError, EpisodeRunError, PlannerError
from memory_store import MemoryParams, MemoryStore
from oracle_sim import OracleParams, OracleState, best_pruning_kind, usefulness_probability
from policy import (
    ASK_OPEN, FOUND_SLOT0, GET_MEMORY, NAV_SLOT0, NAV_UNVISITED, TEMPLATE_NAMES,
    Decision, ask_query, featurize, template_to_action, valid_mask,
)
from scene_model import SceneGraph, Task, validate_task

# (剩余候选掩码, 位置下标, 已提问数, 是否查过记忆, 已访问位置掩码, 地标是否已披露, 剩余步数)
PlannerState = Tuple[int, int, int, bool, int, bool, int]

_R, _LOC, _ASKS, _MEM, _VISITED, _LANDMARK, _STEPS = range(7)


class PlannerConfig(BaseModel):
    """规划目标参数"""

    failure_penalty: float = config.PLANNER_FAILURE_PENALTY  # 失败或超时的等价代价
    tie_tolerance: float = config.PLANNER_TIE_TOLERANCE

    @model_validator(mode="after")
    def _check(self):
        if not math.isfinite(self.failure_penalty) or self.failure_penalty <= 0:
            raise ValueError(f"failure_penalty 必须为正: {self.failure_penalty}")
        if self.tie_tolerance < 0:
            raise ValueError("tie_tolerance 不能为负")
        return self


class ExpertStep(BaseModel):
    """示范中的一步：所选模板、该节点的期望剩余代价及各备选动作的期望代价"""

    index: int
    template: str
    action: Action
    n_remaining: int
    expected_cost: float
    alternatives: Dict[str, float]


class ExpertTrace(BaseModel):
    task_id: str
    seed: int
    root_value: float
    steps: List[ExpertStep]
    trajectory: Trajectory

    @property
    def success(self) -> bool:
        return self.trajectory.outcome == Outcome.SUCCESS


def _bit(i: int) -> int:
    return 1 << i


def _has(mask: int, i: int) -> bool:
    return bool(mask >> i & 1)


class BeliefPlanner:
    """
    信念空间规划器

    规划器知道场景（物体真实位置、记忆内容），但不知道哪个候选是目标：
    机会节点为目标在剩余候选中均匀分布、提问是否有效以及披露属性对候选的划分。

    Args:
        task: 任务（仅使用候选集与起点，不读取目标）
        scene: 场景
        memory: 回合开始时的记忆库
        cost_params: 代价参数
        oracle_params: 疲劳模型参数
        horizon: 步数上限
        planner_config: 规划目标参数
        exact: 是否用有理数精确计算
    """

    def __init__(self, task: Task, scene: SceneGraph, memory: MemoryStore, cost_params: CostParams,
                 oracle_params: OracleParams, horizon: int = config.HORIZON,
                 planner_config: Optional[PlannerConfig] = None, exact: bool = False):
        if len(task.candidate_ids) > config.MAX_CANDIDATES:
            raise PlannerError(f"任务 {task.task_id} 的候选数超过 {config.MAX_CANDIDATES}")
        self.task = task
        self.scene = scene
        self.horizon = horizon
        self.cost_params = cost_params
        self.oracle_params = oracle_params
        self.planner_config = planner_config or PlannerConfig()
        self.exact = exact
        self._num = Fraction if exact else float
        self._tol = 0 if exact else self.planner_config.tie_tolerance
        self._lam = self._num(cost_params.lam)
        self._penalty = self._num(self.planner_config.failure_penalty)

        self.candidates: List[str] = sorted(task.candidate_ids)
        self._index = {c: i for i, c in enumerate(self.candidates)}
        self._objects = [scene.object(c) for c in self.candidates]
        self._loc_ids = [loc.id for loc in scene.locations]
        self._true_loc = [scene.location_index(o.location_id) for o in self._objects]
        self._seed_loc: List[Optional[int]] = []
        for c in self.candidates:
            fact = memory.get(c)
            self._seed_loc.append(scene.location_index(fact.recorded_location_id) if fact else None)
        self._dist: List[List[float]] = scene._distances.tolist()
        n_loc = len(self._loc_ids)
        self._nav_cost = [
            [self._num(action_cost(navigate(self._loc_ids[j]), 0, self._dist[i][j], cost_params))
             for j in range(n_loc)]
            for i in range(n_loc)
        ]
        self._ask_cost = [self._num(action_cost(ask(config.OPEN_QUERY), n, None, cost_params))
                          for n in range(horizon + 1)]
        self._ask_p = [self._num(usefulness_probability(n + 1, oracle_params.eta, oracle_params.p_floor))
                       for n in range(horizon + 1)]
        self._mem_cost = self._num(action_cost(get_memory(task.category), 0, None, cost_params))
        self._memo: Dict[PlannerState, Tuple[Any, int]] = {}
        self._asks_memo: Dict[PlannerState, Any] = {}
        self._kind_memo: Dict[int, str] = {}

    # ------------------------------------------------------------------ 状态

    def root_state(self) -> PlannerState:
        start = self.scene.location_index(self.task.start_location_id)
        everyone = _bit(len(self.candidates)) - 1
        return (everyone, start, 0, False, _bit(start), False, self.horizon)

    def state_from_observation(self, obs: Observation) -> PlannerState:
        belief = obs.belief
        remaining = 0
        for slot in belief.slots:
            remaining |= _bit(self._index[slot.id])
        visited = 0
        for loc in belief.visited:
            visited |= _bit(self.scene.location_index(loc))
        return (
            remaining,
            self.scene.location_index(obs.location_id),
            belief.n_asks,
            belief.memory_queried,
            visited,
            "landmark" in belief.constraints,
            belief.horizon - belief.steps_elapsed,
        )

    def believed_location(self, i: int, state: PlannerState) -> Optional[int]:
        visited = state[_VISITED]
        true_loc = self._true_loc[i]
        if state[_LANDMARK] or _has(visited, true_loc):
            return true_loc
        recorded = self._seed_loc[i]
        if state[_MEM] and recorded is not None and not _has(visited, recorded):
            return recorded
        return None

    def slots(self, state: PlannerState) -> List[Tuple[int, Optional[int]]]:
        """按距离排序的 (候选下标, 推测位置)，与环境的槽位顺序一致"""
        loc = state[_LOC]
        entries = []
        for i in range(len(self.candidates)):
            if _has(state[_R], i):
                b = self.believed_location(i, state)
                d = self._dist[loc][b] if b is not None else math.inf
                entries.append((d, self.candidates[i], i, b))
        entries.sort(key=lambda e: (e[0], e[1]))
        return [(i, b) for _, _, i, b in entries]

    def nearest_unvisited(self, state: PlannerState) -> Optional[int]:
        loc, visited = state[_LOC], state[_VISITED]
        options = [j for j in range(len(self._loc_ids)) if not _has(visited, j)]
        if not options:
            return None
        return min(options, key=lambda j: (self._dist[loc][j], self._loc_ids[j]))

    def _pruning_kind(self, remaining: int) -> str:
        kind = self._kind_memo.get(remaining)
        if kind is None:
            objects = [o for i, o in enumerate(self._objects) if _has(remaining, i)]
            kind = best_pruning_kind(objects)
            self._kind_memo[remaining] = kind
        return kind

    # ------------------------------------------------------------------ 展开

    def _advance(self, state: PlannerState, changes: Dict[int, Any]) -> PlannerState:
        values = list(state)
        for field, value in changes.items():
            values[field] = value
        values[_STEPS] = state[_STEPS] - 1
        return tuple(values)

    def _expand(self, state: PlannerState) -> List[Tuple[Any, int, list]]:
        """
        当前节点的全部合法模板

        Returns:
            [(即时代价, 模板, [(概率, 后继状态或None, 终止损失)])]，按 (代价, 模板) 排序
        """
        remaining, loc, n_asks, mem, visited, landmark, _ = state
        num = self._num
        slots = self.slots(state)
        n = len(slots)
        options = []

        for k, (i, _) in enumerate(slots):
            hit = num(1) / n if self._true_loc[i] == loc else num(0)
            options.append((num(0), FOUND_SLOT0 + k, [(num(1), None, self._penalty * (1 - hit))]))

        if not mem:
            options.append((self._mem_cost, GET_MEMORY, [(num(1), self._advance(state, {_MEM: True}), 0)]))

        if n > 1:
            members = [i for i, _ in slots]
            p = self._ask_p[n_asks]
            for template in range(ASK_OPEN + 1):
                query = ask_query(template)
                if template == ASK_OPEN:
                    kind = self._pruning_kind(remaining)
                else:
                    kind = query
                    if kind == "landmark":
                        if landmark:
                            continue
                    elif len({self._objects[i].attributes[kind] for i in members}) < 2:
                        continue
                blocks: Dict[str, int] = {}
                for i in members:
                    value = self._objects[i].attributes[kind]
                    blocks[value] = blocks.get(value, 0) | _bit(i)
                outcomes = []
                for block in blocks.values():
                    size = bin(block).count("1")
                    child = self._advance(state, {_R: block, _ASKS: n_asks + 1,
                                                  _LANDMARK: landmark or kind == "landmark"})
                    outcomes.append((p * size / n, child, 0))
                if p != 1:
                    outcomes.append((1 - p, self._advance(state, {_ASKS: n_asks + 1}), 0))
                options.append((self._ask_cost[n_asks], template, outcomes))

        for k, (_, b) in enumerate(slots):
            if b is not None and b != loc:
                child = self._advance(state, {_LOC: b, _VISITED: visited | _bit(b)})
                options.append((self._nav_cost[loc][b], NAV_SLOT0 + k, [(num(1), child, 0)]))
        target = self.nearest_unvisited(state)
        if target is not None:
            child = self._advance(state, {_LOC: target, _VISITED: visited | _bit(target)})
            options.append((self._nav_cost[loc][target], NAV_UNVISITED, [(num(1), child, 0)]))

        options.sort(key=lambda o: (o[0], o[1]))
        return options

    # ------------------------------------------------------------------ 求值

    def _expectation(self, outcomes: list) -> Any:
        total = self._num(0)
        for prob, child, loss in outcomes:
            if child is None:
                total += prob * loss
            elif child[_STEPS] == 0:
                total += prob * self._penalty
            else:
                total += prob * self.solve(child)[0]
        return total

    def solve(self, state: PlannerState) -> Tuple[Any, int]:
        """返回 (最小期望代价, 最优模板)；平局取即时代价更小者，再取模板序号更小者"""
        cached = self._memo.get(state)
        if cached is not None:
            return cached
        best_value, best_template = None, None
        for cost, template, outcomes in self._expand(state):
            immediate = self._lam * cost
            # 后继代价非负，即时代价已不低于当前最优的动作不可能更优
            if best_value is not None and immediate >= best_value:
                continue
            value = immediate + self._expectation(outcomes)
            if best_value is None or value < best_value - self._tol:
                best_value, best_template = value, template
        result = (best_value, best_template)
        self._memo[state] = result
        return result

    def value(self, state: Optional[PlannerState] = None) -> Any:
        return self.solve(state if state is not None else self.root_state())[0]

    def q_values(self, state: PlannerState) -> Dict[int, Any]:
        """各合法模板的期望代价（示范中的备选比较）"""
        return {template: self._lam * cost + self._expectation(outcomes)
                for cost, template, outcomes in self._expand(state)}

    def expected_asks(self, state: Optional[PlannerState] = None) -> Any:
        """沿最优策略的期望提问次数"""
        state = state if state is not None else self.root_state()
        cached = self._asks_memo.get(state)
        if cached is not None:
            return cached
        _, best = self.solve(state)
        total = self._num(1 if best <= ASK_OPEN else 0)
        for _, template, outcomes in self._expand(state):
            if template != best:
                continue
            for prob, child, _ in outcomes:
                if child is not None and child[_STEPS] > 0:
                    total += prob * self.expected_asks(child)
        self._asks_memo[state] = total
        return total

    def check_root(self) -> None:
        value = self.value()
        if value >= self._penalty:
            raise PlannerError(f"任务 {self.task.task_id} 在 {self.horizon} 步内无法以正概率成功")

    @property
    def n_states(self) -> int:
        return len(self._memo)


class ExpertPolicy:
    """
    由规划器驱动的策略：每步把观测映射为规划状态并执行最优模板

    Args:
        planner_config: 规划目标参数
        oracle_params: 规划用疲劳模型参数，为 None 时取回合中模拟用户的参数
        record_alternatives: 是否记录每步各备选动作的期望代价
    """

    name = "expert"

    def __init__(self, planner_config: Optional[PlannerConfig] = None,
                 oracle_params: Optional[OracleParams] = None, record_alternatives: bool = False):
        self.planner_config = planner_config or PlannerConfig()
        self.oracle_params = oracle_params
        self.record_alternatives = record_alternatives
        self.planner: Optional[BeliefPlanner] = None
        self.steps: List[ExpertStep] = []

    def begin_episode(self, episode: SearchEpisode) -> None:
        oracle_params = self.oracle_params or getattr(episode.oracle, "params", None) or OracleParams()
        self.planner = BeliefPlanner(
            episode.task, episode.scene, episode.memory, episode.cost_params, oracle_params,
            episode.env_config.horizon, self.planner_config,
        )
        self.planner.check_root()
        self.steps = []

    def _check_slots(self, state: PlannerState, obs: Observation) -> None:
        planned = [(self.planner.candidates[i], self.planner._loc_ids[b] if b is not None else None)
                   for i, b in self.planner.slots(state)]
        seen = [(s.id, s.location_id) for s in obs.belief.slots]
        if planned != seen:
            raise PlannerError(f"任务 {self.planner.task.task_id} 的规划信念与环境观测不一致: {planned} != {seen}")

    def decide(self, obs: Observation, rng: np.random.Generator) -> Decision:
        if self.planner is None:
            raise PlannerError("ExpertPolicy 需要先调用 begin_episode")
        state = self.planner.state_from_observation(obs)
        self._check_slots(state, obs)
        value, template = self.planner.solve(state)
        action = template_to_action(template, obs)
        alternatives = {}
        if self.record_alternatives:
            alternatives = {TEMPLATE_NAMES[t]: float(q) for t, q in self.planner.q_values(state).items()}
        self.steps.append(ExpertStep(
            index=obs.step,
            template=TEMPLATE_NAMES[template],
            action=action,
            n_remaining=len(obs.belief.slots),
            expected_cost=float(value),
            alternatives=alternatives,
        ))
        return Decision(
            action=action,
            template=template,
            features=featurize(obs).tolist(),
            mask=valid_mask(obs).tolist(),
            expert_value=float(value),
        )


def plan(task: Task, scene: SceneGraph, cost_params: CostParams, oracle_params: OracleParams,
         memory_store: Optional[MemoryStore] = None, seed: int = 0,
         env_config: Optional[EnvConfig] = None, planner_config: Optional[PlannerConfig] = None,
         memory_params: Optional[MemoryParams] = None) -> ExpertTrace:
    """
    对一个任务规划并在环境中实现一条示范轨迹

    真实目标只在实现时通过模拟用户的回答与 Found 判定起作用，节点价值从不使用它。

    Args:
        task: 任务
        scene: 场景
        cost_params: 代价参数
        oracle_params: 疲劳模型参数
        memory_store: 回合记忆库，为 None 时按 memory_params 构建
        seed: 实现回合所用种子（决定模拟用户的随机性）
        env_config: 环境参数
        planner_config: 规划目标参数

    Returns:
        ExpertTrace

    Raises:
        PlannerError: 任务在步数上限内无解
    """
    validate_task(task, scene)
    env_config = env_config or EnvConfig()
    if memory_store is None:
        memory_store = build_memory(task, scene, memory_params or MemoryParams(), seed)
    oracle = OracleState(scene, task.gt_target_id, oracle_params, np.random.default_rng([seed, 1]))
    episode = SearchEpisode(task, scene, cost_params, oracle, memory_store.clone(), env_config, seed, "expert")
    policy = ExpertPolicy(planner_config, oracle_params, record_alternatives=True)
    try:
        trajectory = drive_episode(policy, episode)
    except EpisodeRunError as e:
        if isinstance(e.cause, PlannerError):
            raise e.cause from e
        raise
    return ExpertTrace(
        task_id=task.task_id,
        seed=seed,
        root_value=float(policy.steps[0].expected_cost) if policy.steps else 0.0,
        steps=policy.steps,
        trajectory=trajectory,
    )


# ============ 穷举校验 ============

class _WorldEnumerator:
    """
    以回合引擎为模型的穷举：世界 = 目标 × 每次提问是否有效。
    观测完全相同的世界合并为一个信息节点，在其上枚举全部合法模板。
    """

    def __init__(self, lam: Fraction, penalty: Fraction):
        self.lam = lam
        self.penalty = penalty
        self._memo: Dict[tuple, Fraction] = {}
        self.n_nodes = 0

    def value(self, worlds: List[Tuple[Fraction, SearchEpisode]]) -> Fraction:
        total = sum(w for w, _ in worlds)
        key = (worlds[0][1].info_key(),
               tuple(sorted((ep.task.gt_target_id, w / total) for w, ep in worlds)))
        cached = self._memo.get(key)
        if cached is not None:
            return cached
        self.n_nodes += 1
        obs = worlds[0][1].observation
        best = None
        for template in np.flatnonzero(valid_mask(obs)):
            action = template_to_action(int(template), obs)
            q = self._action_value(worlds, total, action)
            if best is None or q < best:
                best = q
        self._memo[key] = best
        return best

    @staticmethod
    def _branches(weight: Fraction, episode: SearchEpisode, action: Action):
        if action.kind != ActionKind.ASK:
            return [(weight, None)]
        p = Fraction(episode.oracle.next_probability())
        return [(w, useful) for w, useful in ((weight * p, True), (weight * (1 - p), False)) if w > 0]

    def _action_value(self, worlds, total: Fraction, action: Action) -> Fraction:
        acc = Fraction(0)
        groups: Dict[tuple, list] = {}
        for weight, episode in worlds:
            for branch_weight, useful in self._branches(weight, episode, action):
                child = episode.clone()
                result = child.step(action, useful=useful)
                acc += branch_weight * self.lam * Fraction(result.record.cost)
                if child.done:
                    if child.outcome != Outcome.SUCCESS:
                        acc += branch_weight * self.penalty
                else:
                    groups.setdefault(child.info_key(), []).append((branch_weight, child))
        for members in groups.values():
            acc += sum(w for w, _ in members) * self.value(members)
        return acc / total


def brute_force_value(task: Task, scene: SceneGraph, cost_params: CostParams, oracle_params: OracleParams,
                      memory_store: MemoryStore, horizon: int,
                      planner_config: Optional[PlannerConfig] = None) -> Fraction:
    """
    穷举全部策略树得到最小期望代价（精确有理数）

    不使用规划器的状态模型：每个世界是一个克隆的回合引擎，提问有效与否被强制指定。

    Raises:
        ValueError: 超出穷举规模限制
    """
    if len(task.candidate_ids) > config.BRUTE_FORCE_MAX_CANDIDATES:
        raise ValueError(f"穷举至多支持 {config.BRUTE_FORCE_MAX_CANDIDATES} 个候选，实际 {len(task.candidate_ids)}")
    if not 1 <= horizon <= config.BRUTE_FORCE_MAX_HORIZON:
        raise ValueError(f"穷举的步数上限须在 [1, {config.BRUTE_FORCE_MAX_HORIZON}] 内，实际 {horizon}")
    validate_task(task, scene)
    planner_config = planner_config or PlannerConfig()
    env_config = EnvConfig(horizon=horizon)
    n = len(task.candidate_ids)
    worlds = []
    for target in sorted(task.candidate_ids):
        world_task = task.model_copy(update={"gt_target_id": target})
        oracle = OracleState(scene, target, oracle_params, np.random.default_rng(0))
        episode = SearchEpisode(world_task, scene, cost_params, oracle, memory_store.clone(), env_config, 0)
        worlds.append((Fraction(1, n), episode))
    enumerator = _WorldEnumerator(Fraction(cost_params.lam), Fraction(planner_config.failure_penalty))
    value = enumerator.value(worlds)
    logger.debug(f"任务 {task.task_id} 穷举了 {enumerator.n_nodes} 个信息节点，最小期望代价 {float(value):.4f}")
    return value


def expected_ask_count(task: Task, scene: SceneGraph, cost_params: CostParams, oracle_params: OracleParams,
                       memory_store: MemoryStore, horizon: int = config.HORIZON,
                       planner_config: Optional[PlannerConfig] = None, exact: bool = True) -> Any:
    """从起点出发按最优策略的期望提问次数"""
    planner = BeliefPlanner(task, scene, memory_store, cost_params, oracle_params, horizon, planner_config, exact)
    return planner.expected_asks()


# ============ 示范语料 ============

def episode_seed(seed: int, index: int, attempt: int) -> int:
    """由主种子、任务序号与重试序号派生回合种子"""
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1)[0])


def _realize(job: tuple) -> Tuple[Optional[ExpertTrace], int, Optional[str]]:
    """
    带重试地实现一条成功示范（在工作进程中执行，不向外抛异常）

    Returns:
        (示范或None, 尝试次数, 放弃原因)
    """
    index, task, scene, cost_params, oracle_params, memory_params, env_config, planner_config, seed = job
    reason = None
    for attempt in range(config.EXPERT_REROLLS + 1):
        run_seed = episode_seed(seed, index, attempt)
        try:
            trace = plan(task, scene, cost_params, oracle_params, seed=run_seed, env_config=env_config,
                         planner_config=planner_config, memory_params=memory_params)
        except PlannerError as e:
            return None, attempt + 1, str(e)
        if trace.success:
            return trace, attempt + 1, None
        reason = f"实现结果为 {trace.trajectory.outcome.value}"
    return None, config.EXPERT_REROLLS + 1, reason


def generate_sft_corpus(tasks: Sequence[Task], scenes: Dict[str, SceneGraph], cost_params: CostParams,
                        oracle_params: OracleParams, memory_params: Optional[MemoryParams] = None,
                        env_config: Optional[EnvConfig] = None, planner_config: Optional[PlannerConfig] = None,
                        seed: int = 0, workers: int = 1) -> Tuple[List[ExpertTrace], List[str]]:
    """
    为每个任务生成一条成功的示范；实现失败时换种子重试，仍失败则丢弃

    Args:
        tasks: 任务列表
        scenes: scene_id -> 场景
        seed: 主种子
        workers: 并行进程数

    Returns:
        (示范列表, 被丢弃的任务ID)
    """
    memory_params = memory_params or MemoryParams()
    env_config = env_config or EnvConfig()
    planner_config = planner_config or PlannerConfig()
    jobs = []
    for index, task in enumerate(tasks):
        if task.scene_id not in scenes:
            raise ConfigError(f"任务 {task.task_id} 引用的场景 {task.scene_id} 不存在")
        jobs.append((index, task, scenes[task.scene_id], cost_params, oracle_params, memory_params,
                     env_config, planner_config, seed))

    logger.info(f"开始生成专家示范: {len(jobs)} 个任务，{workers} 个进程")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(tqdm(executor.map(_realize, jobs, chunksize=4), total=len(jobs), desc="专家示范"))
    else:
        results = [_realize(job) for job in tqdm(jobs, desc="专家示范")]

    traces, dropped = [], []
    rerolled = 0
    for task, (trace, attempts, reason) in zip(tasks, results):
        if trace is None:
            dropped.append(task.task_id)
            logger.warning(f"任务 {task.task_id} 的示范被丢弃: {reason}")
            continue
        rerolled += attempts > 1
        traces.append(trace)
    logger.info(f"专家示范生成完成: 保留 {len(traces)} 条，重试 {rerolled} 条，丢弃 {len(dropped)} 条")
    return traces, dropped


def save_corpus(traces: Iterable[ExpertTrace], path: str) -> None:
    """示范语料（JSON Lines，每行一条，带逐步专家元数据与特征）"""
    with open(path, "w", encoding="utf-8") as f:
        for trace in traces:
            payload = trace.model_dump(mode="json")
            payload["format_version"] = config.FORMAT_VERSION
            f.write(json.dumps(payload, ensure_ascii=False) + "\n")


def load_corpus(path: str) -> List[ExpertTrace]:
    traces = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            payload = json.loads(line)
            if payload.pop("format_version", None) != config.FORMAT_VERSION:
                raise ConfigError(f"{path} 第 {line_no} 行的格式版本不受支持")
            traces.append(ExpertTrace.model_validate(payload))
    return traces
