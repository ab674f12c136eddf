"""
策略模块
固定的16个动作模板、观测特征、带合法性掩码的线性softmax策略及其解析梯度，
以及若干基线策略（先问后找、只探索、随机）
"""
import json
import math
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel

import config
from actions import Action, ActionKind, ask, found, get_memory, navigate
from episode_env import Observation
from errors import ConfigError

# ============ 动作模板 ============
ASK_TEMPLATES = tuple(f"ask_{kind}" for kind in config.ATTRIBUTE_KINDS) + ("ask_open",)
TEMPLATE_NAMES: Tuple[str, ...] = (
    ASK_TEMPLATES
    + ("get_memory",)
    + tuple(f"navigate_slot_{i}" for i in range(1, config.MAX_CANDIDATES + 1))
    + ("navigate_unvisited",)
    + tuple(f"found_slot_{i}" for i in range(1, config.MAX_CANDIDATES + 1))
)
N_TEMPLATES = len(TEMPLATE_NAMES)
ASK_OPEN = ASK_TEMPLATES.index("ask_open")
GET_MEMORY = len(ASK_TEMPLATES)
NAV_SLOT0 = GET_MEMORY + 1
NAV_UNVISITED = NAV_SLOT0 + config.MAX_CANDIDATES
FOUND_SLOT0 = NAV_UNVISITED + 1

TEMPLATE_KINDS: Tuple[ActionKind, ...] = tuple(
    ActionKind.ASK if t < GET_MEMORY
    else ActionKind.GET_MEMORY if t == GET_MEMORY
    else ActionKind.NAVIGATE if t < FOUND_SLOT0
    else ActionKind.FOUND
    for t in range(N_TEMPLATES)
)

N_SLOTS = config.MAX_CANDIDATES
N_FEATURES = 19 + 4 * N_SLOTS


def ask_query(template: int) -> str:
    if template == ASK_OPEN:
        return config.OPEN_QUERY
    return config.ATTRIBUTE_KINDS[template]


def valid_mask(obs: Observation, disabled_kinds: Iterable[ActionKind] = ()) -> np.ndarray:
    """
    当前观测下各模板是否合法

    Args:
        obs: 观测
        disabled_kinds: 消融实验中屏蔽的动作类型
    """
    belief = obs.belief
    slots = belief.slots
    n = len(slots)
    mask = np.zeros(N_TEMPLATES, dtype=bool)
    if n > 1:
        mask[0] = len({s.color for s in slots}) > 1
        mask[1] = len({s.size for s in slots}) > 1
        mask[2] = "landmark" not in belief.constraints
        mask[ASK_OPEN] = True
    mask[GET_MEMORY] = not belief.memory_queried
    for i, slot in enumerate(slots):
        mask[NAV_SLOT0 + i] = slot.location_id is not None and not slot.co_located
        mask[FOUND_SLOT0 + i] = True
    mask[NAV_UNVISITED] = belief.nearest_unvisited_id is not None
    disabled = set(disabled_kinds)
    if disabled:
        for t, kind in enumerate(TEMPLATE_KINDS):
            if kind in disabled:
                mask[t] = False
    return mask


def template_to_action(template: int, obs: Observation) -> Action:
    """把模板编号落到具体动作（槽位 -> 物体/位置ID）"""
    slots = obs.belief.slots
    if template < GET_MEMORY:
        return ask(ask_query(template))
    if template == GET_MEMORY:
        return get_memory(obs.belief.category)
    if template == NAV_UNVISITED:
        if obs.belief.nearest_unvisited_id is None:
            raise ValueError("没有未访问的位置")
        return navigate(obs.belief.nearest_unvisited_id)
    if template < NAV_UNVISITED:
        slot = slots[template - NAV_SLOT0]
        if slot.location_id is None:
            raise ValueError(f"槽位 {slot.id} 的位置未知")
        return navigate(slot.location_id)
    return found(slots[template - FOUND_SLOT0].id)


def featurize(obs: Observation) -> np.ndarray:
    """固定顺序的标量特征"""
    belief = obs.belief
    slots = belief.slots
    n = max(len(slots), 1)
    diameter = belief.scene_diameter if belief.scene_diameter > 0 else 1.0
    phi = np.zeros(N_FEATURES, dtype=float)
    phi[0] = 1.0
    phi[1] = len(slots) / N_SLOTS
    phi[2] = 1.0 / n
    phi[3] = 1.0 if len(slots) == 1 else 0.0
    phi[4] = min(belief.n_asks, 4) / 4.0
    phi[5] = 1.0 if belief.n_asks == 0 else 0.0
    phi[6] = 1.0 if belief.memory_queried else 0.0
    phi[7] = belief.steps_elapsed / belief.horizon
    phi[8] = 1.0 if belief.last_ask_useful is True else 0.0
    phi[9] = 1.0 if belief.last_ask_useful is False else 0.0
    phi[10] = len(belief.constraints) / len(config.ATTRIBUTE_KINDS)
    phi[11] = 1.0 if "landmark" in belief.constraints else 0.0
    if belief.nearest_unvisited_distance is not None:
        phi[12] = belief.nearest_unvisited_distance / diameter
    phi[13] = len(belief.visited) / belief.n_locations
    phi[14] = sum(1 for s in slots if s.location_id is not None) / n
    phi[15] = 1.0 if any(s.co_located for s in slots) else 0.0
    phi[16] = 1.0 if len({s.color for s in slots}) > 1 else 0.0
    phi[17] = 1.0 if len({s.size for s in slots}) > 1 else 0.0
    phi[18] = 1.0 if any(s.memory_hit for s in slots) else 0.0
    base = 19
    for i, slot in enumerate(slots[:N_SLOTS]):
        phi[base + i] = slot.distance / diameter if slot.distance is not None else 1.0
        phi[base + N_SLOTS + i] = 1.0 if slot.location_id is not None else 0.0
        phi[base + 2 * N_SLOTS + i] = (1.0 / n) if slot.co_located else 0.0
        phi[base + 3 * N_SLOTS + i] = 1.0 if slot.memory_hit else 0.0
    return phi


class PolicyParams:
    """线性softmax策略参数：weights 形状为 (模板数, 特征数)"""

    def __init__(self, weights: Optional[np.ndarray] = None, temperature: float = 1.0, version: str = "init"):
        if temperature <= 0 or not math.isfinite(temperature):
            raise ValueError(f"温度必须为正: {temperature}")
        if weights is None:
            weights = np.zeros((N_TEMPLATES, N_FEATURES))
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (N_TEMPLATES, N_FEATURES):
            raise ConfigError(f"参数形状 {weights.shape} 与 ({N_TEMPLATES}, {N_FEATURES}) 不符")
        self.weights = weights
        self.temperature = float(temperature)
        self.version = version

    def copy(self, version: Optional[str] = None) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.temperature, version or self.version)

    def to_dict(self) -> dict:
        return {
            "format_version": config.FORMAT_VERSION,
            "version": self.version,
            "temperature": self.temperature,
            "templates": list(TEMPLATE_NAMES),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PolicyParams":
        if payload.get("format_version") != config.FORMAT_VERSION:
            raise ConfigError("策略参数的格式版本不受支持")
        if tuple(payload.get("templates", ())) != TEMPLATE_NAMES:
            raise ConfigError("策略参数的模板表与当前版本不一致")
        return cls(np.array(payload["weights"], dtype=float), payload["temperature"], payload["version"])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
        logger.info(f"策略参数已保存: {path}（{self.version}）")

    @classmethod
    def load(cls, path: str) -> "PolicyParams":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ============ 分布与梯度 ============

def _log_probs(params: PolicyParams, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        raise ValueError("没有合法动作")
    logits = params.weights @ features / params.temperature
    masked = np.where(mask, logits, -np.inf)
    top = masked.max()
    log_z = top + math.log(np.exp(masked[mask] - top).sum())
    return np.where(mask, logits - log_z, -np.inf)


def log_probabilities(params: PolicyParams, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return _log_probs(params, features, mask)


def action_distribution(params: PolicyParams, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """合法模板上的概率分布，非法模板概率恰为0"""
    logp = _log_probs(params, features, mask)
    probs = np.where(mask, np.exp(logp), 0.0)
    return probs


def sample_action(params: PolicyParams, features: np.ndarray, mask: np.ndarray,
                  rng: np.random.Generator) -> Tuple[int, float]:
    logp = _log_probs(params, features, mask)
    probs = np.where(mask, np.exp(logp), 0.0)
    template = int(rng.choice(N_TEMPLATES, p=probs / probs.sum()))
    return template, float(logp[template])


def log_prob_of(params: PolicyParams, features: np.ndarray, mask: np.ndarray, template: int) -> float:
    if not 0 <= template < N_TEMPLATES:
        raise ValueError(f"模板编号越界: {template}（共 {N_TEMPLATES} 个）")
    if not mask[template]:
        raise ValueError(f"模板 {TEMPLATE_NAMES[template]} 在当前状态下不合法")
    return float(_log_probs(params, features, mask)[template])


def grad_log_prob(params: PolicyParams, features: np.ndarray, mask: np.ndarray, template: int) -> np.ndarray:
    """d log pi(template) / d weights"""
    probs = action_distribution(params, features, mask)
    dz = -probs
    dz[template] += 1.0
    return np.outer(dz, features) / params.temperature


def kl_to_reference(params: PolicyParams, reference: PolicyParams, features: np.ndarray,
                    mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """精确 KL(pi || pi_ref) 及其对 weights 的梯度"""
    logp = _log_probs(params, features, mask)
    logr = _log_probs(reference, features, mask)
    probs = np.where(mask, np.exp(logp), 0.0)
    diff = np.where(mask, logp - logr, 0.0)
    kl = float((probs * diff).sum())
    dz = probs * (diff - kl)
    return kl, np.outer(dz, features) / params.temperature


def entropy(params: PolicyParams, features: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """策略熵及其对 weights 的梯度"""
    logp = _log_probs(params, features, mask)
    probs = np.where(mask, np.exp(logp), 0.0)
    safe = np.where(mask, logp, 0.0)
    h = float(-(probs * safe).sum())
    dz = -probs * (safe + h)
    return h, np.outer(dz, features) / params.temperature


# ============ 策略 ============

class Decision(BaseModel):
    action: Optional[Action] = None
    raw: Optional[str] = None
    template: Optional[int] = None
    log_prob: Optional[float] = None
    features: Optional[List[float]] = None
    mask: Optional[List[bool]] = None
    expert_value: Optional[float] = None


class LinearSoftmaxPolicy:
    """
    线性softmax策略

    Args:
        params: 策略参数
        name: 策略名
        disabled_kinds: 屏蔽的动作类型（消融：w/o Dialogue 屏蔽 Ask，w/o Memory 屏蔽 GetMemory）
        greedy: 是否取最大概率模板
    """

    def __init__(self, params: PolicyParams, name: str = "linear", disabled_kinds: Iterable[ActionKind] = (),
                 greedy: bool = False):
        self.params = params
        self.name = name
        self.disabled_kinds: FrozenSet[ActionKind] = frozenset(disabled_kinds)
        self.greedy = greedy

    def decide(self, obs: Observation, rng: np.random.Generator) -> Decision:
        features = featurize(obs)
        mask = valid_mask(obs, self.disabled_kinds)
        if self.greedy:
            logp = _log_probs(self.params, features, mask)
            template = int(np.argmax(logp))
            log_prob = float(logp[template])
        else:
            template, log_prob = sample_action(self.params, features, mask, rng)
        return Decision(
            action=template_to_action(template, obs),
            template=template,
            log_prob=log_prob,
            features=features.tolist(),
            mask=mask.tolist(),
        )


class RandomPolicy:
    """在合法模板上均匀随机"""

    name = "random"

    def decide(self, obs: Observation, rng: np.random.Generator) -> Decision:
        mask = valid_mask(obs)
        options = np.flatnonzero(mask)
        template = int(options[rng.integers(len(options))])
        return Decision(action=template_to_action(template, obs), template=template,
                        log_prob=-math.log(len(options)))


def _explore_or_commit(obs: Observation) -> int:
    slots = obs.belief.slots
    for i, slot in enumerate(slots):
        if slot.co_located:
            return FOUND_SLOT0 + i
    for i, slot in enumerate(slots):
        if slot.location_id is not None:
            return NAV_SLOT0 + i
    if obs.belief.nearest_unvisited_id is not None:
        return NAV_UNVISITED
    return FOUND_SLOT0


class AskThenExplorePolicy:
    """先开放式提问一次，然后前往最近的相符候选，与之同处一地即判定找到"""

    name = "heuristic_ask_then_explore"

    def decide(self, obs: Observation, rng: np.random.Generator) -> Decision:
        if obs.belief.n_asks == 0 and len(obs.belief.slots) > 1:
            template = ASK_OPEN
        else:
            template = _explore_or_commit(obs)
        return Decision(action=template_to_action(template, obs), template=template)


class ExploreOnlyPolicy:
    """从不提问也不查记忆：逐个查看候选，遇到即判定找到"""

    name = "explore_only"

    def decide(self, obs: Observation, rng: np.random.Generator) -> Decision:
        template = _explore_or_commit(obs)
        return Decision(action=template_to_action(template, obs), template=template)


def heuristic_ask_then_explore() -> AskThenExplorePolicy:
    return AskThenExplorePolicy()


def template_histogram(templates: Sequence[int]) -> dict:
    counts = {name: 0 for name in TEMPLATE_NAMES}
    for t in templates:
        counts[TEMPLATE_NAMES[t]] += 1
    return counts
