"""
模拟用户（神谕）
带疲劳衰减的回答模型：第 n 次提问以 max(p_floor, exp(-eta*(n-1))) 的概率给出有效信息；
另提供以人类为神谕的交互模式
"""
import math
from collections import Counter
from typing import List, Optional, Protocol, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, model_validator

import config
from errors import EpisodeStateError
from scene_model import ObjectInstance, SceneGraph

VALID_QUERIES = tuple(config.ATTRIBUTE_KINDS) + (config.OPEN_QUERY,)
NO_INFO_TEXT = "I'm not sure."


class OracleParams(BaseModel):
    """疲劳模型参数"""

    eta: float = config.ORACLE_ETA
    p_floor: float = config.ORACLE_P_FLOOR

    @model_validator(mode="after")
    def _check(self):
        if not math.isfinite(self.eta) or self.eta < 0:
            raise ValueError(f"eta 必须为非负有限值: {self.eta}")
        if not 0.0 <= self.p_floor <= 1.0:
            raise ValueError(f"p_floor 必须在 [0, 1] 内: {self.p_floor}")
        return self


class OracleReply(BaseModel):
    """一次回答"""

    query: str
    useful: bool
    kind: Optional[str] = None
    value: Optional[str] = None
    text: str = NO_INFO_TEXT

    def to_wire(self) -> dict:
        return self.model_dump()


def usefulness_probability(n: int, eta: float, p_floor: float) -> float:
    """第 n 次（从1开始）提问得到有效回答的概率"""
    if n < 1:
        raise ValueError(f"提问序号从1开始，实际为 {n}")
    return max(p_floor, math.exp(-eta * (n - 1)))


def expected_pruning(objects: Sequence[ObjectInstance], kind: str) -> float:
    """目标在剩余候选中均匀分布时，披露该属性期望排除的候选数"""
    total = len(objects)
    if total == 0:
        return 0.0
    counts = Counter(o.attributes[kind] for o in objects)
    return sum(c * (total - c) for c in counts.values()) / total


def best_pruning_kind(objects: Sequence[ObjectInstance]) -> str:
    """开放式提问时披露的属性种类：期望排除最多者，平局按注册顺序"""
    best_kind = config.ATTRIBUTE_KINDS[0]
    best_score = -1.0
    for kind in config.ATTRIBUTE_KINDS:
        score = expected_pruning(objects, kind)
        if score > best_score:
            best_kind, best_score = kind, score
    return best_kind


def reply_text(kind: str, value: str) -> str:
    if kind == "landmark":
        return f"It's the one near the {value}."
    return f"It's the {value} one."


def _check_query(query: str) -> None:
    if query not in VALID_QUERIES:
        raise ValueError(f"未知提问类型: {query}，可选 {VALID_QUERIES}")


class OracleState:
    """
    模拟用户状态（每个回合一个实例）

    Args:
        scene: 场景
        target_id: 真实目标ID（仅用于生成回答）
        params: 疲劳模型参数
        rng: 随机数发生器，每次提问恰好消耗一次均匀采样
    """

    def __init__(self, scene: SceneGraph, target_id: str, params: OracleParams, rng: np.random.Generator):
        self.scene = scene
        self.target = scene.object(target_id)
        self.params = params
        self.rng = rng
        self.n_answered = 0
        self.active = True

    def close(self) -> None:
        self.active = False

    def clone(self, rng: Optional[np.random.Generator] = None) -> "OracleState":
        other = OracleState.__new__(OracleState)
        other.scene = self.scene
        other.target = self.target
        other.params = self.params
        other.rng = rng if rng is not None else self.rng
        other.n_answered = self.n_answered
        other.active = self.active
        return other

    def next_probability(self) -> float:
        return usefulness_probability(self.n_answered + 1, self.params.eta, self.params.p_floor)

    def answer(self, query: str, remaining: Sequence[str], useful: Optional[bool] = None) -> OracleReply:
        """
        回答一次提问

        Args:
            query: 属性种类或 "open"
            remaining: 当前剩余候选ID
            useful: 指定本次是否有效（穷举搜索时使用），为 None 时按疲劳模型采样

        Returns:
            OracleReply
        """
        if not self.active:
            raise EpisodeStateError("回合已结束，模拟用户不再回答")
        _check_query(query)
        p = self.next_probability()
        if useful is None:
            useful = bool(self.rng.random() < p)
        self.n_answered += 1
        if not useful:
            logger.debug(f"第 {self.n_answered} 次提问（{query}）未得到有效回答，p={p:.3f}")
            return OracleReply(query=query, useful=False)

        if query == config.OPEN_QUERY:
            objects = [self.scene.object(o) for o in remaining]
            kind = best_pruning_kind(objects)
        else:
            kind = query
        value = self.target.attributes[kind]
        return OracleReply(query=query, useful=True, kind=kind, value=value, text=reply_text(kind, value))


def answer(state: OracleState, query: str, remaining: Sequence[str]) -> OracleReply:
    return state.answer(query, remaining)


class PromptChannel(Protocol):
    def write(self, text: str) -> None: ...

    def readline(self) -> str: ...


class TerminalChannel:
    """终端交互通道"""

    def write(self, text: str) -> None:
        print(text)

    def readline(self) -> str:
        try:
            return input("> ")
        except EOFError:
            return ""


def parse_human_reply(line: str, scene: Optional[SceneGraph]) -> Optional[OracleReply]:
    """
    解析人类回答：`kind=value` 或 `pass`；非法输入返回 None
    """
    text = line.strip()
    if text.lower() == "pass":
        return OracleReply(query="", useful=False)
    if "=" not in text:
        return None
    kind, _, value = (part.strip() for part in text.partition("="))
    if kind == "color" and value in config.COLORS:
        pass
    elif kind == "size" and value in config.SIZES:
        pass
    elif kind == "landmark" and value and (scene is None or scene.location_by_name(value) is not None):
        pass
    else:
        return None
    return OracleReply(query="", useful=True, kind=kind, value=value, text=reply_text(kind, value))


class InteractiveOracle:
    """以人类为神谕：通过提示通道读取回答"""

    def __init__(self, scene: SceneGraph, channel: PromptChannel,
                 max_attempts: int = config.INTERACTIVE_MAX_ATTEMPTS):
        self.scene = scene
        self.channel = channel
        self.max_attempts = max_attempts
        self.n_answered = 0
        self.active = True

    def close(self) -> None:
        self.active = False

    def answer(self, query: str, remaining: Sequence[str], useful: Optional[bool] = None) -> OracleReply:
        if not self.active:
            raise EpisodeStateError("回合已结束，交互用户不再回答")
        reply = interactive_answer(query, remaining, self.channel, self.scene, self.max_attempts)
        self.n_answered += 1
        return reply


def interactive_answer(query: str, remaining: Sequence[str], channel: PromptChannel,
                       scene: Optional[SceneGraph] = None,
                       max_attempts: int = config.INTERACTIVE_MAX_ATTEMPTS) -> OracleReply:
    """
    向人类提问；连续 max_attempts 次非法输入后视为无效回答
    """
    if max_attempts < 1:
        raise ValueError(f"max_attempts 必须为正: {max_attempts}")
    _check_query(query)
    names: List[str] = list(remaining)
    if query == config.OPEN_QUERY:
        channel.write(f"智能体提问：您要找的是哪一个？候选: {', '.join(names)}")
    else:
        channel.write(f"智能体提问：目标的 {query} 是什么？候选: {', '.join(names)}")
    channel.write("请输入 kind=value（kind 为 color/size/landmark）或 pass")
    for attempt in range(max_attempts):
        parsed = parse_human_reply(channel.readline(), scene)
        if parsed is not None:
            return parsed.model_copy(update={"query": query})
        if attempt < max_attempts - 1:
            channel.write("输入无法识别，请重新输入（例如 color=red）")
    logger.warning(f"连续 {max_attempts} 次输入无法识别，按无效回答处理")
    return OracleReply(query=query, useful=False)
