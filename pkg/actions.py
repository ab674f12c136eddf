"""
动作定义
Navigate / Ask / GetMemory / Found 四类动作及其文本/线协议形式
"""
import re
from enum import Enum
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict


class ActionKind(str, Enum):
    NAVIGATE = "Navigate"
    ASK = "Ask"
    GET_MEMORY = "GetMemory"
    FOUND = "Found"


class Action(BaseModel):
    """
    智能体动作

    arg 的含义随动作类型变化：
    Navigate -> 位置ID；Ask -> 属性种类或 "open"；GetMemory -> 类别或物体ID；Found -> 物体ID
    """

    model_config = ConfigDict(frozen=True)

    kind: ActionKind
    arg: str

    def __str__(self) -> str:
        return f"{self.kind.value}({self.arg})"

    def to_wire(self) -> Dict[str, str]:
        return {"kind": self.kind.value, "arg": self.arg}


def navigate(location_id: str) -> Action:
    return Action(kind=ActionKind.NAVIGATE, arg=location_id)


def ask(query: str) -> Action:
    return Action(kind=ActionKind.ASK, arg=query)


def get_memory(key: str) -> Action:
    return Action(kind=ActionKind.GET_MEMORY, arg=key)


def found(object_id: str) -> Action:
    return Action(kind=ActionKind.FOUND, arg=object_id)


_TEXT_PATTERN = re.compile(r"^\s*(Navigate|Ask|GetMemory|Found)\(\s*([^()\s]+)\s*\)\s*$")


def parse_action(payload: Any) -> Optional[Action]:
    """
    解析外部策略给出的动作，无法解析时返回 None（由环境按格式错误处理）

    Args:
        payload: {"kind": ..., "arg": ...} 字典，或 "Navigate(loc_01)" 形式的文本
    """
    if isinstance(payload, dict):
        kind = payload.get("kind")
        arg = payload.get("arg")
        if not isinstance(kind, str) or not isinstance(arg, str) or not arg:
            return None
        try:
            return Action(kind=ActionKind(kind), arg=arg)
        except ValueError:
            return None
    if isinstance(payload, str):
        match = _TEXT_PATTERN.match(payload)
        if match is None:
            return None
        return Action(kind=ActionKind(match.group(1)), arg=match.group(2))
    return None
