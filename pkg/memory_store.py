"""
情景记忆
预置的先验记忆（部分覆盖、部分过期）与回合内观察写入，按类别或物体ID检索
"""
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator

import config
from scene_model import MemorySeedEntry, SceneGraph


class MemoryParams(BaseModel):
    """
    记忆参数

    use_task_seed 为 True 时按任务中持久化的预置记忆构建（评估可复现），
    否则在 reset 时用回合种子重新采样
    """

    p_cover: float = config.MEMORY_P_COVER
    p_stale: float = config.MEMORY_P_STALE
    use_task_seed: bool = True

    @model_validator(mode="after")
    def _check(self):
        for name in ("p_cover", "p_stale"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} 必须在 [0, 1] 内: {value}")
        return self


class FactSource(str, Enum):
    SEED = "Seed"
    OBSERVED = "Observed"


class MemoryFact(BaseModel):
    model_config = ConfigDict(frozen=True)

    object_id: str
    category: str
    attributes: Dict[str, str]
    recorded_location_id: str
    stale: bool
    source: FactSource


class MemoryStore:
    """以物体ID为键的记忆库，每个物体至多一条事实"""

    def __init__(self, facts: Optional[Iterable[MemoryFact]] = None):
        self._facts: Dict[str, MemoryFact] = {}
        for fact in facts or ():
            self.upsert(fact)

    def upsert(self, fact: MemoryFact) -> None:
        self._facts[fact.object_id] = fact

    def get(self, object_id: str) -> Optional[MemoryFact]:
        return self._facts.get(object_id)

    def facts(self) -> List[MemoryFact]:
        return [self._facts[k] for k in sorted(self._facts)]

    def clone(self) -> "MemoryStore":
        other = MemoryStore()
        other._facts = dict(self._facts)
        return other

    def __len__(self) -> int:
        return len(self._facts)

    def __contains__(self, object_id: str) -> bool:
        return object_id in self._facts


def _snapshot(scene: SceneGraph, object_id: str, recorded_location_id: str) -> Dict[str, str]:
    attributes = dict(scene.object(object_id).attributes)
    attributes["landmark"] = scene.location(recorded_location_id).name
    return attributes


def _seed_fact(scene: SceneGraph, object_id: str, recorded_location_id: str, stale: bool) -> MemoryFact:
    obj = scene.object(object_id)
    return MemoryFact(
        object_id=object_id,
        category=obj.category,
        attributes=_snapshot(scene, object_id, recorded_location_id),
        recorded_location_id=recorded_location_id,
        stale=stale,
        source=FactSource.SEED,
    )


def seed_memory(scene: SceneGraph, p_cover: float, p_stale: float, rng: np.random.Generator) -> MemoryStore:
    """
    生成预置记忆：每个物体以 p_cover 概率被覆盖，被覆盖者以 p_stale 概率记录为错误位置

    Args:
        scene: 场景
        p_cover: 覆盖概率
        p_stale: 过期概率
        rng: 随机数发生器

    Returns:
        MemoryStore
    """
    store = MemoryStore()
    for obj in sorted(scene.objects, key=lambda o: o.id):
        if rng.random() >= p_cover:
            continue
        stale = bool(rng.random() < p_stale)
        recorded = obj.location_id
        if stale:
            others = [loc.id for loc in scene.locations if loc.id != obj.location_id]
            recorded = others[int(rng.integers(len(others)))]
        store.upsert(_seed_fact(scene, obj.id, recorded, stale))
    n_stale = sum(1 for f in store.facts() if f.stale)
    logger.debug(f"场景 {scene.scene_id} 预置记忆 {len(store)} 条，其中过期 {n_stale} 条")
    return store


def memory_seed_entries(store: MemoryStore) -> Tuple[MemorySeedEntry, ...]:
    """导出预置记忆条目，供任务持久化"""
    return tuple(
        MemorySeedEntry(object_id=f.object_id, recorded_location_id=f.recorded_location_id, is_stale=f.stale)
        for f in store.facts()
        if f.source == FactSource.SEED
    )


def store_from_seed(scene: SceneGraph, entries: Iterable[MemorySeedEntry]) -> MemoryStore:
    return MemoryStore(_seed_fact(scene, e.object_id, e.recorded_location_id, e.is_stale) for e in entries)


def write_observation(store: MemoryStore, scene: SceneGraph, location_id: str) -> List[MemoryFact]:
    """把某位置上可见的全部物体写入记忆（覆盖旧事实），返回写入的事实"""
    written = []
    for obj in scene.objects_at(location_id):
        fact = MemoryFact(
            object_id=obj.id,
            category=obj.category,
            attributes=dict(obj.attributes),
            recorded_location_id=location_id,
            stale=False,
            source=FactSource.OBSERVED,
        )
        store.upsert(fact)
        written.append(fact)
    return written


def retrieve(store: MemoryStore, key: str) -> List[MemoryFact]:
    """按类别或物体ID检索，结果按物体ID排序"""
    return [f for f in store.facts() if f.category == key or f.object_id == key]


def coverage(store: MemoryStore, object_ids: Iterable[str]) -> float:
    ids = list(object_ids)
    if not ids:
        return 0.0
    return sum(1 for o in ids if o in store) / len(ids)


def dump(store: MemoryStore) -> List[Dict[str, Any]]:
    """记忆库全部事实（含过期标记），按物体ID排序，写入轨迹日志"""
    return [fact.model_dump(mode="json") for fact in store.facts()]
