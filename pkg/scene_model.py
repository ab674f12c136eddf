"""
场景模型
位置、物体实例、场景图与搜索任务的定义，以及距离、候选集查询和JSON持久化
"""
import json
import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, PrivateAttr, field_validator, model_validator

import config
from errors import ConfigError, SceneLookupError, TaskValidationError


class Difficulty(str, Enum):
    """难度分档：按候选数量（干扰物数量 = 候选数 - 1）"""

    EASY = "Easy"
    MEDIUM = "Medium"
    HARD = "Hard"


def difficulty_for(n_candidates: int) -> Difficulty:
    """根据候选数量得到难度分档"""
    if n_candidates < 2:
        raise ValueError(f"候选数量至少为2，实际为 {n_candidates}")
    if n_candidates == 2:
        return Difficulty.EASY
    if n_candidates == 3:
        return Difficulty.MEDIUM
    return Difficulty.HARD


class Location(BaseModel):
    """可导航的位置点"""

    model_config = ConfigDict(frozen=True)

    id: str
    coords: Tuple[float, float]
    name: str

    @field_validator("coords")
    @classmethod
    def _finite(cls, value):
        if not all(math.isfinite(v) for v in value):
            raise ValueError(f"坐标必须为有限值: {value}")
        return value


class ObjectInstance(BaseModel):
    """场景中的物体实例"""

    model_config = ConfigDict(frozen=True)

    id: str
    category: str
    attributes: Dict[str, str]
    location_id: str

    @field_validator("attributes")
    @classmethod
    def _registry(cls, value):
        if set(value) != set(config.ATTRIBUTE_KINDS):
            raise ValueError(f"属性必须恰好包含 {config.ATTRIBUTE_KINDS}，实际为 {sorted(value)}")
        return value


class SceneGraph(BaseModel):
    """场景图：位置集合 + 物体集合"""

    model_config = ConfigDict(frozen=True)

    scene_id: str
    locations: List[Location]
    objects: List[ObjectInstance]
    rng_seed: int = 0
    format_version: int = config.FORMAT_VERSION

    _location_index: Dict[str, int] = PrivateAttr(default_factory=dict)
    _object_index: Dict[str, int] = PrivateAttr(default_factory=dict)
    _distances: Optional[np.ndarray] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _check_ids(self):
        if len(self.locations) < 2:
            raise ValueError(f"场景 {self.scene_id} 至少需要2个位置")
        location_ids = [loc.id for loc in self.locations]
        if len(set(location_ids)) != len(location_ids):
            raise ValueError(f"场景 {self.scene_id} 存在重复的位置ID")
        object_ids = [obj.id for obj in self.objects]
        if len(set(object_ids)) != len(object_ids):
            raise ValueError(f"场景 {self.scene_id} 存在重复的物体ID")
        names = {loc.id: loc.name for loc in self.locations}
        if len(set(names.values())) != len(names):
            raise ValueError(f"场景 {self.scene_id} 存在重复的位置名称")
        for obj in self.objects:
            if obj.location_id not in names:
                raise ValueError(f"物体 {obj.id} 引用了未知位置 {obj.location_id}")
            # 地标属性即所在位置的名称
            if obj.attributes["landmark"] != names[obj.location_id]:
                raise ValueError(f"物体 {obj.id} 的地标 {obj.attributes['landmark']} 与所在位置不符")
        return self

    def model_post_init(self, __context) -> None:
        self._location_index = {loc.id: i for i, loc in enumerate(self.locations)}
        self._object_index = {obj.id: i for i, obj in enumerate(self.objects)}
        coords = np.array([loc.coords for loc in self.locations], dtype=float)
        diff = coords[:, None, :] - coords[None, :, :]
        self._distances = np.sqrt((diff ** 2).sum(axis=-1))

    def location(self, location_id: str) -> Location:
        try:
            return self.locations[self._location_index[location_id]]
        except KeyError:
            raise SceneLookupError("位置", location_id) from None

    def object(self, object_id: str) -> ObjectInstance:
        try:
            return self.objects[self._object_index[object_id]]
        except KeyError:
            raise SceneLookupError("物体", object_id) from None

    def has_location(self, location_id: str) -> bool:
        return location_id in self._location_index

    def has_object(self, object_id: str) -> bool:
        return object_id in self._object_index

    def location_index(self, location_id: str) -> int:
        try:
            return self._location_index[location_id]
        except KeyError:
            raise SceneLookupError("位置", location_id) from None

    def objects_at(self, location_id: str) -> List[ObjectInstance]:
        """位于某位置的全部物体（按ID排序）"""
        self.location(location_id)
        return sorted((o for o in self.objects if o.location_id == location_id), key=lambda o: o.id)

    def location_by_name(self, name: str) -> Optional[Location]:
        for loc in self.locations:
            if loc.name == name:
                return loc
        return None


class MemorySeedEntry(BaseModel):
    """任务中持久化的预置记忆条目"""

    model_config = ConfigDict(frozen=True)

    object_id: str
    recorded_location_id: str
    is_stale: bool


class Task(BaseModel):
    """一次搜索任务"""

    model_config = ConfigDict(frozen=True)

    task_id: str
    scene_id: str
    instruction: str
    category: str
    candidate_ids: Tuple[str, ...]
    gt_target_id: str
    start_location_id: str
    difficulty: Difficulty
    memory_seed: Tuple[MemorySeedEntry, ...] = ()
    unseen_category: bool = False
    format_version: int = config.FORMAT_VERSION

    @model_validator(mode="after")
    def _check_candidates(self):
        n = len(self.candidate_ids)
        if not 2 <= n <= config.MAX_CANDIDATES:
            raise ValueError(f"任务 {self.task_id} 的候选数量 {n} 不在 [2, {config.MAX_CANDIDATES}] 内")
        if len(set(self.candidate_ids)) != n:
            raise ValueError(f"任务 {self.task_id} 的候选ID重复")
        if self.gt_target_id not in self.candidate_ids:
            raise ValueError(f"任务 {self.task_id} 的目标 {self.gt_target_id} 不在候选集中")
        if self.difficulty != difficulty_for(n):
            raise ValueError(f"任务 {self.task_id} 的难度 {self.difficulty.value} 与候选数量 {n} 不一致")
        return self


def distance(scene: SceneGraph, a: str, b: str) -> float:
    """两个位置之间的欧氏距离"""
    i = scene.location_index(a)
    j = scene.location_index(b)
    return float(scene._distances[i, j])


def candidates_of(scene: SceneGraph, category: str) -> List[str]:
    """场景中属于某类别的全部物体ID（排序后返回，可能为空）"""
    return sorted(o.id for o in scene.objects if o.category == category)


def scene_diameter(scene: SceneGraph) -> float:
    """场景中任意两位置间的最大距离"""
    return float(scene._distances.max())


def validate_task(task: Task, scene: SceneGraph) -> None:
    """
    校验任务与场景的一致性

    Args:
        task: 待校验任务
        scene: 任务所属场景

    Raises:
        TaskValidationError: 任意ID无法解析或候选集与类别不符
    """
    if task.scene_id != scene.scene_id:
        raise TaskValidationError(f"任务 {task.task_id} 属于场景 {task.scene_id}，而非 {scene.scene_id}")
    if not scene.has_location(task.start_location_id):
        raise TaskValidationError(f"任务 {task.task_id} 的起点 {task.start_location_id} 不存在")
    for object_id in task.candidate_ids:
        if not scene.has_object(object_id):
            raise TaskValidationError(f"任务 {task.task_id} 的候选 {object_id} 不存在")
        if scene.object(object_id).category != task.category:
            raise TaskValidationError(f"任务 {task.task_id} 的候选 {object_id} 类别不是 {task.category}")
    if sorted(task.candidate_ids) != candidates_of(scene, task.category):
        raise TaskValidationError(f"任务 {task.task_id} 的候选集与场景中的 {task.category} 不一致")
    for entry in task.memory_seed:
        if not scene.has_object(entry.object_id) or not scene.has_location(entry.recorded_location_id):
            raise TaskValidationError(f"任务 {task.task_id} 的预置记忆引用了未知ID: {entry.object_id}")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    version = payload.get("format_version")
    if version != config.FORMAT_VERSION:
        raise ConfigError(f"{path} 的格式版本 {version} 不受支持（期望 {config.FORMAT_VERSION}）")
    return payload


def save_scene(scene: SceneGraph, path: str) -> None:
    _write_json(path, scene.model_dump(mode="json"))


def load_scene(path: str) -> SceneGraph:
    return SceneGraph.model_validate(_read_json(path))


def save_task(task: Task, path: str) -> None:
    _write_json(path, task.model_dump(mode="json"))


def load_task(path: str) -> Task:
    task = Task.model_validate(_read_json(path))
    logger.debug(f"加载任务 {task.task_id}（{task.difficulty.value}，候选 {len(task.candidate_ids)} 个）")
    return task
