"""
测试公共设施
小场景构造器；慢速验收测试只在 RUN_SLOW=1 时运行
"""
import os
from typing import Iterable, Optional, Sequence, Tuple

import pytest

from scene_model import Location, MemorySeedEntry, ObjectInstance, SceneGraph, Task, difficulty_for

# (位置ID, x, y, 名称)
LocationSpec = Tuple[str, float, float, str]
# (物体ID, 类别, 颜色, 尺寸, 位置ID)
ObjectSpec = Tuple[str, str, str, str, str]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 长时间验收测试（设置 RUN_SLOW=1 运行）")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="设置 RUN_SLOW=1 运行慢速测试")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def build_scene(locations: Sequence[LocationSpec], objects: Sequence[ObjectSpec],
                scene_id: str = "scene_t") -> SceneGraph:
    names = {loc_id: name for loc_id, _, _, name in locations}
    return SceneGraph(
        scene_id=scene_id,
        locations=[Location(id=loc_id, coords=(x, y), name=name) for loc_id, x, y, name in locations],
        objects=[
            ObjectInstance(id=obj_id, category=category,
                           attributes={"color": color, "size": size, "landmark": names[loc_id]},
                           location_id=loc_id)
            for obj_id, category, color, size, loc_id in objects
        ],
    )


def build_task(scene: SceneGraph, category: str, target: str, start: str,
               memory_seed: Iterable[MemorySeedEntry] = (), task_id: str = "task_t",
               candidates: Optional[Sequence[str]] = None) -> Task:
    ids = tuple(sorted(candidates or (o.id for o in scene.objects if o.category == category)))
    return Task(
        task_id=task_id,
        scene_id=scene.scene_id,
        instruction=f"Find the {category}",
        category=category,
        candidate_ids=ids,
        gt_target_id=target,
        start_location_id=start,
        difficulty=difficulty_for(len(ids)),
        memory_seed=tuple(memory_seed),
    )


@pytest.fixture
def make_scene():
    return build_scene


@pytest.fixture
def make_task():
    return build_task


@pytest.fixture
def two_mug_scene() -> SceneGraph:
    """起点居中，两个颜色不同的杯子分别在左右 5 米处"""
    return build_scene(
        [("loc_s", 0.0, 0.0, "desk"), ("loc_a", 5.0, 0.0, "sink"), ("loc_b", -5.0, 0.0, "sofa")],
        [
            ("mug_1", "mug", "red", "small", "loc_a"),
            ("mug_2", "mug", "blue", "small", "loc_b"),
            ("book_1", "book", "green", "large", "loc_s"),
        ],
    )


@pytest.fixture
def desk_scene() -> SceneGraph:
    """三个杯子分布在三个位置、另有一个旁观位置，用于环境性质测试"""
    return build_scene(
        [
            ("loc_00", 0.0, 0.0, "workbench"),
            ("loc_01", 1.0, 0.0, "sink"),
            ("loc_02", 1.0, 1.0, "sofa"),
            ("loc_03", 0.0, 2.0, "bookshelf"),
            ("loc_04", -1.0, 0.5, "nightstand"),
        ],
        [
            ("mug_1", "mug", "red", "small", "loc_01"),
            ("mug_2", "mug", "blue", "small", "loc_02"),
            ("mug_3", "mug", "red", "large", "loc_03"),
            ("pen_1", "pen", "black", "small", "loc_01"),
            ("lamp_1", "lamp", "white", "medium", "loc_04"),
        ],
        scene_id="scene_desk",
    )
