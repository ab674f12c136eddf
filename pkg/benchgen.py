"""
基准生成
程序化生成桌面级场景图，注入同类别歧义得到搜索任务，并划分训练/测试（含未见类别）
"""
import json
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

import config
from errors import ArtifactMissingError, ConfigError, GenerationError, InjectionError
from memory_store import memory_seed_entries, seed_memory
from scene_model import (
    Location, ObjectInstance, SceneGraph, Task, difficulty_for, load_scene, load_task, save_scene, save_task,
)

MANIFEST_FILE = "manifest.json"


class BenchConfig(BaseModel):
    """基准生成参数"""

    n_train_scenes: int = 40
    n_test_scenes: int = 15
    n_train_tasks: int = 400
    n_test_tasks: int = 200
    locations_range: Tuple[int, int] = config.LOCATIONS_RANGE
    filler_objects_range: Tuple[int, int] = config.FILLER_OBJECTS_RANGE
    candidate_distribution: Dict[int, float] = Field(default_factory=lambda: dict(config.CANDIDATE_DISTRIBUTION))
    unseen_fraction: float = config.UNSEEN_FRACTION
    scene_diameter: float = config.SCENE_DIAMETER
    p_cover: float = config.MEMORY_P_COVER
    p_stale: float = config.MEMORY_P_STALE
    seed: int = 0
    preset: str = "desk"

    @model_validator(mode="after")
    def _check(self):
        if min(self.n_train_scenes, self.n_test_scenes) < 1:
            raise ValueError("训练与测试场景数必须为正")
        if self.n_train_tasks < 0 or self.n_test_tasks < 0:
            raise ValueError("任务数不能为负")
        if not 0.0 <= self.unseen_fraction <= 1.0:
            raise ValueError(f"unseen_fraction 必须在 [0, 1] 内: {self.unseen_fraction}")
        lo, hi = self.locations_range
        if not 2 <= lo <= hi <= len(config.LOCATION_NAMES):
            raise ValueError(f"locations_range 非法: {self.locations_range}")
        if hi < 3:
            raise ValueError("每个场景至少需要3个位置才能容纳候选与起点")
        if not 0 <= self.filler_objects_range[0] <= self.filler_objects_range[1]:
            raise ValueError(f"filler_objects_range 非法: {self.filler_objects_range}")
        dist = self.candidate_distribution
        if not dist or any(not 2 <= k <= config.MAX_CANDIDATES for k in dist):
            raise ValueError(f"候选数分布的取值必须在 [2, {config.MAX_CANDIDATES}] 内")
        if any(p < 0 for p in dist.values()) or not math.isclose(sum(dist.values()), 1.0, abs_tol=1e-9):
            raise ValueError("候选数分布的概率必须非负且和为1")
        if self.scene_diameter <= 0:
            raise ValueError("scene_diameter 必须为正")
        return self

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "BenchConfig":
        if name not in config.PRESETS:
            raise ConfigError(f"未知规模预设: {name}，可选 {list(config.PRESETS)}")
        return cls(**{**config.PRESETS[name], "preset": name, **overrides})


class Benchmark(BaseModel):
    scenes: Dict[str, SceneGraph]
    train_tasks: List[Task]
    test_tasks: List[Task]
    manifest: dict

    def scene_of(self, task: Task) -> SceneGraph:
        return self.scenes[task.scene_id]


# ============ 场景 ============

def uniquely_identified(objects: Sequence[ObjectInstance]) -> bool:
    """同类簇内每个物体至少有一种属性取值与其余成员都不同"""
    for obj in objects:
        others = [o for o in objects if o.id != obj.id]
        if not any(all(o.attributes[k] != obj.attributes[k] for o in others) for k in config.ATTRIBUTE_KINDS):
            return False
    return True


def _place_locations(n: int, diameter: float, rng: np.random.Generator) -> List[Tuple[float, float]]:
    side = diameter / math.sqrt(2.0)
    coords = rng.uniform(0.0, side, size=(n, 2))
    return [(round(float(x), 3), round(float(y), 3)) for x, y in coords]


def _make_object(object_id: str, category: str, location: Location, rng: np.random.Generator) -> ObjectInstance:
    return ObjectInstance(
        id=object_id,
        category=category,
        attributes={
            "color": config.COLORS[int(rng.integers(len(config.COLORS)))],
            "size": config.SIZES[int(rng.integers(len(config.SIZES)))],
            "landmark": location.name,
        },
        location_id=location.id,
    )


def _make_cluster(category: str, size: int, locations: List[Location],
                  rng: np.random.Generator) -> List[ObjectInstance]:
    for _ in range(config.GENERATION_RETRIES):
        members = [
            _make_object(f"{category}_{k + 1}", category, locations[int(rng.integers(len(locations)))], rng)
            for k in range(size)
        ]
        occupied = {o.location_id for o in members}
        # 至少留出一个没有候选的位置作为起点
        if len(occupied) < len(locations) and uniquely_identified(members):
            return members
    raise GenerationError(f"类别 {category} 的 {size} 个实例在 {config.GENERATION_RETRIES} 次重采样后仍无法区分")


def generate_scene(bench_config: BenchConfig, rng: np.random.Generator, scene_id: str = "scene",
                   clusters: Sequence[Tuple[str, int]] = (),
                   filler_categories: Sequence[str] = config.CATEGORIES) -> SceneGraph:
    """
    生成一个场景

    Args:
        bench_config: 生成参数
        rng: 随机数发生器
        scene_id: 场景ID
        clusters: 需要的同类簇 (类别, 实例数)
        filler_categories: 填充物体可用的类别（每个类别至多一个，不构成歧义）

    Returns:
        SceneGraph
    """
    lo, hi = bench_config.locations_range
    n_loc = int(rng.integers(lo, hi + 1))
    names = rng.choice(len(config.LOCATION_NAMES), size=n_loc, replace=False)
    coords = _place_locations(n_loc, bench_config.scene_diameter, rng)
    locations = [
        Location(id=f"loc_{j:02d}", coords=coords[j], name=config.LOCATION_NAMES[int(names[j])])
        for j in range(n_loc)
    ]

    objects: List[ObjectInstance] = []
    used = set()
    for category, size in clusters:
        if category in used:
            raise GenerationError(f"场景 {scene_id} 中类别 {category} 重复请求")
        used.add(category)
        objects.extend(_make_cluster(category, size, locations, rng))

    pool = [c for c in filler_categories if c not in used]
    f_lo, f_hi = bench_config.filler_objects_range
    n_filler = min(int(rng.integers(f_lo, f_hi + 1)), len(pool))
    for k in rng.choice(len(pool), size=n_filler, replace=False) if n_filler else []:
        category = pool[int(k)]
        location = locations[int(rng.integers(n_loc))]
        objects.append(_make_object(f"{category}_1", category, location, rng))

    return SceneGraph(scene_id=scene_id, locations=locations, objects=objects,
                      rng_seed=int(rng.integers(2 ** 31)))


# ============ 任务 ============

def inject_ambiguity(scene: SceneGraph, desired_count: int, rng: np.random.Generator,
                     task_id: Optional[str] = None, category: Optional[str] = None,
                     p_cover: float = config.MEMORY_P_COVER, p_stale: float = config.MEMORY_P_STALE) -> Task:
    """
    在场景中选一个恰好有 desired_count 个实例的类别，生成只说类别的指令

    目标在簇内均匀抽取，起点在没有候选的位置中均匀抽取，并预置本任务的先验记忆。

    Raises:
        InjectionError: 没有合适的类别簇或没有可用起点
    """
    counts = Counter(o.category for o in scene.objects)
    options = sorted(c for c, n in counts.items() if n == desired_count and (category is None or c == category))
    if not options:
        raise InjectionError(f"场景 {scene.scene_id} 中没有实例数为 {desired_count} 的类别"
                             + (f"（限定 {category}）" if category else ""))
    chosen = options[int(rng.integers(len(options)))]
    members = sorted(o.id for o in scene.objects if o.category == chosen)
    target = members[int(rng.integers(len(members)))]
    occupied = {scene.object(m).location_id for m in members}
    starts = [loc.id for loc in scene.locations if loc.id not in occupied]
    if not starts:
        raise InjectionError(f"场景 {scene.scene_id} 中类别 {chosen} 占满了所有位置，没有可用起点")
    start = starts[int(rng.integers(len(starts)))]
    store = seed_memory(scene, p_cover, p_stale, rng)
    return Task(
        task_id=task_id or f"{scene.scene_id}_{chosen}",
        scene_id=scene.scene_id,
        instruction=config.INSTRUCTION_TEMPLATE.format(category=chosen),
        category=chosen,
        candidate_ids=tuple(members),
        gt_target_id=target,
        start_location_id=start,
        difficulty=difficulty_for(len(members)),
        memory_seed=memory_seed_entries(store),
        unseen_category=chosen in config.UNSEEN_CATEGORIES,
    )


def _split_counts(total: int, parts: int) -> List[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _sample_count(distribution: Dict[int, float], rng: np.random.Generator) -> int:
    keys = sorted(distribution)
    return int(keys[int(rng.choice(len(keys), p=[distribution[k] for k in keys]))])


def _build_scene_tasks(bench_config: BenchConfig, split: str, index: int, n_tasks: int,
                       unseen_flags: List[bool]) -> Tuple[SceneGraph, List[Task]]:
    """一个场景及其上的全部任务；随机流只由 (主种子, 划分, 场景序号) 决定"""
    split_code = 0 if split == "train" else 1
    rng = np.random.default_rng([bench_config.seed, split_code, index])
    seen = [c for c in config.CATEGORIES if c not in config.UNSEEN_CATEGORIES]
    unseen = list(config.UNSEEN_CATEGORIES)

    # 每个任务对应一个同类簇；类别在场景内不重复，用尽后复用已有簇
    plans: List[Tuple[str, int]] = []
    clusters: Dict[str, int] = {}
    for flag in unseen_flags:
        size = _sample_count(bench_config.candidate_distribution, rng)
        pool = [c for c in (unseen if flag else seen) if c not in clusters]
        if pool:
            category = pool[int(rng.integers(len(pool)))]
            clusters[category] = size
        else:
            reusable = sorted(c for c in clusters if (c in unseen) == flag)
            category = reusable[int(rng.integers(len(reusable)))]
            size = clusters[category]
        plans.append((category, size))

    scene_id = f"{split}_scene_{index:03d}"
    scene = generate_scene(bench_config, rng, scene_id, list(clusters.items()), filler_categories=seen)
    tasks = [
        inject_ambiguity(scene, size, rng, task_id=f"{scene_id}_task_{t:02d}", category=category,
                         p_cover=bench_config.p_cover, p_stale=bench_config.p_stale)
        for t, (category, size) in enumerate(plans[:n_tasks])
    ]
    return scene, tasks


def build_benchmark(bench_config: Optional[BenchConfig] = None, workers: int = 1) -> Benchmark:
    """
    先划分场景，再在每个场景上生成任务；测试集中按比例使用训练场景从未出现的类别

    Args:
        bench_config: 生成参数
        workers: 并行线程数（每个场景的随机流独立，结果与并行度无关）

    Returns:
        Benchmark
    """
    cfg = bench_config or BenchConfig()
    logger.info("=" * 60)
    logger.info(f"生成基准（{cfg.preset}，种子 {cfg.seed}）: 训练 {cfg.n_train_scenes} 场景/{cfg.n_train_tasks} 任务，"
                f"测试 {cfg.n_test_scenes} 场景/{cfg.n_test_tasks} 任务")
    logger.info("=" * 60)

    n_unseen = int(round(cfg.unseen_fraction * cfg.n_test_tasks))
    flag_rng = np.random.default_rng([cfg.seed, 9])
    unseen_positions = set(flag_rng.choice(cfg.n_test_tasks, size=n_unseen, replace=False).tolist()) \
        if n_unseen else set()

    jobs = []
    for split, n_scenes, n_tasks in (("train", cfg.n_train_scenes, cfg.n_train_tasks),
                                     ("test", cfg.n_test_scenes, cfg.n_test_tasks)):
        offset = 0
        for index, count in enumerate(_split_counts(n_tasks, n_scenes)):
            flags = [split == "test" and (offset + t) in unseen_positions for t in range(count)]
            jobs.append((split, index, count, flags))
            offset += count

    def run(job):
        split, index, count, flags = job
        return split, _build_scene_tasks(cfg, split, index, count, flags)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(tqdm(executor.map(run, jobs), total=len(jobs), desc="生成场景"))
    else:
        results = [run(job) for job in tqdm(jobs, desc="生成场景")]

    scenes: Dict[str, SceneGraph] = {}
    split_tasks: Dict[str, List[Task]] = {"train": [], "test": []}
    for split, (scene, tasks) in results:
        scenes[scene.scene_id] = scene
        split_tasks[split].extend(tasks)

    manifest = {
        "format_version": config.FORMAT_VERSION,
        "seed": cfg.seed,
        "preset": cfg.preset,
        "config": cfg.model_dump(mode="json"),
        "withheld_categories": list(config.UNSEEN_CATEGORIES),
        "train_scene_ids": sorted(s for s in scenes if s.startswith("train_")),
        "test_scene_ids": sorted(s for s in scenes if s.startswith("test_")),
        "counts": {split: len(tasks) for split, tasks in split_tasks.items()},
        "difficulty_histogram": {
            split: dict(sorted(Counter(t.difficulty.value for t in tasks).items()))
            for split, tasks in split_tasks.items()
        },
        "n_unseen_test_tasks": sum(t.unseen_category for t in split_tasks["test"]),
    }
    logger.info(f"基准生成完成: {len(scenes)} 个场景，难度分布 {manifest['difficulty_histogram']}")
    return Benchmark(scenes=scenes, train_tasks=split_tasks["train"], test_tasks=split_tasks["test"],
                     manifest=manifest)


# ============ 持久化 ============

def save_benchmark(bench: Benchmark, root: str) -> None:
    """目录结构: manifest.json + scenes/<scene_id>.json + tasks/<task_id>.json"""
    os.makedirs(os.path.join(root, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(root, "tasks"), exist_ok=True)
    for scene_id, scene in bench.scenes.items():
        save_scene(scene, os.path.join(root, "scenes", f"{scene_id}.json"))
    for task in bench.train_tasks + bench.test_tasks:
        save_task(task, os.path.join(root, "tasks", f"{task.task_id}.json"))
    manifest = dict(bench.manifest)
    manifest["train_task_ids"] = [t.task_id for t in bench.train_tasks]
    manifest["test_task_ids"] = [t.task_id for t in bench.test_tasks]
    with open(os.path.join(root, MANIFEST_FILE), "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
    logger.info(f"基准已保存到 {root}")


def load_benchmark(root: str) -> Benchmark:
    path = os.path.join(root, MANIFEST_FILE)
    if not os.path.exists(path):
        raise ArtifactMissingError(path, "gen")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != config.FORMAT_VERSION:
        raise ConfigError(f"{path} 的格式版本不受支持")
    scenes = {
        scene_id: load_scene(os.path.join(root, "scenes", f"{scene_id}.json"))
        for scene_id in manifest["train_scene_ids"] + manifest["test_scene_ids"]
    }

    def tasks_of(ids: List[str]) -> List[Task]:
        return [load_task(os.path.join(root, "tasks", f"{task_id}.json")) for task_id in ids]

    return Benchmark(scenes=scenes, train_tasks=tasks_of(manifest["train_task_ids"]),
                     test_tasks=tasks_of(manifest["test_task_ids"]), manifest=manifest)
