"""
基准生成测试
"""
import numpy as np
import pytest

import config
from benchgen import (
    BenchConfig, build_benchmark, generate_scene, inject_ambiguity, load_benchmark, save_benchmark,
    uniquely_identified,
)
from errors import ArtifactMissingError, ConfigError, InjectionError
from scene_model import difficulty_for

SMALL = dict(n_train_scenes=6, n_test_scenes=3, n_train_tasks=30, n_test_tasks=20, seed=11)


@pytest.fixture(scope="module")
def bench():
    return build_benchmark(BenchConfig(**SMALL))


def _dump_scenes(bench):
    return {scene_id: scene.model_dump() for scene_id, scene in bench.scenes.items()}


def test_split_counts_and_manifest(bench):
    assert len(bench.train_tasks) == 30 and len(bench.test_tasks) == 20
    manifest = bench.manifest
    assert manifest["counts"] == {"train": 30, "test": 20}
    assert len(manifest["train_scene_ids"]) == 6 and len(manifest["test_scene_ids"]) == 3
    assert sum(manifest["difficulty_histogram"]["train"].values()) == 30
    assert manifest["n_unseen_test_tasks"] == round(config.UNSEEN_FRACTION * 20)
    assert len({t.task_id for t in bench.train_tasks + bench.test_tasks}) == 50


def test_every_task_is_well_formed(bench):
    for task in bench.train_tasks + bench.test_tasks:
        scene = bench.scene_of(task)
        members = sorted(o.id for o in scene.objects if o.category == task.category)
        assert list(task.candidate_ids) == members
        assert task.gt_target_id in task.candidate_ids
        assert task.difficulty == difficulty_for(len(members))
        assert 2 <= len(members) <= config.MAX_CANDIDATES
        assert task.start_location_id not in {scene.object(m).location_id for m in members}
        assert uniquely_identified([scene.object(m) for m in members])
        assert task.category in task.instruction


def test_object_landmarks_match_their_locations(bench):
    for scene in bench.scenes.values():
        for obj in scene.objects:
            assert obj.attributes["landmark"] == scene.location(obj.location_id).name


def test_withheld_categories_only_in_test_split(bench):
    unseen = set(config.UNSEEN_CATEGORIES)
    assert not any(t.unseen_category or t.category in unseen for t in bench.train_tasks)
    for scene_id in bench.manifest["train_scene_ids"]:
        assert not {o.category for o in bench.scenes[scene_id].objects} & unseen
    assert all(t.unseen_category == (t.category in unseen) for t in bench.test_tasks)
    assert {t.scene_id for t in bench.train_tasks}.isdisjoint({t.scene_id for t in bench.test_tasks})


def test_generation_ignores_worker_count():
    cfg = BenchConfig(**SMALL)
    serial = build_benchmark(cfg, workers=1)
    parallel = build_benchmark(cfg, workers=4)
    assert [t.model_dump() for t in serial.test_tasks] == [t.model_dump() for t in parallel.test_tasks]
    assert _dump_scenes(serial) == _dump_scenes(parallel)


def test_different_seeds_give_different_benchmarks(bench):
    other = build_benchmark(BenchConfig(**{**SMALL, "seed": 12}))
    assert [t.gt_target_id for t in other.train_tasks] != [t.gt_target_id for t in bench.train_tasks] \
        or _dump_scenes(other) != _dump_scenes(bench)


def test_save_and_load(tmp_path, bench):
    root = str(tmp_path / "bench")
    save_benchmark(bench, root)
    loaded = load_benchmark(root)
    assert [t.task_id for t in loaded.test_tasks] == [t.task_id for t in bench.test_tasks]
    assert _dump_scenes(loaded) == _dump_scenes(bench)
    assert loaded.train_tasks[0].model_dump() == bench.train_tasks[0].model_dump()
    with pytest.raises(ArtifactMissingError):
        load_benchmark(str(tmp_path / "missing"))


def test_inject_ambiguity_picks_matching_cluster():
    cfg = BenchConfig(**SMALL)
    rng = np.random.default_rng(5)
    scene = generate_scene(cfg, rng, "s", clusters=[("mug", 3)], filler_categories=("pen", "lamp"))
    task = inject_ambiguity(scene, 3, rng)
    assert task.category == "mug" and len(task.candidate_ids) == 3
    with pytest.raises(InjectionError):
        inject_ambiguity(scene, 5, rng)
    with pytest.raises(InjectionError):
        inject_ambiguity(scene, 3, rng, category="pen")


def test_bench_config_validation_and_presets():
    with pytest.raises(ValueError):
        BenchConfig(n_train_scenes=0)
    with pytest.raises(ValueError):
        BenchConfig(candidate_distribution={2: 0.5, 3: 0.4})
    with pytest.raises(ValueError):
        BenchConfig(candidate_distribution={1: 1.0})
    with pytest.raises(ValueError):
        BenchConfig(unseen_fraction=1.5)
    large = BenchConfig.from_preset("paper", seed=3)
    assert large.n_test_tasks == config.PRESETS["paper"]["n_test_tasks"] and large.seed == 3
    with pytest.raises(ConfigError):
        BenchConfig.from_preset("huge")
