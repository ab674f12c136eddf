"""
评估、报告与命令行流水线测试
"""
import json
import os

import pandas as pd
import pytest

import config
from benchgen import BenchConfig, build_benchmark
from cost_metrics import CostParams, DifficultyStats, MetricsReport
from errors import EXIT_CONFIG_ERROR, EXIT_OK, ConfigError
from evaluation import (
    EvalConfig, EvalResult, build_policy_factory, eval_episode_seed, evaluate_policy, label_dirname, ordering_checks,
    run_sensitivity_sweep, scaled_cost_params,
)
from main import build_parser, main, overrides_from_args
from memory_store import MemoryParams
from oracle_sim import OracleParams
from report_writer import (
    format_table, recompute_report, transcript_text, validate_report, write_comparison, write_eval_report,
)
from run_config import load_run_config

COST = CostParams()
ORACLE = OracleParams()
MEMORY = MemoryParams()


@pytest.fixture(scope="module")
def bench():
    return build_benchmark(BenchConfig(n_train_scenes=2, n_test_scenes=2, n_train_tasks=4, n_test_tasks=6,
                                       locations_range=(4, 5), seed=5))


# ============ 评估 ============

def test_evaluation_is_independent_of_worker_count(tmp_path, bench):
    factory = build_policy_factory("random")
    results = []
    for workers in (1, 3):
        log_dir = str(tmp_path / f"w{workers}")
        results.append(evaluate_policy(factory, "random", bench.test_tasks, bench.scenes, COST, ORACLE, MEMORY,
                                       eval_config=EvalConfig(seeds=[0, 1], workers=workers), log_dir=log_dir))
    serial, parallel = results
    for seed in (0, 1):
        assert [t.total_cost for t in serial.trajectories[seed]] == [t.total_cost for t in parallel.trajectories[seed]]
    assert serial.aggregate.sr == parallel.aggregate.sr
    assert len(serial.per_seed) == 2 and serial.aggregate.n_episodes == 12


def test_episode_seeds_differ_per_task_and_seed():
    seeds = {eval_episode_seed(s, i) for s in range(3) for i in range(10)}
    assert len(seeds) == 30


def test_report_recomputes_from_logs(tmp_path, bench):
    log_dir = str(tmp_path / "heuristic")
    result = evaluate_policy(build_policy_factory("heuristic"), "heuristic", bench.test_tasks, bench.scenes, COST,
                             ORACLE, MEMORY, eval_config=EvalConfig(seeds=[3, 4]), log_dir=log_dir)
    assert sorted(os.listdir(log_dir)) == ["trajectories_seed3.jsonl", "trajectories_seed4.jsonl"]
    again = recompute_report(log_dir, COST)
    assert again.label == "heuristic"
    assert again.aggregate.sr == pytest.approx(result.aggregate.sr)
    assert again.aggregate.swc == pytest.approx(result.aggregate.swc)
    assert again.aggregate.action_histogram == result.aggregate.action_histogram

    out_dir = str(tmp_path / "report")
    summary = write_eval_report(result, out_dir)
    assert "heuristic" in summary
    for name in ("metrics.json", "main_table.csv", "per_difficulty.txt", "per_ambiguity.txt", "strategy.txt",
                 "action_histogram.png", "templates.csv"):
        assert os.path.exists(os.path.join(out_dir, name))
    metrics_path = os.path.join(out_dir, "metrics.json")
    assert validate_report(metrics_path)
    text = format_table(result.aggregate)
    assert "SR n=1-2" in text and "SR n=3-4" in text and "memory rate" in text
    assert sum(s.n for s in result.aggregate.by_ambiguity.values()) == result.aggregate.n_episodes

    with open(metrics_path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    payload["per_seed"][0]["swc"] += 0.1
    with open(metrics_path, "w", encoding="utf-8") as f:
        json.dump(payload, f)
    assert not validate_report(metrics_path)


def test_transcript_reports_consistent_repricing(bench):
    task = bench.test_tasks[0]
    scene = bench.scene_of(task)
    result = evaluate_policy(build_policy_factory("heuristic"), "heuristic", [task], bench.scenes, COST, ORACLE,
                             MEMORY, eval_config=EvalConfig(seeds=[0]))
    text = transcript_text(result.trajectories[0][0], task, scene, COST)
    assert task.instruction in text and "重新计价一致" in text


def test_sensitivity_sweep_skips_invalid_orderings(bench):
    factories = {"heuristic": build_policy_factory("heuristic"), "random": build_policy_factory("random")}
    df = run_sensitivity_sweep(factories, bench.test_tasks, bench.scenes, COST, ORACLE, MEMORY,
                               eval_config=EvalConfig(seeds=[0]), parameters=("c_nav", "c_ask_base"),
                               factors=(0.5, 4.0))
    # c_nav×0.5 与提问代价相等、c_ask_base×4 超过移动代价，均违反代价序
    assert set(zip(df["parameter"], df["factor"])) == {("c_nav", 4.0), ("c_ask_base", 0.5)}
    assert len(df) == 4
    # 随机策略与代价无关，成功率不随代价参数变化
    assert df[df["policy"] == "random"]["SR"].nunique() == 1
    with pytest.raises(ConfigError):
        scaled_cost_params(COST, "c_teleport", 2.0)


def _result(label, sr, ttc):
    report = MetricsReport(
        label=label, n_episodes=10, n_successes=int(sr * 10), n_timeouts=0, sr=sr, ttc=ttc,
        swc=sr * config.C_REF / max(ttc, config.C_REF), mean_traj_len=3.0, mean_asks=1.0, mean_mems=0.5,
        mean_nav_distance=2.0, action_histogram={"Navigate": 10, "Ask": 10, "GetMemory": 5, "Found": 10},
        by_difficulty={"Easy": DifficultyStats(n=10, sr=sr, ttc=ttc)},
    )
    return EvalResult(label=label, aggregate=report, per_seed=[report])


def test_ordering_checks(tmp_path):
    results = {
        "Full": _result("Full", 0.8, 3.0),
        "w/o Dialogue": _result("w/o Dialogue", 0.4, 5.0),
        "w/o Memory": _result("w/o Memory", 0.6, 4.0),
        "w/o HC-GRPO": _result("w/o HC-GRPO", 0.7, 3.5),
    }
    checks = ordering_checks(results)
    assert all(holds for holds, _ in checks.values())
    assert set(checks) == {"sr_order", "ttc_memory", "swc_rl"}

    results["w/o Memory"] = _result("w/o Memory", 0.9, 2.5)
    checks = ordering_checks(results)
    assert not checks["sr_order"][0] and not checks["ttc_memory"][0]

    text = write_comparison(results, str(tmp_path), "ablation_table", "消融结果")
    assert "w/o Memory" in text
    with open(tmp_path / "ablation_table_checks.json", "r", encoding="utf-8") as f:
        assert json.load(f)["sr_order"]["holds"] is False


def test_policy_factory_errors():
    with pytest.raises(ConfigError):
        build_policy_factory("oracle_cheat")
    with pytest.raises(ConfigError):
        build_policy_factory("learned")
    with pytest.raises(ConfigError):
        build_policy_factory("external")
    assert label_dirname("w/o HC-GRPO") == "w_o_hc_grpo"


# ============ 运行配置 ============

def test_run_config_layers(tmp_path, monkeypatch):
    monkeypatch.delenv(config.OUTPUT_ROOT_ENV, raising=False)
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seeds": [1, 2], "bench": {"n_test_tasks": 7}, "cost": {"c_nav": 2.0}}),
                    encoding="utf-8")
    run_config = load_run_config(str(path), overrides={"seed": 9, "grpo": {"iterations": 4}})
    assert run_config.seeds == [1, 2] and run_config.cost.c_nav == 2.0
    assert run_config.bench.n_test_tasks == 7
    assert run_config.bench.n_train_tasks == config.PRESETS["desk"]["n_train_tasks"]
    assert run_config.bench.seed == 9 and run_config.grpo.iterations == 4

    large = load_run_config(str(path), preset="paper")
    assert large.bench.n_test_tasks == config.PRESETS["paper"]["n_test_tasks"]

    monkeypatch.setenv(config.OUTPUT_ROOT_ENV, str(tmp_path / "elsewhere"))
    assert load_run_config().output_dir == str(tmp_path / "elsewhere")


def test_cli_accepts_full_scale_preset(tmp_path, monkeypatch):
    """命令行 --preset paper 加载完整规模的基准参数"""
    monkeypatch.delenv(config.OUTPUT_ROOT_ENV, raising=False)
    args = build_parser().parse_args(["gen", "--preset", "paper", "--seed", "4", "--out", str(tmp_path)])
    run_config = load_run_config(args.config, args.preset, overrides_from_args(args))
    for key in ("n_train_tasks", "n_test_tasks"):
        assert getattr(run_config.bench, key) == config.PRESETS["paper"][key]
    assert run_config.bench.seed == 4 and run_config.output_dir == str(tmp_path)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["gen", "--preset", "full"])


def test_run_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(str(broken))
    with pytest.raises(ConfigError):
        load_run_config(overrides={"cost": {"c_ask_base": 3.0}})
    with pytest.raises(ConfigError):
        load_run_config(overrides={"policy": "telepathy"})


# ============ 命令行 ============

def test_missing_prerequisites_exit_with_config_code(tmp_path, monkeypatch):
    monkeypatch.delenv(config.OUTPUT_ROOT_ENV, raising=False)
    out = str(tmp_path / "fresh")
    assert main(["rl", "--out", out]) == EXIT_CONFIG_ERROR
    assert main(["sft", "--out", out]) == EXIT_CONFIG_ERROR
    assert main(["eval", "--out", out, "--policy", "heuristic"]) == EXIT_CONFIG_ERROR
    assert main(["report", "--out", out]) == EXIT_CONFIG_ERROR
    assert main(["gen", "--out", out, "--seeds", "a,b"]) == EXIT_CONFIG_ERROR
    assert main(["gen", "--out", out, "--workers", "0"]) == EXIT_CONFIG_ERROR


TINY_RUN = {
    "seeds": [0],
    "bench": {
        "n_train_scenes": 3, "n_test_scenes": 1, "n_train_tasks": 6, "n_test_tasks": 3,
        "locations_range": [4, 5], "candidate_distribution": {"2": 0.5, "3": 0.5},
    },
    "sft": {"epochs": 3, "batch_size": 8},
    "grpo": {"iterations": 2, "group_size": 2, "tasks_per_batch": 2},
}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    out = root / "out"
    path = root / "run.json"
    path.write_text(json.dumps({**TINY_RUN, "output_dir": str(out)}), encoding="utf-8")
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv(config.OUTPUT_ROOT_ENV, raising=False)
        code = main(["all", "--config", str(path)])
        report_code = main(["report", "--config", str(path)])
    return out, code, report_code


def test_full_pipeline_produces_every_artifact(pipeline_run):
    out, code, report_code = pipeline_run
    assert code == EXIT_OK and report_code == EXIT_OK
    for relative in ("resolved_config.json", "benchmark/manifest.json", "expert/corpus.jsonl",
                     "sft/checkpoint_seed0.json", "sft/loss_seed0.csv", "rl/checkpoint_seed0.json",
                     "rl/curve_seed0.csv", "eval/learned/trajectories_seed0.jsonl", "eval/expert/metrics.json",
                     "ablate/ablation_table.csv", "report/eval/table.csv", "report/ablate/table.csv"):
        assert (out / relative).exists(), relative
    with open(out / "resolved_config.json", "r", encoding="utf-8") as f:
        resolved = json.load(f)
    assert resolved["command"] == "report" and resolved["format_version"] == config.FORMAT_VERSION


def test_pipeline_tables_cover_every_policy(pipeline_run):
    out, _, _ = pipeline_run
    main_table = pd.read_csv(out / "report" / "eval" / "table.csv", index_col=0)
    assert set(main_table.index) == {"learned", "sft", "heuristic", "random", "expert"}
    ablation = pd.read_csv(out / "report" / "ablate" / "table.csv", index_col=0)
    assert set(ablation.index) == {"Full", "w/o Dialogue", "w/o Memory", "w/o HC-GRPO"}
    for name in ("learned", "expert", "heuristic"):
        assert validate_report(str(out / "report" / "eval" / name / "metrics.json"))


def test_expert_runs_are_well_formed(pipeline_run):
    out, _, _ = pipeline_run
    expert = recompute_report(str(out / "eval" / "expert"), COST)
    assert expert.aggregate.n_episodes == 3
    trajectories = expert.trajectories[0]
    assert all(t.outcome is not None for t in trajectories)
    assert not any(s.malformed for t in trajectories for s in t.steps)
