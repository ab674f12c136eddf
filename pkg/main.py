"""
主程序入口
串联基准生成、专家示范、两阶段训练、评估、消融与报告，提供统一的命令行

子命令:
  gen      生成基准（场景 + 任务 + 清单）
  expert   在训练任务上生成专家示范
  sft      监督预热（每个种子一个检查点）
  rl       HC-GRPO 在线训练（每个种子一个检查点）
  eval     在测试任务 × 种子上评估 --policy 指定的策略
  ablate   四行消融（完整 / 屏蔽提问 / 屏蔽记忆 / 仅SFT）
  report   只从轨迹日志重算全部表格
  play     人类充当用户的交互回合
  sweep    代价参数敏感性扫描
  all      gen → expert → sft → rl → eval → ablate → report

退出码: 0 成功，2 配置/前置条件错误，3 运行期错误，130 被中断
"""
import argparse
import os
import shlex
import sys
from typing import Dict, List, Optional

import pandas as pd
from loguru import logger

import config
from benchgen import Benchmark, build_benchmark, load_benchmark, save_benchmark
from episode_env import run_episode
from errors import EXIT_CONFIG_ERROR, EXIT_INTERRUPTED, EXIT_OK, ConfigError, SearchBenchError
from evaluation import (
    POLICY_CHOICES, EvalResult, build_policy_factory, evaluate_policy, label_dirname, run_ablation,
    run_sensitivity_sweep,
)
from expert_planner import generate_sft_corpus, load_corpus, save_corpus
from external_policy import ChannelConfig
from oracle_sim import InteractiveOracle, TerminalChannel
from policy import PolicyParams
from report_writer import format_text, recompute_all, transcript_text, write_comparison, write_eval_report
from run_config import RunConfig, load_run_config, stamp
from trainer import export_curve, load_checkpoint, save_checkpoint, sft_fit, train_hc_grpo

COMMANDS = ("gen", "expert", "sft", "rl", "eval", "ablate", "report", "play", "sweep", "all")
ALL_EVAL_POLICIES = ("learned", "sft", "heuristic", "random", "expert")


class SearchPipeline:
    """代价感知交互式搜索的实验流水线"""

    def __init__(self, run_config: RunConfig, max_tasks: Optional[int] = None):
        self.config = run_config
        self.max_tasks = max_tasks
        os.makedirs(run_config.output_dir, exist_ok=True)
        logger.add(os.path.join(run_config.output_dir, os.path.basename(config.LOG_FILE)), rotation="10 MB")
        self._bench: Optional[Benchmark] = None

    # ============ 产物 ============

    @property
    def benchmark(self) -> Benchmark:
        if self._bench is None:
            self._bench = load_benchmark(self.config.bench_root)
        return self._bench

    def _test_tasks(self):
        tasks = self.benchmark.test_tasks
        return tasks[:self.max_tasks] if self.max_tasks else tasks

    def _checkpoints(self, stage: str, command: str) -> Dict[int, PolicyParams]:
        checkpoints = {}
        for seed in self.config.seeds:
            path = self.config.require(self.config.checkpoint_path(stage, seed), command)
            checkpoints[seed], _ = load_checkpoint(path)
        return checkpoints

    def _factory(self, kind: str):
        cfg = self.config
        checkpoints = None
        if kind == "learned":
            checkpoints = self._checkpoints("rl", "rl")
        elif kind == "sft":
            checkpoints = self._checkpoints("sft", "sft")
        return build_policy_factory(kind, checkpoints, greedy=cfg.greedy_eval, planner_config=cfg.planner,
                                    channel_config=cfg.external)

    # ============ 子命令 ============

    def gen(self) -> Benchmark:
        logger.info("=" * 60)
        logger.info("生成基准...")
        logger.info("=" * 60)
        bench = build_benchmark(self.config.bench, workers=self.config.workers)
        save_benchmark(bench, self.config.bench_root)
        self._bench = bench
        return bench

    def expert(self) -> str:
        cfg = self.config
        bench = self.benchmark
        traces, dropped = generate_sft_corpus(bench.train_tasks, bench.scenes, cfg.cost, cfg.oracle, cfg.memory,
                                              cfg.env, cfg.planner, seed=cfg.seed, workers=cfg.workers)
        os.makedirs(os.path.dirname(cfg.corpus_path), exist_ok=True)
        save_corpus(traces, cfg.corpus_path)
        pd.DataFrame({"task_id": dropped}).to_csv(
            os.path.join(os.path.dirname(cfg.corpus_path), "dropped.csv"), index=False, encoding="utf-8")
        logger.info(f"专家示范已保存: {cfg.corpus_path}（{len(traces)} 条）")
        return cfg.corpus_path

    def sft(self) -> List[str]:
        cfg = self.config
        corpus = load_corpus(cfg.require(cfg.corpus_path, "expert"))
        paths = []
        for seed in cfg.seeds:
            sft_config = cfg.sft.model_copy(update={"seed": seed})
            params, losses = sft_fit(corpus, PolicyParams(), sft_config)
            params.version = f"sft-seed{seed}"
            path = cfg.checkpoint_path("sft", seed)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            save_checkpoint(path, params, "sft", seed, sft_config)
            pd.DataFrame({"step": range(len(losses)), "loss": losses}).to_csv(
                os.path.join(os.path.dirname(path), f"loss_seed{seed}.csv"), index=False, encoding="utf-8")
            paths.append(path)
        return paths

    def rl(self) -> List[str]:
        cfg = self.config
        sft_checkpoints = self._checkpoints("sft", "sft")
        bench = self.benchmark
        paths = []
        for seed in cfg.seeds:
            params, curve = train_hc_grpo(bench.train_tasks, bench.scenes, sft_checkpoints[seed], cfg.cost,
                                          cfg.oracle, cfg.memory, cfg.env, cfg.grpo, seed=seed,
                                          workers=cfg.workers)
            path = cfg.checkpoint_path("rl", seed)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            save_checkpoint(path, params, "rl", seed, cfg.grpo, curve)
            stem = os.path.join(os.path.dirname(path), f"curve_seed{seed}")
            export_curve(curve, f"{stem}.csv", f"{stem}.png")
            paths.append(path)
        return paths

    def evaluate(self, kind: Optional[str] = None) -> EvalResult:
        cfg = self.config
        kind = kind or cfg.policy
        bench = self.benchmark
        log_dir = os.path.join(cfg.output_dir, "eval", label_dirname(kind))
        result = evaluate_policy(self._factory(kind), kind, self._test_tasks(), bench.scenes, cfg.cost,
                                 cfg.oracle, cfg.memory, cfg.env, cfg.eval_config(), log_dir)
        print(write_eval_report(result, log_dir, cfg.cost.c_ref))
        return result

    def ablate(self) -> Dict[str, EvalResult]:
        cfg = self.config
        rl_checkpoints = self._checkpoints("rl", "rl")
        sft_checkpoints = self._checkpoints("sft", "sft")
        bench = self.benchmark
        root = os.path.join(cfg.output_dir, "ablate")
        results = run_ablation(rl_checkpoints, sft_checkpoints, self._test_tasks(), bench.scenes, cfg.cost,
                               cfg.oracle, cfg.memory, cfg.env, cfg.eval_config(), log_root=root)
        print(write_comparison(results, root, "ablation_table", "消融结果"))
        return results

    def report(self) -> Dict[str, Dict[str, EvalResult]]:
        everything = recompute_all(self.config.output_dir, self.config.cost)
        for group, results in everything.items():
            table = os.path.join(self.config.output_dir, "report", group, "table.txt")
            with open(table, "r", encoding="utf-8") as f:
                print(f.read())
        return everything

    def play(self, task_id: Optional[str] = None) -> str:
        cfg = self.config
        if not sys.stdin.isatty():
            raise ConfigError("play 需要交互式终端（标准输入不是终端）")
        bench = self.benchmark
        tasks = {t.task_id: t for t in bench.test_tasks + bench.train_tasks}
        if task_id is not None and task_id not in tasks:
            raise ConfigError(f"未知任务ID: {task_id}")
        task = tasks[task_id] if task_id else bench.test_tasks[0]
        scene = bench.scene_of(task)
        policy = self._factory(cfg.policy)(cfg.seed)
        channel = TerminalChannel()
        channel.write(f"指令: {task.instruction}（真实目标 {task.gt_target_id}，位于 "
                      f"{scene.location(scene.object(task.gt_target_id).location_id).name}）")
        traj = run_episode(policy, task, scene, cfg.cost, cfg.oracle, cfg.memory, cfg.seed, cfg.env,
                           oracle=InteractiveOracle(scene, channel))
        text = transcript_text(traj, task, scene, cfg.cost)
        print(text)
        return text

    def sweep(self) -> pd.DataFrame:
        cfg = self.config
        bench = self.benchmark
        factories = {kind: self._factory(kind) for kind in ("heuristic", "expert", "random")}
        if all(os.path.exists(cfg.checkpoint_path("rl", s)) for s in cfg.seeds):
            factories["learned"] = self._factory("learned")
        df = run_sensitivity_sweep(factories, self._test_tasks(), bench.scenes, cfg.cost, cfg.oracle, cfg.memory,
                                   cfg.env, cfg.eval_config())
        out_dir = os.path.join(cfg.output_dir, "sweep")
        os.makedirs(out_dir, exist_ok=True)
        df.to_csv(os.path.join(out_dir, "sensitivity.csv"), index=False, encoding="utf-8")
        text = format_text(df.set_index(["parameter", "factor", "policy"]), "代价参数敏感性")
        with open(os.path.join(out_dir, "sensitivity.txt"), "w", encoding="utf-8") as f:
            f.write(text)
        print(text)
        return df

    def run_all(self) -> None:
        self.gen()
        self.expert()
        self.sft()
        self.rl()
        for kind in ALL_EVAL_POLICIES:
            self.evaluate(kind)
        self.ablate()
        self.report()
        logger.info("全流程完成！")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="代价感知交互式具身搜索：基准、训练与评估")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON 配置文件")
    parser.add_argument("--preset", choices=sorted(config.PRESETS), help="规模预设")
    parser.add_argument("--seed", type=int, help="主种子（基准生成与专家示范）")
    parser.add_argument("--seeds", help="训练/评估种子，逗号分隔，例如 0,1,2,3,4")
    parser.add_argument("--workers", type=int, help="并行度")
    parser.add_argument("--out", help="输出目录")
    parser.add_argument("--policy", choices=POLICY_CHOICES, help="评估或交互使用的策略")
    parser.add_argument("--external-cmd", help="外部策略命令（policy=external 时使用）")
    parser.add_argument("--iterations", type=int, help="覆盖 HC-GRPO 迭代数")
    parser.add_argument("--max-tasks", type=int, help="只评估前 N 个测试任务")
    parser.add_argument("--task-id", help="play 使用的任务ID")
    parser.add_argument("--greedy", action="store_true", help="学习策略取最大概率动作")
    parser.add_argument("--verbose", action="store_true", help="控制台输出 DEBUG 日志")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.seeds:
        try:
            overrides["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds 格式非法: {args.seeds}") from None
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.out:
        overrides["output_dir"] = args.out
    if args.policy:
        overrides["policy"] = args.policy
    if args.external_cmd:
        overrides["external"] = ChannelConfig(command=shlex.split(args.external_cmd)).model_dump()
    if args.iterations is not None:
        overrides["grpo"] = {"iterations": args.iterations}
    if args.greedy:
        overrides["greedy_eval"] = True
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if args.verbose else "INFO")
    try:
        run_config = load_run_config(args.config, args.preset, overrides_from_args(args))
        stamp(run_config, args.command)
        pipeline = SearchPipeline(run_config, max_tasks=args.max_tasks)
        if args.command == "all":
            pipeline.run_all()
        elif args.command == "eval":
            pipeline.evaluate()
        elif args.command == "play":
            pipeline.play(args.task_id)
        else:
            getattr(pipeline, args.command)()
    except KeyboardInterrupt:
        logger.warning("已中断")
        return EXIT_INTERRUPTED
    except SearchBenchError as e:
        logger.error(str(e))
        return e.exit_code
    except ValueError as e:
        logger.error(f"参数非法: {e}")
        return EXIT_CONFIG_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
