"""
生成结果报告
把评估结果写成机器可读（JSON/CSV）与人可读（对齐文本）的表格和动作分布图；
所有表格都可以只从持久化的轨迹日志重新计算
"""
import glob
import json
import math
import os
import re
from typing import Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
from loguru import logger

import config
from cost_metrics import (
    CostParams, MetricsReport, Trajectory, aggregate_seeds, compute_metrics, reprice_trajectory, swc_of, table_row,
    trajectory_return,
)
from episode_env import read_trajectory_log
from errors import ArtifactMissingError
from evaluation import EvalResult, ordering_checks
from policy import template_histogram
from scene_model import SceneGraph, Task

_LOG_PATTERN = re.compile(r"trajectories_seed(-?\d+)\.jsonl$")
ACTION_COLUMNS = ("Navigate", "Ask", "GetMemory", "Found", "Malformed")


# ============ 表格 ============

def metrics_table(reports: Dict[str, MetricsReport]) -> pd.DataFrame:
    """主结果表：每行一个策略，各干扰物分桶与各难度 SR/TTC + 平均 SR/TTC + SwC"""
    rows = []
    for label, report in reports.items():
        row = {"policy": label}
        row.update(table_row(report))
        if "sr" in report.spread:
            row["SR std"] = report.spread["sr"][1]
            row["SwC std"] = report.spread["swc"][1]
        rows.append(row)
    return pd.DataFrame(rows).set_index("policy")


def difficulty_table(report: MetricsReport) -> pd.DataFrame:
    rows = [{"difficulty": level, "n": stats.n, "SR": stats.sr, "TTC": stats.ttc}
            for level, stats in report.by_difficulty.items()]
    return pd.DataFrame(rows).set_index("difficulty")


def ambiguity_table(report: MetricsReport) -> pd.DataFrame:
    """按干扰物数量分桶的 SR/TTC"""
    rows = [{"distractors": bucket, "n": stats.n, "SR": stats.sr, "TTC": stats.ttc}
            for bucket, stats in report.by_ambiguity.items()]
    return pd.DataFrame(rows).set_index("distractors")


def strategy_table(reports: Dict[str, MetricsReport]) -> pd.DataFrame:
    """决策倾向：平均轨迹长度、提问/记忆次数与使用率、导航距离"""
    rows = []
    for label, report in reports.items():
        rows.append({
            "policy": label,
            "traj len": report.mean_traj_len,
            "asks": report.mean_asks,
            "memory calls": report.mean_mems,
            "ask rate": report.ask_rate,
            "memory rate": report.memory_rate,
            "nav distance": report.mean_nav_distance,
        })
    return pd.DataFrame(rows).set_index("policy")


def seed_table(report: MetricsReport) -> pd.DataFrame:
    rows = [{"seed": row.seed, "SR": row.sr, "TTC": row.ttc, "SwC": row.swc} for row in report.per_seed]
    return pd.DataFrame(rows).set_index("seed")


def histogram_table(reports: Dict[str, MetricsReport]) -> pd.DataFrame:
    """动作分布：各类动作的次数与占比"""
    rows = []
    for label, report in reports.items():
        total = sum(report.action_histogram.values()) or 1
        row = {"policy": label}
        for kind in ACTION_COLUMNS:
            count = report.action_histogram.get(kind, 0)
            row[kind] = count
            row[f"{kind} share"] = count / total
        rows.append(row)
    return pd.DataFrame(rows).set_index("policy")


def template_table(trajectories: Sequence[Trajectory]) -> pd.DataFrame:
    """按动作模板统计（只统计带模板编号的步）"""
    counts = template_histogram([s.template for t in trajectories for s in t.steps if s.template is not None])
    return pd.DataFrame({"template": list(counts), "count": list(counts.values())}).set_index("template")


def format_text(df: pd.DataFrame, title: str) -> str:
    body = df.to_string(float_format=lambda v: f"{v:.3f}", na_rep="-")
    return f"{title}\n{'=' * len(title)}\n{body}\n"


def format_table(reports, title: str = "主结果") -> str:
    """
    主结果与决策倾向的对齐文本

    Args:
        reports: 单个 MetricsReport，或 {策略名: MetricsReport}
        title: 标题
    """
    if isinstance(reports, MetricsReport):
        reports = {reports.label or "policy": reports}
    if not reports:
        raise ValueError("没有可格式化的报告")
    return format_text(metrics_table(reports), title) + "\n" + format_text(strategy_table(reports), f"{title}（决策倾向）")


def plot_action_shares(reports: Dict[str, MetricsReport], path: str) -> None:
    """各策略动作分布的分组柱状图"""
    df = histogram_table(reports)[[f"{k} share" for k in ACTION_COLUMNS[:4]]]
    df.columns = list(ACTION_COLUMNS[:4])
    ax = df.T.plot.bar(figsize=(8, 4), rot=0)
    ax.set_ylabel("share of actions")
    ax.set_title("decision distribution")
    fig = ax.get_figure()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ============ 写出 ============

def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)


def _write_table(df: pd.DataFrame, out_dir: str, stem: str, title: str) -> str:
    df.to_csv(os.path.join(out_dir, f"{stem}.csv"), encoding="utf-8")
    text = format_text(df, title)
    with open(os.path.join(out_dir, f"{stem}.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    return text


def write_eval_report(result: EvalResult, out_dir: str, c_ref: float = config.C_REF) -> str:
    """
    写出一个策略的评估报告

    文件: metrics.json、main_table/per_difficulty/per_ambiguity/strategy/per_seed/action_histogram 的 .csv 与 .txt、
    action_histogram.png，若有轨迹再写 templates.csv

    Returns:
        人可读的汇总文本
    """
    os.makedirs(out_dir, exist_ok=True)
    aggregate = result.aggregate
    _write_json(os.path.join(out_dir, "metrics.json"), {
        "format_version": config.FORMAT_VERSION,
        "label": result.label,
        "c_ref": c_ref,
        "aggregate": aggregate.model_dump(mode="json"),
        "per_seed": [r.model_dump(mode="json") for r in result.per_seed],
    })
    reports = {result.label: aggregate}
    parts = [
        _write_table(metrics_table(reports), out_dir, "main_table", f"{result.label} 主结果"),
        _write_table(difficulty_table(aggregate), out_dir, "per_difficulty", "分难度"),
        _write_table(ambiguity_table(aggregate), out_dir, "per_ambiguity", "分干扰物数量"),
        _write_table(strategy_table(reports), out_dir, "strategy", "决策倾向"),
        _write_table(seed_table(aggregate), out_dir, "per_seed", "分种子"),
        _write_table(histogram_table(reports), out_dir, "action_histogram", "动作分布"),
    ]
    plot_action_shares(reports, os.path.join(out_dir, "action_histogram.png"))
    trajectories = [t for seed_trajs in result.trajectories.values() for t in seed_trajs]
    if trajectories:
        template_table(trajectories).to_csv(os.path.join(out_dir, "templates.csv"), encoding="utf-8")
    summary = "\n".join(parts)
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary)
    logger.info(f"评估报告已保存: {out_dir}")
    validate_report(os.path.join(out_dir, "metrics.json"))
    return summary


def write_comparison(results: Dict[str, EvalResult], out_dir: str, stem: str, title: str) -> str:
    """多策略对比表（主结果表或消融表）+ 动作分布对比图 + 排序检查"""
    os.makedirs(out_dir, exist_ok=True)
    reports = {label: r.aggregate for label, r in results.items()}
    text = _write_table(metrics_table(reports), out_dir, stem, title)
    text += "\n" + _write_table(histogram_table(reports), out_dir, f"{stem}_actions", f"{title}（动作分布）")
    text += "\n" + _write_table(strategy_table(reports), out_dir, f"{stem}_strategy", f"{title}（决策倾向）")
    plot_action_shares(reports, os.path.join(out_dir, f"{stem}_actions.png"))
    checks = ordering_checks(results)
    if checks:
        _write_json(os.path.join(out_dir, f"{stem}_checks.json"),
                    {name: {"holds": holds, "detail": detail} for name, (holds, detail) in checks.items()})
        for name, (holds, detail) in checks.items():
            (logger.info if holds else logger.warning)(f"排序检查 {name}: {'成立' if holds else '不成立'}（{detail}）")
    logger.info(f"对比报告已保存: {os.path.join(out_dir, stem)}.csv")
    return text


# ============ 从日志重算 ============

def load_logged_trajectories(log_dir: str) -> Dict[int, List[Trajectory]]:
    """读取 log_dir 下的 trajectories_seed*.jsonl: {种子: 轨迹列表}"""
    logged: Dict[int, List[Trajectory]] = {}
    for path in sorted(glob.glob(os.path.join(log_dir, "trajectories_seed*.jsonl"))):
        match = _LOG_PATTERN.search(os.path.basename(path))
        if match:
            logged[int(match.group(1))] = read_trajectory_log(path)
    return logged


def recompute_report(log_dir: str, cost_params: CostParams, label: Optional[str] = None) -> EvalResult:
    """只根据轨迹日志重新计算一个策略的全部指标"""
    logged = load_logged_trajectories(log_dir)
    if not logged:
        raise ArtifactMissingError(os.path.join(log_dir, "trajectories_seed*.jsonl"), "eval")
    first = next(iter(logged.values()))
    label = label or (first[0].policy if first else os.path.basename(log_dir))
    per_seed = [compute_metrics(trajs, cost_params, seed=seed, label=label) for seed, trajs in sorted(logged.items())]
    return EvalResult(label=label, aggregate=aggregate_seeds(per_seed, label=label), per_seed=per_seed,
                      trajectories=logged)


def recompute_all(out_root: str, cost_params: CostParams) -> Dict[str, Dict[str, EvalResult]]:
    """
    重算 <out>/eval/* 与 <out>/ablate/* 下全部日志，报告写到 <out>/report/

    Returns:
        {"eval": {策略: 结果}, "ablate": {行名: 结果}}
    """
    report_root = os.path.join(out_root, "report")
    everything: Dict[str, Dict[str, EvalResult]] = {}
    for group in ("eval", "ablate"):
        group_dir = os.path.join(out_root, group)
        if not os.path.isdir(group_dir):
            continue
        results = {}
        for name in sorted(os.listdir(group_dir)):
            log_dir = os.path.join(group_dir, name)
            if not os.path.isdir(log_dir) or not load_logged_trajectories(log_dir):
                continue
            result = recompute_report(log_dir, cost_params)
            write_eval_report(result, os.path.join(report_root, group, name), cost_params.c_ref)
            results[result.label] = result
        if results:
            title = "主结果" if group == "eval" else "消融结果"
            write_comparison(results, os.path.join(report_root, group), "table", title)
            everything[group] = results
    if not everything:
        raise ArtifactMissingError(os.path.join(out_root, "eval"), "eval")
    logger.info(f"已从轨迹日志重算 {sum(len(v) for v in everything.values())} 份报告")
    return everything


def validate_report(path: str, c_ref: float = config.C_REF, tol: float = 1e-9) -> bool:
    """
    校验 metrics.json 的内部一致性

    - 各难度、各干扰物分桶的回合数之和等于总回合数
    - SR 在 [0, 1] 内
    - 每个种子的 SwC 与 SR/TTC 按公式一致
    """
    logger.info(f"验证报告: {path}")
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format_version") != config.FORMAT_VERSION:
        logger.error("报告格式版本不符")
        return False

    for report in [payload["aggregate"]] + payload["per_seed"]:
        label = f"{report['label']} 种子 {report.get('seed')}"
        n_split = sum(stats["n"] for stats in report["by_difficulty"].values())
        if n_split != report["n_episodes"]:
            logger.error(f"{label} 分难度回合数 {n_split} 与总数 {report['n_episodes']} 不符")
            return False
        n_bucket = sum(stats["n"] for stats in report.get("by_ambiguity", {}).values())
        if report.get("by_ambiguity") and n_bucket != report["n_episodes"]:
            logger.error(f"{label} 分干扰物回合数 {n_bucket} 与总数 {report['n_episodes']} 不符")
            return False
        if not 0.0 <= report["sr"] <= 1.0:
            logger.error(f"{label} 的 SR 越界: {report['sr']}")
            return False
    c_ref = payload.get("c_ref", c_ref)
    for report in payload["per_seed"]:
        expected = swc_of(report["sr"], report["ttc"], c_ref)
        if not math.isclose(expected, report["swc"], abs_tol=tol):
            logger.error(f"种子 {report['seed']} 的 SwC {report['swc']} 与公式值 {expected} 不符")
            return False

    logger.info(f"报告验证通过: {len(payload['per_seed'])} 个种子，共 {payload['aggregate']['n_episodes']} 个回合")
    return True


# ============ 交互回合记录 ============

def transcript_text(traj: Trajectory, task: Task, scene: SceneGraph, cost_params: CostParams) -> str:
    """逐步动作、代价、回答与剩余候选数；末尾给出总代价、回报与重新计价核对"""
    lines = [f"任务 {task.task_id}: {task.instruction}（候选 {len(task.candidate_ids)} 个）"]
    for step in traj.steps:
        action = "格式错误" if step.malformed or step.action is None else str(step.action)
        line = f"  第 {step.index + 1} 步 {action:<28} 代价 {step.cost:.3f}  剩余候选 {step.n_remaining}"
        if step.reply is not None:
            line += f"  回答: {step.reply.get('text')}"
        lines.append(line)
    repriced = reprice_trajectory(traj, task, scene, cost_params)
    consistent = all(math.isclose(a, s.cost, abs_tol=1e-9) for a, s in zip(repriced, traj.steps))
    lines.append(f"结果 {traj.outcome.value if traj.outcome else '-'}，总代价 {traj.total_cost:.3f}，"
                 f"回报 {trajectory_return(traj, cost_params):.3f}，重新计价{'一致' if consistent else '不一致'}")
    return "\n".join(lines)
