"""
运行配置
汇总各模块参数：预设 → JSON 配置文件 → 命令行覆盖，逐层合并；每次运行把最终配置写入输出目录
"""
import json
import os
from typing import Any, Dict, List, Literal, Optional

from loguru import logger
from pydantic import BaseModel, Field, ValidationError, field_validator

import config
from benchgen import BenchConfig
from cost_metrics import CostParams
from episode_env import EnvConfig
from errors import ArtifactMissingError, ConfigError
from evaluation import POLICY_CHOICES, EvalConfig
from expert_planner import PlannerConfig
from external_policy import ChannelConfig
from memory_store import MemoryParams
from oracle_sim import OracleParams
from trainer import GrpoConfig, SftConfig

RESOLVED_CONFIG_FILE = "resolved_config.json"


class RunConfig(BaseModel):
    """一次运行的完整配置"""

    preset: Literal["desk", "paper"] = "desk"
    output_dir: str = config.OUTPUT_DIR
    benchmark_dir: Optional[str] = None  # 默认 <output_dir>/benchmark
    seed: int = 0
    seeds: List[int] = Field(default_factory=lambda: list(config.EVAL_SEEDS))
    workers: int = 1
    policy: str = "learned"
    bench: BenchConfig = Field(default_factory=BenchConfig)
    cost: CostParams = Field(default_factory=CostParams)
    oracle: OracleParams = Field(default_factory=OracleParams)
    memory: MemoryParams = Field(default_factory=MemoryParams)
    env: EnvConfig = Field(default_factory=EnvConfig)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    sft: SftConfig = Field(default_factory=SftConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    greedy_eval: bool = False
    external: Optional[ChannelConfig] = None

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, value):
        if not value:
            raise ValueError("种子列表不能为空")
        if len(set(value)) != len(value):
            raise ValueError(f"种子重复: {value}")
        return value

    @field_validator("policy")
    @classmethod
    def _policy(cls, value):
        if value not in POLICY_CHOICES:
            raise ValueError(f"未知策略 {value}，可选 {list(POLICY_CHOICES)}")
        return value

    @field_validator("workers")
    @classmethod
    def _workers(cls, value):
        if value < 1:
            raise ValueError("workers 至少为1")
        return value

    def eval_config(self) -> EvalConfig:
        return EvalConfig(seeds=self.seeds, workers=self.workers, greedy=self.greedy_eval)

    # ============ 产物路径 ============

    @property
    def bench_root(self) -> str:
        return self.benchmark_dir or os.path.join(self.output_dir, "benchmark")

    @property
    def corpus_path(self) -> str:
        return os.path.join(self.output_dir, "expert", "corpus.jsonl")

    def checkpoint_path(self, stage: str, seed: int) -> str:
        return os.path.join(self.output_dir, stage, f"checkpoint_seed{seed}.json")

    def require(self, path: str, command: str) -> str:
        """上游产物不存在时给出应先执行的子命令"""
        if not os.path.exists(path):
            raise ArtifactMissingError(path, command)
        return path


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def preset_payload(name: str) -> Dict[str, Any]:
    if name not in config.PRESETS:
        raise ConfigError(f"未知规模预设: {name}，可选 {list(config.PRESETS)}")
    return {"preset": name, "bench": {**config.PRESETS[name], "preset": name}}


def load_run_config(path: Optional[str] = None, preset: Optional[str] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    加载运行配置

    合并顺序：预设 < 配置文件 < 命令行覆盖；环境变量 SEARCHBENCH_OUTPUT_ROOT 最后覆盖输出目录

    Args:
        path: JSON 配置文件
        preset: 规模预设名（desk / paper），为 None 时使用配置文件中的值或 desk
        overrides: 嵌套字典形式的覆盖项

    Raises:
        ConfigError: 文件不存在、JSON 非法或取值违反约束
    """
    file_payload: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"配置文件不存在: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                file_payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件 {path} 不是合法JSON: {e}") from e

    name = preset or file_payload.get("preset", "desk")
    payload = _deep_merge(preset_payload(name), file_payload)
    if preset:
        payload = _deep_merge(payload, preset_payload(preset))
    payload = _deep_merge(payload, overrides or {})

    env_root = os.environ.get(config.OUTPUT_ROOT_ENV)
    if env_root:
        payload["output_dir"] = env_root

    try:
        run_config = RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"配置非法: {e}") from e
    if run_config.bench.seed != run_config.seed and "seed" not in payload.get("bench", {}):
        run_config = run_config.model_copy(update={"bench": run_config.bench.model_copy(update={"seed": run_config.seed})})
    logger.debug(f"运行配置: 预设 {run_config.preset}，输出目录 {run_config.output_dir}，种子 {run_config.seeds}")
    return run_config


def stamp(run_config: RunConfig, command: str) -> str:
    """把最终配置写入 <output_dir>/resolved_config.json"""
    os.makedirs(run_config.output_dir, exist_ok=True)
    path = os.path.join(run_config.output_dir, RESOLVED_CONFIG_FILE)
    payload = run_config.model_dump(mode="json")
    payload["format_version"] = config.FORMAT_VERSION
    payload["command"] = command
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)
    return path
