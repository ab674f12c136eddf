"""
两阶段训练
阶段一：在专家示范上做监督预热（交叉熵，余弦退火学习率）
阶段二：HC-GRPO 在线优化（组内相对优势 + 截断重要性比 + 对参考策略的精确KL惩罚）
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

import config
from actions import ActionKind
from cost_metrics import CostParams, Outcome, Trajectory, task_reward, trajectory_return
from episode_env import EnvConfig, run_episode
from errors import ConfigError, TrainingDivergedError
from expert_planner import ExpertTrace
from memory_store import MemoryParams
from oracle_sim import OracleParams
from policy import N_TEMPLATES, LinearSoftmaxPolicy, PolicyParams
from scene_model import SceneGraph, Task


class SftConfig(BaseModel):
    """监督预热参数"""

    lr: float = config.SFT_LR
    epochs: int = config.SFT_EPOCHS
    batch_size: int = config.SFT_BATCH_SIZE
    warmup_ratio: float = config.WARMUP_RATIO
    optimizer: Literal["adam", "sgd"] = "adam"
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr 不能为负，epochs 与 batch_size 必须为正")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio 必须在 [0, 1) 内: {self.warmup_ratio}")
        return self


class GrpoConfig(BaseModel):
    """
    HC-GRPO 参数

    gamma 与 value_loss_weight 仅记录：回报按未折扣的轨迹回报计算，且没有评论家；
    per_step_reward 打开时才按 gamma 折扣逐步代价
    """

    group_size: int = config.GRPO_GROUP_SIZE
    learning_rate: float = config.GRPO_LR
    clip_eps: float = config.GRPO_CLIP_EPS
    kl_beta: float = config.GRPO_KL_BETA
    entropy_coef: float = config.GRPO_ENTROPY_COEF
    advantage_epsilon: float = config.ADVANTAGE_EPS
    epochs: int = config.GRPO_EPOCHS
    tasks_per_batch: int = config.GRPO_TASKS_PER_BATCH
    updates_per_batch: int = config.GRPO_UPDATES_PER_BATCH
    gamma: float = config.GRPO_GAMMA
    value_loss_weight: float = config.GRPO_VALUE_LOSS_WEIGHT
    kl_bound: float = config.GRPO_KL_BOUND
    log_ratio_clamp: float = config.LOG_RATIO_CLAMP
    per_step_reward: bool = False
    iterations: Optional[int] = None  # 指定时覆盖按 epochs 推算的迭代数
    optimizer: Literal["adam", "sgd"] = "adam"

    @model_validator(mode="after")
    def _check(self):
        if self.group_size < 2:
            raise ValueError(f"group_size 至少为2: {self.group_size}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps 必须在 (0, 1) 内: {self.clip_eps}")
        if self.kl_beta < 0 or self.entropy_coef < 0:
            raise ValueError("kl_beta 与 entropy_coef 不能为负")
        if self.advantage_epsilon <= 0:
            raise ValueError("advantage_epsilon 必须为正")
        if self.learning_rate < 0 or self.tasks_per_batch < 1 or self.updates_per_batch < 1 or self.epochs < 1:
            raise ValueError("学习率不能为负，批大小、更新次数与轮数必须为正")
        return self


class GroupSample(BaseModel):
    """同一任务的一组采样轨迹及其回报与组内相对优势"""

    task_id: str
    trajectories: List[Trajectory]
    rewards: List[float]
    advantages: List[float]


class CurvePoint(BaseModel):
    iteration: int
    mean_return: float
    mean_length: float  # 每回合决策步数，作为回复长度的替代量
    mean_kl: float
    clip_fraction: float
    success_rate: float
    memory_share: float
    navigate_share: float
    ask_share: float


class UpdateStats(BaseModel):
    mean_return: float = 0.0
    mean_length: float = 0.0
    mean_kl: float = 0.0
    clip_fraction: float = 0.0
    mean_entropy: float = 0.0
    objective: float = 0.0
    n_clamped: int = 0
    n_steps: int = 0


# ============ 优化器与学习率 ============

class AdamOptimizer:
    """对单个参数矩阵的 Adam（最小化约定）"""

    def __init__(self, shape: Tuple[int, ...], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, weights: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return weights - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _descend(weights: np.ndarray, grad: np.ndarray, lr: float, optimizer: Optional[AdamOptimizer]) -> np.ndarray:
    if optimizer is None:
        return weights - lr * grad
    return optimizer.step(weights, grad, lr)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float = config.WARMUP_RATIO) -> float:
    """线性预热后余弦退火到0"""
    if total_steps <= 0:
        return base_lr
    warmup = int(round(total_steps * warmup_ratio))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


# ============ 批量化的分布计算 ============

def _batch_log_probs(weights: np.ndarray, temperature: float, features: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """(N, F) 特征、(N, K) 掩码 -> (N, K) 对数概率，非法模板为 -inf"""
    logits = features @ weights.T / temperature
    masked = np.where(masks, logits, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    log_z = top + np.log(np.exp(masked - top).sum(axis=1, keepdims=True))
    return np.where(masks, logits - log_z, -np.inf)


def _stack_steps(trajectories: Sequence[Trajectory]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[int]]:
    """取出带特征的决策步；返回特征、掩码、模板与每步所属轨迹下标"""
    feats, masks, templates, owners = [], [], [], []
    for k, traj in enumerate(trajectories):
        for step in traj.steps:
            if step.malformed or step.features is None or step.template is None:
                continue
            feats.append(step.features)
            masks.append(step.mask)
            templates.append(step.template)
            owners.append(k)
    if not feats:
        return np.zeros((0, 0)), np.zeros((0, N_TEMPLATES), dtype=bool), np.zeros(0, dtype=int), owners
    return np.array(feats, dtype=float), np.array(masks, dtype=bool), np.array(templates, dtype=int), owners


# ============ 阶段一：监督预热 ============

def sft_fit(corpus: Sequence[ExpertTrace], init: PolicyParams,
            sft_config: Optional[SftConfig] = None) -> Tuple[PolicyParams, List[float]]:
    """
    最大化专家动作在掩码softmax下的平均对数似然

    Args:
        corpus: 专家示范
        init: 初始参数（不会被修改）
        sft_config: 训练参数

    Returns:
        (训练后的参数, 每个小批次的训练损失)
    """
    cfg = sft_config or SftConfig()
    if not corpus:
        raise ConfigError("示范语料为空，无法进行监督预热")
    features, masks, templates, _ = _stack_steps([trace.trajectory for trace in corpus])
    n = len(templates)
    if n == 0:
        raise ConfigError("示范语料中没有带特征的决策步")
    if not masks[np.arange(n), templates].all():
        raise ConfigError("示范语料中存在被掩码屏蔽的专家动作")

    params = init.copy(version="sft")
    weights = params.weights
    optimizer = AdamOptimizer(weights.shape) if cfg.optimizer == "adam" else None
    rng = np.random.default_rng([cfg.seed, 11])
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * batches_per_epoch
    losses: List[float] = []
    logger.info(f"监督预热: {len(corpus)} 条示范，{n} 个决策步，{total} 个小批次")

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in tqdm(range(batches_per_epoch), desc=f"SFT 第 {epoch + 1} 轮", leave=False):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, m, a = features[idx], masks[idx], templates[idx]
            logp = _batch_log_probs(weights, params.temperature, x, m)
            loss = float(-logp[np.arange(len(idx)), a].mean())
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"监督预热在第 {step} 步发散（loss={loss}，学习率 {cfg.lr}）")
            probs = np.where(m, np.exp(logp), 0.0)
            dz = probs.copy()
            dz[np.arange(len(idx)), a] -= 1.0
            grad = dz.T @ x / (len(idx) * params.temperature)
            lr = cosine_lr(step, total, cfg.lr, cfg.warmup_ratio)
            weights = _descend(weights, grad, lr, optimizer)
            losses.append(loss)
            step += 1
        logger.info(f"SFT 第 {epoch + 1} 轮结束，最后一个批次损失 {losses[-1]:.4f}")
    params.weights = weights
    return params, losses


# ============ 阶段二：HC-GRPO ============

def group_advantages(rewards: Sequence[float], advantage_epsilon: float = config.ADVANTAGE_EPS) -> List[float]:
    """A_i = (r_i - mean) / (std + eps)，std 为总体标准差"""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError(f"组大小至少为2，实际为 {r.size}")
    return ((r - r.mean()) / (r.std() + advantage_epsilon)).tolist()


def clipped_surrogate(ratio: np.ndarray, advantage: np.ndarray, clip_eps: float) -> np.ndarray:
    """min(rA, clip(r, 1-eps, 1+eps)A)，逐元素"""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * advantage)


def episode_reward(traj: Trajectory, cost_params: CostParams, grpo_config: GrpoConfig) -> float:
    """轨迹回报；per_step_reward 模式下对逐步代价与终局奖励按 gamma 折扣"""
    if not grpo_config.per_step_reward:
        return trajectory_return(traj, cost_params)
    gamma = grpo_config.gamma
    discounted = sum(gamma ** t * step.cost for t, step in enumerate(traj.steps))
    return gamma ** max(traj.length - 1, 0) * task_reward(traj.outcome, cost_params) - cost_params.lam * discounted


def make_group(task_id: str, trajectories: List[Trajectory], cost_params: CostParams,
               grpo_config: GrpoConfig) -> GroupSample:
    rewards = [episode_reward(t, cost_params, grpo_config) for t in trajectories]
    return GroupSample(task_id=task_id, trajectories=trajectories, rewards=rewards,
                       advantages=group_advantages(rewards, grpo_config.advantage_epsilon))


def grpo_update(params: PolicyParams, ref_params: PolicyParams, groups: Sequence[GroupSample],
                grpo_config: GrpoConfig, optimizer: Optional[AdamOptimizer] = None,
                lr: Optional[float] = None) -> Tuple[PolicyParams, UpdateStats]:
    """
    一次梯度上升：逐决策步的截断重要性比目标，轨迹优势由组内共享，
    减去对参考策略的精确KL，加上熵奖励

    旧策略的对数概率取自采样时记录在轨迹中的 log_prob。

    Returns:
        (新参数, 统计量)
    """
    cfg = grpo_config
    trajectories = [t for g in groups for t in g.trajectories]
    traj_adv = [a for g in groups for a in g.advantages]
    rewards = [r for g in groups for r in g.rewards]
    features, masks, templates, owners = _stack_steps(trajectories)
    stats = UpdateStats(
        mean_return=float(np.mean(rewards)) if rewards else 0.0,
        mean_length=float(np.mean([t.length for t in trajectories])) if trajectories else 0.0,
    )
    n = len(templates)
    if n == 0:
        return params.copy(), stats
    old_logp = np.array([s.log_prob for t in trajectories for s in t.steps
                         if not s.malformed and s.features is not None and s.template is not None], dtype=float)
    adv = np.asarray(traj_adv, dtype=float)[owners]
    rows = np.arange(n)
    temp = params.temperature

    logp = _batch_log_probs(params.weights, temp, features, masks)
    logr = _batch_log_probs(ref_params.weights, ref_params.temperature, features, masks)
    probs = np.where(masks, np.exp(logp), 0.0)
    safe_logp = np.where(masks, logp, 0.0)

    raw_log_ratio = logp[rows, templates] - old_logp
    clamped = np.abs(raw_log_ratio) > cfg.log_ratio_clamp
    ratio = np.exp(np.clip(raw_log_ratio, -cfg.log_ratio_clamp, cfg.log_ratio_clamp))
    unclipped = ratio * adv
    surrogate = clipped_surrogate(ratio, adv, cfg.clip_eps)
    active = (unclipped <= surrogate) & ~clamped

    diff = np.where(masks, logp - logr, 0.0)
    kl = (probs * diff).sum(axis=1)
    ent = -(probs * safe_logp).sum(axis=1)

    # 目标对 logits 的梯度（逐步），再乘特征得到对权重的梯度
    dz = -probs * (active * ratio * adv)[:, None]
    dz[rows, templates] += active * ratio * adv
    dz -= cfg.kl_beta * probs * (diff - kl[:, None])
    dz += cfg.entropy_coef * (-probs * (safe_logp + ent[:, None]))
    grad = dz.T @ features / (n * temp)
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergedError(f"HC-GRPO 梯度出现非有限值（{n} 个决策步，clamp 命中 {int(clamped.sum())} 次）")

    new_params = params.copy()
    step_lr = cfg.learning_rate if lr is None else lr
    if optimizer is None and cfg.optimizer == "adam":
        optimizer = AdamOptimizer(params.weights.shape)
    new_params.weights = _descend(params.weights, -grad, step_lr, optimizer)

    stats.mean_kl = float(kl.mean())
    stats.clip_fraction = float((np.abs(ratio - 1.0) > cfg.clip_eps).mean())
    stats.mean_entropy = float(ent.mean())
    stats.objective = float(surrogate.mean() - cfg.kl_beta * kl.mean() + cfg.entropy_coef * ent.mean())
    stats.n_clamped = int(clamped.sum())
    stats.n_steps = n
    return new_params, stats


def rollout_seed(master: int, iteration: int, task_index: int, member: int) -> int:
    return int(np.random.SeedSequence([master, iteration, task_index, member]).generate_state(1)[0])


def _action_shares(trajectories: Sequence[Trajectory]) -> Dict[ActionKind, float]:
    counts = {kind: 0 for kind in ActionKind}
    for traj in trajectories:
        for step in traj.steps:
            if step.action is not None:
                counts[step.action.kind] += 1
    total = sum(counts.values()) or 1
    return {kind: c / total for kind, c in counts.items()}


def train_hc_grpo(tasks: Sequence[Task], scenes: Dict[str, SceneGraph], sft_params: PolicyParams,
                  cost_params: CostParams, oracle_params: OracleParams,
                  memory_params: Optional[MemoryParams] = None, env_config: Optional[EnvConfig] = None,
                  grpo_config: Optional[GrpoConfig] = None, seed: int = 0, workers: int = 1,
                  callbacks: Sequence[Callable[[CurvePoint], None]] = ()) -> Tuple[PolicyParams, List[CurvePoint]]:
    """
    HC-GRPO 在线训练：SFT 参数同时作为初始化与冻结的参考策略

    Args:
        tasks: 训练任务池
        scenes: scene_id -> 场景
        sft_params: 监督预热得到的参数
        seed: 主种子（任务顺序与每条采样的随机流均由它派生）
        workers: 并行采样线程数
        callbacks: 每次迭代结束后以 CurvePoint 调用

    Returns:
        (训练后的参数, 训练曲线)
    """
    cfg = grpo_config or GrpoConfig()
    memory_params = memory_params or MemoryParams()
    env_config = env_config or EnvConfig()
    if not tasks:
        raise ConfigError("训练任务池为空")
    reference = sft_params.copy(version="reference")
    params = sft_params.copy(version="hc_grpo")
    optimizer = AdamOptimizer(params.weights.shape) if cfg.optimizer == "adam" else None

    rng = np.random.default_rng([seed, 7])
    iterations = cfg.iterations or math.ceil(cfg.epochs * len(tasks) / cfg.tasks_per_batch)
    schedule: List[int] = []
    while len(schedule) < iterations * cfg.tasks_per_batch:
        schedule.extend(rng.permutation(len(tasks)).tolist())
    logger.info("=" * 60)
    logger.info(f"HC-GRPO 训练: {iterations} 次迭代，每批 {cfg.tasks_per_batch} 个任务 × G={cfg.group_size}")
    logger.info("=" * 60)

    curve: List[CurvePoint] = []
    for it in tqdm(range(iterations), desc="HC-GRPO"):
        batch = schedule[it * cfg.tasks_per_batch:(it + 1) * cfg.tasks_per_batch]
        policy = LinearSoftmaxPolicy(params.copy(), name="hc_grpo")
        jobs = [(ti, g) for ti in batch for g in range(cfg.group_size)]

        def rollout(job: Tuple[int, int]) -> Trajectory:
            ti, g = job
            task = tasks[ti]
            return run_episode(policy, task, scenes[task.scene_id], cost_params, oracle_params, memory_params,
                               rollout_seed(seed, it, ti, g), env_config)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                trajectories = list(executor.map(rollout, jobs))
        else:
            trajectories = [rollout(job) for job in jobs]

        groups = []
        for k, ti in enumerate(batch):
            members = trajectories[k * cfg.group_size:(k + 1) * cfg.group_size]
            groups.append(make_group(tasks[ti].task_id, members, cost_params, cfg))

        stats = UpdateStats()
        for _ in range(cfg.updates_per_batch):
            params, stats = grpo_update(params, reference, groups, cfg, optimizer)
        if stats.mean_kl > cfg.kl_bound:
            logger.warning(f"第 {it} 次迭代与参考策略的平均KL {stats.mean_kl:.3f} 超过上限 {cfg.kl_bound}")

        shares = _action_shares(trajectories)
        point = CurvePoint(
            iteration=it,
            mean_return=stats.mean_return,
            mean_length=stats.mean_length,
            mean_kl=stats.mean_kl,
            clip_fraction=stats.clip_fraction,
            success_rate=float(np.mean([t.outcome == Outcome.SUCCESS for t in trajectories])),
            memory_share=shares[ActionKind.GET_MEMORY],
            navigate_share=shares[ActionKind.NAVIGATE],
            ask_share=shares[ActionKind.ASK],
        )
        curve.append(point)
        for callback in callbacks:
            callback(point)
        logger.debug(f"迭代 {it}: 回报 {point.mean_return:.3f}，长度 {point.mean_length:.2f}，KL {point.mean_kl:.4f}")

    params.version = f"hc_grpo-seed{seed}"
    logger.info(f"HC-GRPO 训练完成: 最终回报 {curve[-1].mean_return:.3f}，KL {curve[-1].mean_kl:.4f}")
    return params, curve


# ============ 检查点与曲线 ============

class Checkpoint(BaseModel):
    params: dict
    stage: str
    seed: int
    settings: dict = Field(default_factory=dict)
    curve: List[CurvePoint] = Field(default_factory=list)
    format_version: int = config.FORMAT_VERSION


def save_checkpoint(path: str, params: PolicyParams, stage: str, seed: int,
                    settings: Optional[BaseModel] = None, curve: Sequence[CurvePoint] = ()) -> None:
    checkpoint = Checkpoint(params=params.to_dict(), stage=stage, seed=seed,
                            settings=settings.model_dump() if settings is not None else {}, curve=list(curve))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(checkpoint.model_dump(mode="json"), f, ensure_ascii=False, indent=2)
    logger.info(f"检查点已保存: {path}")


def load_checkpoint(path: str) -> Tuple[PolicyParams, Checkpoint]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format_version") != config.FORMAT_VERSION:
        raise ConfigError(f"检查点 {path} 的格式版本不受支持")
    checkpoint = Checkpoint.model_validate(payload)
    return PolicyParams.from_dict(checkpoint.params), checkpoint


def curve_frame(curve: Sequence[CurvePoint]) -> pd.DataFrame:
    return pd.DataFrame([p.model_dump() for p in curve])


def export_curve(curve: Sequence[CurvePoint], csv_path: str, png_path: Optional[str] = None) -> pd.DataFrame:
    """导出训练曲线：CSV（迭代、平均回报、平均轨迹长度等）与双面板图"""
    df = curve_frame(curve)
    df.to_csv(csv_path, index=False, encoding="utf-8")
    if png_path and not df.empty:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        axes[0].plot(df["iteration"], df["mean_return"], color="tab:blue")
        axes[0].set_xlabel("iteration")
        axes[0].set_ylabel("mean return")
        axes[1].plot(df["iteration"], df["mean_length"], color="tab:orange")
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("trajectory length (decisions, response-length proxy)")
        fig.tight_layout()
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
    logger.info(f"训练曲线已导出: {csv_path}")
    return df


def window_means(curve: Sequence[CurvePoint], fraction: float = 0.1) -> Dict[str, Tuple[float, float]]:
    """前后各 fraction 比例迭代的平均回报与平均长度: {指标: (开头, 结尾)}"""
    if not curve:
        raise ValueError("训练曲线为空")
    k = max(1, int(len(curve) * fraction))
    head, tail = curve[:k], curve[-k:]
    return {
        "mean_return": (float(np.mean([p.mean_return for p in head])), float(np.mean([p.mean_return for p in tail]))),
        "mean_length": (float(np.mean([p.mean_length for p in head])), float(np.mean([p.mean_length for p in tail]))),
    }
