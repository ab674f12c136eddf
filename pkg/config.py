"""
系统配置文件
代价感知交互式具身搜索（桌面级）的默认参数、词表与路径
"""
import os

# 项目根目录
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))

# 输出路径（可被环境变量 SEARCHBENCH_OUTPUT_ROOT 覆盖，见 run_config.py）
OUTPUT_ROOT_ENV = "SEARCHBENCH_OUTPUT_ROOT"
OUTPUT_DIR = os.path.join(PROJECT_ROOT, "output")

# 日志配置
LOG_FILE = os.path.join(OUTPUT_DIR, "system.log")

# 持久化格式版本
FORMAT_VERSION = 1

# ============ 动作代价 ============
C_NAV = 1.0  # 每米导航代价
C_ASK_BASE = 0.5  # 提问基础代价
C_MEM = 0.01  # 记忆检索代价
ASK_ALPHA = 0.2  # 提问疲劳递增系数
COST_LAMBDA = 1.0  # 回报中代价项权重
R_SUCCESS = 1.0  # 成功奖励
R_FAIL = -0.1  # 失败/超时奖励
C_FORMAT = 0.1  # 格式错误惩罚
C_REF = 2.0  # SwC 参考代价

# ============ 模拟用户（疲劳模型） ============
ORACLE_ETA = 0.5  # 有用概率衰减率
ORACLE_P_FLOOR = 0.05  # 有用概率下限
INTERACTIVE_MAX_ATTEMPTS = 3  # 交互模式下连续读到该数量的非法输入后按无效回答处理

# ============ 情景记忆 ============
MEMORY_P_COVER = 0.6  # 物体被预置记忆覆盖的概率
MEMORY_P_STALE = 0.15  # 预置记忆位置过期的概率

# ============ 环境 ============
HORIZON = 12  # 单回合最大决策步数
MAX_CANDIDATES = 5  # 候选集上限（与动作槽位数一致）
DECISION_TIMEOUT = 10.0  # 外部策略单步超时（秒）

# ============ 词表 ============
ATTRIBUTE_KINDS = ("color", "size", "landmark")  # 属性种类（注册顺序即平局顺序）
OPEN_QUERY = "open"  # 开放式提问
COLORS = ("red", "blue", "green", "yellow", "black", "white", "gray", "brown")
SIZES = ("small", "medium", "large")
CATEGORIES = (
    "mug", "screwdriver", "book", "remote", "scissors", "bottle", "pen",
    "plate", "towel", "phone", "lamp", "box", "spoon", "cup", "notebook",
    "keyboard", "charger", "stapler", "headphones", "thermos",
)
UNSEEN_CATEGORIES = ("stapler", "headphones", "thermos")  # 训练集不出现的类别
LOCATION_NAMES = (
    "workbench", "sink", "sofa", "bookshelf", "dining_table", "kitchen_counter",
    "nightstand", "desk", "tv_stand", "window_sill", "wardrobe", "shoe_rack",
    "coffee_table", "fridge_top",
)
INSTRUCTION_TEMPLATE = "Find the {category}"

# ============ 场景生成 ============
SCENE_DIAMETER = 3.0  # 场景直径（米）
LOCATIONS_RANGE = (6, 9)  # 每个场景的位置数（含两端）
FILLER_OBJECTS_RANGE = (4, 8)  # 每个场景的非歧义物体数
CANDIDATE_DISTRIBUTION = {2: 0.35, 3: 0.30, 4: 0.20, 5: 0.15}  # 候选数分布
UNSEEN_FRACTION = 0.15  # 测试集中未见类别任务比例
GENERATION_RETRIES = 100  # 属性唯一性重采样次数

# 规模预设：desk 为单机规模，paper 为完整规模
PRESETS = {
    "desk": {"n_train_scenes": 40, "n_test_scenes": 15, "n_train_tasks": 400, "n_test_tasks": 200},
    "paper": {"n_train_scenes": 80, "n_test_scenes": 30, "n_train_tasks": 800, "n_test_tasks": 330},
}

# ============ 训练 ============
SFT_LR = 0.05  # 监督预热学习率
SFT_EPOCHS = 1  # 默认一轮
SFT_BATCH_SIZE = 16
WARMUP_RATIO = 0.1  # 余弦调度预热比例
GRPO_GROUP_SIZE = 8  # 每个任务的组内采样数 G
GRPO_LR = 5e-3
GRPO_CLIP_EPS = 0.2
GRPO_KL_BETA = 0.1
GRPO_ENTROPY_COEF = 0.01
GRPO_GAMMA = 0.99  # 记录但不使用（无评论家）
GRPO_VALUE_LOSS_WEIGHT = 1.0  # 记录但不使用（无评论家）
GRPO_TASKS_PER_BATCH = 8
GRPO_EPOCHS = 3
GRPO_UPDATES_PER_BATCH = 2
GRPO_KL_BOUND = 2.0  # 超过后记录警告
ADVANTAGE_EPS = 1e-8
LOG_RATIO_CLAMP = 20.0
EXPERT_REROLLS = 3  # 专家轨迹失败后的重试种子数

# ============ 专家规划 ============
PLANNER_FAILURE_PENALTY = 10.0  # 规划目标中失败/超时的等价代价
PLANNER_TIE_TOLERANCE = 1e-9  # 浮点模式下视为平局的差值
BRUTE_FORCE_MAX_CANDIDATES = 3  # 穷举校验的规模上限
BRUTE_FORCE_MAX_HORIZON = 6

# ============ 评估 ============
EVAL_SEEDS = (0, 1, 2, 3, 4)
# 按干扰物数量分桶（干扰物 1-2 个即 Easy/Medium，3-4 个即 Hard）
AMBIGUITY_BUCKETS = {"n=1-2": ("Easy", "Medium"), "n=3-4": ("Hard",)}

# 创建必要的目录
os.makedirs(OUTPUT_DIR, exist_ok=True)
