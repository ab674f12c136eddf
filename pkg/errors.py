"""
异常定义
配置类错误与运行期错误分开，命令行据此返回不同退出码
"""

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3
EXIT_INTERRUPTED = 130


class SearchBenchError(Exception):
    """所有业务异常的基类"""

    exit_code = EXIT_RUNTIME_ERROR


class ConfigError(SearchBenchError):
    """配置非法或前置条件不满足"""

    exit_code = EXIT_CONFIG_ERROR


class ArtifactMissingError(ConfigError):
    """缺少上游产物（例如未执行 sft 就执行 rl）"""

    def __init__(self, artifact: str, command: str):
        self.artifact = artifact
        self.command = command
        super().__init__(f"缺少产物 {artifact}，请先执行 `{command}` 子命令")


class SceneLookupError(SearchBenchError, KeyError):
    """场景中不存在的位置或物体ID"""

    def __init__(self, kind: str, item_id: str):
        self.kind = kind
        self.item_id = item_id
        super().__init__(f"未知{kind}ID: {item_id}")

    def __str__(self) -> str:
        return self.args[0]


class TaskValidationError(SearchBenchError, ValueError):
    """任务与场景不一致"""


class EpisodeStateError(SearchBenchError, RuntimeError):
    """回合状态非法（结束后继续调用等）"""


class PlannerError(SearchBenchError):
    """专家规划失败：输入超出限制，或任务在步数上限内无解"""


class GenerationError(SearchBenchError):
    """场景生成多次重采样仍失败"""


class InjectionError(SearchBenchError):
    """无法注入指定规模的歧义"""


class TrainingDivergedError(SearchBenchError):
    """训练出现非有限数值"""


class ProtocolError(SearchBenchError):
    """外部策略通信协议错误"""


class EpisodeRunError(SearchBenchError):
    """回合执行中策略抛出异常"""

    def __init__(self, task_id: str, seed: int, cause: BaseException):
        self.task_id = task_id
        self.seed = seed
        self.cause = cause
        super().__init__(f"任务 {task_id}（种子 {seed}）执行失败: {cause!r}")
