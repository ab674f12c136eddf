"""
外部策略适配器
通过子进程标准输入输出或TCP套接字，以逐行JSON与外部智能体通信

协议（每条消息一行JSON）：
  智能体启动后先发送 {"type": "handshake", "protocol_version": 1, "name": ...}
  环境发送 {"type": "decide", "request_id": "r-1", "observation": {...}}
  智能体回复 {"type": "response", "request_id": "r-1", "action": {"kind": "Navigate", "arg": "loc_03"}}
             （action 也可以是 "Navigate(loc_03)" 形式的字符串）
  结束时环境发送 {"type": "shutdown"}
超时、非法JSON、request_id 不匹配、动作无法解析都按格式错误处理
"""
import json
import queue
import re
import socket
import subprocess
import threading
import time
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, model_validator

import config
from actions import parse_action
from episode_env import Observation
from errors import ConfigError, ProtocolError
from policy import Decision

PROTOCOL_VERSION = 1
_EOF = object()
_REQUEST_ID = re.compile(r"r-(\d+)")


class ChannelConfig(BaseModel):
    """外部策略通道配置：command 与 host/port 二选一"""

    command: Optional[List[str]] = None
    host: Optional[str] = None
    port: Optional[int] = None
    timeout: float = config.DECISION_TIMEOUT
    name: str = "external"

    @model_validator(mode="after")
    def _check(self):
        if (self.command is None) == (self.host is None):
            raise ValueError("command 与 host/port 必须且只能指定一种")
        if self.host is not None and self.port is None:
            raise ValueError("使用套接字时必须指定 port")
        if self.timeout <= 0:
            raise ValueError("timeout 必须为正")
        return self


class _LineChannel:
    """后台线程读取逐行消息，主线程按超时取用"""

    def __init__(self, reader, writer, closer):
        self._writer = writer
        self._closer = closer
        self._lines: "queue.Queue" = queue.Queue()
        self._thread = threading.Thread(target=self._pump, args=(reader,), daemon=True)
        self._thread.start()

    def _pump(self, reader) -> None:
        try:
            for line in reader:
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(_EOF)

    def send(self, payload: dict) -> None:
        self._writer.write(json.dumps(payload, ensure_ascii=False) + "\n")
        self._writer.flush()

    def receive(self, timeout: float) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError(f"等待外部策略回复超时（{timeout}s）") from None
        if line is _EOF:
            self._lines.put(_EOF)
            raise ProtocolError("外部策略已关闭连接")
        return line

    def close(self) -> None:
        self._closer()


def _open_subprocess(command: Sequence[str]) -> _LineChannel:
    try:
        process = subprocess.Popen(
            list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, encoding="utf-8", bufsize=1,
        )
    except OSError as e:
        raise ConfigError(f"无法启动外部策略 {command}: {e}") from e

    def closer():
        try:
            if process.stdin and not process.stdin.closed:
                process.stdin.close()
            process.wait(timeout=2.0)
        except (OSError, subprocess.TimeoutExpired):
            process.kill()

    return _LineChannel(process.stdout, process.stdin, closer)


def _open_socket(host: str, port: int, timeout: float) -> _LineChannel:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise ConfigError(f"无法连接外部策略 {host}:{port}: {e}") from e
    sock.settimeout(None)
    reader = sock.makefile("r", encoding="utf-8", newline="\n")
    writer = sock.makefile("w", encoding="utf-8", newline="\n")

    def closer():
        try:
            writer.close()
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        finally:
            sock.close()

    return _LineChannel(reader, writer, closer)


class ExternalPolicy:
    """
    外部策略

    Args:
        channel_config: 通道配置
    """

    def __init__(self, channel_config: ChannelConfig):
        self.config = channel_config
        self.name = channel_config.name
        self._channel: Optional[_LineChannel] = None
        self._counter = 0
        self.agent_name: Optional[str] = None

    def open(self) -> "ExternalPolicy":
        cfg = self.config
        if cfg.command is not None:
            self._channel = _open_subprocess(cfg.command)
        else:
            self._channel = _open_socket(cfg.host, cfg.port, cfg.timeout)
        try:
            hello = json.loads(self._channel.receive(cfg.timeout))
        except (ProtocolError, json.JSONDecodeError) as e:
            self.close()
            raise ProtocolError(f"外部策略握手失败: {e}") from e
        if hello.get("type") != "handshake" or hello.get("protocol_version") != PROTOCOL_VERSION:
            self.close()
            raise ProtocolError(f"外部策略握手消息非法: {hello}")
        self.agent_name = hello.get("name")
        logger.info(f"已连接外部策略 {self.agent_name}")
        return self

    def close(self) -> None:
        if self._channel is None:
            return
        try:
            self._channel.send({"type": "shutdown"})
        except (OSError, ValueError):
            pass
        self._channel.close()
        self._channel = None

    def __enter__(self) -> "ExternalPolicy":
        return self.open()

    def __exit__(self, *exc) -> None:
        self.close()

    def decide(self, obs: Observation, rng: np.random.Generator) -> Decision:
        if self._channel is None:
            self.open()
        self._counter += 1
        request_id = f"r-{self._counter}"
        deadline = time.monotonic() + self.config.timeout
        try:
            self._channel.send({"type": "decide", "request_id": request_id, "observation": obs.model_dump(mode="json")})
            while True:
                line = self._channel.receive(max(deadline - time.monotonic(), 0.0))
                stale = self._stale_request(line)
                if stale is None:
                    break
                # 超时后才到达的旧回复
                logger.warning(f"丢弃过期的外部策略回复 {stale}（当前 {request_id}）")
        except (ProtocolError, OSError, ValueError) as e:
            logger.warning(f"外部策略通信失败: {e}")
            return Decision(action=None, raw=f"<protocol error: {e}>")
        return self._parse_response(line, request_id)

    def _stale_request(self, line: str) -> Optional[str]:
        """回复属于更早的请求时返回其 request_id"""
        try:
            payload = json.loads(line)
        except json.JSONDecodeError:
            return None
        if not isinstance(payload, dict) or not isinstance(payload.get("request_id"), str):
            return None
        match = _REQUEST_ID.fullmatch(payload["request_id"])
        if match is None or int(match.group(1)) >= self._counter:
            return None
        return payload["request_id"]

    def _parse_response(self, line: str, request_id: str) -> Decision:
        raw = line.strip()
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError:
            logger.warning(f"外部策略输出不是合法JSON: {raw[:80]}")
            return Decision(action=None, raw=raw)
        if not isinstance(payload, dict) or payload.get("request_id") != request_id:
            logger.warning(f"外部策略回复的 request_id 不匹配（期望 {request_id}）")
            return Decision(action=None, raw=raw)
        action = parse_action(payload.get("action"))
        return Decision(action=action, raw=raw)


def external_policy(channel_config: ChannelConfig) -> ExternalPolicy:
    return ExternalPolicy(channel_config).open()
