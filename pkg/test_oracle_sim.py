"""
模拟用户测试
"""
import math

import numpy as np
import pytest
from pydantic import ValidationError

from errors import EpisodeStateError
from oracle_sim import (
    NO_INFO_TEXT, InteractiveOracle, OracleParams, OracleState, best_pruning_kind, expected_pruning,
    interactive_answer, parse_human_reply, usefulness_probability,
)


class ScriptedChannel:
    """按预设脚本应答的提示通道"""

    def __init__(self, lines):
        self.lines = list(lines)
        self.written = []

    def write(self, text):
        self.written.append(text)

    def readline(self):
        return self.lines.pop(0) if self.lines else ""


def test_usefulness_decays_to_floor():
    assert usefulness_probability(1, 0.5, 0.05) == 1.0
    assert usefulness_probability(2, 0.5, 0.05) == pytest.approx(math.exp(-0.5))
    assert usefulness_probability(3, 0.5, 0.05) == pytest.approx(math.exp(-1.0))
    assert usefulness_probability(50, 0.5, 0.05) == 0.05
    # eta=0 时永远有效
    assert usefulness_probability(9, 0.0, 0.05) == 1.0
    with pytest.raises(ValueError):
        usefulness_probability(0, 0.5, 0.05)


def test_params_validation():
    with pytest.raises(ValidationError):
        OracleParams(eta=-0.1)
    with pytest.raises(ValidationError):
        OracleParams(p_floor=1.5)


def test_expected_pruning_and_open_query_kind(desk_scene):
    mugs = [desk_scene.object(o) for o in ("mug_1", "mug_2", "mug_3")]
    assert expected_pruning(mugs, "color") == pytest.approx(4 / 3)
    assert expected_pruning(mugs, "landmark") == pytest.approx(2.0)
    assert best_pruning_kind(mugs) == "landmark"
    # 尺寸与地标同样有效时按注册顺序取尺寸
    pair = [desk_scene.object("mug_1"), desk_scene.object("mug_3")]
    assert best_pruning_kind(pair) == "size"
    assert expected_pruning([], "color") == 0.0


def test_useful_replies_disclose_target_attribute(desk_scene):
    state = OracleState(desk_scene, "mug_2", OracleParams(), np.random.default_rng(0))
    reply = state.answer("color", ["mug_1", "mug_2", "mug_3"], useful=True)
    assert reply.useful and reply.kind == "color" and reply.value == "blue"
    assert reply.text == "It's the blue one."
    reply = state.answer("open", ["mug_1", "mug_2", "mug_3"], useful=True)
    assert reply.kind == "landmark" and reply.value == "sofa"
    assert "sofa" in reply.text
    reply = state.answer("size", ["mug_1", "mug_2"], useful=False)
    assert not reply.useful and reply.value is None and reply.text == NO_INFO_TEXT
    assert state.n_answered == 3


def test_invalid_query_and_closed_state(desk_scene):
    state = OracleState(desk_scene, "mug_1", OracleParams(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        state.answer("weight", ["mug_1"])
    assert state.n_answered == 0
    state.close()
    with pytest.raises(EpisodeStateError):
        state.answer("color", ["mug_1"])


def test_empirical_usefulness_matches_fatigue_model(desk_scene):
    params = OracleParams()
    rng = np.random.default_rng(1234)
    n_episodes = 4000
    hits = np.zeros(4)
    for _ in range(n_episodes):
        state = OracleState(desk_scene, "mug_3", params, rng)
        for n in range(4):
            hits[n] += state.answer("color", ["mug_1", "mug_3"]).useful
    expected = [usefulness_probability(n + 1, params.eta, params.p_floor) for n in range(4)]
    assert hits / n_episodes == pytest.approx(expected, abs=0.035)


def test_clone_shares_counter_value_not_identity(desk_scene):
    state = OracleState(desk_scene, "mug_1", OracleParams(), np.random.default_rng(0))
    state.answer("color", ["mug_1", "mug_2"], useful=True)
    copy = state.clone()
    copy.answer("size", ["mug_1", "mug_2"], useful=False)
    assert state.n_answered == 1 and copy.n_answered == 2
    assert state.next_probability() > copy.next_probability()


def test_parse_human_reply(desk_scene):
    assert parse_human_reply("color=red", desk_scene).value == "red"
    assert parse_human_reply(" landmark = sofa ", desk_scene).kind == "landmark"
    assert not parse_human_reply("pass", desk_scene).useful
    assert parse_human_reply("landmark=garage", desk_scene) is None
    assert parse_human_reply("color=plaid", desk_scene) is None
    assert parse_human_reply("red", desk_scene) is None


def test_interactive_answer_gives_up_after_three_bad_lines(desk_scene):
    channel = ScriptedChannel(["hmm", "size=large"])
    reply = interactive_answer("size", ["mug_1", "mug_3"], channel, desk_scene)
    assert reply.useful and reply.query == "size" and reply.value == "large"
    assert any("重新输入" in line for line in channel.written)

    channel = ScriptedChannel(["x", "y", "z", "color=red"])
    reply = interactive_answer("open", ["mug_1", "mug_3"], channel, desk_scene, max_attempts=3)
    assert not reply.useful and channel.lines == ["color=red"]
    assert sum("重新输入" in line for line in channel.written) == 2

    with pytest.raises(ValueError):
        interactive_answer("open", ["mug_1"], ScriptedChannel([]), desk_scene, max_attempts=0)


def test_interactive_oracle_counts_answers(desk_scene):
    oracle = InteractiveOracle(desk_scene, ScriptedChannel(["color=red"]))
    assert oracle.answer("color", ["mug_1", "mug_2"]).value == "red"
    assert oracle.n_answered == 1
    oracle.close()
    with pytest.raises(EpisodeStateError):
        oracle.answer("color", ["mug_1"])
