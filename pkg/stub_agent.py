"""
外部智能体示例（逐行JSON协议）
用法: python stub_agent.py [nearest|found-first|garbage|silent|wrong-id|slow-first]
"""
import json
import sys
import time

SLOW_FIRST_DELAY = 2.5  # slow-first 模式下首个请求的延迟（秒）


def emit(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def choose(mode: str, observation: dict):
    belief = observation["belief"]
    slots = belief["slots"]
    if mode == "found-first":
        return {"kind": "Found", "arg": slots[0]["id"]}
    # nearest：先问一次，再前往最近的已知候选
    if belief["n_asks"] == 0 and len(slots) > 1:
        return "Ask(open)"
    for slot in slots:
        if slot["co_located"]:
            return {"kind": "Found", "arg": slot["id"]}
    for slot in slots:
        if slot["location_id"] is not None:
            return {"kind": "Navigate", "arg": slot["location_id"]}
    if belief["nearest_unvisited_id"] is not None:
        return {"kind": "Navigate", "arg": belief["nearest_unvisited_id"]}
    return {"kind": "Found", "arg": slots[0]["id"]}


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "nearest"
    emit({"type": "handshake", "protocol_version": 1, "name": f"stub-{mode}"})
    answered = 0
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        request = json.loads(line)
        if request.get("type") == "shutdown":
            break
        rid = request.get("request_id", "")
        if mode == "garbage":
            sys.stdout.write("this is not json\n")
            sys.stdout.flush()
        elif mode == "silent":
            time.sleep(3600)
        elif mode == "wrong-id":
            emit({"type": "response", "request_id": rid + "-x", "action": "Ask(open)"})
        else:
            if mode == "slow-first" and answered == 0:
                time.sleep(SLOW_FIRST_DELAY)
            emit({"type": "response", "request_id": rid, "action": choose(mode, request["observation"])})
        answered += 1


if __name__ == "__main__":
    main()
