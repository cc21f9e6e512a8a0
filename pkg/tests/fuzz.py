"""Generator for tool-bearing generations used by the protocol fuzz tests."""

from __future__ import annotations

import json
import random

from finteam.llm_backend import ScriptedBackend, make_request
from finteam.mathtools import format_number
from finteam.tool_protocol import iter_closed_commands, run_tool_augmented_generation, split_generation

from oracles import random_tree, render

PROSE = [
    "营业收入同比增长", "因此毛利率为", "我们先计算流动比率，", "The growth rate is ", " and then ",
    "根据资料[1]，", "净利润率约为", "解方程组可得：", "样本数量：", "概率为", "。\n", "，",
    "（单位：百万元）", "ROE = ", " so the answer is ", "【注】", "a[b] c", "->", "→ 注意箭头",
]


def _args(rng: random.Random) -> tuple[str, str]:
    tool = rng.choice(["Calculator", "Calculator", "EquationSolver", "Counter", "ProbabilityTable"])
    if tool == "Calculator":
        return tool, render(random_tree(rng, 3, variables=()), rng)
    if tool == "EquationSolver":
        a, b = rng.randint(1, 9), rng.randint(1, 9)
        return tool, f"x+y={a + b}; x-y={a - b}" if rng.random() < 0.8 else "x+y=1; 2x+2y=2"
    if tool == "Counter":
        items = [str(rng.randint(0, 99)) for _ in range(rng.randint(0, 12))]
        sep = rng.choice([", ", " ", "、"])
        body = sep.join(items)
        return tool, f"[{body}]" if rng.random() < 0.5 else body
    return tool, format_number(rng.uniform(-3, 3))


def random_generation(rng: random.Random, max_calls: int = 8) -> tuple[str, str]:
    """Returns (generation as the model would write it, the prose alone)."""
    n = rng.randint(0, max_calls)
    parts, prose = [], []
    for _ in range(n + 1):
        piece = "".join(rng.choice(PROSE) for _ in range(rng.randint(0, 3)))
        parts.append(piece)
        prose.append(piece)
        if len(prose) > n:
            break
        tool, args = _args(rng)
        arrow = "→" if rng.random() < 0.7 else "->"
        claimed = rng.choice(["0", "42", "0.5", "x=1, y=2", "ERROR: oops", "3.141593"])
        parts.append(f"[{tool}({args}){arrow}{claimed}]")
    return "".join(parts), "".join(prose)



def run_generation(generation, registry=None, chunk=3):
    backend = ScriptedBackend([("", s) for s in split_generation(generation)], chunk_size=chunk)
    return run_tool_augmented_generation(backend, make_request("sys", "q"), registry), backend



def consistent_generation(rng: random.Random, min_calls: int = 0) -> str:
    """A generation whose embedded results are the true tool outputs."""
    while True:
        generation, _ = random_generation(rng)
        backend = ScriptedBackend([("", s) for s in split_generation(generation)])
        text = run_tool_augmented_generation(backend, make_request(None, "q")).final_text
        if len(list(iter_closed_commands(text))) >= min_calls:
            return text


def plant_mismatch(rng: random.Random, text: str) -> str:
    """Corrupt the embedded result of one randomly chosen command."""
    cmd = rng.choice(list(iter_closed_commands(text)))
    cut = cmd.end - 1 - len(cmd.result)
    return text[:cut] + "9" + cmd.result + text[cmd.end - 1:]


def selfinstruct_replies(rng: random.Random, n: int, n_bad: int) -> list[str]:
    """``n`` JSON replies for the self-instruct prompt; exactly ``n_bad`` carry a planted mismatch."""
    bad = set(rng.sample(range(n), n_bad))
    replies = []
    for i in range(n):
        output = consistent_generation(rng, min_calls=1 if i in bad else 0)
        if i in bad:
            output = plant_mismatch(rng, output)
        replies.append(json.dumps({"instruction": f"第{i}题：请计算", "input": "", "output": output or "无需计算。"},
                                  ensure_ascii=False))
    return replies
