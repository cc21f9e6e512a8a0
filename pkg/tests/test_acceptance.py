"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they happen (visible with ``-s``) and repeated in the
terminal summary by ``conftest.py``.
"""

import functools
import json
import math
import random
import subprocess
import sys
import time

import httpx
import numpy as np

from finteam.config import load_config
from finteam.datagen import self_instruct_expand
from finteam.eval_harness import (
    PickTally,
    acceptance_rate,
    extract_option,
    f1_extraction,
    lcs_length,
    paired_t_test,
    rouge_l,
)
from finteam.knowledge_store import FallbackEmbedder, KnowledgeStore
from finteam.llm_backend import ScriptedBackend
from finteam.mathtools import MathError, eval_expression, gaussian_solve, normal_cdf
from finteam.service import make_server
from finteam.text import tokenize
from finteam.tool_protocol import (
    ToolCall,
    detect_call,
    execute_call,
    iter_closed_commands,
    open_headers,
    strip_commands,
)
from finteam.workflows import (
    PEST_HEADER,
    SWOT_HEADER,
    WorkflowDeps,
    WorkflowTrace,
    load_trace,
    replay,
    run_company,
    run_industry,
    run_macro,
    run_statement_analysis,
)

from fuzz import random_generation, run_generation, selfinstruct_replies
from helpers import (
    COMPANY_QUERY,
    INDUSTRY_QUERY,
    MACRO_QUERY,
    SERVICE_REQUESTS,
    STATEMENTS,
    TableEmbedder,
    check_trace,
    company_script,
    industry_script,
    macro_script,
    make_store,
    random_corpus,
    scripted,
    seed_pool,
    statements_script,
    write_service_config,
)
from oracles import (
    OracleError,
    brute_force_topk,
    normal_cdf_oracle,
    oracle_eval,
    random_tree,
    render,
    t_two_tailed_oracle,
)

RESULTS: list[str] = []


def criterion(number: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def test(*args, **kwargs):
            started = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except Exception as exc:
                _record(number, title, False, f"{type(exc).__name__}: {exc}".splitlines()[0][:160], started)
                raise
            _record(number, title, True, detail or "", started)
        return test
    return wrap


def _record(number: int, title: str, ok: bool, detail: str, started: float) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({time.perf_counter() - started:.2f}s) {detail}"
    RESULTS.append(line.rstrip())
    print(line)


@criterion(1, "tool math suite")
def test_math_suite():
    started = time.perf_counter()
    worst = max(abs(normal_cdf(float(x)) - normal_cdf_oracle(float(x))) for x in np.linspace(-8, 8, 1000))
    assert worst <= 1e-7, worst
    assert abs(normal_cdf(1.96) - 0.9750021) <= 1e-6

    rng = np.random.default_rng(2024)
    solver_err = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 7))
        a = rng.normal(size=(n, n))
        while abs(np.linalg.det(a)) < 1e-3:
            a = rng.normal(size=(n, n))
        x = rng.normal(size=n)
        solver_err = max(solver_err, float(np.max(np.abs(np.array(gaussian_solve(a.tolist(), (a @ x).tolist())) - x))))
    assert solver_err <= 1e-6, solver_err

    r = random.Random(2024)
    errors = 0
    for i in range(10_000):
        tree = random_tree(r)
        env = {v: round(r.uniform(-5, 5), 3) for v in "abc"}
        text = render(tree, r)
        try:
            expected = oracle_eval(tree, env)
        except OracleError as exc:
            expected = exc.kind
        try:
            got = eval_expression(text, env)
        except MathError as exc:
            got = exc.kind
        if isinstance(expected, str) or isinstance(got, str):
            assert got == expected, (text, env, got, expected)
            errors += 1
        else:
            assert math.isclose(got, expected, rel_tol=1e-9, abs_tol=1e-12), (text, env, got, expected)
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, elapsed
    return f"cdf max err {worst:.1e}, solver max err {solver_err:.1e}, 10000 expressions ({errors} error cases)"


@criterion(2, "tool protocol round trip")
def test_protocol_round_trip():
    rng = random.Random(7)
    commands = 0
    for i in range(1000):
        generation, prose = random_generation(rng)
        result, _ = run_generation(generation, chunk=rng.randint(1, 9))
        final = result.final_text
        assert open_headers(final) == [], i
        closed = list(iter_closed_commands(final))
        assert len(closed) == len(result.calls) <= 8
        for cmd in closed:
            assert execute_call(ToolCall(cmd.tool_name, cmd.args_raw, (0, 0))).rendered == cmd.result, (i, cmd)
        assert strip_commands(final) == prose, i
        assert detect_call(final) is None
        commands += len(closed)
    return f"1000 generations, {commands} commands"


GOLDEN = {
    "macro": lambda s: run_macro(MACRO_QUERY, WorkflowDeps(scripted(macro_script()), s)),
    "industry": lambda s: run_industry(INDUSTRY_QUERY, True, WorkflowDeps(scripted(industry_script()), s)),
    "industry-no-news": lambda s: run_industry(INDUSTRY_QUERY, False,
                                               WorkflowDeps(scripted(industry_script(False)), s)),
    "company": lambda s: run_company(COMPANY_QUERY, True, WorkflowDeps(scripted(company_script()), s)),
    "statements": lambda s: run_statement_analysis(STATEMENTS, WorkflowDeps(scripted(statements_script()), s)),
}


@criterion(3, "workflow structure")
def test_workflow_structure():
    store = make_store()
    traces = {}
    for name, run in GOLDEN.items():
        runs = [run(store) for _ in range(3)]
        assert len({t.final_report.encode("utf-8") for t in runs}) == 1, name
        for t in runs:
            check_trace(t)
        restored = WorkflowTrace.from_dict(json.loads(runs[0].to_json()))
        assert replay(restored, WorkflowDeps(ScriptedBackend([]), store)).final_report == runs[0].final_report
        traces[name] = runs[0]

    assert [s.label for s in traces["macro"].steps] == ["extract_terms", "explain_terms", "gather_supplementary",
                                                        "compile_response"]
    news = [s.label for s in traces["industry"].steps]
    assert "recent_news" in news and len(news) == len(traces["industry-no-news"].steps) + 1
    assert "recent_news" not in [s.label for s in traces["industry-no-news"].steps]
    assert PEST_HEADER in traces["company"].final_report and SWOT_HEADER in traces["company"].final_report

    statements = traces["statements"]
    rendered = {c["call"]["args_raw"]: c["result"]["rendered"] for s in statements.steps for c in s.tool_calls}
    entries = statements.options["ratios"]["entries"]
    for entry in entries:
        assert entry["formula_expression"] in rendered, entry["name"]
    return f"{len(GOLDEN)} golden traces x3, {len(entries)} ratios traced to tool calls"


PICK_COUNTS = {"FinTeam": 93, "Qwen2.5-7B-Chat": 14, "GPT-4o": 8, "ChatGLM3-6B": 6, "Xuanyuan-13B": 29}
PICK_PERCENT = {"FinTeam": "62.00", "Qwen2.5-7B-Chat": "9.33", "GPT-4o": "5.33", "ChatGLM3-6B": "4.00",
                  "Xuanyuan-13B": "19.33"}


@criterion(4, "acceptance-rate arithmetic")
def test_acceptance_rates():
    assert f"{acceptance_rate(PickTally({'FinTeam': 93, 'others': 57}, 150), 'FinTeam') * 100:.2f}" == "62.00"
    tally = PickTally(dict(PICK_COUNTS), 150)
    shown = {m: f"{acceptance_rate(tally, m) * 100:.2f}" for m in PICK_COUNTS}
    assert shown == PICK_PERCENT, shown
    exact = math.fsum(acceptance_rate(tally, m) for m in PICK_COUNTS)
    assert abs(exact - 1.0) <= 1e-12
    rounded = sum(float(v) for v in shown.values())
    assert abs(rounded - 100.0) <= 0.005 * len(PICK_COUNTS)
    return f"rounded rates sum to {rounded:.2f}%"


@criterion(5, "paired t-test vs integration oracle")
def test_paired_t():
    rng = random.Random(5)
    worst = 0.0
    for _ in range(50):
        n = rng.randint(5, 150)
        a = [rng.gauss(4, 0.6) for _ in range(n)]
        b = [x - rng.choice([0.0, 0.1, 0.3]) + rng.gauss(0, 0.5) for x in a]
        res = paired_t_test(a, b)
        assert res.degrees_of_freedom == n - 1
        worst = max(worst, abs(res.p_value - t_two_tailed_oracle(res.t_statistic, n - 1)))
    assert worst <= 1e-3, worst
    hand = paired_t_test([1, 2, 3], [1, 1, 1])
    assert abs(hand.t_statistic - math.sqrt(3)) <= 1e-9 and hand.degrees_of_freedom == 2
    assert abs(hand.p_value - 0.2254) <= 1e-3
    return f"max |p - oracle| {worst:.1e}, hand case p={hand.p_value:.4f}"


@criterion(6, "retrieval oracle equality")
def test_retrieval():
    rng = random.Random(6)
    for seed in range(200):
        n, dim, k = rng.randint(1, 1000), rng.randint(2, 24), rng.randint(1, 12)
        table, docs = random_corpus(rng, n, dim)
        table["query"] = [rng.gauss(0, 1) for _ in range(dim)]
        store = KnowledgeStore(embedder=TableEmbedder(table))
        store.ingest_many(docs)
        hits = store.retrieve("kb", "query", k)
        oracle = brute_force_topk(table["query"], [table[d.body] for d in docs], [(d.id, 0) for d in docs], k)
        assert [(h.chunk.doc_id, h.chunk.ordinal) for h in hits] == [key for _, key in oracle], seed

    texts = ["央行 利率", "new energy vehicles 动力电池", "ROE=净利润/股东权益"]
    code = ("import json,sys; from finteam.knowledge_store import FallbackEmbedder; "
            "print(json.dumps([FallbackEmbedder().embed(t) for t in json.loads(sys.argv[1])]))")
    outputs = {subprocess.run([sys.executable, "-c", code, json.dumps(texts)], capture_output=True, text=True,
                              check=True, env={"PYTHONHASHSEED": str(seed), "PATH": "/usr/bin:/bin"}).stdout
               for seed in (1, 2, 3)}
    assert len(outputs) == 1
    assert json.loads(outputs.pop()) == [FallbackEmbedder().embed(t) for t in texts]
    return "200 corpora match brute force; embeddings identical across 3 processes"


@criterion(7, "metrics")
def test_metrics(fixtures_dir):
    c, r = tokenize("a b c d"), tokenize("a c d")
    lcs = lcs_length(c, r)
    assert (lcs / len(c), lcs / len(r)) == (0.75, 1.0)
    assert abs(rouge_l("a b c d", "a c d") - 0.8571) <= 1e-4
    assert abs(f1_extraction({"a", "b", "c"}, {"b", "c", "d"}) - 2 / 3) <= 1e-12
    rows = [json.loads(line) for line in (fixtures_dir / "mc_responses.jsonl").read_text(encoding="utf-8").splitlines()]
    agreement = sum(extract_option(row["response"]) == row["label"] for row in rows) / len(rows)
    assert len(rows) == 40 and agreement >= 0.95, agreement
    return f"mc agreement {agreement:.1%} on {len(rows)} responses"


@criterion(8, "datagen validator")
def test_datagen_validator():
    rng = random.Random(8)
    planted = kept = 0
    for _ in range(40):
        n = rng.randint(1, 15)
        n_bad = rng.randint(0, n // 2)
        replies = selfinstruct_replies(rng, n, n_bad)
        result = self_instruct_expand(seed_pool(), n, ScriptedBackend([("", x) for x in replies]),
                                      acceptance_floor=0)
        assert result.rejected == result.reasons["mismatch"] == n_bad
        for rec in result.records:
            for cmd in iter_closed_commands(rec.output):
                assert execute_call(ToolCall(cmd.tool_name, cmd.args_raw, (0, 0))).rendered == cmd.result
        planted += n_bad
        kept += len(result.records)
    return f"{planted} planted mismatches rejected exactly, {kept} kept records re-execute"


@criterion(9, "service end-to-end")
def test_service(tmp_path):
    cfg = load_config(write_service_config(tmp_path))
    server = make_server(cfg, "127.0.0.1", 0)
    server.start_background()
    slowest = 0.0
    try:
        for name, payload in SERVICE_REQUESTS.items():
            started = time.perf_counter()
            resp = httpx.post(f"{server.url}/v1/analyze", json=payload, timeout=10)
            slowest = max(slowest, time.perf_counter() - started)
            assert resp.status_code == 200, (name, resp.text)
            body = resp.json()
            trace = load_trace(cfg.runs_dir, body["trace_id"])
            again = replay(trace, WorkflowDeps(ScriptedBackend([]), KnowledgeStore(cfg.data_dir)))
            assert again.final_report == body["report"], name
    finally:
        server.shutdown()
        server.server_close()
    assert slowest < 2.0, slowest
    return f"4 scenarios, slowest request {slowest:.3f}s, all traces replay"
