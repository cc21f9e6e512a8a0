"""``finteam`` command line. Exit codes: 0 ok, 1 domain error, 2 usage error."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import datagen, eval_harness
from .config import (
    ConfigParseError,
    ConfigValidationError,
    EngineConfig,
    build_backend,
    build_prompts,
    build_registry,
    build_store,
    load_config,
    validate_config,
)
from .datagen import DataGenError
from .fin_ratios import FinancialStatements, StatementValidationError, evaluate_catalog, validate
from .knowledge_store import UnknownKnowledgeBase, load_documents
from .llm_backend import BackendError
from .mathtools import MathError, format_number
from .tool_protocol import TOOL_NAMES, ToolCall, execute_call
from .workflows import WorkflowDeps, WorkflowError, parse_scenario, route_scenario, run_scenario, save_trace

log = logging.getLogger("finteam")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
DOMAIN_ERRORS = (MathError, StatementValidationError, WorkflowError, BackendError, ConfigParseError,
                 ConfigValidationError, DataGenError, UnknownKnowledgeBase, ValueError, KeyError, OSError)


class DomainError(Exception):
    pass


def _emit(args: argparse.Namespace, payload: Any, text: str) -> None:
    if args.json:
        print(json.dumps(payload, ensure_ascii=False, indent=2))
    else:
        print(text)


def _config(args: argparse.Namespace, need_backend: bool = False) -> EngineConfig:
    path = args.config or os.environ.get("FINTEAM_CONFIG")
    if path:
        return load_config(path)
    if Path("finteam.toml").is_file():
        return load_config("finteam.toml")
    cfg = EngineConfig()
    if need_backend:
        raise DomainError("no config found: pass --config, set FINTEAM_CONFIG or create finteam.toml")
    errors = [e for e in validate_config(cfg) if not e.startswith("backend.")]
    if errors:
        raise ConfigValidationError(errors)
    return cfg


def _deps(cfg: EngineConfig) -> WorkflowDeps:
    return WorkflowDeps(build_backend(cfg), build_store(cfg), build_registry(cfg), build_prompts(cfg),
                        context_budget=cfg.limits.context_budget)


def cmd_calc(args: argparse.Namespace) -> int:
    result = execute_call(ToolCall(args.tool, args.expression, (0, 0)))
    if result.error is not None:
        _emit(args, {"tool": args.tool, "input": args.expression, "error": result.error}, f"error: {result.error}")
        return EXIT_DOMAIN
    _emit(args, {"tool": args.tool, "input": args.expression, "value": result.value, "rendered": result.rendered},
          result.rendered)
    return EXIT_OK


def _load_statements(path: str) -> FinancialStatements:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    statements = FinancialStatements.from_dict(data)
    violations = validate(statements)
    if violations:
        raise StatementValidationError(violations)
    return statements


def cmd_ratios(args: argparse.Namespace) -> int:
    report = evaluate_catalog(_load_statements(args.statements))
    payload = report.to_dict()
    lines = ["name\tcategory\texpression\tvalue"]
    for e in report.entries:
        shown = format_number(e.value) if e.value is not None else e.note
        lines.append(f"{e.name}\t{e.category}\t{e.formula_expression}\t{shown}")
    if args.figure:
        from .plotting import ratio_figure
        path = ratio_figure(report, args.figure)
        payload["figure"] = str(path)
        lines.append(f"# figure\t{path}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_ask(args: argparse.Namespace) -> int:
    cfg = _config(args, need_backend=True)
    deps = _deps(cfg)
    if args.scenario == "auto":
        scenario = route_scenario(args.query, deps.backend, deps.prompts)
        if scenario is None:
            raise DomainError("auto-router could not map the query to a scenario")
    else:
        scenario = parse_scenario(args.scenario)
    statements = json.loads(Path(args.statements).read_text(encoding="utf-8")) if args.statements else None
    options = {"include_news": args.include_news, "with_sentiment": args.with_sentiment}
    try:
        trace = run_scenario(scenario, args.query or "", deps, options, statements)
    except WorkflowError as exc:
        save_trace(exc.trace, cfg.runs_dir)
        raise
    path = save_trace(trace, cfg.runs_dir)
    _emit(args, {"scenario": scenario.value, "report": trace.final_report, "trace_id": trace.trace_id,
                 "trace_path": str(path)}, trace.final_report)
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _config(args)
    store = build_store(cfg)
    docs = []
    for p in args.paths:
        docs += load_documents(args.kb, p)
    if not docs:
        raise DomainError("no documents found")
    chunks = store.ingest_many(docs)
    _emit(args, {"kb": args.kb, "documents": len(docs), "chunks": chunks},
          f"ingested {len(docs)} documents ({chunks} chunks) into {args.kb}")
    return EXIT_OK


def cmd_datagen(args: argparse.Namespace) -> int:
    cfg = _config(args, need_backend=True)
    backend, prompts = build_backend(cfg), build_prompts(cfg)
    seeds = datagen.load_seeds(args.seeds)
    payload: dict[str, Any] = {"procedure": args.procedure, "out": args.out}
    if args.procedure == "cor":
        store = build_store(cfg)
        kbs = args.kb or store.kb_names()
        payload["written"] = datagen.run_cor(seeds, args.out, args.n, backend, store, kbs, args.k, prompts)
    elif args.procedure == "selfchat":
        payload["written"] = datagen.run_selfchat(seeds, args.out, args.n, backend, args.turns, prompts)
    else:
        res = datagen.run_selfinstruct(seeds, args.out, args.n, backend, prompts, args.rng_seed, args.floor)
        payload.update(written=len(res.records), attempts=res.attempts, rejected=res.rejected,
                       reasons=dict(res.reasons))
    _emit(args, payload, "\n".join(f"{k}\t{v}" for k, v in payload.items()))
    return EXIT_OK


def _numbers(path: str) -> list[float]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        return [float(x) for x in json.loads(text)]
    return [float(x) for x in text.split()]


def _jsonl(path: str) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def cmd_eval(args: argparse.Namespace) -> int:
    if args.eval_cmd == "ttest":
        r = eval_harness.paired_t_test(_numbers(args.a), _numbers(args.b), welch=args.welch)
        payload = {"t_statistic": r.t_statistic, "p_value": r.p_value, "degrees_of_freedom": r.degrees_of_freedom,
                   "n": r.n, "variant": r.variant}
        _emit(args, payload, "\n".join(f"{k}\t{v}" for k, v in payload.items()))
        return EXIT_OK
    if args.eval_cmd == "metrics":
        rows = _jsonl(args.file)
        if args.kind == "rouge":
            scores = [eval_harness.rouge_l(r["candidate"], r["reference"]) for r in rows]
            payload = {"metric": "rouge_l", "n": len(rows), "mean": sum(scores) / len(scores) if scores else 0.0}
        elif args.kind == "f1":
            scores = [eval_harness.f1_extraction(set(r["predicted"]), set(r["gold"])) for r in rows]
            payload = {"metric": "f1", "n": len(rows), "mean": sum(scores) / len(scores) if scores else 0.0}
        elif args.kind == "mc":
            payload = {"metric": "mc_accuracy", "n": len(rows),
                       "accuracy": eval_harness.mc_accuracy([r["response"] for r in rows], [r["gold"] for r in rows])}
        else:
            payload = {"metric": "formula_result", "n": len(rows), **eval_harness.formula_result_accuracy(rows)}
        _emit(args, payload, "\n".join(f"{k}\t{v}" for k, v in payload.items()))
        return EXIT_OK
    if args.eval_cmd == "tally":
        picks = [line.strip() for line in Path(args.file).read_text(encoding="utf-8").splitlines() if line.strip()]
        tally = eval_harness.PickTally.from_picks(picks)
        rates = {m: eval_harness.acceptance_rate(tally, m) for m in sorted(tally.wins)}
        _emit(args, {"wins": tally.wins, "total": tally.total, "rates": rates},
              "\n".join(f"{m}\t{tally.wins[m]}\t{rates[m]:.2%}" for m in rates))
        return EXIT_OK
    cfg = _config(args, need_backend=True)
    items = eval_harness.load_eval_items(args.file)
    result = eval_harness.run_judge_eval(items, build_backend(cfg), build_prompts(cfg), args.workers, args.baseline)
    payload = result.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
    lines = ["model\t" + "\t".join(eval_harness.DIMENSIONS + ("overall",))]
    for m, means in result.per_model.items():
        lines.append(m + "\t" + "\t".join(f"{means[d]:.4f}" for d in eval_harness.DIMENSIONS + ("overall",)))
    if args.figure:
        from .plotting import judge_means_figure
        payload["figure"] = str(judge_means_figure(result.per_model, args.figure))
        lines.append(f"# figure\t{payload['figure']}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve
    serve(_config(args, need_backend=True), args.host, args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--config", help="TOML config (default: $FINTEAM_CONFIG or ./finteam.toml)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="finteam", description="Multi-agent financial analysis engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ask", parents=[common], help="run a scenario workflow")
    p.add_argument("query", nargs="?", default="")
    p.add_argument("--scenario", required=True, choices=["macro", "industry", "company", "statements", "auto"])
    p.add_argument("--include-news", action="store_true")
    p.add_argument("--with-sentiment", action="store_true")
    p.add_argument("--statements", help="statements JSON (statements scenario)")
    p.set_defaults(fn=cmd_ask)

    p = sub.add_parser("ingest", parents=[common], help="add documents to a knowledge base")
    p.add_argument("kb")
    p.add_argument("paths", nargs="+")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("ratios", parents=[common], help="ratio report for a statements JSON file")
    p.add_argument("statements")
    p.add_argument("--figure", help="also write a bar chart (png/pdf/svg)")
    p.set_defaults(fn=cmd_ratios)

    p = sub.add_parser("calc", parents=[common], help="run one tool")
    p.add_argument("expression")
    p.add_argument("--tool", default="Calculator", choices=TOOL_NAMES)
    p.set_defaults(fn=cmd_calc)

    p = sub.add_parser("datagen", parents=[common], help="build training records")
    p.add_argument("procedure", choices=["cor", "selfinstruct", "selfchat"])
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--kb", action="append", help="kb for CoR retrieval (repeatable; default all)")
    p.add_argument("-k", type=int, default=3)
    p.add_argument("--turns", type=int, default=4)
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--floor", type=float, default=datagen.DEFAULT_ACCEPTANCE_FLOOR)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("eval", parents=[common], help="judge scoring, metrics and significance tests")
    esub = p.add_subparsers(dest="eval_cmd", required=True)
    e = esub.add_parser("judge", parents=[common])
    e.add_argument("file", help="JSONL of {question, responses{model: text}, pick?}")
    e.add_argument("--baseline")
    e.add_argument("--workers", type=int, default=eval_harness.DEFAULT_JUDGE_WORKERS)
    e.add_argument("--out")
    e.add_argument("--figure")
    e = esub.add_parser("metrics", parents=[common])
    e.add_argument("kind", choices=["rouge", "f1", "mc", "formula"])
    e.add_argument("file")
    e = esub.add_parser("ttest", parents=[common])
    e.add_argument("a")
    e.add_argument("b")
    e.add_argument("--welch", action="store_true")
    e = esub.add_parser("tally", parents=[common])
    e.add_argument("file", help="one picked model name per line")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(fn=cmd_serve)
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (DomainError, *DOMAIN_ERRORS) as exc:
        message = str(exc) or type(exc).__name__
        if args.json:
            print(json.dumps({"error": message, "kind": getattr(exc, "kind", type(exc).__name__),
                              "step": getattr(exc, "step", None)}, ensure_ascii=False))
        print(f"finteam: error: {message}", file=sys.stderr)
        return EXIT_DOMAIN


def main() -> None:
    sys.exit(run_cli())
