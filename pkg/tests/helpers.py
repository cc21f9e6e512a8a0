"""Shared scripted backends, stores and statements for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

from finteam.datagen import InstructionRecord, Procedure, Provenance
from finteam.knowledge_store import Document, FallbackEmbedder, KnowledgeStore
from finteam.llm_backend import ScriptedBackend
from finteam.tool_protocol import CONTINUE_INSTRUCTION, split_generation

REPORT_DOCS = [
    ("r1", "货币政策", "央行下调存款准备金率0.5个百分点，释放长期资金约1万亿元。M2同比增长8.3%，社会融资规模存量增速平稳。"),
    ("r2", "新能源汽车", "新能源汽车渗透率持续提升，动力电池产业链竞争加剧。上游锂矿价格回落，中游电池厂商毛利率修复。"),
    ("r3", "光伏行业", "光伏组件价格下行，行业进入整合期。头部企业凭借成本优势扩大市场份额。"),
    ("r4", "宁德时代", "宁德时代是全球领先的动力电池企业，研发投入高，海外产能扩张，面临原材料价格波动与贸易政策风险。"),
]
NEWS_DOCS = [
    ("n1", "电池出口", "近期动力电池出口同比大增，宁德时代获得多家海外车企订单。"),
    ("n2", "政策", "多地出台新能源汽车消费补贴政策，带动终端需求回暖。"),
]


def make_store(data_dir: str | Path | None = None) -> KnowledgeStore:
    store = KnowledgeStore(data_dir, FallbackEmbedder())
    for doc_id, title, body in REPORT_DOCS:
        store.ingest(Document(doc_id, "reports", title, body))
    for doc_id, title, body in NEWS_DOCS:
        store.ingest(Document(doc_id, "news", title, body))
    return store


STATEMENTS = {
    "period": "2023",
    "currency_unit": "百万元",
    "balance_sheet": {"total_assets": 1000, "current_assets": 200, "inventories": 50, "total_liabilities": 400,
                      "current_liabilities": 100, "shareholders_equity": 600},
    "income_statement": {"revenue": 800, "cost_of_goods_sold": 500, "operating_income": 150, "net_income": 100,
                         "prior_revenue": 700},
    "cash_flow": {"operating_cash_flow": 120, "investing_cash_flow": -80, "financing_cash_flow": -20},
}


def zero_cl_statements() -> dict:
    d = json.loads(json.dumps(STATEMENTS))
    d["balance_sheet"]["current_liabilities"] = 0
    return d


ACCOUNTANT_GENERATION = (
    "逐项计算如下：流动比率 [Calculator(200/100)→2]；速动比率 [Calculator((200-50)/100)→1.5]；"
    "资产负债率 [Calculator(400/1000)→0.4]。其余指标见下表。"
)

MACRO_QUERY = "央行降准对M2和社融有什么影响？"
INDUSTRY_QUERY = "分析新能源汽车动力电池行业的竞争格局"
COMPANY_QUERY = "评估宁德时代的投资价值"

REPLIES = {
    "keywords": '{"keywords": ["降准", "M2", "社融"]}',
    "no_keywords": '{"keywords": []}',
    "explain": "降准：降低存款准备金率。M2：广义货币供应量。社融：社会融资规模。",
    "analyst": "根据资料[1]，降准释放长期资金约1万亿元，M2同比增长8.3%。",
    "compile": "综合来看，降准将提升货币供应并支持社融增长。",
    "entities_industry": '{"entities": [["新能源汽车", "industry"], ["动力电池", "industry"]]}',
    "entities_empty": '{"entities": []}',
    "explore": "动力电池行业集中度高[1]，上游锂价回落，中游盈利修复。",
    "news": "近期电池出口大增[1]，补贴政策带动需求[2]。",
    "industry_summary": "行业竞争加剧，建议关注具备成本优势的龙头企业。",
    "entities_company": '{"entities": [["宁德时代", "company"]]}',
    "pest": "政治：贸易政策风险。经济：原材料价格波动。社会：电动化趋势。技术：研发投入高[1]。",
    "swot": "优势：规模与技术。劣势：客户集中。机会：海外扩张。威胁：价格竞争。",
    "sentiment": '{"sentiment": "positive"}',
    "assess": "宁德时代基本面稳健，海外订单提供增长动力，估值需结合周期判断。",
    "statements_summary": "公司资产总计1000百万元，负债400百万元，营业收入800百万元。",
    "statements_report": "公司流动性充裕，杠杆适中，盈利能力良好，建议继续控制成本。",
}


def macro_script(terms: bool = True) -> list[tuple[str, str]]:
    if not terms:
        return [("#task=analyzer.keywords", REPLIES["no_keywords"]),
                ("#task=analyst.answer", REPLIES["analyst"]),
                ("#task=macro.compile", REPLIES["compile"])]
    return [("#task=analyzer.keywords", REPLIES["keywords"]),
            ("#task=macro.explain", REPLIES["explain"]),
            ("#task=analyst.answer", REPLIES["analyst"]),
            ("#task=macro.compile", REPLIES["compile"])]


def industry_script(include_news: bool = True, identified: bool = True) -> list[tuple[str, str]]:
    script = [("#task=analyzer.entities", REPLIES["entities_industry" if identified else "entities_empty"]),
              ("#task=analyst.answer", REPLIES["explore"])]
    if include_news:
        script.append(("#task=analyst.answer", REPLIES["news"]))
    script.append(("#task=industry.summary", REPLIES["industry_summary"]))
    return script


def company_script(with_sentiment: bool = True) -> list[tuple[str, str]]:
    script = [("#task=analyzer.entities", REPLIES["entities_company"]),
              ("#task=analyst.answer", REPLIES["pest"]),
              ("#task=analyst.answer", REPLIES["swot"])]
    if with_sentiment:
        script.append(("#task=analyzer.sentiment", REPLIES["sentiment"]))
    script.append(("#task=company.assess", REPLIES["assess"]))
    return script


def statements_script(generation: str = ACCOUNTANT_GENERATION) -> list[tuple[str, str]]:
    segments = split_generation(generation)
    script = [("#task=analyst.statements", REPLIES["statements_summary"]),
              ("#task=accountant.solve", segments[0])]
    script += [(CONTINUE_INSTRUCTION, s) for s in segments[1:]]
    script.append(("#task=statements.report", REPLIES["statements_report"]))
    return script


def scripted(script: list[tuple[str, str]], chunk_size: int = 4) -> ScriptedBackend:
    return ScriptedBackend(script, strict=True, chunk_size=chunk_size)


def lenient_service_script() -> dict:
    """One lenient script able to serve every scenario (keyed on task tags)."""
    first = split_generation(ACCOUNTANT_GENERATION)[0]
    entries = [
        ("#task=analyzer.keywords", REPLIES["keywords"]),
        ("#task=analyzer.sentiment", REPLIES["sentiment"]),
        ("#task=macro.explain", REPLIES["explain"]),
        ("#task=macro.compile", REPLIES["compile"]),
        ("#task=analyst.statements", REPLIES["statements_summary"]),
        ("#task=analyst.answer", REPLIES["analyst"]),
        ("#task=industry.summary", REPLIES["industry_summary"]),
        ("#task=company.assess", REPLIES["assess"]),
        ("#task=accountant.solve", first),
        (CONTINUE_INSTRUCTION, "其余指标由系统补算。"),
        ("#task=statements.report", REPLIES["statements_report"]),
        # Entity requests last: later prompts also mention the company name.
        ("宁德时代", REPLIES["entities_company"]),
        ("#task=analyzer.entities", REPLIES["entities_industry"]),
    ]
    return {"strict": False, "script": [{"match": m, "reply": r} for m, r in entries]}



def check_trace(trace) -> None:
    """Structural invariants every workflow trace must satisfy."""
    assert [s.ordinal for s in trace.steps] == list(range(1, len(trace.steps) + 1))
    for s in trace.steps:
        assert s.started <= s.ended
        if s.agent in ("Consultant", "DocumentAnalyzer"):
            assert not s.retrieval and not s.tool_calls, f"{s.agent} used a capability it lacks"
        if s.agent == "Analyst":
            assert not s.tool_calls
        for sub in s.substeps:
            assert sub.agent in ("Analyst", "DocumentAnalyzer")
    assert trace.steps[-1].output == trace.final_report
    assert trace.template_hashes


SERVICE_REQUESTS = {
    "macro": {"scenario": "macro", "query": MACRO_QUERY},
    "industry": {"scenario": "industry", "query": INDUSTRY_QUERY, "options": {"include_news": True}},
    "company": {"scenario": "company", "query": COMPANY_QUERY, "options": {"with_sentiment": True}},
    "statements": {"scenario": "statements", "query": "分析2023年报", "statements": STATEMENTS},
}


def write_service_config(root: Path, extra: str = "") -> Path:
    """Offline config: lenient scripted backend, fallback embeddings, kb pre-populated."""
    (root / "script.json").write_text(json.dumps(lenient_service_script(), ensure_ascii=False), encoding="utf-8")
    make_store(root / "kb")
    path = root / "finteam.toml"
    path.write_text('runs_dir = "runs"\n[backend]\nscript = "script.json"\n[kb]\ndata_dir = "kb"\n' + extra,
                    encoding="utf-8")
    return path


class TableEmbedder:
    """Looks texts up in a fixed table so corpora can carry arbitrary vectors."""

    def __init__(self, table):
        self.table = table
        self.dim = len(next(iter(table.values())))

    def embed(self, text):
        return self.table[text]

    def embed_many(self, texts):
        return [self.table[t] for t in texts]


def random_corpus(rng, n, dim):
    table, docs = {}, []
    for i in range(n):
        text = f"chunk-{i}"
        if i and rng.random() < 0.1:
            table[text] = list(table[f"chunk-{rng.randrange(i)}"])  # exact ties
        else:
            table[text] = [rng.gauss(0, 1) for _ in range(dim)]
        docs.append(Document(f"d{i:04d}", "kb", "", text))
    return table, docs


def seed_pool(n=4):
    return [InstructionRecord(f"题目{i}", "", f"答案为[Calculator({i}+1)→{i + 1}]",
                              Provenance(Procedure.SELF_INSTRUCT, f"s{i}", "human")) for i in range(n)]
