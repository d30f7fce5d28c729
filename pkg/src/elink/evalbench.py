"""Accuracy / latency evaluation, K sweep and rerank ablation over a gold set.

Accuracy compares Wikidata QIDs. recall@K is the fraction of gold mentions
whose entity appears anywhere in the retrieval stage's candidate list, so
``accuracy <= recall_at_k`` always holds.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
from collections import defaultdict
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .kb import QID_RE, KbHandle
from .pipeline import LinkerConfig, LinkerDeps, LinkResult, link_with_spans

logger = logging.getLogger(__name__)

DEFAULT_SWEEP = (100, 250, 500)
STAGES = ("detect_ms", "retrieve_ms", "encode_ms", "rerank_ms")


@dataclass(frozen=True)
class GoldRow:
    text: str
    start: int
    end: int
    qid: str


@dataclass
class GoldSet:
    rows: list[GoldRow] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @classmethod
    def from_items(cls, items) -> GoldSet:
        gold = cls()
        for i, item in enumerate(items, 1):
            d = item.to_dict() if hasattr(item, "to_dict") else item
            _add_row(gold, d, f"row {i}")
        return gold


def _add_row(gold: GoldSet, d, where: str) -> None:
    try:
        text, start, end, qid = d["text"], d["start"], d["end"], d["qid"]
    except (KeyError, TypeError):
        gold.errors.append(f"{where}: expected keys text, start, end, qid")
        return
    if not isinstance(text, str) or not isinstance(start, int) or not isinstance(end, int):
        gold.errors.append(f"{where}: wrong field types")
    elif not 0 <= start < end <= len(text):
        gold.errors.append(f"{where}: span ({start}, {end}) out of bounds")
    elif not isinstance(qid, str) or not QID_RE.fullmatch(qid):
        gold.errors.append(f"{where}: malformed QID {qid!r}")
    else:
        gold.rows.append(GoldRow(text, start, end, qid))


def load_gold(path: str | os.PathLike) -> GoldSet:
    gold = GoldSet()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                gold.errors.append(f"line {lineno}: {exc}")
                continue
            _add_row(gold, d, f"line {lineno}")
    if gold.errors:
        logger.warning("%s: %d malformed gold rows skipped", path, len(gold.errors))
    return gold


def qid_index(kb: KbHandle) -> dict[str, set[int]]:
    out: dict[str, set[int]] = defaultdict(set)
    for rec in kb.iter_records():
        if rec.wikidata_qid is not None:
            out[rec.wikidata_qid].add(rec.entity_id)
    return dict(out)


@dataclass
class EvalReport:
    mode: str
    top_k: int
    mentions: int
    correct: int
    accuracy: float
    recall_at_k: float
    nil: int
    avg_latency_ms: float | None
    p50_latency_ms: float | None
    p95_latency_ms: float | None
    stage_ms: dict[str, float] = field(default_factory=dict)
    repeat: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def _pct(values: Sequence[float], q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


def _score(result: LinkResult, row: GoldRow, qids: dict[str, set[int]]) -> tuple[bool, bool, bool]:
    gold_ids = qids.get(row.qid, set())
    link = result.mentions[0]
    correct = link.entity is not None and link.entity.wikidata_qid == row.qid
    recalled = bool(gold_ids) and not gold_ids.isdisjoint(link.candidate_ids)
    return correct, recalled, link.is_nil


def evaluate(
    config: LinkerConfig,
    gold: GoldSet,
    deps: LinkerDeps,
    repeat: int = 1,
    workers: int = 1,
    qids: dict[str, set[int]] | None = None,
) -> EvalReport:
    """Link every gold mention ``repeat`` times.

    Accuracy comes from the first pass. Latency fields are the median over
    passes of each pass's mean; ``workers > 1`` runs an accuracy-only pass
    and leaves latency fields empty.
    """
    if repeat < 1:
        raise ValidationError("repeat must be >= 1")
    if qids is None:
        qids = qid_index(deps.kb)
    rows = gold.rows

    def run(row: GoldRow) -> LinkResult:
        return link_with_spans(row.text, [(row.start, row.end)], config, deps)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, rows))
        passes = []
    else:
        passes = [[run(row) for row in rows] for _ in range(repeat)]
        results = passes[0] if passes else []

    correct = recalled = nil = 0
    for res, row in zip(results, rows):
        c, r, n = _score(res, row, qids)
        correct += c
        recalled += r
        nil += n
    total = len(rows)

    avg = p50 = p95 = None
    stage_ms: dict[str, float] = {}
    if passes and total:
        avg = statistics.median(statistics.fmean(r.timing.total_ms for r in p) for p in passes)
        pooled = [r.timing.total_ms for p in passes for r in p]
        p50, p95 = _pct(pooled, 50), _pct(pooled, 95)
        for stage in STAGES:
            stage_ms[stage] = statistics.median(
                statistics.fmean(getattr(r.timing, stage) for r in p) for p in passes
            )
    return EvalReport(
        mode=config.retrieval_mode,
        top_k=config.top_k,
        mentions=total,
        correct=correct,
        accuracy=correct / total if total else 0.0,
        recall_at_k=recalled / total if total else 0.0,
        nil=nil,
        avg_latency_ms=avg,
        p50_latency_ms=p50,
        p95_latency_ms=p95,
        stage_ms=stage_ms,
        repeat=repeat if passes else 0,
    )


@dataclass(frozen=True)
class SweepRow:
    k: int
    recall_at_k: float
    accuracy: float
    avg_latency_ms: float | None
    retrieve_ms: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def k_sweep(
    config: LinkerConfig,
    gold: GoldSet,
    deps: LinkerDeps,
    ks: Sequence[int] = DEFAULT_SWEEP,
    repeat: int = 5,
) -> list[SweepRow]:
    ks = list(ks)
    if not ks:
        raise ValidationError("ks must be non-empty")
    if len(set(ks)) != len(ks) or any(k < 1 for k in ks):
        raise ValidationError(f"ks must be distinct positive integers, got {ks}")
    qids = qid_index(deps.kb)
    rows = []
    for k in ks:
        rep = evaluate(replace(config, top_k=k), gold, deps, repeat=repeat, qids=qids)
        rows.append(SweepRow(k, rep.recall_at_k, rep.accuracy, rep.avg_latency_ms, rep.stage_ms.get("retrieve_ms")))
    return rows


def ablation(
    config: LinkerConfig, gold: GoldSet, deps: LinkerDeps, repeat: int = 1
) -> tuple[EvalReport, EvalReport]:
    """Same gold, same retrieval; only the encode+rerank stage is toggled off."""
    qids = qid_index(deps.kb)
    full = evaluate(replace(config, retrieval_mode="mmq"), gold, deps, repeat=repeat, qids=qids)
    lexical = evaluate(replace(config, retrieval_mode="mmq_only"), gold, deps, repeat=repeat, qids=qids)
    return full, lexical


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned plain-text table; floats rendered with 4 decimals."""

    def cell(v) -> str:
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
