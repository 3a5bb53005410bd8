"""Generate-then-filter: sample answers, ask, re-answer, keep the consistent.

Per unlabeled window the pipeline (1) draws an answer span uniformly from the
extractor's top-k, (2) decodes a question conditioned on it, (3) re-answers
the question with the question-conditional model and (4) keeps the triple only
when the two answers match. Kept questions are additionally paired with
non-overlapping windows of the same page as unanswerable negatives.

Each window draws from its own seeded stream, so the output is deterministic
and independent of processing order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import LabeledExample, Span, Window

MATCH_MODES = ("text-normalized", "span-exact")


@dataclass
class PipelineConfig:
    k_top: int = 10
    negatives_ratio: float = 0.0   # negatives / (positives + negatives)
    match_mode: str = "text-normalized"
    seed: int = 0
    decode_method: str = "greedy"  # "greedy" | "beam" | "sample"
    beam_width: int = 4
    temperature: float = 1.0
    source_tag: str = "default"

    def __post_init__(self):
        if self.k_top < 1:
            raise ValueError("k_top must be >= 1")
        if not 0.0 <= self.negatives_ratio < 1.0:
            raise ValueError("negatives_ratio must lie in [0, 1)")
        if self.match_mode not in MATCH_MODES:
            raise ValueError(f"match_mode must be one of {MATCH_MODES}")


@dataclass
class SyntheticTriple:
    doc_id: int
    window_id: int
    context: list[int]
    question: list[int]
    answer: Span | None
    reanswer: Span | None
    kept: bool
    match_mode: str
    source_tag: str
    label: str = "positive"     # "positive" | "negative"
    failure: str | None = None  # diagnostic for auto-discarded triples

    def to_example(self) -> LabeledExample:
        """View as a training example; negatives target the NULL outcome."""
        answerable = self.label == "positive"
        return LabeledExample(context=list(self.context), question=list(self.question),
                              answer=self.answer if answerable else None,
                              answerable=answerable, doc_id=self.doc_id,
                              window_id=self.window_id)


def sample_answer(window: Window, extractor, cfg: PipelineConfig,
                  rng: np.random.Generator) -> Span:
    """Uniform draw over the extractor's top-k spans for this window."""
    if not window.tokens:
        raise ValueError("window must be non-empty")
    return extractor.sample_top_k(window.tokens, rng, k=cfg.k_top)


def match(a: Span, a_prime: Span | None, window: Window, mode: str) -> bool:
    """Roundtrip agreement between the sampled and re-predicted answers.

    Span-exact compares indices; text-normalized compares the token content,
    so a second mention of the same answer string still counts.
    """
    if a_prime is None:
        return False
    if a.end >= len(window.tokens) or a_prime.end >= len(window.tokens):
        raise ValueError("span outside window")
    if mode == "span-exact":
        return a == a_prime
    if mode == "text-normalized":
        toks = window.tokens
        return toks[a.start:a.end + 1] == toks[a_prime.start:a_prime.end + 1]
    raise ValueError(f"unknown match mode {mode!r}")


def generate_triple(window: Window, extractor, generator, answerer,
                    cfg: PipelineConfig, rng: np.random.Generator) -> SyntheticTriple:
    """Run steps (1)-(4) on one window."""
    answer = sample_answer(window, extractor, cfg, rng)
    decoded = generator.generate(window.tokens, answer, method=cfg.decode_method,
                                 width=cfg.beam_width, temperature=cfg.temperature,
                                 seed=int(rng.integers(2 ** 31)))
    question = decoded.question()
    if not question:
        return SyntheticTriple(doc_id=window.doc_id, window_id=window.window_id,
                               context=list(window.tokens), question=[],
                               answer=answer, reanswer=None, kept=False,
                               match_mode=cfg.match_mode, source_tag=cfg.source_tag,
                               failure="empty-question")
    reanswer = answerer.predict(window.tokens, question)
    kept = match(answer, reanswer, window, cfg.match_mode)
    return SyntheticTriple(doc_id=window.doc_id, window_id=window.window_id,
                           context=list(window.tokens), question=question,
                           answer=answer, reanswer=reanswer, kept=kept,
                           match_mode=cfg.match_mode, source_tag=cfg.source_tag)


def sample_negatives(source_triples, windows, cfg: PipelineConfig,
                     rng: np.random.Generator) -> tuple[list[SyntheticTriple], int]:
    """Pair source questions with non-overlapping same-page windows.

    The negative count is chosen so that negatives / (positives + negatives)
    lands within one item of ``negatives_ratio``. Questions whose page offers
    no non-overlapping window are skipped with a count.
    """
    source_triples = [t for t in source_triples if t.question]
    if cfg.negatives_ratio == 0.0 or not source_triples:
        return [], 0
    by_page: dict = {}
    for w in windows:
        by_page.setdefault(w.page_id, []).append(w)
    n_pos = len(source_triples)
    n_neg = round(cfg.negatives_ratio * n_pos / (1.0 - cfg.negatives_ratio))
    window_index = {(w.doc_id, w.window_id): w for w in windows}
    negatives: list[SyntheticTriple] = []
    skipped = 0
    attempts = 0
    while len(negatives) < n_neg and attempts < 20 * n_neg:
        attempts += 1
        src = source_triples[int(rng.integers(n_pos))]
        src_window = window_index[(src.doc_id, src.window_id)]
        src_range = src_window.token_range()
        candidates = [w for w in by_page.get(src_window.page_id, [])
                      if not (w.doc_id == src_window.doc_id
                              and max(w.token_range().start, src_range.start)
                              < min(w.token_range().stop, src_range.stop))]
        if not candidates:
            skipped += 1
            continue
        target = candidates[int(rng.integers(len(candidates)))]
        negatives.append(SyntheticTriple(
            doc_id=target.doc_id, window_id=target.window_id,
            context=list(target.tokens), question=list(src.question),
            answer=None, reanswer=None, kept=True, match_mode=cfg.match_mode,
            source_tag=cfg.source_tag, label="negative"))
    return negatives, skipped


@dataclass
class PipelineResult:
    kept: list[SyntheticTriple] = field(default_factory=list)
    discarded: list[SyntheticTriple] = field(default_factory=list)
    negatives: list[SyntheticTriple] = field(default_factory=list)
    skipped: int = 0

    def summary(self) -> dict:
        return {"attempted": len(self.kept) + len(self.discarded),
                "kept": len(self.kept), "discarded": len(self.discarded),
                "negatives": len(self.negatives), "skipped": self.skipped}

    def training_examples(self) -> list[LabeledExample]:
        return [t.to_example() for t in self.kept + self.negatives]


def run_pipeline(windows, extractor, generator, answerer, cfg: PipelineConfig,
                 out_path=None, summary_path=None) -> PipelineResult:
    """One triple per window, partitioned by the roundtrip check, plus
    negatives; optionally emitted as JSON lines with a count summary."""
    windows = list(windows)
    if not windows:
        raise ValueError("no windows to process")
    result = PipelineResult()
    for i, window in enumerate(windows):
        rng = np.random.default_rng([cfg.seed, i])
        triple = generate_triple(window, extractor, generator, answerer, cfg, rng)
        (result.kept if triple.kept else result.discarded).append(triple)
    neg_rng = np.random.default_rng([cfg.seed, len(windows)])
    result.negatives, result.skipped = sample_negatives(result.kept, windows,
                                                        cfg, neg_rng)
    if out_path is not None:
        write_triples(out_path, result.kept + result.discarded + result.negatives)
    if summary_path is not None:
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump(result.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def _span_fields(span: Span | None) -> tuple:
    return (None, None) if span is None else (span.start, span.end)


def write_triples(path, triples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            a_s, a_e = _span_fields(t.answer)
            r_s, r_e = _span_fields(t.reanswer)
            fh.write(json.dumps({
                "doc_id": t.doc_id, "window_id": t.window_id,
                "context_tokens": list(t.context), "question_tokens": list(t.question),
                "answer_start": a_s, "answer_end": a_e,
                "reanswer_start": r_s, "reanswer_end": r_e,
                "kept": t.kept, "label": t.label, "source_tag": t.source_tag,
            }) + "\n")


def read_triples(path) -> list[SyntheticTriple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            answer = (Span(rec["answer_start"], rec["answer_end"])
                      if rec["answer_start"] is not None else None)
            reanswer = (Span(rec["reanswer_start"], rec["reanswer_end"])
                        if rec["reanswer_start"] is not None else None)
            out.append(SyntheticTriple(
                doc_id=rec["doc_id"], window_id=rec["window_id"],
                context=rec["context_tokens"], question=rec["question_tokens"],
                answer=answer, reanswer=reanswer, kept=rec["kept"],
                match_mode="text-normalized", source_tag=rec["source_tag"],
                label=rec["label"]))
    return out
