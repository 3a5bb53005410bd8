"""Task losses, auxiliary roundtrip objectives, schedules, and EM/F1 scoring.

The combined objective ascends L + lambda*beta by descending the mean
negative log likelihood of the labeled batch plus lambda times the mean
negative log likelihood of a synthetic batch; with lambda = 0 the synthetic
stream is never touched, so the run is bit-identical to plain supervised
training under the same seed. The staged schedule instead maximizes beta on
the synthetic set first (pretraining) and then fine-tunes on labeled data.
"""

from __future__ import annotations

import csv
import logging
import re
import string
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import qgen as qg
from . import spans as sp
from .corpus import LabeledExample, Vocabulary, detokenize
from .errors import NumericError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Desk-scale defaults; the reference regime ran batches of 128 for one
    epoch at lr 2e-5 with no decay, which these knobs can reproduce."""

    batch_size: int = 16
    lr: float = 1e-3
    epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 0:
            raise ValueError("batch_size >= 1, lr > 0 and epochs >= 0 required")

    def with_(self, **kw) -> "TrainConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class BetaConfig:
    variant: str = "triples"      # "triples" | "expectation"
    f_shape: str = "log"          # "log" | "margin"
    margin: float = 0.5           # mu, for the margin shape
    lam: float = 0.0              # penalty weight lambda
    gamma: float | None = None    # reporting threshold, logged only
    samples_per_context: int = 4  # expectation variant

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.f_shape == "margin" and not 0 < self.margin < 1:
            raise ValueError("margin mu must lie in (0, 1)")
        if self.samples_per_context < 1:
            raise ValueError("samples_per_context must be >= 1")


@dataclass
class MetricsRow:
    arm: str
    size: int
    seed: int
    em: float
    f1: float
    beta: float
    wall_s: float


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def answer_extraction_example_loss(example: LabeledExample, params: enc.EncoderParams,
                                   head: sp.ExtractorHead, cfg: sp.SpanModelConfig):
    """-log p(gold span | context) under the joint-scored span softmax."""
    hidden = enc.encode(enc.pack_context(example.context), params)
    span_list = sp.enumerate_spans(len(example.context), cfg.l_a)
    scores = sp.joint_scores(hidden, head, span_list)
    target = span_list.index(example.answer)
    return ad.cross_entropy(scores, target)


def loss_answer_extraction(batch, params: enc.EncoderParams, head: sp.ExtractorHead,
                           cfg: sp.SpanModelConfig):
    """Mean extraction loss over a batch; over-long gold spans are skipped
    with a count."""
    usable = [ex for ex in batch
              if ex.answerable and len(ex.answer) <= cfg.l_a]
    skipped = len(batch) - len(usable)
    if skipped:
        log.info("loss_answer_extraction: skipped %d examples (no span or span > l_a)",
                 skipped)
    if not usable:
        raise ValueError("no usable examples in batch")
    losses = [answer_extraction_example_loss(ex, params, head, cfg) for ex in usable]
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    return ad.mul(total, 1.0 / len(usable))


def qa_example_loss(example: LabeledExample, params: enc.EncoderParams,
                    head: sp.QaHead):
    """-log p(gold span or NULL | question, context) under the f_I softmax."""
    packed = enc.pack_question_context(example.question, example.context)
    hidden = enc.encode(packed, params)
    ctx_hidden = ad.rows(hidden, packed.context_start, len(packed))
    span_list = sp.enumerate_spans(len(example.context), len(example.context))
    scores = sp.independent_scores(ctx_hidden, head, span_list, include_null=True)
    target = span_list.index(example.answer) if example.answerable else len(span_list)
    return ad.cross_entropy(scores, target)


def loss_qa(batch, params: enc.EncoderParams, head: sp.QaHead):
    """Mean QA loss; unanswerable examples target the NULL outcome."""
    if not batch:
        raise ValueError("empty batch")
    losses = [qa_example_loss(ex, params, head) for ex in batch]
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    return ad.mul(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# Auxiliary roundtrip objectives
# ---------------------------------------------------------------------------

def beta_triples(triples, params: enc.EncoderParams, head: sp.QaHead,
                 cfg: BetaConfig) -> float:
    """Roundtrip-consistency measure over (c, q, a) triples.

    Log shape: mean log p(a | q, c). Margin shape: fraction of triples with
    p(a | q, c) >= mu. Triples are LabeledExamples; an unanswerable one
    scores the NULL outcome.
    """
    triples = list(triples)
    if not triples:
        raise ValueError("beta_triples needs at least one triple")
    if cfg.f_shape == "log":
        vals = [-qa_example_loss(ex, params, head).item() for ex in triples]
        return float(np.mean(vals))
    if cfg.f_shape == "margin":
        hits = [float(np.exp(-qa_example_loss(ex, params, head).item()) >= cfg.margin)
                for ex in triples]
        return float(np.mean(hits))
    raise ValueError(f"unknown f_shape {cfg.f_shape!r}")


def _enumerate_questions(step_fn, l_q: int, allowed_ids):
    """All complete question sequences with their chain-rule probabilities."""
    out = []

    def walk(prefix, logp):
        step_logp = qg._masked_log_softmax(step_fn(list(prefix)))
        for tok in allowed_ids:
            if not np.isfinite(step_logp[tok]):
                continue
            seq = prefix + (tok,)
            total = logp + step_logp[tok]
            if tok == qg.EOQ_ID or len(seq) >= l_q:
                out.append((list(seq), total))
            else:
                walk(seq, total)

    walk((), 0.0)
    return out


def beta_expectation(windows, extractor, generator, answerer, cfg: BetaConfig,
                     exhaustive: bool = False, seed: int = 0) -> float:
    """Expected roundtrip log likelihood over model-generated (a, q) pairs.

    The exact double sum over spans and question sequences is intractable in
    general; the default draws an answer uniformly from the extractor's top-k
    and samples a question, averaging log p(a | q, c). With ``exhaustive``
    the full sum weighted by p(a|c) * p(q|a, c) is computed instead, which is
    only feasible on tiny vocabularies.
    """
    windows = list(windows)
    if not windows:
        raise ValueError("beta_expectation needs at least one window")
    rng = np.random.default_rng(seed)
    total = 0.0
    for window in windows:
        ctx = list(window.tokens)
        dist = extractor.predict_proba(ctx)
        if exhaustive:
            allowed = [i for i in range(len(generator.vocab))
                       if i not in qg.BLOCKED_IDS]
            acc = 0.0
            for span, p_a in zip(dist.spans, dist.probs):
                step_fn = qg.make_step_fn(span, ctx, generator.params_,
                                          generator.decode_config())
                for q_tokens, logp_q in _enumerate_questions(
                        step_fn, generator.l_q, allowed):
                    question = q_tokens[:-1] if q_tokens[-1] == qg.EOQ_ID else q_tokens
                    if not question:
                        continue
                    log_p = answerer.log_prob(ctx, question, span)
                    acc += p_a * np.exp(logp_q) * log_p
            total += acc
            continue
        vals = []
        for _ in range(cfg.samples_per_context):
            span = extractor.sample_top_k(ctx, rng, dist=dist)
            result = generator.generate(ctx, span, method="sample",
                                        seed=int(rng.integers(2 ** 31)))
            question = result.question()
            if not question:
                continue
            vals.append(answerer.log_prob(ctx, question, span))
        if vals:
            total += float(np.mean(vals))
    return total / len(windows)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def train_answer_extractor(examples, params: enc.EncoderParams,
                           head: sp.ExtractorHead, span_cfg: sp.SpanModelConfig,
                           cfg: TrainConfig, state: ad.AdamState | None = None) -> dict:
    """Maximum-likelihood training of the question-unconditional extractor."""
    usable = [ex for ex in examples if ex.answerable and len(ex.answer) <= span_cfg.l_a]
    if not usable:
        raise ValueError("no trainable extraction examples")
    trainable = params.parameters() + head.parameters()
    state = state or ad.AdamState.for_params(trainable, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = {"loss": [], "skipped": len(examples) - len(usable)}
    for _ in range(cfg.epochs):
        order = rng.permutation(len(usable))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [usable[i] for i in order[lo:lo + cfg.batch_size]]
            ad.zero_grads(trainable)
            with ad.Tape() as tape:
                loss = loss_answer_extraction(batch, params, head, span_cfg)
                if not np.isfinite(loss.item()):
                    raise NumericError("extraction training loss is not finite")
                ad.backward(loss, tape)
            ad.adam_step(trainable, [p.grad for p in trainable], state)
            epoch_losses.append(loss.item())
        history["loss"].append(float(np.mean(epoch_losses)))
    return history


def train_qa_supervised(examples, params: enc.EncoderParams, head: sp.QaHead,
                        cfg: TrainConfig, state: ad.AdamState | None = None) -> dict:
    """Plain maximum-likelihood QA training (the lambda = 0 schedule)."""
    return train_combined(examples, [], params, head, cfg, BetaConfig(lam=0.0),
                          state=state)


def train_combined(labeled, synthetic, params: enc.EncoderParams, head: sp.QaHead,
                   cfg: TrainConfig, beta_cfg: BetaConfig,
                   state: ad.AdamState | None = None) -> dict:
    """Joint gradient ascent on L + lambda * beta (log shape only).

    Each step descends the labeled-batch loss plus lambda times a synthetic
    batch loss. With lambda = 0 no synthetic batch is drawn or scored, making
    the parameter trajectory identical to supervised training.
    """
    if beta_cfg.lam > 0 and beta_cfg.f_shape != "log":
        raise ValueError("the margin-shaped beta is not differentiable; "
                         "use it for evaluation only")
    labeled = list(labeled)
    if not labeled:
        raise ValueError("no labeled examples")
    synthetic = list(synthetic)
    use_beta = beta_cfg.lam > 0 and synthetic
    trainable = params.parameters() + head.parameters()
    state = state or ad.AdamState.for_params(trainable, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = {"loss": [], "beta_term": []}
    for _ in range(cfg.epochs):
        order = rng.permutation(len(labeled))
        epoch_losses, epoch_beta = [], []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [labeled[i] for i in order[lo:lo + cfg.batch_size]]
            ad.zero_grads(trainable)
            with ad.Tape() as tape:
                loss = loss_qa(batch, params, head)
                if use_beta:
                    picks = rng.integers(0, len(synthetic), size=min(cfg.batch_size,
                                                                     len(synthetic)))
                    syn_batch = [synthetic[i] for i in picks]
                    syn_loss = loss_qa(syn_batch, params, head)
                    epoch_beta.append(-syn_loss.item())
                    loss = ad.add(loss, ad.mul(syn_loss, beta_cfg.lam))
                if not np.isfinite(loss.item()):
                    raise NumericError("combined training loss is not finite")
                ad.backward(loss, tape)
            ad.adam_step(trainable, [p.grad for p in trainable], state)
            epoch_losses.append(loss.item())
        history["loss"].append(float(np.mean(epoch_losses)))
        if epoch_beta:
            history["beta_term"].append(float(np.mean(epoch_beta)))
    return history


def train_staged(synthetic, labeled, params: enc.EncoderParams, head: sp.QaHead,
                 cfg: TrainConfig, dev=None, vocab: Vocabulary | None = None,
                 pretrain_cfg: TrainConfig | None = None) -> dict:
    """Maximize beta on synthetic data, then fine-tune the likelihood.

    Phase 1 is QA training on the synthetic set (positives plus NULL-target
    negatives), which is gradient ascent on the log-shaped beta; phase 2 is
    supervised training on the labeled set. Reports beta and dev EM after
    each phase when a dev set and vocabulary are supplied.
    """
    synthetic = list(synthetic)
    if not synthetic:
        raise ValueError("staged training needs a non-empty synthetic set")
    p1 = pretrain_cfg or cfg
    history = {"beta_init": _safe_beta(synthetic, params, head)}
    history["phase1"] = train_combined(synthetic, [], params, head, p1,
                                       BetaConfig(lam=0.0))
    history["beta_after_phase1"] = _safe_beta(synthetic, params, head)
    if dev is not None and vocab is not None:
        history["dev_em_after_phase1"], _ = evaluate_qa(dev, params, head, vocab)
    if labeled:
        history["phase2"] = train_combined(labeled, [], params, head, cfg,
                                           BetaConfig(lam=0.0))
        history["beta_after_phase2"] = _safe_beta(synthetic, params, head)
        if dev is not None and vocab is not None:
            history["dev_em_after_phase2"], _ = evaluate_qa(dev, params, head, vocab)
    return history


def _safe_beta(triples, params, head, cap: int = 256) -> float:
    sample = triples[:cap]
    return beta_triples(sample, params, head, BetaConfig(f_shape="log"))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, squeeze whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str | None, gold: str | None) -> int:
    if pred is None or gold is None:
        return int(pred is None and gold is None)
    return int(normalize_answer(pred) == normalize_answer(gold))


def f1(pred: str | None, gold: str | None) -> float:
    if pred is None or gold is None:
        return float(pred is None and gold is None)
    pred_toks = normalize_answer(pred).split()
    gold_toks = normalize_answer(gold).split()
    if not pred_toks or not gold_toks:
        return float(pred_toks == gold_toks)
    common = Counter(pred_toks) & Counter(gold_toks)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_toks)
    recall = overlap / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def evaluate_qa(examples, params: enc.EncoderParams, head: sp.QaHead,
                vocab: Vocabulary) -> tuple[float, float]:
    """Mean EM and F1 of argmax QA predictions over labeled examples."""
    ems, f1s = [], []
    for ex in examples:
        pred = sp.qa_predict(ex.context, ex.question, params, head)
        pred_text = (detokenize(ex.context[pred.start:pred.end + 1], vocab)
                     if pred is not None else None)
        gold_text = (detokenize(ex.answer_tokens(), vocab)
                     if ex.answerable else None)
        ems.append(exact_match(pred_text, gold_text))
        f1s.append(f1(pred_text, gold_text))
    return float(np.mean(ems)), float(np.mean(f1s))


# ---------------------------------------------------------------------------
# Learning curve
# ---------------------------------------------------------------------------

CSV_HEADER = ["arm", "size", "seed", "em", "f1", "beta", "wall_s"]


def learning_curve(pools: dict, labeled, dev, sizes, seeds, vocab: Vocabulary,
                   encoder_cfg: enc.EncoderConfig, cfg: TrainConfig,
                   pretrain_cfg: TrainConfig | None = None,
                   csv_path=None) -> list[MetricsRow]:
    """Dev EM/F1 across synthetic-size x arm x seed grid points.

    ``pools`` maps arm name ("rt", "no-rt") to its synthetic example pool.
    Size 0 trains on labeled data only. Row order is deterministic:
    arm, then size, then seed.
    """
    sizes = sorted(sizes)
    rows = []
    for arm in sorted(pools):
        pool = list(pools[arm])
        for size in sizes:
            for seed in seeds:
                t0 = time.monotonic()
                rng = np.random.default_rng(seed)
                params = enc.EncoderParams(encoder_cfg, rng)
                head = sp.QaHead(encoder_cfg, rng)
                run_cfg = cfg.with_(seed=seed)
                if size == 0:
                    train_qa_supervised(labeled, params, head, run_cfg)
                    beta = float("nan")
                else:
                    take = min(size, len(pool))
                    picks = rng.permutation(len(pool))[:take]
                    synthetic = [pool[i] for i in picks]
                    train_staged(synthetic, labeled, params, head, run_cfg,
                                 pretrain_cfg=(pretrain_cfg or cfg).with_(seed=seed))
                    beta = _safe_beta(synthetic, params, head)
                em, f1_score = evaluate_qa(dev, params, head, vocab)
                rows.append(MetricsRow(arm=arm, size=size, seed=seed, em=em,
                                       f1=f1_score, beta=beta,
                                       wall_s=time.monotonic() - t0))
    if csv_path is not None:
        write_metrics_csv(csv_path, rows)
    return rows


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.arm, r.size, r.seed, f"{r.em:.6f}", f"{r.f1:.6f}",
                             f"{r.beta:.6f}", f"{r.wall_s:.3f}"])
