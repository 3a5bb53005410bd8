"""Extractive span models: joint and independent scoring over candidate spans.

Two scoring structures coexist on purpose. The question-unconditional model
scores a span through one MLP applied to the concatenated start and end
representations, so start and end interact. The question-conditional model
scores start and end with two separate affine maps and adds them, plus a
learned scalar that competes in the softmax as the no-answer outcome.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Tensor
from .corpus import Span


@dataclass
class SpanModelConfig:
    l_a: int = 32  # maximum answer span length, in tokens

    def __post_init__(self):
        if self.l_a < 1:
            raise ValueError("l_a must be >= 1")


@dataclass
class SpanDistribution:
    """Parallel (span, probability) lists; a ``None`` span is the no-answer
    outcome and sorts after every real span."""

    spans: list
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.spans) != self.probs.size:
            raise ValueError("spans and probs must be parallel")

    def argmax(self):
        return self.spans[int(np.argmax(self.probs))]

    def prob_of(self, span) -> float:
        for s, p in zip(self.spans, self.probs):
            if s == span:
                return float(p)
        return 0.0


class ExtractorHead:
    """Single-hidden-layer MLP over concat(start, end) representations."""

    def __init__(self, cfg: enc.EncoderConfig, rng: np.random.Generator):
        h, m = cfg.hidden, cfg.mlp_hidden
        self.w1 = ad.param((2 * h, m), rng, cfg.init_scale)
        self.b1 = ad.param(np.zeros(m))
        self.w2 = ad.param((m, 1), rng, cfg.init_scale)
        self.b2 = ad.param(np.zeros(1))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def named_arrays(self):
        return {"head.w1": self.w1.data, "head.b1": self.b1.data,
                "head.w2": self.w2.data, "head.b2": self.b2.data}

    def load_arrays(self, arrays):
        for name, t in zip(("head.w1", "head.b1", "head.w2", "head.b2"),
                           self.parameters()):
            t.data = np.array(arrays[name], dtype=np.float64)


class QaHead:
    """Separate start/end affine scorers plus the no-answer bias scalar."""

    def __init__(self, cfg: enc.EncoderConfig, rng: np.random.Generator):
        h = cfg.hidden
        self.start_w = ad.param((h, 1), rng, cfg.init_scale)
        self.start_b = ad.param(np.zeros(1))
        self.end_w = ad.param((h, 1), rng, cfg.init_scale)
        self.end_b = ad.param(np.zeros(1))
        self.null_bias = ad.param(np.zeros((1, 1)))

    def parameters(self):
        return [self.start_w, self.start_b, self.end_w, self.end_b, self.null_bias]

    def named_arrays(self):
        return {"head.start_w": self.start_w.data, "head.start_b": self.start_b.data,
                "head.end_w": self.end_w.data, "head.end_b": self.end_b.data,
                "head.null_bias": self.null_bias.data}

    def load_arrays(self, arrays):
        names = ("head.start_w", "head.start_b", "head.end_w", "head.end_b",
                 "head.null_bias")
        for name, t in zip(names, self.parameters()):
            t.data = np.array(arrays[name], dtype=np.float64)


def enumerate_spans(ctx_len: int, l_a: int) -> list[Span]:
    """All (s, e) with s <= e < ctx_len and length <= l_a, lexicographic."""
    if ctx_len < 1:
        raise ValueError("ctx_len must be >= 1")
    return [Span(s, e)
            for s in range(ctx_len)
            for e in range(s, min(s + l_a, ctx_len))]


def joint_scores(hidden_ctx: Tensor, head: ExtractorHead, spans) -> Tensor:
    """f_J for every span: MLP(concat(h[s], h[e])) -> [n x 1] tensor."""
    starts = [sp.start for sp in spans]
    ends = [sp.end for sp in spans]
    pairs = ad.concat([ad.embedding(hidden_ctx, starts),
                       ad.embedding(hidden_ctx, ends)], axis=1)
    return ad.linear(ad.gelu(ad.linear(pairs, head.w1, head.b1)), head.w2, head.b2)


def score_joint(span: Span, hidden_ctx: Tensor, head: ExtractorHead) -> float:
    if span.end >= hidden_ctx.data.shape[0]:
        raise ValueError(f"span {span} out of bounds")
    return joint_scores(hidden_ctx, head, [span]).item()


def independent_scores(hidden_ctx: Tensor, head: QaHead, spans,
                       include_null: bool = True) -> Tensor:
    """f_I for every span (start affine + end affine), then the null score."""
    start_col = ad.linear(hidden_ctx, head.start_w, head.start_b)
    end_col = ad.linear(hidden_ctx, head.end_w, head.end_b)
    starts = [sp.start for sp in spans]
    ends = [sp.end for sp in spans]
    scores = ad.add(ad.embedding(start_col, starts), ad.embedding(end_col, ends))
    if include_null:
        scores = ad.concat([scores, head.null_bias], axis=0)
    return scores


def score_independent(span: Span, hidden_ctx: Tensor, head: QaHead) -> float:
    if span.end >= hidden_ctx.data.shape[0]:
        raise ValueError(f"span {span} out of bounds")
    return independent_scores(hidden_ctx, head, [span], include_null=False).item()


def answer_distribution(context, params: enc.EncoderParams, head: ExtractorHead,
                        cfg: SpanModelConfig) -> SpanDistribution:
    """Softmax of f_J over all length-capped spans of the context."""
    packed = enc.pack_context(context)
    hidden = enc.encode(packed, params)
    spans = enumerate_spans(len(context), cfg.l_a)
    scores = joint_scores(hidden, head, spans)
    probs = ad.softmax(ad.constant(scores.data.reshape(1, -1)), axis=-1)
    return SpanDistribution(spans=spans, probs=probs.data.reshape(-1))


def qa_distribution(context, question, params: enc.EncoderParams,
                    head: QaHead) -> SpanDistribution:
    """Softmax of f_I over every s <= e span plus the no-answer outcome.

    Unlike the unconditional model, spans here are not length-capped; the
    question narrows the answer well enough that the cap buys nothing.
    """
    packed = enc.pack_question_context(question, context)
    hidden = enc.encode(packed, params)
    ctx_hidden = ad.rows(hidden, packed.context_start, len(packed))
    spans = enumerate_spans(len(context), len(context))
    scores = independent_scores(ctx_hidden, head, spans, include_null=True)
    probs = ad.softmax(ad.constant(scores.data.reshape(1, -1)), axis=-1)
    return SpanDistribution(spans=spans + [None], probs=probs.data.reshape(-1))


def _span_sort_key(item):
    span, prob = item
    if span is None:
        return (-prob, np.inf, np.inf)
    return (-prob, span.start, span.end)


def top_k_answers(dist: SpanDistribution, k: int) -> list:
    """k most probable spans; ties resolve lexicographically, null last."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(zip(dist.spans, dist.probs), key=_span_sort_key)
    return [span for span, _ in ranked[:k]]


def qa_predict(context, question, params: enc.EncoderParams, head: QaHead):
    """Best answer span, or None when the no-answer outcome wins."""
    dist = qa_distribution(context, question, params, head)
    return top_k_answers(dist, 1)[0]


def sample_from_top_k(dist: SpanDistribution, k: int, rng: np.random.Generator):
    """Uniform draw over the k most probable spans (all spans if fewer)."""
    top = top_k_answers(dist, k)
    return top[int(rng.integers(len(top)))]
