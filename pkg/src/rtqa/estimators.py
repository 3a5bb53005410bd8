"""Estimator-style wrappers around the three trainable models.

Each class follows the scikit-learn conventions: constructor arguments are
stored verbatim (so ``get_params`` / ``set_params`` / ``clone`` work), ``fit``
returns ``self`` and fitted state lives in trailing-underscore attributes.
Calling ``fit`` on an already-fitted model continues training with the saved
optimizer state, which is also how checkpoint resume works.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import encoder as enc
from . import qgen as qg
from . import spans as sp
from . import training as tr
from .corpus import Span, Vocabulary
from .errors import DataError


def _adam_arrays(state: ad.AdamState) -> dict:
    out = {"adam.step": np.asarray([state.step], dtype=np.int64)}
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        out[f"adam.m.{i}"] = m
        out[f"adam.v.{i}"] = v
    return out


def _load_adam(arrays: dict, trainable, lr: float) -> ad.AdamState | None:
    if "adam.step" not in arrays:
        return None
    state = ad.AdamState.for_params(trainable, lr=lr)
    state.step = int(arrays["adam.step"][0])
    state.m = [np.array(arrays[f"adam.m.{i}"]) for i in range(len(trainable))]
    state.v = [np.array(arrays[f"adam.v.{i}"]) for i in range(len(trainable))]
    return state


class _CheckpointMixin:
    """Shared save/load for the estimator classes."""

    _kind = "model"

    def _check_fitted(self):
        if getattr(self, "params_", None) is None:
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def _encoder_params(self) -> enc.EncoderParams:
        raise NotImplementedError

    def _extra_arrays(self) -> dict:
        return {}

    def _load_extra(self, arrays: dict) -> None:
        pass

    def save(self, path) -> None:
        self._check_fitted()
        arrays = dict(self._encoder_params().named_arrays())
        arrays.update(self._extra_arrays())
        if getattr(self, "opt_state_", None) is not None:
            arrays.update(_adam_arrays(self.opt_state_))
        manifest = {
            "kind": self._kind,
            "encoder_config": self._encoder_params().cfg.to_dict(),
            "vocab": self.vocab.tokens(),
            "estimator_params": {k: v for k, v in self.get_params().items()
                                 if k != "vocab"},
        }
        enc.save_checkpoint(path, arrays, manifest)

    @classmethod
    def load(cls, path):
        arrays, manifest = enc.load_checkpoint(path)
        if manifest.get("kind") != cls._kind:
            raise DataError(f"{path}: checkpoint holds a {manifest.get('kind')!r} "
                            f"model, expected {cls._kind!r}")
        vocab = Vocabulary(manifest["vocab"][5:])
        est = cls(vocab=vocab, **manifest["estimator_params"])
        est._build(seeded=False)
        est._encoder_params().load_arrays(arrays)
        est._load_extra(arrays)
        est.opt_state_ = _load_adam(arrays, est._trainable(), est.lr)
        return est


class AnswerExtractor(_CheckpointMixin, BaseEstimator):
    """Question-unconditional extractive answer model p(a | c).

    Spans are scored jointly (one MLP over both endpoint representations) and
    normalized over all spans up to ``max_answer_len`` tokens.
    """

    _kind = "answer_extractor"

    def __init__(self, vocab=None, hidden=64, layers=2, heads=4, ff=128,
                 s_max=96, mlp_hidden=64, max_answer_len=32, lr=1e-3,
                 batch_size=16, epochs=3, seed=0):
        self.vocab = vocab
        self.hidden = hidden
        self.layers = layers
        self.heads = heads
        self.ff = ff
        self.s_max = s_max
        self.mlp_hidden = mlp_hidden
        self.max_answer_len = max_answer_len
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _encoder_config(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(vocab_size=len(self.vocab), hidden=self.hidden,
                                 layers=self.layers, heads=self.heads, ff=self.ff,
                                 s_max=self.s_max, mlp_hidden=self.mlp_hidden)

    def _build(self, seeded=True):
        rng = np.random.default_rng(self.seed if seeded else 0)
        cfg = self._encoder_config()
        self.params_ = enc.EncoderParams(cfg, rng)
        self.head_ = sp.ExtractorHead(cfg, rng)
        self.span_cfg_ = sp.SpanModelConfig(l_a=self.max_answer_len)
        self.opt_state_ = None

    def _encoder_params(self):
        return self.params_

    def _trainable(self):
        return self.params_.parameters() + self.head_.parameters()

    def _extra_arrays(self):
        return self.head_.named_arrays()

    def _load_extra(self, arrays):
        self.head_.load_arrays(arrays)
        self.span_cfg_ = sp.SpanModelConfig(l_a=self.max_answer_len)

    def fit(self, examples, y=None):
        if self.vocab is None:
            raise ValueError("a Vocabulary is required before fitting")
        if getattr(self, "params_", None) is None:
            self._build()
        if self.opt_state_ is None:
            self.opt_state_ = ad.AdamState.for_params(self._trainable(), lr=self.lr)
        cfg = tr.TrainConfig(batch_size=self.batch_size, lr=self.lr,
                             epochs=self.epochs, seed=self.seed)
        self.history_ = tr.train_answer_extractor(examples, self.params_, self.head_,
                                                  self.span_cfg_, cfg,
                                                  state=self.opt_state_)
        return self

    def predict_proba(self, context) -> sp.SpanDistribution:
        self._check_fitted()
        return sp.answer_distribution(context, self.params_, self.head_,
                                      self.span_cfg_)

    def predict(self, context) -> Span:
        return self.top_answers(context, 1)[0]

    def top_answers(self, context, k: int):
        return sp.top_k_answers(self.predict_proba(context), k)

    def sample_top_k(self, context, rng, k: int = 10, dist=None) -> Span:
        self._check_fitted()
        if dist is None:
            dist = self.predict_proba(context)
        return sp.sample_from_top_k(dist, k, rng)


class QuestionGenerator(_CheckpointMixin, BaseEstimator):
    """Question generation model p(q | a, c), encoder-only or seq2seq."""

    _kind = "question_generator"

    def __init__(self, vocab=None, mode="encoder", l_q=20, hidden=64, layers=2,
                 heads=4, ff=128, s_max=96, lr=1e-3, batch_size=16, epochs=3,
                 seed=0):
        self.vocab = vocab
        self.mode = mode
        self.l_q = l_q
        self.hidden = hidden
        self.layers = layers
        self.heads = heads
        self.ff = ff
        self.s_max = s_max
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def decode_config(self) -> qg.QGenConfig:
        return qg.QGenConfig(l_q=self.l_q, mode=self.mode)

    def _encoder_config(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(vocab_size=len(self.vocab), hidden=self.hidden,
                                 layers=self.layers, heads=self.heads, ff=self.ff,
                                 s_max=self.s_max)

    def _build(self, seeded=True):
        rng = np.random.default_rng(self.seed if seeded else 0)
        cfg = self._encoder_config()
        decoder = qg.DecoderParams(cfg, rng) if self.mode == "seq2seq" else None
        self.params_ = qg.QGenParams(encoder=enc.EncoderParams(cfg, rng),
                                     decoder=decoder)
        self.opt_state_ = None

    def _encoder_params(self):
        return self.params_.encoder

    def _trainable(self):
        return self.params_.parameters()

    def _extra_arrays(self):
        if self.params_.decoder is None:
            return {}
        return self.params_.decoder.named_arrays()

    def _load_extra(self, arrays):
        if self.params_.decoder is not None:
            self.params_.decoder.load_arrays(arrays)

    def pretrain(self, sentence_pairs, epochs=None):
        """Next-sentence pretraining of the seq2seq decoder."""
        if getattr(self, "params_", None) is None:
            self._build()
        cfg = tr.TrainConfig(batch_size=self.batch_size, lr=self.lr,
                             epochs=epochs or self.epochs, seed=self.seed)
        self.pretrain_history_ = qg.pretrain_next_sentence(sentence_pairs,
                                                           self.params_, cfg)
        return self

    def fit(self, examples, y=None):
        if self.vocab is None:
            raise ValueError("a Vocabulary is required before fitting")
        if getattr(self, "params_", None) is None:
            self._build()
        if self.opt_state_ is None:
            self.opt_state_ = ad.AdamState.for_params(self._trainable(), lr=self.lr)
        cfg = tr.TrainConfig(batch_size=self.batch_size, lr=self.lr,
                             epochs=self.epochs, seed=self.seed)
        self.history_ = qg.finetune_qgen(examples, self.params_,
                                         self.decode_config(), cfg,
                                         state=self.opt_state_)
        return self

    def generate(self, context, answer_span: Span, method: str = "greedy",
                 width: int = 4, temperature: float = 1.0,
                 seed: int = 0) -> qg.DecodeResult:
        self._check_fitted()
        cfg = self.decode_config()
        if method == "greedy":
            return qg.greedy_decode(answer_span, context, self.params_, cfg)
        if method == "beam":
            return qg.beam_search(answer_span, context, self.params_, cfg, width)[0]
        if method == "sample":
            return qg.sample_decode(answer_span, context, self.params_, cfg,
                                    temperature=temperature, seed=seed)
        raise ValueError(f"unknown decode method {method!r}")

    def beam_candidates(self, context, answer_span: Span, width: int):
        self._check_fitted()
        return qg.beam_search(answer_span, context, self.params_,
                              self.decode_config(), width)

    def predict(self, pairs):
        """Greedy questions (EOQ stripped) for (context, span) pairs."""
        return [self.generate(ctx, span).question() for ctx, span in pairs]


class QuestionAnswerer(_CheckpointMixin, BaseEstimator):
    """Question-conditional extractive model p(a | c, q) with a NULL outcome."""

    _kind = "question_answerer"

    def __init__(self, vocab=None, hidden=64, layers=2, heads=4, ff=128,
                 s_max=96, lr=1e-3, batch_size=16, epochs=3, seed=0):
        self.vocab = vocab
        self.hidden = hidden
        self.layers = layers
        self.heads = heads
        self.ff = ff
        self.s_max = s_max
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _encoder_config(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(vocab_size=len(self.vocab), hidden=self.hidden,
                                 layers=self.layers, heads=self.heads, ff=self.ff,
                                 s_max=self.s_max)

    def _build(self, seeded=True):
        rng = np.random.default_rng(self.seed if seeded else 0)
        cfg = self._encoder_config()
        self.params_ = enc.EncoderParams(cfg, rng)
        self.head_ = sp.QaHead(cfg, rng)
        self.opt_state_ = None

    def _encoder_params(self):
        return self.params_

    def _trainable(self):
        return self.params_.parameters() + self.head_.parameters()

    def _extra_arrays(self):
        return self.head_.named_arrays()

    def _load_extra(self, arrays):
        self.head_.load_arrays(arrays)

    def fit(self, examples, y=None):
        if self.vocab is None:
            raise ValueError("a Vocabulary is required before fitting")
        if getattr(self, "params_", None) is None:
            self._build()
        if self.opt_state_ is None:
            self.opt_state_ = ad.AdamState.for_params(self._trainable(), lr=self.lr)
        cfg = tr.TrainConfig(batch_size=self.batch_size, lr=self.lr,
                             epochs=self.epochs, seed=self.seed)
        self.history_ = tr.train_qa_supervised(examples, self.params_, self.head_,
                                               cfg, state=self.opt_state_)
        return self

    def predict_proba(self, context, question) -> sp.SpanDistribution:
        self._check_fitted()
        return sp.qa_distribution(context, question, self.params_, self.head_)

    def predict(self, context, question):
        self._check_fitted()
        return sp.qa_predict(context, question, self.params_, self.head_)

    def log_prob(self, context, question, span) -> float:
        """log p(span | question, context); ``span=None`` scores NULL."""
        dist = self.predict_proba(context, question)
        p = dist.prob_of(span)
        return float(np.log(max(p, 1e-300)))

    def evaluate(self, examples) -> tuple[float, float]:
        self._check_fitted()
        return tr.evaluate_qa(examples, self.params_, self.head_, self.vocab)
