"""Question generation: encoder-only masked LM decoding and a seq2seq variant.

Both modes expose the same step interface — given a question prefix, produce
next-token logits — so greedy, beam and ancestral sampling share one
implementation. Generated questions terminate at [EOQ] or at the fixed slot
length; [PAD], [CLS], [SEP] and [UNK] are never generated, and decode
probabilities renormalize over the remaining vocabulary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Tensor
from .corpus import CLS_ID, EOQ_ID, PAD_ID, SEP_ID, UNK_ID, Span
from .errors import NumericError

log = logging.getLogger(__name__)

BLOCKED_IDS = (PAD_ID, CLS_ID, SEP_ID, UNK_ID)


@dataclass
class QGenConfig:
    l_q: int = 20            # fixed question slot length
    mode: str = "encoder"    # "encoder" | "seq2seq"

    def __post_init__(self):
        if self.l_q < 2:
            raise ValueError("l_q must be >= 2 (one token plus [EOQ])")
        if self.mode not in ("encoder", "seq2seq"):
            raise ValueError(f"unknown qgen mode {self.mode!r}")


@dataclass
class DecodeResult:
    """One decoded question. ``log_prob`` is the sum of per-step masked log
    softmax values of the chosen tokens under the model (temperature 1), so
    it is recomputable from the tokens alone."""

    tokens: list[int]
    log_prob: float
    method: str

    def question(self) -> list[int]:
        """Tokens with the trailing [EOQ] stripped."""
        if self.tokens and self.tokens[-1] == EOQ_ID:
            return self.tokens[:-1]
        return list(self.tokens)


class DecoderBlock:
    def __init__(self, cfg: enc.EncoderConfig, rng):
        h, s = cfg.hidden, cfg.init_scale
        self.ln1_g = ad.param(np.ones(h))
        self.ln1_b = ad.param(np.zeros(h))
        self.wq = ad.param((h, h), rng, s)
        self.bq = ad.param(np.zeros(h))
        self.wk = ad.param((h, h), rng, s)
        self.bk = ad.param(np.zeros(h))
        self.wv = ad.param((h, h), rng, s)
        self.bv = ad.param(np.zeros(h))
        self.wo = ad.param((h, h), rng, s)
        self.bo = ad.param(np.zeros(h))
        self.ln2_g = ad.param(np.ones(h))
        self.ln2_b = ad.param(np.zeros(h))
        self.cwq = ad.param((h, h), rng, s)
        self.cbq = ad.param(np.zeros(h))
        self.cwk = ad.param((h, h), rng, s)
        self.cbk = ad.param(np.zeros(h))
        self.cwv = ad.param((h, h), rng, s)
        self.cbv = ad.param(np.zeros(h))
        self.cwo = ad.param((h, h), rng, s)
        self.cbo = ad.param(np.zeros(h))
        self.ln3_g = ad.param(np.ones(h))
        self.ln3_b = ad.param(np.zeros(h))
        self.w1 = ad.param((h, cfg.ff), rng, s)
        self.b1 = ad.param(np.zeros(cfg.ff))
        self.w2 = ad.param((cfg.ff, h), rng, s)
        self.b2 = ad.param(np.zeros(h))

    _FIELDS = ["ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "cwq", "cbq", "cwk", "cbk", "cwv", "cbv",
               "cwo", "cbo", "ln3_g", "ln3_b", "w1", "b1", "w2", "b2"]

    def parameters(self):
        return [getattr(self, f) for f in self._FIELDS]


class DecoderParams:
    """Causal self-attention + cross-attention stack for the seq2seq mode.

    Input embeddings and the output projection both reuse the encoder's token
    embedding matrix; position rows come from the encoder's table too."""

    def __init__(self, cfg: enc.EncoderConfig, rng):
        self.cfg = cfg
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.layers)]
        self.final_g = ad.param(np.ones(cfg.hidden))
        self.final_b = ad.param(np.zeros(cfg.hidden))

    def parameters(self):
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend([self.final_g, self.final_b])
        return out

    def named_arrays(self):
        names = {}
        for i, blk in enumerate(self.blocks):
            for f in DecoderBlock._FIELDS:
                names[f"decoder{i}.{f}"] = getattr(blk, f).data
        names["decoder.final_g"] = self.final_g.data
        names["decoder.final_b"] = self.final_b.data
        return names

    def load_arrays(self, arrays):
        for i, blk in enumerate(self.blocks):
            for f in DecoderBlock._FIELDS:
                getattr(blk, f).data = np.array(arrays[f"decoder{i}.{f}"],
                                                dtype=np.float64)
        self.final_g.data = np.array(arrays["decoder.final_g"], dtype=np.float64)
        self.final_b.data = np.array(arrays["decoder.final_b"], dtype=np.float64)


@dataclass
class QGenParams:
    """The question-generation model: an encoder, plus a decoder in seq2seq
    mode."""

    encoder: enc.EncoderParams
    decoder: DecoderParams | None = None

    def parameters(self):
        out = self.encoder.parameters()
        if self.decoder is not None:
            out.extend(self.decoder.parameters())
        return out


def _attention(x_q: Tensor, x_kv: Tensor, blk_prefix, mask_add: Tensor | None,
               cfg: enc.EncoderConfig):
    """Multi-head attention with q from x_q and k/v from x_kv."""
    wq, bq, wk, bk, wv, bv, wo, bo = blk_prefix
    q = ad.linear(x_q, wq, bq)
    k = ad.linear(x_kv, wk, bk)
    v = ad.linear(x_kv, wv, bv)
    dh = cfg.hidden // cfg.heads
    scale = 1.0 / np.sqrt(dh)
    heads = []
    for i in range(cfg.heads):
        qi = ad.cols(q, i * dh, (i + 1) * dh)
        ki = ad.cols(k, i * dh, (i + 1) * dh)
        vi = ad.cols(v, i * dh, (i + 1) * dh)
        scores = ad.mul(ad.matmul(qi, ki, transpose_b=True), scale)
        if mask_add is not None:
            scores = ad.add(scores, mask_add)
        heads.append(ad.matmul(ad.softmax(scores, axis=-1), vi))
    return ad.linear(ad.concat(heads, axis=1), wo, bo)


def decoder_forward(dec_ids, enc_hidden: Tensor, enc_params: enc.EncoderParams,
                    dec_params: DecoderParams) -> Tensor:
    """Decoder hidden states [T x h] with strictly causal self-attention."""
    cfg = dec_params.cfg
    dec_ids = np.asarray(dec_ids, dtype=np.intp)
    t = len(dec_ids)
    x = ad.add(ad.embedding(enc_params.token_emb, dec_ids),
               ad.embedding(enc_params.pos_emb, np.arange(t)))
    causal = np.tril(np.ones((t, t), dtype=bool))
    causal_add = ad.constant(np.where(causal, 0.0, ad.NEG_INF))
    for blk in dec_params.blocks:
        h1 = ad.layer_norm(x, blk.ln1_g, blk.ln1_b, cfg.ln_eps)
        x = ad.add(x, _attention(h1, h1,
                                 (blk.wq, blk.bq, blk.wk, blk.bk, blk.wv,
                                  blk.bv, blk.wo, blk.bo), causal_add, cfg))
        h2 = ad.layer_norm(x, blk.ln2_g, blk.ln2_b, cfg.ln_eps)
        x = ad.add(x, _attention(h2, enc_hidden,
                                 (blk.cwq, blk.cbq, blk.cwk, blk.cbk, blk.cwv,
                                  blk.cbv, blk.cwo, blk.cbo), None, cfg))
        h3 = ad.layer_norm(x, blk.ln3_g, blk.ln3_b, cfg.ln_eps)
        ff = ad.linear(ad.gelu(ad.linear(h3, blk.w1, blk.b1)), blk.w2, blk.b2)
        x = ad.add(x, ff)
    return ad.layer_norm(x, dec_params.final_g, dec_params.final_b, cfg.ln_eps)


def next_token_logits(prefix, answer_span: Span, context, params: QGenParams,
                      cfg: QGenConfig) -> np.ndarray:
    """Logits [V] for the next question token after ``prefix`` (encoder mode).

    The prediction for slot i is read from the hidden state at packed position
    i, which holds the previous question token ([CLS] for an empty prefix).
    Pad slots beyond the prefix cannot influence the result: the generation
    mask zeroes their attention weight exactly.
    """
    prefix = list(prefix)
    if len(prefix) >= cfg.l_q:
        raise ValueError(f"prefix of length {len(prefix)} leaves no slot (l_q={cfg.l_q})")
    packed = enc.pack_qgen_input(prefix, context, answer_span, cfg.l_q)
    hidden = enc.encode(packed, params.encoder)
    row = ad.rows(hidden, len(prefix), len(prefix) + 1)
    return enc.lm_logits(row, params.encoder).data.reshape(-1)


def _seq2seq_step_logits(prefix, enc_hidden, params: QGenParams) -> np.ndarray:
    dec_input = [CLS_ID] + list(prefix)
    hidden = decoder_forward(dec_input, enc_hidden, params.encoder, params.decoder)
    row = ad.rows(hidden, len(prefix), len(prefix) + 1)
    return enc.lm_logits(row, params.encoder).data.reshape(-1)


def make_step_fn(answer_span: Span, context, params: QGenParams, cfg: QGenConfig):
    """Bind a (prefix -> logits) closure for the configured mode."""
    if cfg.mode == "seq2seq":
        if params.decoder is None:
            raise ValueError("seq2seq decoding requires decoder parameters")
        enc_hidden = enc.encode(enc.pack_context(context, answer_span), params.encoder)
        return lambda prefix: _seq2seq_step_logits(prefix, enc_hidden, params)
    return lambda prefix: next_token_logits(prefix, answer_span, context, params, cfg)


def _masked_log_softmax(logits: np.ndarray) -> np.ndarray:
    masked = logits.astype(np.float64).copy()
    masked[list(BLOCKED_IDS)] = -np.inf
    if np.isnan(masked).any():
        raise NumericError("decoding produced NaN logits")
    m = masked.max()
    lse = m + np.log(np.exp(masked - m).sum())
    return masked - lse


def greedy_decode(answer_span: Span, context, params: QGenParams,
                  cfg: QGenConfig) -> DecodeResult:
    """Iterative argmax decoding; deterministic, stops at [EOQ] or l_q."""
    step = make_step_fn(answer_span, context, params, cfg)
    tokens, total = [], 0.0
    while len(tokens) < cfg.l_q:
        logp = _masked_log_softmax(step(tokens))
        tok = int(np.argmax(logp))
        total += logp[tok]
        tokens.append(tok)
        if tok == EOQ_ID:
            break
    return DecodeResult(tokens=tokens, log_prob=total, method="greedy")


def beam_search(answer_span: Span, context, params: QGenParams, cfg: QGenConfig,
                width: int) -> list[DecodeResult]:
    """Length-unnormalized beam over summed log probabilities.

    Hypotheses that emit [EOQ] (or hit l_q) freeze and keep competing on their
    total score; the returned list is best-first. With a width of at least
    V^l_q this is exhaustive search.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    step = make_step_fn(answer_span, context, params, cfg)
    beams = [((), 0.0, False)]  # (tokens, score, finished)
    for _ in range(cfg.l_q):
        if all(done for _, _, done in beams):
            break
        pool = [b for b in beams if b[2]]
        for tokens, score, done in beams:
            if done:
                continue
            logp = _masked_log_softmax(step(list(tokens)))
            for tok in range(logp.size):
                if not np.isfinite(logp[tok]):
                    continue
                new = tokens + (tok,)
                pool.append((new, score + logp[tok],
                             tok == EOQ_ID or len(new) >= cfg.l_q))
        pool.sort(key=lambda b: (-b[1], b[0]))
        beams = pool[:width]
    return [DecodeResult(tokens=list(t), log_prob=s, method="beam")
            for t, s, _ in sorted(beams, key=lambda b: (-b[1], b[0]))]


def sample_decode(answer_span: Span, context, params: QGenParams, cfg: QGenConfig,
                  temperature: float = 1.0, seed: int = 0) -> DecodeResult:
    """Ancestral sampling at the given temperature, deterministic per seed."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    rng = np.random.default_rng(seed)
    step = make_step_fn(answer_span, context, params, cfg)
    tokens, total = [], 0.0
    while len(tokens) < cfg.l_q:
        logits = step(tokens)
        logp = _masked_log_softmax(logits)  # model log-probs for the record
        heated = _masked_log_softmax(logits / temperature)
        tok = int(rng.choice(logp.size, p=np.exp(heated)))
        total += logp[tok]
        tokens.append(tok)
        if tok == EOQ_ID:
            break
    return DecodeResult(tokens=tokens, log_prob=total, method="sample")


def sequence_log_prob(tokens, answer_span: Span, context, params: QGenParams,
                      cfg: QGenConfig) -> float:
    """Independent chain-rule recomputation of a decoded sequence's score."""
    step = make_step_fn(answer_span, context, params, cfg)
    total = 0.0
    for i, tok in enumerate(tokens):
        total += _masked_log_softmax(step(list(tokens[:i])))[tok]
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def qgen_example_loss(example, params: QGenParams, cfg: QGenConfig) -> Tensor:
    """Teacher-forced NLL of the gold question (with [EOQ]) for one example.

    Encoder mode scores every position in a single masked pass; seq2seq mode
    runs the causal decoder over the shifted gold sequence.
    """
    targets = list(example.question)[:cfg.l_q - 1] + [EOQ_ID]
    if cfg.mode == "seq2seq":
        enc_hidden = enc.encode(enc.pack_context(example.context, example.answer),
                                params.encoder)
        dec_input = [CLS_ID] + targets[:-1]
        hidden = decoder_forward(dec_input, enc_hidden, params.encoder, params.decoder)
        logits = enc.lm_logits(hidden, params.encoder)
        return ad.cross_entropy(logits, targets)
    packed = enc.pack_qgen_input(targets, example.context, example.answer, cfg.l_q)
    hidden = enc.encode(packed, params.encoder)
    logits = enc.lm_logits(ad.rows(hidden, 0, len(targets)), params.encoder)
    return ad.cross_entropy(logits, targets)


def finetune_qgen(labeled, params: QGenParams, cfg: QGenConfig, train_cfg,
                  state=None) -> dict:
    """Fine-tune the generator on answerable (context, answer) -> question.

    Unanswerable examples are skipped with a count. Returns a history dict
    with per-epoch mean losses.
    """
    usable = [ex for ex in labeled if ex.answerable]
    skipped = len(labeled) - len(usable)
    if skipped:
        log.info("finetune_qgen: skipped %d unanswerable examples", skipped)
    if not usable:
        raise ValueError("no answerable examples to fine-tune on")
    trainable = params.parameters()
    state = state or ad.AdamState.for_params(trainable, lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    history = {"loss": [], "skipped": skipped}
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(usable))
        epoch_losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [usable[i] for i in order[lo:lo + train_cfg.batch_size]]
            ad.zero_grads(trainable)
            with ad.Tape() as tape:
                losses = [qgen_example_loss(ex, params, cfg) for ex in batch]
                loss = losses[0]
                for extra in losses[1:]:
                    loss = ad.add(loss, extra)
                loss = ad.mul(loss, 1.0 / len(batch))
                if not np.isfinite(loss.item()):
                    raise NumericError("qgen training loss is not finite")
                ad.backward(loss, tape)
            ad.adam_step(trainable, [p.grad for p in trainable], state)
            epoch_losses.append(loss.item())
        history["loss"].append(float(np.mean(epoch_losses)))
    return history


def pretrain_next_sentence(sentence_pairs, params: QGenParams, train_cfg,
                           heldout_fraction: float = 0.1) -> dict:
    """Seq2seq pretraining: decode sentence i+1 from sentence i.

    The encoder is frozen here (it trains during fine-tuning); only decoder
    parameters update. Returns history with held-out loss before and after.
    """
    if params.decoder is None:
        raise ValueError("next-sentence pretraining requires a seq2seq model")
    pairs = list(sentence_pairs)
    if not pairs:
        raise ValueError("no sentence pairs to pretrain on")
    n_held = max(1, int(len(pairs) * heldout_fraction)) if len(pairs) > 1 else 0
    held, train = pairs[:n_held], pairs[n_held:]
    if not train:
        train, held = pairs, []

    def pair_loss(src, tgt):
        enc_hidden = enc.encode(enc.pack_context(src), params.encoder)
        enc_hidden = ad.constant(enc_hidden.data)  # frozen encoder
        targets = list(tgt)[:params.decoder.cfg.s_max - 1]
        dec_input = [CLS_ID] + targets[:-1]
        hidden = decoder_forward(dec_input, enc_hidden, params.encoder, params.decoder)
        logits = enc.lm_logits(hidden, params.encoder)
        return ad.cross_entropy(logits, targets)

    def heldout_loss():
        if not held:
            return float("nan")
        return float(np.mean([pair_loss(s, t).item() for s, t in held]))

    trainable = params.decoder.parameters()
    state = ad.AdamState.for_params(trainable, lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    history = {"heldout_before": heldout_loss(), "loss": []}
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(train))
        epoch_losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [train[i] for i in order[lo:lo + train_cfg.batch_size]]
            ad.zero_grads(trainable)
            with ad.Tape() as tape:
                losses = [pair_loss(s, t) for s, t in batch]
                loss = losses[0]
                for extra in losses[1:]:
                    loss = ad.add(loss, extra)
                loss = ad.mul(loss, 1.0 / len(batch))
                if not np.isfinite(loss.item()):
                    raise NumericError("next-sentence loss is not finite")
                ad.backward(loss, tape)
            ad.adam_step(trainable, [p.grad for p in trainable], state)
            epoch_losses.append(loss.item())
        history["loss"].append(float(np.mean(epoch_losses)))
    history["heldout_after"] = heldout_loss()
    return history
