"""Transformer encoder: embeddings, masked multi-head attention, tied LM head.

The stack is pre-norm: every residual branch reads a layer-normed input and a
final layer norm closes the stack, so with zeroed output projections the
encoder reduces to a layer norm of the summed token/type/position embeddings.

Question-generation inputs are packed as

    [CLS] q_1 ... q_{L_Q pad slots} c_1 ... c_n

with [CLS] acting as the decode anchor: the logits that predict the question
token for slot i are read from the hidden state at packed position i, which
holds the previous question token (or [CLS] for the first step). Under the
generation mask no information flows from later question slots into earlier
positions, which is what makes one teacher-forced pass score every position.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor
from .corpus import CLS_ID, PAD_ID
from .errors import DataError, ShapeError

CHECKPOINT_FORMAT = "rtqa-checkpoint-v1"


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ff: int = 128
    s_max: int = 96
    mlp_hidden: int = 64  # hidden width of the joint span-scoring MLP
    init_scale: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ShapeError(f"hidden={self.hidden} not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class EncoderBlock:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
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
        self.w1 = ad.param((h, cfg.ff), rng, s)
        self.b1 = ad.param(np.zeros(cfg.ff))
        self.w2 = ad.param((cfg.ff, h), rng, s)
        self.b2 = ad.param(np.zeros(h))

    def parameters(self):
        return [self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo, self.ln2_g, self.ln2_b,
                self.w1, self.b1, self.w2, self.b2]


class EncoderParams:
    """All trainable arrays of one encoder, plus its config."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.token_emb = ad.param((cfg.vocab_size, cfg.hidden), rng, cfg.init_scale)
        self.type_emb = ad.param((3, cfg.hidden), rng, cfg.init_scale)
        self.pos_emb = ad.param((cfg.s_max, cfg.hidden), rng, cfg.init_scale)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.layers)]
        self.final_g = ad.param(np.ones(cfg.hidden))
        self.final_b = ad.param(np.zeros(cfg.hidden))

    def parameters(self) -> list[Tensor]:
        out = [self.token_emb, self.type_emb, self.pos_emb]
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend([self.final_g, self.final_b])
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        names = {}
        names["token_emb"] = self.token_emb.data
        names["type_emb"] = self.type_emb.data
        names["pos_emb"] = self.pos_emb.data
        fields = ["ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo",
                  "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"]
        for i, blk in enumerate(self.blocks):
            for f in fields:
                names[f"block{i}.{f}"] = getattr(blk, f).data
        names["final_g"] = self.final_g.data
        names["final_b"] = self.final_b.data
        return names

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in zip(self._names(), self.parameters()):
            if arrays[name].shape != tensor.data.shape:
                raise DataError(f"checkpoint array {name} has shape {arrays[name].shape}, "
                                f"expected {tensor.data.shape}")
            tensor.data = np.array(arrays[name], dtype=np.float64)

    def _names(self):
        return list(self.named_arrays().keys())


@dataclass
class PackedInput:
    """Token/type ids plus the attention mask for one encoder call.

    ``context_start`` marks where the context slot begins; everything before
    it is the question region (anchor plus padded question slots, or a raw
    question for QA packing, or nothing for context-only packing).
    """

    tokens: np.ndarray
    types: np.ndarray
    mask: np.ndarray  # bool [S, S]; (i, j) True iff query i may attend to key j
    context_start: int
    position_ids: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.intp)
        self.types = np.asarray(self.types, dtype=np.intp)
        s = len(self.tokens)
        if self.types.shape != (s,):
            raise ShapeError("type ids must align with tokens")
        if self.mask.shape != (s, s):
            raise ShapeError(f"mask shape {self.mask.shape} does not match length {s}")
        if not ((0 <= self.types) & (self.types <= 2)).all():
            raise ValueError("type ids must be in {0, 1, 2}")
        if (self.types[:self.context_start] != 0).any():
            raise ValueError("question region must use type id 0")
        ctx_types = self.types[self.context_start:]
        in_span = ctx_types == 2
        if in_span.any():
            lo, hi = np.flatnonzero(in_span)[[0, -1]]
            if not in_span[lo:hi + 1].all():
                raise ValueError("answer type ids must form a contiguous span")

    def __len__(self) -> int:
        return len(self.tokens)


def full_mask(s: int) -> np.ndarray:
    return np.ones((s, s), dtype=bool)


def build_qgen_mask(l_q: int, ctx_len: int) -> np.ndarray:
    """Generation mask over [question positions | context positions].

    Question position p attends to question positions <= p and to all of the
    context; context positions attend only to the context.
    """
    if l_q < 1 or ctx_len < 1:
        raise ValueError("need l_q >= 1 and ctx_len >= 1")
    s = l_q + ctx_len
    mask = np.zeros((s, s), dtype=bool)
    q = np.arange(l_q)
    mask[:l_q, :l_q] = q[None, :] <= q[:, None]
    mask[:l_q, l_q:] = True
    mask[l_q:, l_q:] = True
    return mask


def pack_context(context, answer_span=None) -> PackedInput:
    """Context-only packing (answer extraction; seq2seq encoder side)."""
    context = list(context)
    if not context:
        raise ValueError("context must be non-empty")
    types = np.ones(len(context), dtype=np.intp)
    if answer_span is not None:
        if answer_span.end >= len(context):
            raise ValueError(f"span {answer_span} out of bounds for context of "
                             f"length {len(context)}")
        types[answer_span.start:answer_span.end + 1] = 2
    return PackedInput(tokens=np.asarray(context), types=types,
                       mask=full_mask(len(context)), context_start=0)


def pack_question_context(question, context) -> PackedInput:
    """Question-then-context packing with full bidirectional attention (QA)."""
    question, context = list(question), list(context)
    if not question or not context:
        raise ValueError("question and context must both be non-empty")
    tokens = np.asarray(question + context)
    types = np.asarray([0] * len(question) + [1] * len(context), dtype=np.intp)
    return PackedInput(tokens=tokens, types=types, mask=full_mask(len(tokens)),
                       context_start=len(question))


def pack_qgen_input(question_prefix, context, answer_span, l_q: int) -> PackedInput:
    """Anchor + fixed-length question slot + answer-typed context.

    The prefix is truncated or [PAD]-padded to exactly ``l_q`` slots so the
    model never sees the target length; the [CLS] anchor at position 0 is
    where the first decoding step reads its logits from.
    """
    context = list(context)
    if not context:
        raise ValueError("context must be non-empty")
    if answer_span.end >= len(context):
        raise ValueError(f"span {answer_span} out of bounds for context of "
                         f"length {len(context)}")
    prefix = list(question_prefix)[:l_q]
    slots = prefix + [PAD_ID] * (l_q - len(prefix))
    tokens = np.asarray([CLS_ID] + slots + context)
    types = np.concatenate([np.zeros(1 + l_q, dtype=np.intp),
                            np.ones(len(context), dtype=np.intp)])
    types[1 + l_q + answer_span.start:1 + l_q + answer_span.end + 1] = 2
    mask = build_qgen_mask(l_q + 1, len(context))
    return PackedInput(tokens=tokens, types=types, mask=mask,
                       context_start=1 + l_q)


def encode(packed: PackedInput, params: EncoderParams,
           attn_probs: list | None = None) -> Tensor:
    """Contextual representations [S x h] under the packed attention mask.

    With ``attn_probs`` given, every head's post-softmax attention matrix is
    appended to it (values only, useful for diagnostics and tests).
    """
    cfg = params.cfg
    s = len(packed)
    if s > cfg.s_max:
        raise ShapeError(f"sequence length {s} exceeds s_max={cfg.s_max}")
    if not packed.mask.any(axis=1).all():
        raise ValueError("attention mask has a row with no attendable key")
    pos = packed.position_ids if packed.position_ids is not None else np.arange(s)

    x = ad.add(ad.add(ad.embedding(params.token_emb, packed.tokens),
                      ad.embedding(params.type_emb, packed.types)),
               ad.embedding(params.pos_emb, pos))
    additive = ad.constant(np.where(packed.mask, 0.0, NEG_INF))
    dh = cfg.hidden // cfg.heads
    scale = 1.0 / np.sqrt(dh)

    for blk in params.blocks:
        h1 = ad.layer_norm(x, blk.ln1_g, blk.ln1_b, cfg.ln_eps)
        q = ad.linear(h1, blk.wq, blk.bq)
        k = ad.linear(h1, blk.wk, blk.bk)
        v = ad.linear(h1, blk.wv, blk.bv)
        heads = []
        for i in range(cfg.heads):
            qi = ad.cols(q, i * dh, (i + 1) * dh)
            ki = ad.cols(k, i * dh, (i + 1) * dh)
            vi = ad.cols(v, i * dh, (i + 1) * dh)
            scores = ad.add(ad.mul(ad.matmul(qi, ki, transpose_b=True), scale), additive)
            probs = ad.softmax(scores, axis=-1)
            if attn_probs is not None:
                attn_probs.append(probs.data)
            heads.append(ad.matmul(probs, vi))
        attn_out = ad.linear(ad.concat(heads, axis=1), blk.wo, blk.bo)
        x = ad.add(x, attn_out)
        h2 = ad.layer_norm(x, blk.ln2_g, blk.ln2_b, cfg.ln_eps)
        ff = ad.linear(ad.gelu(ad.linear(h2, blk.w1, blk.b1)), blk.w2, blk.b2)
        x = ad.add(x, ff)
    return ad.layer_norm(x, params.final_g, params.final_b, cfg.ln_eps)


def lm_logits(hidden: Tensor, params: EncoderParams) -> Tensor:
    """hidden @ token_emb^T — the output projection is the embedding matrix."""
    if hidden.data.shape[-1] != params.cfg.hidden:
        raise ShapeError(f"hidden width {hidden.data.shape[-1]} != h={params.cfg.hidden}")
    return ad.matmul(hidden, params.token_emb, transpose_b=True)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Single-file .npz checkpoint with an embedded JSON manifest."""
    manifest = dict(manifest)
    manifest["format"] = CHECKPOINT_FORMAT
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8)
    np.savez(path, __manifest__=blob, **arrays)


def load_checkpoint(path):
    """Return (arrays, manifest); rejects foreign or versionless files."""
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files if k != "__manifest__"}
            if "__manifest__" not in z.files:
                raise DataError(f"{path}: missing checkpoint manifest")
            manifest = json.loads(bytes(z["__manifest__"]).decode("utf-8"))
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: cannot read checkpoint ({e})") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format "
                        f"{manifest.get('format')!r}")
    return arrays, manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
