"""Tokenization, vocabulary, windowing, the templated toy world, and ingestion.

The toy world is a deterministic corpus of single-fact sentences:

    in 1903 the red foxes won the golden cup in boston .

Each fact supports up to three template questions (when / where / who) whose
answers are exact, unique token spans of their document. Slot values are
drawn without replacement inside a document, so every question has exactly
one gold span — which is what makes roundtrip-filter precision measurable
automatically instead of by manual inspection.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

PAD, CLS, SEP, EOQ, UNK = "[PAD]", "[CLS]", "[SEP]", "[EOQ]", "[UNK]"
RESERVED = (PAD, CLS, SEP, EOQ, UNK)
PAD_ID, CLS_ID, SEP_ID, EOQ_ID, UNK_ID = range(5)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Vocabulary:
    """Bijective token/id map with five fixed reserved ids (0..4)."""

    def __init__(self, tokens=()):
        self._tokens: list[str] = list(RESERVED)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token in self._ids:
            return self._ids[token]
        self._ids[token] = len(self._tokens)
        self._tokens.append(token)
        return self._ids[token]

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:5]) != RESERVED:
            raise DataError(f"{path}: first five lines must be the reserved tokens {RESERVED}")
        return cls(lines[5:])

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        vocab = cls()
        for text in texts:
            for tok in split_text(text):
                vocab.add(tok)
        return vocab


def split_text(text: str) -> list[str]:
    """Lowercase and split on whitespace, keeping punctuation as tokens."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Map text to ids; unknown surface forms become [UNK]."""
    return [vocab.id_of(t) for t in split_text(text)]


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.token_of(i) for i in ids)


@dataclass(frozen=True, order=True)
class Span:
    """Inclusive token span [start, end] into some context."""

    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass
class LabeledExample:
    """One supervised (context, question, answer) triple at window granularity."""

    context: list[int]
    question: list[int]
    answer: Span | None
    answerable: bool
    doc_id: int = -1
    window_id: int = -1

    def __post_init__(self):
        if self.answerable:
            if self.answer is None or self.answer.end >= len(self.context):
                raise ValueError("answerable example needs an in-bounds span")
        elif self.answer is not None:
            raise ValueError("unanswerable example must not carry a span")

    def answer_tokens(self) -> list[int]:
        assert self.answer is not None
        return self.context[self.answer.start:self.answer.end + 1]


@dataclass
class Window:
    doc_id: int
    window_id: int
    tokens: list[int]
    page_id: int
    offset: int = 0  # start token index within the source document

    def token_range(self) -> range:
        return range(self.offset, self.offset + len(self.tokens))


def extract_windows(doc_tokens, w_max: int, stride: int, doc_id: int = 0,
                    page_id: int | None = None) -> list[Window]:
    """Covering windows of length <= w_max at the given stride; the last
    partial window is kept."""
    if w_max < 1 or not 1 <= stride <= w_max:
        raise ValueError(f"need w_max >= 1 and 1 <= stride <= w_max, got {w_max}, {stride}")
    doc_tokens = list(doc_tokens)
    page = doc_id if page_id is None else page_id
    out = []
    for wid, start in enumerate(range(0, len(doc_tokens), stride)):
        out.append(Window(doc_id=doc_id, window_id=wid,
                          tokens=doc_tokens[start:start + w_max],
                          page_id=page, offset=start))
    return out


# ---------------------------------------------------------------------------
# Toy world
# ---------------------------------------------------------------------------

_TEAM_ADJ = ["red", "blue", "golden", "silver", "black", "white", "green",
             "iron", "copper", "amber", "crimson", "jade"]
_TEAM_NOUN = ["foxes", "owls", "wolves", "bears", "hawks", "lions", "otters",
              "ravens", "tigers", "crows", "herons", "moles"]
_EVENT_ADJ = ["summer", "winter", "autumn", "spring", "northern", "southern",
              "eastern", "western", "royal", "grand"]
_EVENT_NOUN = ["cup", "bowl", "series", "open", "trophy", "regatta"]
_CITIES = ["boston", "austin", "denver", "portland", "madrid", "oslo", "cairo",
           "lima", "quito", "dakar", "perth", "osaka", "turin", "bergen",
           "leeds", "gdansk", "varna", "tunis", "hobart", "galway"]
_YEARS = [str(y) for y in range(1900, 1960)]

WHEN, WHERE, WHO = "when", "where", "who"
TEMPLATE_NAMES = (WHEN, WHERE, WHO)


@dataclass
class ToyWorldConfig:
    n_docs: int = 100
    facts_per_doc: int = 8
    w_max: int = 32
    templates: tuple = TEMPLATE_NAMES
    questions_per_fact: int = 2  # how many of the templates to instantiate per fact


@dataclass
class ToyDoc:
    doc_id: int
    tokens: list[str]
    facts: list[dict] = field(default_factory=list)
    # doc-level question records: (template, question tokens, answer start/end)
    qas: list[dict] = field(default_factory=list)


def _fact_tokens(year, team, event, city):
    return ["in", year, "the", *team, "won", "the", *event, "in", city, "."]


def _question_tokens(template, fact):
    team, event, city, year = fact["team"], fact["event"], fact["city"], fact["year"]
    if template == WHEN:
        return ["when", "did", "the", *team, "win", "the", *event], "year"
    if template == WHERE:
        return ["where", "did", "the", *team, "win", "the", *event], "city"
    if template == WHO:
        return ["who", "won", "the", *event, "in", city], "team"
    raise ValueError(f"unknown template {template!r}")


def _answer_range(fact, slot):
    # token offsets of each slot within _fact_tokens, relative to fact start
    base = fact["offset"]
    if slot == "year":
        return base + 1, base + 1
    if slot == "team":
        return base + 3, base + 2 + len(fact["team"])
    team_len = len(fact["team"])
    if slot == "event":
        start = base + 5 + team_len
        return start, start + len(fact["event"]) - 1
    if slot == "city":
        return base + 6 + team_len + len(fact["event"]), base + 6 + team_len + len(fact["event"])
    raise ValueError(slot)


def generate_toy_world(seed: int, n_docs: int, cfg: ToyWorldConfig | None = None):
    """Deterministic templated corpus: (docs, window-level labeled examples).

    Every emitted example's answer span slices out of its window exactly the
    gold answer tokens, and the answer surface form occurs exactly once per
    document (slot values are drawn without replacement).
    """
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    cfg = cfg or ToyWorldConfig()
    rng = np.random.default_rng(seed)
    docs = []
    for doc_id in range(n_docs):
        doc = ToyDoc(doc_id=doc_id, tokens=[])
        n = cfg.facts_per_doc
        years = rng.choice(len(_YEARS), size=n, replace=False)
        cities = rng.choice(len(_CITIES), size=n, replace=False)
        # unique (adjective, noun) pairs; components may repeat across facts
        team_pairs = rng.choice(len(_TEAM_ADJ) * len(_TEAM_NOUN), size=n, replace=False)
        event_pairs = rng.choice(len(_EVENT_ADJ) * len(_EVENT_NOUN), size=n, replace=False)
        for k in range(n):
            fact = {
                "year": _YEARS[years[k]],
                "team": [_TEAM_ADJ[team_pairs[k] // len(_TEAM_NOUN)],
                         _TEAM_NOUN[team_pairs[k] % len(_TEAM_NOUN)]],
                "event": [_EVENT_ADJ[event_pairs[k] // len(_EVENT_NOUN)],
                          _EVENT_NOUN[event_pairs[k] % len(_EVENT_NOUN)]],
                "city": _CITIES[cities[k]],
                "offset": len(doc.tokens),
            }
            doc.tokens.extend(_fact_tokens(fact["year"], fact["team"], fact["event"],
                                           fact["city"]))
            doc.facts.append(fact)
            order = rng.permutation(len(cfg.templates))
            for t in order[:cfg.questions_per_fact]:
                template = cfg.templates[t]
                q_tokens, slot = _question_tokens(template, fact)
                start, end = _answer_range(fact, slot)
                doc.qas.append({"template": template, "question": q_tokens,
                                "start": start, "end": end})
        docs.append(doc)
    vocab = Vocabulary()
    for doc in docs:
        for tok in doc.tokens:
            vocab.add(tok)
        for qa in doc.qas:
            for tok in qa["question"]:
                vocab.add(tok)
    examples = examples_from_docs(docs, vocab, cfg.w_max)
    return docs, examples, vocab


def _enclosing_sentence(tokens, start, end):
    """Sentence bounds [lo, hi] around a span, delimited by '.' tokens."""
    lo = start
    while lo > 0 and tokens[lo - 1] != ".":
        lo -= 1
    hi = end
    while hi < len(tokens) - 1 and tokens[hi] != ".":
        hi += 1
    return lo, hi


def examples_from_docs(docs, vocab: Vocabulary, w_max: int) -> list[LabeledExample]:
    """Window each doc at stride w_max and re-anchor doc-level spans.

    A question is kept only when its entire evidence sentence fits inside one
    window, so every emitted example is fully supported by its context and the
    unique-gold-span guarantee survives at window granularity.
    """
    examples = []
    for doc in docs:
        ids = [vocab.id_of(t) for t in doc.tokens]
        windows = extract_windows(ids, w_max=w_max, stride=w_max, doc_id=doc.doc_id)
        for qa in doc.qas:
            lo, hi = _enclosing_sentence(doc.tokens, qa["start"], qa["end"])
            for w in windows:
                if lo >= w.offset and hi < w.offset + len(w.tokens):
                    examples.append(LabeledExample(
                        context=list(w.tokens),
                        question=[vocab.id_of(t) for t in qa["question"]],
                        answer=Span(qa["start"] - w.offset, qa["end"] - w.offset),
                        answerable=True,
                        doc_id=doc.doc_id,
                        window_id=w.window_id,
                    ))
                    break
    return examples


def windows_from_docs(docs, vocab: Vocabulary, w_max: int, stride: int | None = None):
    out = []
    for doc in docs:
        ids = [vocab.id_of(t) for t in doc.tokens]
        out.extend(extract_windows(ids, w_max=w_max, stride=stride or w_max,
                                   doc_id=doc.doc_id))
    return out


def doc_sentences(doc: ToyDoc, vocab: Vocabulary) -> list[list[int]]:
    """Split a toy doc into sentences at '.' boundaries (the '.' stays)."""
    out, cur = [], []
    for tok in doc.tokens:
        cur.append(vocab.id_of(tok))
        if tok == ".":
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def gold_answer_for_question(question_ids, window: Window, vocab: Vocabulary) -> Span | None:
    """Toy-world oracle: the unique gold span for a template question, or None.

    Parses the question against the three templates and locates the referenced
    fact inside the window. Returns None when the question does not parse, the
    fact is absent or truncated, or the answer slot falls outside the window.
    """
    toks = [vocab.token_of(i) for i in question_ids]
    spec = _parse_question(toks)
    if spec is None:
        return None
    wtoks = [vocab.token_of(i) for i in window.tokens]
    matches = []
    anchor, slot = spec
    for i, tok in enumerate(wtoks):
        got = _match_fact_at(wtoks, i, anchor, slot)
        if got is not None:
            matches.append(got)
    if len(matches) != 1:
        return None
    return matches[0]


def _parse_question(toks):
    """Return (anchor slot values, answer slot) for a template question."""
    if len(toks) >= 6 and toks[0] in (WHEN, WHERE) and toks[1] == "did" and toks[2] == "the":
        try:
            w = toks.index("win")
        except ValueError:
            return None
        team = toks[3:w]
        if toks[w + 1:w + 2] != ["the"]:
            return None
        event = toks[w + 2:]
        if not team or not event:
            return None
        return {"team": team, "event": event}, ("year" if toks[0] == WHEN else "city")
    if len(toks) >= 5 and toks[0] == WHO and toks[1] == "won" and toks[2] == "the":
        try:
            inpos = len(toks) - 1 - toks[::-1].index("in")
        except ValueError:
            return None
        event = toks[3:inpos]
        city = toks[inpos + 1:]
        if not event or len(city) != 1:
            return None
        return {"event": event, "city": city[0]}, "team"
    return None


def _match_fact_at(wtoks, i, anchor, slot):
    """Try to read a complete fact starting at window position i and check it
    against the anchor slots; return the answer Span on a match."""
    if wtoks[i] != "in" or i + 1 >= len(wtoks) or not wtoks[i + 1].isdigit():
        return None
    j = i + 2
    if wtoks[j:j + 1] != ["the"]:
        return None
    j += 1
    team = []
    while j < len(wtoks) and wtoks[j] != "won":
        team.append(wtoks[j])
        j += 1
    if j >= len(wtoks) or not team:
        return None
    j += 1  # skip "won"
    if wtoks[j:j + 1] != ["the"]:
        return None
    j += 1
    event = []
    while j < len(wtoks) and wtoks[j] != "in":
        event.append(wtoks[j])
        j += 1
    if j >= len(wtoks) or not event:
        return None
    j += 1  # skip "in"
    if j >= len(wtoks):
        return None
    city = wtoks[j]
    if wtoks[j + 1:j + 2] != ["."]:
        return None
    fact = {"year": wtoks[i + 1], "team": team, "event": event, "city": city}
    for key, value in anchor.items():
        if fact[key] != value:
            return None
    if slot == "year":
        return Span(i + 1, i + 1)
    if slot == "team":
        return Span(i + 3, i + 2 + len(team))
    if slot == "city":
        return Span(j, j)
    return None


def split_by_doc(examples, dev_mod: int = 5):
    """Deterministic doc-level train/dev split: doc_id % dev_mod == dev_mod-1
    goes to dev."""
    train = [e for e in examples if e.doc_id % dev_mod != dev_mod - 1]
    dev = [e for e in examples if e.doc_id % dev_mod == dev_mod - 1]
    return train, dev


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

def save_corpus(path, docs, vocab: Vocabulary) -> None:
    """One JSON line per doc: {doc_id, tokens[], qas:[{question[], start, end,
    answerable}]}."""
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            qas = [{"question": qa["question"], "start": qa["start"],
                    "end": qa["end"], "answerable": True} for qa in doc.qas]
            f.write(json.dumps({"doc_id": doc.doc_id, "tokens": doc.tokens,
                                "qas": qas}) + "\n")


def load_corpus(path):
    """Read a toy-corpus JSONL file back into ToyDoc records."""
    docs = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: invalid JSON ({e.msg})") from e
            try:
                doc = ToyDoc(doc_id=rec["doc_id"], tokens=rec["tokens"])
                for qa in rec.get("qas", []):
                    doc.qas.append({"template": qa.get("template", "unknown"),
                                    "question": qa["question"],
                                    "start": qa["start"], "end": qa["end"]})
            except KeyError as e:
                raise DataError(f"{path}:{line_no}: missing field {e}") from e
            docs.append(doc)
    return docs


# ---------------------------------------------------------------------------
# SQuAD-format ingestion
# ---------------------------------------------------------------------------

def load_squad_json(path, vocab: Vocabulary | None = None):
    """Ingest SQuAD-v2-shaped JSON into window-free LabeledExamples.

    Character-level answer offsets are re-anchored to token spans; examples
    whose tokenized answer does not match the context tokens at that position
    are dropped with a counted warning. Only the first listed answer of each
    question is used. Returns (examples, vocab).
    """
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON ({e.msg})") from e
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if "data" not in payload:
        raise DataError(f"{path}: missing top-level 'data' field")

    contexts, questions = [], []
    try:
        for article in payload["data"]:
            for para in article["paragraphs"]:
                contexts.append(para["context"])
                for qa in para["qas"]:
                    questions.append(qa["question"])
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed SQuAD structure ({e})") from e

    if vocab is None:
        vocab = Vocabulary.from_texts(contexts + questions)

    examples, dropped = [], 0
    for article in payload["data"]:
        for pi, para in enumerate(article["paragraphs"]):
            context = para["context"]
            ctx_ids, char_starts = _tokenize_with_offsets(context, vocab)
            for qa in para["qas"]:
                q_ids = tokenize(qa["question"], vocab)
                if qa.get("is_impossible", False):
                    examples.append(LabeledExample(context=ctx_ids, question=q_ids,
                                                   answer=None, answerable=False,
                                                   doc_id=pi))
                    continue
                answers = qa.get("answers", [])
                if not answers:
                    dropped += 1
                    continue
                ans = answers[0]
                span = _char_to_token_span(ans["text"], ans["answer_start"],
                                           ctx_ids, char_starts, vocab)
                if span is None:
                    dropped += 1
                    continue
                examples.append(LabeledExample(context=ctx_ids, question=q_ids,
                                               answer=span, answerable=True,
                                               doc_id=pi))
    if dropped:
        log.warning("%s: dropped %d misaligned or answerless questions", path, dropped)
    return examples, vocab


def _tokenize_with_offsets(text: str, vocab: Vocabulary):
    ids, starts = [], []
    for m in _TOKEN_RE.finditer(text.lower()):
        ids.append(vocab.id_of(m.group(0)))
        starts.append(m.start())
    return ids, starts


def _char_to_token_span(answer_text: str, answer_start: int, ctx_ids, char_starts,
                        vocab: Vocabulary) -> Span | None:
    ans_ids = tokenize(answer_text, vocab)
    if not ans_ids:
        return None
    start_tok = None
    for i, cs in enumerate(char_starts):
        if cs >= answer_start:
            start_tok = i
            break
    if start_tok is None:
        return None
    end_tok = start_tok + len(ans_ids) - 1
    if end_tok >= len(ctx_ids) or ctx_ids[start_tok:end_tok + 1] != ans_ids:
        return None
    return Span(start_tok, end_tok)
