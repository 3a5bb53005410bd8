import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtqa import corpus
from rtqa.corpus import (
    EOQ_ID, PAD_ID, UNK_ID, LabeledExample, Span, Vocabulary, detokenize,
    extract_windows, generate_toy_world, gold_answer_for_question,
    load_squad_json, split_text, tokenize, windows_from_docs,
)
from rtqa.errors import DataError


def test_reserved_ids_fixed():
    v = Vocabulary()
    assert [v.token_of(i) for i in range(5)] == ["[PAD]", "[CLS]", "[SEP]", "[EOQ]", "[UNK]"]
    assert len(v) == 5


def test_tokenize_splits_punctuation_and_lowercases():
    v = Vocabulary(["in", "1903", ",", "boston"])
    ids = tokenize("In 1903, Boston", v)
    assert [v.token_of(i) for i in ids] == ["in", "1903", ",", "boston"]


def test_tokenize_empty():
    assert tokenize("", Vocabulary()) == []


def test_tokenize_unknown_token():
    v = Vocabulary(["known"])
    assert tokenize("known unknown", v) == [v.id_of("known"), UNK_ID]


def test_detokenize_roundtrip_token_identity():
    v = Vocabulary(["the", "red", "foxes", "won", "."])
    text = "the red foxes won ."
    assert tokenize(detokenize(tokenize(text, v), v), v) == tokenize(text, v)


@given(st.lists(st.sampled_from("abc de f, g. h".split()), min_size=0, max_size=20))
@settings(max_examples=50, deadline=None)
def test_tokenize_detokenize_property(words):
    v = Vocabulary.from_texts([" ".join(words)])
    ids = tokenize(" ".join(words), v)
    assert tokenize(detokenize(ids, v), v) == ids


def test_vocab_save_load_roundtrip(tmp_path):
    v = Vocabulary(["alpha", "beta"])
    p = tmp_path / "vocab.txt"
    v.save(p)
    v2 = Vocabulary.load(p)
    assert v2.tokens() == v.tokens()
    lines = p.read_text().splitlines()
    assert lines[v.id_of("beta")] == "beta"


def test_vocab_load_rejects_bad_header(tmp_path):
    p = tmp_path / "vocab.txt"
    p.write_text("foo\nbar\n")
    with pytest.raises(DataError):
        Vocabulary.load(p)


def test_extract_windows_partial_tail():
    ws = extract_windows(list(range(10)), w_max=4, stride=4)
    assert [w.tokens for w in ws] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    assert [w.offset for w in ws] == [0, 4, 8]


def test_extract_windows_short_doc():
    ws = extract_windows([1, 2], w_max=4, stride=4)
    assert len(ws) == 1 and ws[0].tokens == [1, 2]


def test_extract_windows_tiling_covers_doc():
    doc = list(range(23))
    ws = extract_windows(doc, w_max=5, stride=5)
    flattened = [t for w in ws for t in w.tokens]
    assert flattened == doc


def test_extract_windows_empty_doc():
    assert extract_windows([], w_max=4, stride=4) == []


@given(st.integers(1, 40), st.integers(1, 8))
@settings(max_examples=50, deadline=None)
def test_window_coverage_property(n, w_max):
    doc = list(range(n))
    ws = extract_windows(doc, w_max=w_max, stride=w_max)
    assert [t for w in ws for t in w.tokens] == doc


def test_toy_world_deterministic():
    d1, e1, v1 = generate_toy_world(seed=11, n_docs=4)
    d2, e2, v2 = generate_toy_world(seed=11, n_docs=4)
    assert [d.tokens for d in d1] == [d.tokens for d in d2]
    assert [(e.context, e.question, e.answer) for e in e1] == \
        [(e.context, e.question, e.answer) for e in e2]
    assert v1.tokens() == v2.tokens()


def test_toy_world_spans_are_sound():
    docs, examples, vocab = generate_toy_world(seed=3, n_docs=6)
    assert examples
    for ex in examples:
        ans = ex.answer_tokens()
        window_text = [vocab.token_of(t) for t in ans]
        assert all(tok not in ("[PAD]", "[UNK]") for tok in window_text)
        # the answer tokens occur exactly once in the whole document
        doc = docs[ex.doc_id]
        hits = sum(1 for i in range(len(doc.tokens))
                   if [vocab.id_of(t) for t in doc.tokens[i:i + len(ans)]] == ans)
        assert hits == 1


def test_toy_world_hits_all_templates():
    docs, _, _ = generate_toy_world(seed=5, n_docs=10)
    seen = {qa["template"] for d in docs for qa in d.qas}
    assert seen == set(corpus.TEMPLATE_NAMES)


def test_toy_world_vocab_small():
    _, _, vocab = generate_toy_world(seed=1, n_docs=30)
    assert len(vocab) <= 512


def test_toy_world_oracle_finds_gold():
    docs, examples, vocab = generate_toy_world(seed=9, n_docs=5)
    windows = {(w.doc_id, w.window_id): w
               for w in windows_from_docs(docs, vocab, w_max=32)}
    checked = 0
    for ex in examples:
        w = windows[(ex.doc_id, ex.window_id)]
        gold = gold_answer_for_question(ex.question, w, vocab)
        assert gold == ex.answer
        checked += 1
    assert checked == len(examples)


def test_toy_world_oracle_rejects_garbage():
    docs, _, vocab = generate_toy_world(seed=9, n_docs=2)
    w = windows_from_docs(docs, vocab, w_max=32)[0]
    assert gold_answer_for_question([UNK_ID, EOQ_ID], w, vocab) is None
    assert gold_answer_for_question([], w, vocab) is None


def test_corpus_file_roundtrip(tmp_path):
    docs, _, vocab = generate_toy_world(seed=2, n_docs=3)
    path = tmp_path / "corpus.jsonl"
    corpus.save_corpus(path, docs, vocab)
    loaded = corpus.load_corpus(path)
    assert [d.tokens for d in loaded] == [d.tokens for d in docs]
    assert [len(d.qas) for d in loaded] == [len(d.qas) for d in docs]


def test_load_corpus_rejects_bad_json(tmp_path):
    p = tmp_path / "corpus.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(DataError):
        corpus.load_corpus(p)


# -- SQuAD-format ingestion --------------------------------------------------

def _squad_payload():
    context = "The team won in 1903, taking the title in Boston."
    return {
        "version": "v2.0",
        "data": [{
            "title": "t",
            "paragraphs": [{
                "context": context,
                "qas": [
                    {"id": "q1", "question": "When did the team win?",
                     "is_impossible": False,
                     "answers": [{"text": "1903", "answer_start": context.index("1903")}]},
                    {"id": "q2", "question": "Who lost?", "is_impossible": True,
                     "answers": []},
                    {"id": "q3", "question": "Where?", "is_impossible": False,
                     "answers": [{"text": "Boston", "answer_start": context.index("Boston")}]},
                ],
            }],
        }],
    }


def test_squad_alignment(tmp_path):
    p = tmp_path / "squad.json"
    p.write_text(json.dumps(_squad_payload()))
    examples, vocab = load_squad_json(p)
    assert len(examples) == 3
    by_q = {detokenize(e.question, vocab): e for e in examples}
    when = by_q["when did the team win ?"]
    # context tokens: the team won in 1903 , taking the title in boston .
    assert when.answer == Span(4, 4)
    assert detokenize(when.answer_tokens(), vocab) == "1903"
    where = by_q["where ?"]
    assert detokenize(where.answer_tokens(), vocab) == "boston"


def test_squad_impossible_becomes_unanswerable(tmp_path):
    p = tmp_path / "squad.json"
    p.write_text(json.dumps(_squad_payload()))
    examples, _ = load_squad_json(p)
    flags = [e.answerable for e in examples]
    assert flags.count(False) == 1


def test_squad_empty_paragraphs(tmp_path):
    p = tmp_path / "squad.json"
    p.write_text(json.dumps({"data": [{"paragraphs": []}]}))
    examples, _ = load_squad_json(p)
    assert examples == []


def test_squad_misaligned_answer_dropped(tmp_path, caplog):
    payload = _squad_payload()
    payload["data"][0]["paragraphs"][0]["qas"][0]["answers"][0]["answer_start"] = 3
    p = tmp_path / "squad.json"
    p.write_text(json.dumps(payload))
    with caplog.at_level("WARNING"):
        examples, _ = load_squad_json(p)
    assert len(examples) == 2
    assert "dropped 1" in caplog.text


def test_squad_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(DataError) as exc:
        load_squad_json(p)
    assert "bad.json" in str(exc.value)


def test_squad_missing_fields(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"data": [{"paragraphs": [{"qas": []}]}]}))
    with pytest.raises(DataError):
        load_squad_json(p)


def test_labeled_example_invariants():
    with pytest.raises(ValueError):
        LabeledExample(context=[5, 6], question=[7], answer=Span(0, 5), answerable=True)
    with pytest.raises(ValueError):
        LabeledExample(context=[5, 6], question=[7], answer=Span(0, 0), answerable=False)


def test_split_text_examples():
    assert split_text("Hello, World!") == ["hello", ",", "world", "!"]
