import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motelab.data import (PAD_ID, UNK_ID, CorpusParseError, CorpusSpec, CorpusSpecError, LengthError, Vocabulary,
                          corpus_digest, detokenize, entity_word, export_jsonl, generate_corpus, generate_eval_split,
                          generate_probes, label_word, load_jsonl, make_rng, prefix_instruction, tokenize, topic_words)
from motelab.routing import UnregisteredTaskError, default_registry

SMALL = CorpusSpec(num_topics=8, num_entities=32, pairs_per_dataset=40, datasets_per_task=2, seed=3)


def test_vocabulary_reserved_ids_and_prefixes():
    vocab = Vocabulary(["alpha"]).extend_for(default_registry())
    assert vocab.token_to_id["<pad>"] == PAD_ID == 0 and vocab.token_to_id["<unk>"] == UNK_ID == 1
    for entry in default_registry().entries.values():
        assert UNK_ID not in tokenize(vocab, entry.prefix)


def test_vocabulary_save_load_round_trip(tmp_path):
    vocab = Vocabulary(["b", "a", "c"])
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == vocab
    with pytest.raises(ValueError):
        Vocabulary.from_tokens(["x", "y"])


def test_tokenize_examples():
    vocab = Vocabulary(["hello", "world"])
    assert tokenize(vocab, "") == []
    assert UNK_ID not in tokenize(vocab, "Hello WORLD")
    assert tokenize(vocab, "hello mars") == [vocab.token_to_id["hello"], UNK_ID]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.from_regex(r"[a-z0-9:]{1,8}", fullmatch=True), min_size=1, max_size=20))
def test_tokenize_round_trip(words):
    vocab = Vocabulary(words)
    for w in words:
        assert detokenize(vocab, tokenize(vocab, w)) == w


def test_prefix_instruction_algebra():
    vocab = Vocabulary(["t1", "t2"]).extend_for(default_registry())
    seq = tokenize(vocab, "t1 t2")
    pre = tokenize(vocab, "search query: ")
    assert prefix_instruction(vocab, "search query: ", seq) == pre + seq
    assert prefix_instruction(vocab, "", seq) == seq
    twice = prefix_instruction(vocab, "search query: ", prefix_instruction(vocab, "search query: ", seq))
    assert len(twice) > len(pre) + len(seq) and twice[: 2 * len(pre)] == pre + pre
    with pytest.raises(LengthError):
        prefix_instruction(vocab, "search query: ", seq, max_seq_len=3)


def test_make_rng_is_keyed_and_stable():
    a = make_rng(7, "train", "retrieval", 0).integers(1 << 30, size=4)
    b = make_rng(7, "train", "retrieval", 0).integers(1 << 30, size=4)
    c = make_rng(7, "train", "retrieval", 1).integers(1 << 30, size=4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_generate_corpus_is_deterministic():
    s1, v1 = generate_corpus(SMALL)
    s2, v2 = generate_corpus(SMALL)
    assert corpus_digest(s1) == corpus_digest(s2) and v1 == v2
    s3, _ = generate_corpus(CorpusSpec(**{**SMALL.__dict__, "seed": 4}))
    assert corpus_digest(s3) != corpus_digest(s1)


def test_default_corpus_digest_is_frozen():
    store, vocab = generate_corpus(CorpusSpec())
    assert len(store) == 4800 and len(vocab) == 399
    assert corpus_digest(store) == FROZEN_DEFAULT_DIGEST


FROZEN_DEFAULT_DIGEST = "254129d008795b45203747eaefa3c8fcb429cb4472824ec8ce33063f706a12b5"


def test_dataset_counts():
    store, _ = generate_corpus(SMALL)
    for task in ("retrieval", "classification", "clustering"):
        assert store.datasets(task) == [f"{task}-0", f"{task}-1"]
        assert all(len(p) == 40 for p in store.tasks[task].values())


def _kinds(vocab, seq, spec):
    topics = {w: t for t in range(spec.num_topics) for w in topic_words(spec, t)}
    words = [vocab.id_to_token[i] for i in seq]
    ents = {w for w in words if w.startswith("ent")}
    return words, ents, {w for w in words if w in topics}, {topics[w] for w in words if w in topics}


def test_semantic_overlap_contracts_hold_for_every_pair():
    spec = CorpusSpec()
    store, vocab = generate_corpus(spec)
    for task, pair in store.pairs():
        wa, ea, ta, topa = _kinds(vocab, pair.anchor, spec)
        wp, ep, tp, topp = _kinds(vocab, pair.positive, spec)
        if task == "retrieval":
            assert ea & ep and not (ta & tp) and not (topa & topp)
            assert pair.anchor_task == "search_query" and pair.positive_task == "search_document"
        elif task == "clustering":
            assert not (ea & ep) and ta & tp and topa == topp
        else:
            la = {w for w in wa if w.startswith("label")}
            assert la and la == {w for w in wp if w.startswith("label")}
            assert len(topa) == 2


def test_noise_replaces_tokens():
    noisy = CorpusSpec(**{**SMALL.__dict__, "noise_rate": 0.5})
    clean_store, _ = generate_corpus(SMALL)
    noisy_store, _ = generate_corpus(noisy)
    assert corpus_digest(clean_store) != corpus_digest(noisy_store)


def test_spec_validation():
    with pytest.raises(CorpusSpecError):
        CorpusSpec(num_topics=0).validate()
    with pytest.raises(CorpusSpecError):
        CorpusSpec(noise_rate=1.0).validate()
    with pytest.raises(CorpusSpecError):
        CorpusSpec(num_topics=4, datasets_per_task=4).validate()


def test_eval_split_and_probes_are_disjoint_streams():
    split = generate_eval_split(SMALL, per_dataset=10)
    assert sorted(split.retrieval) == ["retrieval-0", "retrieval-1"]
    assert all(len(q) == len(d) == 10 for q, d in split.retrieval.values())
    assert len(split.classification[0]) == len(split.classification[2]) == 20
    probes = generate_probes(SMALL, count=128)
    assert len(probes) == 128 and probes == generate_probes(SMALL, count=128)


def test_jsonl_round_trip(tmp_path):
    store, vocab = generate_corpus(SMALL)
    export_jsonl(store, vocab, tmp_path / "c.jsonl")
    loaded = load_jsonl(tmp_path / "c.jsonl", default_registry(), vocab)
    assert corpus_digest(loaded) == corpus_digest(store)
    fresh = load_jsonl(tmp_path / "c.jsonl", default_registry())
    assert len(fresh) == len(store) and UNK_ID not in {i for _, p in fresh.pairs() for i in p.anchor}


def test_jsonl_examples(tmp_path):
    reg = default_registry()
    (tmp_path / "empty.jsonl").write_text("")
    assert len(load_jsonl(tmp_path / "empty.jsonl", reg)) == 0
    rec = {"task": "retrieval", "dataset": "d", "anchor": "who is ent1", "positive": "ent1 is here"}
    (tmp_path / "one.jsonl").write_text(json.dumps(rec) + "\n")
    store = load_jsonl(tmp_path / "one.jsonl", reg)
    assert list(store.tasks) == ["retrieval"] and len(store.tasks["retrieval"]["d"]) == 1
    lines = [json.dumps(rec), json.dumps(rec), "{not json", json.dumps(rec)]
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusParseError, match="line 3"):
        load_jsonl(tmp_path / "bad.jsonl", reg)
    (tmp_path / "unknown.jsonl").write_text(json.dumps({**rec, "task": "translation"}) + "\n")
    with pytest.raises(UnregisteredTaskError, match="line 1"):
        load_jsonl(tmp_path / "unknown.jsonl", reg)


def test_word_helpers():
    assert entity_word(3) == "ent3" and label_word(2) == "label2"
    assert topic_words(SMALL, 1)[0] == "t1w0"
