"""Tokenization, instruction prefixing, corpora and the synthetic multi-task generator.

The generator builds three tasks whose notions of "similar" conflict:

* retrieval pairs share one rare entity token and no topic tokens,
* clustering pairs share topic tokens but carry different entities,
* classification pairs share a label token over unrelated topics.

Each dataset of a task draws its topics from its own slice of the topic
space, so batches drawn from a single dataset contain harder negatives than
batches mixed across datasets.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .routing import TaskRegistry, UnregisteredTaskError

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Words of the four standard instructions; always reserved right after PAD/UNK.
INSTRUCTION_WORDS = ("search", "query:", "document:", "classification:", "clustering:")


class LengthError(ValueError):
    pass


class CorpusSpecError(ValueError):
    pass


class CorpusParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def make_rng(*key: int | str) -> np.random.Generator:
    """Counter-based Philox stream keyed by integers and stable string hashes."""
    words = [k if isinstance(k, int) else zlib.crc32(k.encode("utf-8")) for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.id_to_token: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.token_to_id: dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for w in INSTRUCTION_WORDS:
            self.add(w)
        for w in tokens:
            self.add(w)

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def extend_for(self, registry: TaskRegistry) -> "Vocabulary":
        for entry in registry.entries.values():
            for w in entry.prefix.split():
                self.add(w)
        return self

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        tokens = list(tokens)
        reserved = cls().id_to_token
        if tokens[: len(reserved)] != reserved:
            raise ValueError("vocabulary does not start with the reserved tokens")
        vocab = cls(tokens[len(reserved):])
        if vocab.id_to_token != tokens:
            raise ValueError("vocabulary contains duplicate tokens")
        return vocab


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    return [vocab.token_to_id.get(w, UNK_ID) for w in text.lower().split()]


def detokenize(vocab: Vocabulary, ids: Iterable[int]) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


def prefix_instruction(
    vocab: Vocabulary, prefix_text: str, sequence: Sequence[int], max_seq_len: int | None = None
) -> list[int]:
    out = tokenize(vocab, prefix_text) + list(sequence)
    if max_seq_len is not None and len(out) > max_seq_len:
        raise LengthError(f"prefixed sequence has {len(out)} tokens, limit is {max_seq_len}")
    return out


@dataclass(frozen=True)
class TrainingPair:
    anchor: tuple[int, ...]
    positive: tuple[int, ...]
    anchor_task: str
    positive_task: str
    dataset_id: str


@dataclass
class TaskStore:
    """task -> dataset -> pairs, in insertion order."""

    tasks: dict[str, dict[str, list[TrainingPair]]] = field(default_factory=dict)
    vocab: Vocabulary | None = None

    def add(self, task: str, pair: TrainingPair) -> None:
        self.tasks.setdefault(task, {}).setdefault(pair.dataset_id, []).append(pair)

    def __len__(self) -> int:
        return sum(len(p) for ds in self.tasks.values() for p in ds.values())

    def datasets(self, task: str) -> list[str]:
        return list(self.tasks.get(task, {}))

    def pairs(self):
        for task, ds in self.tasks.items():
            for dataset_id, pairs in ds.items():
                for pair in pairs:
                    yield task, pair


@dataclass(frozen=True)
class CorpusSpec:
    num_topics: int = 16
    num_entities: int = 256
    pairs_per_dataset: int = 400
    datasets_per_task: int = 4
    noise_rate: float = 0.0
    seed: int = 7
    words_per_topic: int = 8
    num_labels: int = 8

    def validate(self) -> None:
        for name in ("num_topics", "num_entities", "pairs_per_dataset", "datasets_per_task",
                     "words_per_topic", "num_labels"):
            if getattr(self, name) <= 0:
                raise CorpusSpecError(f"{name} must be positive")
        if not 0.0 <= self.noise_rate < 1.0:
            raise CorpusSpecError("noise_rate must lie in [0, 1)")
        if self.num_topics < 2 * self.datasets_per_task:
            raise CorpusSpecError("need at least two topics per dataset (num_topics >= 2 * datasets_per_task)")
        if self.words_per_topic < 4:
            raise CorpusSpecError("words_per_topic must be at least 4")
        if self.num_entities < 2:
            raise CorpusSpecError("num_entities must be at least 2")


TASKS = ("retrieval", "classification", "clustering")


def topic_words(spec: CorpusSpec, topic: int) -> list[str]:
    return [f"t{topic}w{j}" for j in range(spec.words_per_topic)]


def entity_word(e: int) -> str:
    return f"ent{e}"


def label_word(label: int) -> str:
    return f"label{label}"


def corpus_vocabulary(spec: CorpusSpec) -> Vocabulary:
    words = [w for t in range(spec.num_topics) for w in topic_words(spec, t)]
    words += [entity_word(e) for e in range(spec.num_entities)]
    words += [label_word(k) for k in range(spec.num_labels)]
    return Vocabulary(words)


def dataset_topics(spec: CorpusSpec, d: int) -> list[int]:
    """Contiguous slice of the topic space owned by dataset ``d``."""
    per = spec.num_topics // spec.datasets_per_task
    return list(range(d * per, (d + 1) * per))


class _Sampler:
    def __init__(self, spec: CorpusSpec, vocab: Vocabulary, rng: np.random.Generator):
        self.spec = spec
        self.vocab = vocab
        self.rng = rng
        self._noise_pool = np.arange(len(INSTRUCTION_WORDS) + 2, len(vocab))

    def _ids(self, words: list[str]) -> list[int]:
        return [self.vocab.token_to_id[w] for w in words]

    def noisy(self, words: list[str]) -> tuple[int, ...]:
        ids = self._ids(words)
        if self.spec.noise_rate > 0:
            hit = self.rng.random(len(ids)) < self.spec.noise_rate
            for i in np.flatnonzero(hit):
                ids[i] = int(self.rng.choice(self._noise_pool))
        return tuple(ids)

    def topic_sample(self, topic: int, k: int, exclude: Sequence[str] = ()) -> list[str]:
        pool = [w for w in topic_words(self.spec, topic) if w not in exclude]
        return [pool[i] for i in self.rng.choice(len(pool), size=k, replace=False)]

    def entity(self) -> int:
        return int(self.rng.integers(self.spec.num_entities))

    def retrieval(self, d: int) -> tuple[list[str], list[str]]:
        topics = dataset_topics(self.spec, d)
        ta, tb = self.rng.choice(topics, size=2, replace=False)
        e = entity_word(self.entity())
        query = [e] + self.topic_sample(int(ta), 2)
        doc = self.topic_sample(int(tb), 4)
        doc.insert(int(self.rng.integers(len(doc) + 1)), e)
        return query, doc

    def clustering(self, d: int) -> tuple[list[str], list[str], int]:
        topic = int(self.rng.choice(dataset_topics(self.spec, d)))
        e1 = self.entity()
        e2 = (e1 + 1 + int(self.rng.integers(self.spec.num_entities - 1))) % self.spec.num_entities
        shared = self.topic_sample(topic, 1)
        a = shared + self.topic_sample(topic, 2, exclude=shared) + [entity_word(e1)]
        p = shared + self.topic_sample(topic, 2, exclude=shared) + [entity_word(e2)]
        self.rng.shuffle(a)
        self.rng.shuffle(p)
        return a, p, topic

    def classification(self, d: int) -> tuple[list[str], list[str], int]:
        label = int(self.rng.integers(self.spec.num_labels))
        topics = dataset_topics(self.spec, d)

        def side() -> list[str]:
            words = [label_word(label)]
            for t in self.rng.choice(topics, size=2, replace=False):
                words += self.topic_sample(int(t), 1)
            words.append(entity_word(self.entity()))
            self.rng.shuffle(words)
            return words

        return side(), side(), label

    def probe(self) -> list[str]:
        topic = int(self.rng.integers(self.spec.num_topics))
        words = self.topic_sample(topic, 3) + [entity_word(self.entity()), label_word(int(self.rng.integers(self.spec.num_labels)))]
        self.rng.shuffle(words)
        return words


def generate_corpus(spec: CorpusSpec, registry: TaskRegistry | None = None) -> tuple[TaskStore, Vocabulary]:
    """Deterministic three-task training corpus; a pure function of ``spec``."""
    from .routing import default_registry

    spec.validate()
    registry = registry or default_registry()
    vocab = corpus_vocabulary(spec)
    store = TaskStore(vocab=vocab)
    for task in TASKS:
        anchor_task, positive_task = registry.instructions_for(task)
        for d in range(spec.datasets_per_task):
            dataset_id = f"{task}-{d}"
            s = _Sampler(spec, vocab, make_rng(spec.seed, "train", task, d))
            for _ in range(spec.pairs_per_dataset):
                a, p = getattr(s, task)(d)[:2]
                store.add(task, TrainingPair(s.noisy(a), s.noisy(p), anchor_task, positive_task, dataset_id))
    return store, vocab


@dataclass
class EvalSplit:
    """Held-out material for the three training tasks.

    retrieval: dataset -> (queries, documents); query i's relevant document is i.
    classification / clustering: (train seqs, train labels, test seqs, test labels)
    and (seqs, labels) respectively.
    """

    retrieval: dict[str, tuple[list[tuple[int, ...]], list[tuple[int, ...]]]]
    classification: tuple[list, list[int], list, list[int]]
    clustering: tuple[list, list[int]]


def generate_eval_split(spec: CorpusSpec, per_dataset: int = 100, seed_offset: int = 1) -> EvalSplit:
    spec.validate()
    vocab = corpus_vocabulary(spec)
    seed = spec.seed + seed_offset * 1_000_003
    retrieval = {}
    for d in range(spec.datasets_per_task):
        s = _Sampler(spec, vocab, make_rng(seed, "eval", "retrieval", d))
        queries, docs = [], []
        for _ in range(per_dataset):
            q, doc = s.retrieval(d)
            queries.append(s.noisy(q))
            docs.append(s.noisy(doc))
        retrieval[f"retrieval-{d}"] = (queries, docs)

    def labelled(task: str, stream: str):
        seqs, labels = [], []
        for d in range(spec.datasets_per_task):
            s = _Sampler(spec, vocab, make_rng(seed, "eval", task, stream, d))
            for _ in range(per_dataset):
                a, p, label = getattr(s, task)(d)
                seqs.append(s.noisy(a))
                labels.append(label)
        return seqs, labels

    ctr, ltr = labelled("classification", "train")
    cte, lte = labelled("classification", "test")
    return EvalSplit(retrieval, (ctr, ltr, cte, lte), labelled("clustering", "test"))


def generate_probes(spec: CorpusSpec, count: int = 128, seed: int = 2024) -> list[tuple[int, ...]]:
    """Generic probe sequences (topic words, an entity and a label) for similarity studies."""
    spec.validate()
    vocab = corpus_vocabulary(spec)
    s = _Sampler(spec, vocab, make_rng(seed, "probe"))
    return [s.noisy(s.probe()) for _ in range(count)]


def store_records(store: TaskStore, vocab: Vocabulary):
    for task, pair in store.pairs():
        yield {
            "task": task,
            "dataset": pair.dataset_id,
            "anchor": detokenize(vocab, pair.anchor),
            "positive": detokenize(vocab, pair.positive),
        }


def export_jsonl(store: TaskStore, vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in store_records(store, vocab):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path: str | Path, registry: TaskRegistry, vocab: Vocabulary | None = None) -> TaskStore:
    """Parse a pair corpus; any bad line aborts the whole load.

    Without ``vocab`` every word is added to a fresh vocabulary, available as
    the ``vocab`` attribute of the returned store.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusParseError(lineno, "record is not an object")
            missing = [k for k in ("task", "dataset", "anchor", "positive") if not isinstance(rec.get(k), str)]
            if missing:
                raise CorpusParseError(lineno, f"missing or non-string fields: {', '.join(missing)}")
            try:
                instructions = registry.instructions_for(rec["task"])
            except UnregisteredTaskError:
                raise UnregisteredTaskError(f"{rec['task']} (line {lineno})") from None
            if not rec["anchor"].split() or not rec["positive"].split():
                raise CorpusParseError(lineno, "empty anchor or positive")
            records.append((rec, instructions))

    if vocab is None:
        vocab = Vocabulary()
        for rec, _ in records:
            for w in (rec["anchor"] + " " + rec["positive"]).split():
                vocab.add(w)
    store = TaskStore(vocab=vocab)
    for rec, (a_task, p_task) in records:
        store.add(rec["task"], TrainingPair(
            tuple(tokenize(vocab, rec["anchor"])),
            tuple(tokenize(vocab, rec["positive"])),
            a_task, p_task, rec["dataset"],
        ))
    return store


def corpus_digest(store: TaskStore) -> str:
    h = hashlib.sha256()
    for task, pair in store.pairs():
        h.update(json.dumps([task, pair.dataset_id, pair.anchor_task, pair.positive_task,
                             list(pair.anchor), list(pair.positive)]).encode())
    return h.hexdigest()


def spec_to_text(spec: CorpusSpec) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(spec).items())
