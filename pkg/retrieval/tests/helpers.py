import random
import threading

import numpy as np
import regex

from retrieval.answerer import linearize, verbalize_chains
from retrieval.clients import ROLES, FixtureChatClient
from retrieval.embedding import Encoder
from retrieval.kg_store import build_graph, parse_question_record
from retrieval.prompts import format_assertions, format_triple_list, render_prompt

QUIET_LOGGING = {
    'version': 1,
    'disable_existing_loggers': True,
    'handlers': {'null': {'class': 'logging.NullHandler'}},
    'root': {'handlers': ['null']},
    'loggers': {'django': {'handlers': ['null'], 'propagate': False}},
}

WORD = regex.compile(r'\w+')


class WordEncoder(Encoder):
    """Bag-of-words vectors: cosine equals word-count overlap, so scores can be worked out by hand."""

    name = 'bag-of-words'
    backend = 'test'

    def __init__(self, dimension=4096):
        super().__init__(dimension)
        self.vocabulary = {}
        self._lock = threading.Lock()

    def _slot(self, word):
        with self._lock:
            if word not in self.vocabulary:
                if len(self.vocabulary) >= self.dimension:
                    raise RuntimeError("word encoder vocabulary full")
                self.vocabulary[word] = len(self.vocabulary)
            return self.vocabulary[word]

    def encode_batch(self, texts):
        out = np.zeros((len(texts), self.dimension))
        for row, text in enumerate(texts):
            for word in WORD.findall(text.lower()):
                out[row, self._slot(word)] += 1.0
        return out


class TableEncoder(Encoder):
    """Returns fixed vectors for known texts; anything else maps to a far-away axis."""

    name = 'table'
    backend = 'test'

    def __init__(self, table, dimension):
        super().__init__(dimension)
        self.table = {text: np.asarray(v, dtype=np.float64) for text, v in table.items()}

    def encode_batch(self, texts):
        rows = []
        for text in texts:
            if text in self.table:
                rows.append(self.table[text])
            else:
                fallback = np.zeros(self.dimension)
                fallback[-1] = 1.0
                rows.append(fallback)
        return np.vstack(rows) if rows else np.zeros((0, self.dimension))


def unit(*components):
    v = np.asarray(components, dtype=np.float64)
    return v / np.linalg.norm(v)


def make_question(qid, question, triples, entities, answers=(), path=(), **extra):
    record = {
        'id': qid,
        'question': question,
        'question_entities': list(entities),
        'answers': list(answers),
        'ground_truth_path': [list(t) for t in path],
        'triples': [list(t) for t in triples],
    }
    record.update(extra)
    return parse_question_record(record)


def random_graph(seed, n_entities=8, n_triples=14, n_relations=3, loops=False):
    rng = random.Random(seed)
    labels = [f"node {i}" for i in range(n_entities)]
    relations = [f"rel.kind_{i}" for i in range(n_relations)]
    triples = set()
    while len(triples) < n_triples:
        h, t = rng.choice(labels), rng.choice(labels)
        if h == t and not loops:
            continue
        triples.add((h, rng.choice(relations), t))
    return build_graph(sorted(triples))


class CaseBook:
    """Records decompose/ground/generate completions under the exact prompts the pipeline renders."""

    def __init__(self):
        self.client = FixtureChatClient()

    def plans(self, question, completions):
        self.client.record(render_prompt('decompose', Query=question), completions)

    def grounding(self, assertions, triples):
        prompt = render_prompt('ground', Assertions=format_assertions(list(assertions)))
        self.client.record(prompt, format_triple_list(triples))

    def answer(self, q, evidence_labels, completion):
        kg = q.graph
        g = build_graph([kg.find(*t) for t in evidence_labels], source=kg)
        chains = linearize(g, q.question_entities)
        texts = verbalize_chains(chains, g, q.question_entities)
        self.client.record(render_prompt('generate', chains=texts, Question=q.question), completion)

    def clients(self):
        return {role: self.client for role in ROLES}
