# ============================================
# FILE: retrieval/kg_store.py
# ============================================

import json
import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import regex
from rest_framework import serializers

from .exceptions import ContractViolation, GraphParseError, UnknownEntityError

logger = logging.getLogger(__name__)

PUNCTUATION = regex.compile(r'\p{P}+')
WHITESPACE = regex.compile(r'\s+')


def normalize_label(text):
    """NFC, lowercase, punctuation to spaces, whitespace collapsed."""
    folded = unicodedata.normalize('NFC', text).lower()
    return WHITESPACE.sub(' ', PUNCTUATION.sub(' ', folded)).strip()


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class LabelTripleSerializer(serializers.Serializer):
    head = serializers.CharField()
    relation = serializers.CharField()
    tail = serializers.CharField()


class QuestionRecordSerializer(serializers.Serializer):
    id = serializers.CharField()
    question = serializers.CharField()
    question_entities = serializers.ListField(child=serializers.CharField(), allow_empty=True)
    answers = serializers.ListField(child=serializers.CharField(), allow_empty=True)
    ground_truth_path = serializers.ListField(
        child=serializers.ListField(child=serializers.CharField(), min_length=3, max_length=3),
        required=False,
        default=list,
    )
    triples = serializers.ListField(
        child=serializers.ListField(child=serializers.CharField(), min_length=3, max_length=3),
        required=False,
    )


class KnowledgeGraph:
    """
    Frozen triple store with a direction-agnostic adjacency index.

    Entity and relation ids are interned integers. Graphs built from labels
    number their catalogs in sorted label order, so sorting triples by ids
    sorts them by (head, relation, tail) labels. Subgraphs keep the ids of
    the graph they were cut from.
    """

    def __init__(self, entities, relations, triples):
        self.entities = dict(entities)
        self.relations = dict(relations)
        self.triples = frozenset(triples)
        self._entity_ids = {label: entity_id for entity_id, label in self.entities.items()}
        self._relation_ids = {label: relation_id for relation_id, label in self.relations.items()}

        incident = {entity_id: [] for entity_id in self.entities}
        for t in self.triples:
            incident[t.head].append(t)
            if t.tail != t.head:
                incident[t.tail].append(t)
        self.adjacency = {entity_id: tuple(sorted(edges)) for entity_id, edges in incident.items()}

    def __len__(self):
        return len(self.triples)

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            set(self.entities.values()) == set(other.entities.values())
            and self.label_triples() == other.label_triples()
        )

    def __repr__(self):
        return f"<KnowledgeGraph entities={len(self.entities)} relations={len(self.relations)} triples={len(self.triples)}>"

    def entity_id(self, label):
        try:
            return self._entity_ids[label]
        except KeyError:
            raise UnknownEntityError(label) from None

    def relation_id(self, label):
        try:
            return self._relation_ids[label]
        except KeyError:
            raise UnknownEntityError(label) from None

    def has_entity_label(self, label):
        return label in self._entity_ids

    def find(self, head, relation, tail):
        """Triple for a label triple, or None when the graph does not hold it."""
        try:
            t = Triple(self.entity_id(head), self.relation_id(relation), self.entity_id(tail))
        except UnknownEntityError:
            return None
        return t if t in self.triples else None

    def labels(self, t):
        return (self.entities[t.head], self.relations[t.relation], self.entities[t.tail])

    def label_triples(self):
        return {self.labels(t) for t in self.triples}

    def sorted_triples(self):
        return sorted(self.triples)


class GraphBuilder:
    """Collects label triples; catalogs only grow until freeze()."""

    def __init__(self):
        self._entities = set()
        self._relations = set()
        self._triples = set()
        self._frozen = False

    def add(self, head, relation, tail):
        if self._frozen:
            raise ContractViolation("graph builder already frozen")
        self._entities.update((head, tail))
        self._relations.add(relation)
        self._triples.add((head, relation, tail))

    def add_entity(self, label):
        if self._frozen:
            raise ContractViolation("graph builder already frozen")
        self._entities.add(label)

    def freeze(self):
        self._frozen = True
        entity_ids = {label: i for i, label in enumerate(sorted(self._entities))}
        relation_ids = {label: i for i, label in enumerate(sorted(self._relations))}
        triples = {Triple(entity_ids[h], relation_ids[r], entity_ids[t]) for h, r, t in self._triples}
        return KnowledgeGraph(
            {i: label for label, i in entity_ids.items()},
            {i: label for label, i in relation_ids.items()},
            triples,
        )


def build_graph(triples, source=None):
    """
    Graph over exactly the entities and relations appearing in `triples`.

    With `source`, `triples` are Triples of that graph and the result keeps
    its ids (so membership tests against the source stay valid). Without it,
    `triples` are (head, relation, tail) label tuples.
    """
    if source is None:
        builder = GraphBuilder()
        for head, relation, tail in triples:
            builder.add(head, relation, tail)
        return builder.freeze()

    kept = frozenset(triples)
    entity_ids = {t.head for t in kept} | {t.tail for t in kept}
    relation_ids = {t.relation for t in kept}
    return KnowledgeGraph(
        {e: source.entities[e] for e in entity_ids},
        {r: source.relations[r] for r in relation_ids},
        kept,
    )


def induced_subgraph(g, entity_ids):
    """Every triple of g whose endpoints both lie in entity_ids; isolated members stay as nodes."""
    selected = set(entity_ids)
    kept = frozenset(t for t in g.triples if t.head in selected and t.tail in selected)
    return KnowledgeGraph(
        {e: g.entities[e] for e in selected},
        {t.relation: g.relations[t.relation] for t in kept},
        kept,
    )


def get_incident_edges(g, e):
    try:
        return list(g.adjacency[e])
    except KeyError:
        raise UnknownEntityError(e) from None


def get_tail(t, e):
    if e == t.head:
        return t.tail
    if e == t.tail:
        return t.head
    raise ContractViolation(f"entity {e} is not an endpoint of {t}")


def _parse_triple_line(line, line_number):
    if line.lstrip().startswith('{'):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise GraphParseError(line_number, f"invalid JSON record ({e.msg})") from None
        serializer = LabelTripleSerializer(data=record)
        if not serializer.is_valid():
            raise GraphParseError(line_number, f"invalid triple record {serializer.errors}")
        data = serializer.validated_data
        return data['head'], data['relation'], data['tail']

    fields = line.split('\t')
    if len(fields) != 3 or not all(f.strip() for f in fields):
        raise GraphParseError(line_number, f"expected 3 tab-separated fields, got {len(fields)}")
    return tuple(f.strip() for f in fields)


def load_graph(path):
    """Load a triple file (TSV or JSON lines); duplicates collapse silently.

    Labels are stripped of surrounding whitespace in both formats.
    """
    builder = GraphBuilder()
    with open(path, encoding='utf-8') as fh:
        for line_number, raw in enumerate(fh, start=1):
            line = raw.rstrip('\n').rstrip('\r')
            if not line.strip():
                continue
            builder.add(*_parse_triple_line(line, line_number))
    g = builder.freeze()
    logger.info(f"Loaded graph from {path}: {len(g.entities)} entities, {len(g.triples)} triples")
    return g


def write_graph(g, path):
    """Write one JSON record per triple; entities with no incident triple are not written."""
    with open(path, 'w', encoding='utf-8') as fh:
        for t in g.sorted_triples():
            head, relation, tail = g.labels(t)
            fh.write(json.dumps({'head': head, 'relation': relation, 'tail': tail}, ensure_ascii=False) + '\n')


@dataclass
class QuestionInstance:
    id: str
    question: str
    question_entities: list
    answers: list
    ground_truth_path: list
    graph: KnowledgeGraph
    extra: dict = field(default_factory=dict)

    def entity_labels(self):
        return [self.graph.entities[e] for e in self.question_entities]

    def ground_truth_labels(self):
        return [self.graph.labels(t) for t in self.ground_truth_path]


def parse_question_record(record, shared_graph=None, line_number=0):
    serializer = QuestionRecordSerializer(data=record)
    if not serializer.is_valid():
        raise GraphParseError(line_number, f"invalid question record {serializer.errors}")
    data = serializer.validated_data

    if 'triples' in data:
        builder = GraphBuilder()
        for head, relation, tail in data['triples']:
            builder.add(head, relation, tail)
        for label in data['question_entities']:
            builder.add_entity(label)
        graph = builder.freeze()
    elif shared_graph is not None:
        graph = shared_graph
    else:
        raise GraphParseError(line_number, f"question {data['id']} has no triples and no shared graph was given")

    try:
        entities = [graph.entity_id(label) for label in data['question_entities']]
    except UnknownEntityError as e:
        raise GraphParseError(line_number, f"question entity {e.args[0]!r} not in graph") from None

    path = []
    for head, relation, tail in data['ground_truth_path']:
        t = graph.find(head, relation, tail)
        if t is None:
            raise GraphParseError(line_number, f"ground-truth triple {(head, relation, tail)} not in graph")
        path.append(t)

    known = set(QuestionRecordSerializer().fields)
    extra = {k: v for k, v in record.items() if k not in known}
    return QuestionInstance(
        id=data['id'],
        question=data['question'],
        question_entities=entities,
        answers=list(data['answers']),
        ground_truth_path=path,
        graph=graph,
        extra=extra,
    )


def load_questions(path, shared_graph=None):
    questions = []
    with open(path, encoding='utf-8') as fh:
        for line_number, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                raise GraphParseError(line_number, f"invalid JSON record ({e.msg})") from None
            questions.append(parse_question_record(record, shared_graph, line_number))
    logger.info(f"Loaded {len(questions)} questions from {path}")
    return questions


def question_record(q, include_triples=True):
    record = {
        'id': q.id,
        'question': q.question,
        'question_entities': q.entity_labels(),
        'answers': list(q.answers),
        'ground_truth_path': [list(labels) for labels in q.ground_truth_labels()],
    }
    if include_triples:
        record['triples'] = [list(q.graph.labels(t)) for t in q.graph.sorted_triples()]
    record.update(q.extra)
    return record


def write_jsonl(records: Iterable[dict], path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + '\n')


def read_jsonl(path):
    records = []
    with open(path, encoding='utf-8') as fh:
        for line_number, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                records.append(json.loads(raw))
            except json.JSONDecodeError as e:
                raise GraphParseError(line_number, f"invalid JSON record ({e.msg})") from None
    return records
