# ============================================
# FILE: retrieval/projection.py
# ============================================

import ast
import logging
from dataclasses import dataclass
from enum import Enum

import networkx as nx
import regex

from .exceptions import PlaceholderProvenanceError, PlanParseError, TripleParseError
from .prompts import format_assertions, render_prompt

logger = logging.getLogger(__name__)

PLACEHOLDER = regex.compile(r'\[ENT[1-9]\d*\]')
PLACEHOLDER_LIKE = regex.compile(r'\[\s*ENT[^\]]*\]', regex.IGNORECASE)
TRAILING_STRATEGY = regex.compile(r'[,\s]\s*["\']?([A-Za-z]+)["\']?\s*\)?\s*\.?\s*$')
DOUBLE_QUOTED = regex.compile(r'"((?:[^"\\]|\\.)*)"')
SINGLE_QUOTED = regex.compile(r"'((?:[^'\\]|\\.)*)'")
PAREN_GROUP = regex.compile(r'\(([^()]*)\)')
WHITESPACE = regex.compile(r'\s+')

MAX_PLAN_ATTEMPTS = 5


class Strategy(str, Enum):
    PRECISION = 'Precision'
    BREADTH = 'Breadth'

    @classmethod
    def parse(cls, text):
        for strategy in cls:
            if strategy.value.lower() == text.strip().lower():
                return strategy
        raise PlanParseError(f"unknown strategy {text!r}")


def is_placeholder(node):
    return PLACEHOLDER.fullmatch(node) is not None


def placeholders_in(text):
    return set(PLACEHOLDER.findall(text))


@dataclass(frozen=True)
class AtomicAssertion:
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise PlanParseError("empty assertion")
        for token in PLACEHOLDER_LIKE.findall(self.text):
            if PLACEHOLDER.fullmatch(token) is None:
                raise PlanParseError(f"malformed placeholder {token!r} in assertion {self.text!r}")

    @property
    def placeholders(self):
        return placeholders_in(self.text)


@dataclass(frozen=True)
class PlanCandidate:
    assertions: tuple
    strategy: Strategy

    def __post_init__(self):
        if not self.assertions:
            raise PlanParseError("plan has no assertions")

    @property
    def dedup_key(self):
        texts = [WHITESPACE.sub(' ', a.text.strip().lower()) for a in self.assertions]
        return ' || '.join(texts) + f" :: {self.strategy.value.lower()}"

    def to_record(self):
        return {'assertions': [a.text for a in self.assertions], 'strategy': self.strategy.value}


@dataclass(frozen=True)
class SchemaTriple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not self.relation or not self.relation.strip():
            raise TripleParseError("schema triple has an empty relation")
        if not self.head.strip() or not self.tail.strip():
            raise TripleParseError("schema triple has an empty endpoint")

    def __iter__(self):
        return iter((self.head, self.relation, self.tail))

    def other(self, node):
        return self.tail if node == self.head else self.head

    @property
    def placeholders(self):
        return {n for n in (self.head, self.tail) if is_placeholder(n)}


class SchemaGraph:
    """Grounded schema triples; equal placeholder names are one node."""

    def __init__(self, triples):
        seen = []
        for t in triples:
            if t not in seen:
                seen.append(t)
        self.triples = tuple(seen)
        self.nodes = tuple(sorted({t.head for t in self.triples} | {t.tail for t in self.triples}))
        adjacency = {node: [] for node in self.nodes}
        for t in self.triples:
            adjacency[t.head].append(t)
            if t.tail != t.head:
                adjacency[t.tail].append(t)
        self.adjacency = {
            node: tuple(sorted(edges, key=lambda e: (e.head, e.relation, e.tail)))
            for node, edges in adjacency.items()
        }

    def __len__(self):
        return len(self.triples)

    @property
    def placeholders(self):
        return tuple(n for n in self.nodes if is_placeholder(n))

    @property
    def concrete_nodes(self):
        return tuple(n for n in self.nodes if not is_placeholder(n))

    def degree(self, node):
        return len(self.adjacency.get(node, ()))

    def component_count(self):
        graph = nx.MultiGraph()
        graph.add_nodes_from(self.nodes)
        graph.add_edges_from((t.head, t.tail) for t in self.triples)
        return nx.number_connected_components(graph)

    def to_record(self):
        return [list(t) for t in self.triples]


def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        return None


def _string_items(value):
    if isinstance(value, str):
        return [value]
    if isinstance(value, (tuple, list)) and value and all(isinstance(v, str) for v in value):
        return list(value)
    return None


def _unescape(text):
    return text.replace('\\"', '"').replace("\\'", "'")


def parse_plan(raw):
    """Parse '(assertion, ...), Strategy' completions into a PlanCandidate."""
    text = (raw or '').strip()
    match = TRAILING_STRATEGY.search(text)
    if match is None:
        raise PlanParseError(f"no strategy found in {text!r}")
    strategy = Strategy.parse(match.group(1))
    body = text[:match.start()].strip().rstrip(',').strip()

    items = None
    for candidate in (body, body[1:] if body.startswith('(') else None, body + ')'):
        if candidate:
            items = _string_items(_literal(candidate))
            if items is not None:
                break
    if items is None:
        items = [_unescape(s) for s in DOUBLE_QUOTED.findall(body)]

    assertions = tuple(AtomicAssertion(item.strip()) for item in items if item.strip())
    if not assertions:
        raise PlanParseError(f"no assertions found in {text!r}")
    return PlanCandidate(assertions, strategy)


def decompose(client, question, beam=4, max_attempts=MAX_PLAN_ATTEMPTS, examples=()):
    """
    Sample up to `beam` distinct plans for a question.

    Unparseable completions are retried; after max_attempts rounds without a
    single valid plan the raw question becomes a one-assertion Precision plan.
    """
    prompt = render_prompt('decompose', examples=examples, Query=question)
    for attempt in range(1, max_attempts + 1):
        completions = client.complete(prompt, n=beam)
        candidates = {}
        for raw in completions:
            try:
                plan = parse_plan(raw)
            except PlanParseError as e:
                logger.warning(f"Unparseable plan on attempt {attempt} for {question!r}: {str(e)}")
                continue
            candidates.setdefault(plan.dedup_key, plan)
        if candidates:
            return list(candidates.values())[:beam]

    logger.warning(f"No parseable plan after {max_attempts} attempts; falling back to Precision for {question!r}")
    return [PlanCandidate((AtomicAssertion(question),), Strategy.PRECISION)]


def _split_triple_groups(text):
    triples = []
    for group in PAREN_GROUP.findall(text):
        parts = [_unescape(s) for s in DOUBLE_QUOTED.findall(group)]
        if len(parts) != 3:
            parts = [_unescape(s) for s in SINGLE_QUOTED.findall(group)]
        if len(parts) != 3:
            parts = [p.strip().strip('"\'') for p in group.split(',')]
        if len(parts) == 3 and all(parts):
            triples.append(tuple(p.strip() for p in parts))
    return triples


def parse_triples(raw):
    text = (raw or '').strip()
    value = _literal(text)
    rows = None
    if isinstance(value, (list, tuple)):
        if len(value) == 3 and all(isinstance(v, str) for v in value):
            value = [value]
        if all(isinstance(v, (list, tuple)) and len(v) == 3 and all(isinstance(x, str) for x in v) for v in value):
            rows = [tuple(x.strip() for x in v) for v in value]
    if rows is None:
        rows = _split_triple_groups(text)
    if not rows:
        raise TripleParseError(f"no triples found in {text!r}")
    return [SchemaTriple(*row) for row in rows]


def ground(client, assertions, examples=()):
    """Ground assertions into schema triples (deterministic: temperature 0)."""
    if not assertions:
        raise TripleParseError("nothing to ground")
    texts = [a.text if isinstance(a, AtomicAssertion) else a for a in assertions]
    prompt = render_prompt('ground', examples=examples, Assertions=format_assertions(texts))
    raw = client.complete_one(prompt, temperature=0.0)
    triples = parse_triples(raw)

    allowed = set()
    for text in texts:
        allowed |= placeholders_in(text)
    invented = set().union(*(t.placeholders for t in triples)) - allowed
    if invented:
        raise PlaceholderProvenanceError(f"grounding invented placeholders {sorted(invented)}")
    return triples


def build_schema_graph(triples):
    return SchemaGraph(triples)
