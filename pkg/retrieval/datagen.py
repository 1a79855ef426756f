"""
Synthetic question data built backwards from the graph: sample a connected
subgraph by random walk, mask some of its entities with [ENTk] placeholders,
and ask a chat model for declarative assertions plus a multi-hop question
whose answer is the last placeholder.

The same masking feeds the guidance GNN training manifest and the
assertion records synthesized from existing question files.
"""

import ast
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .exceptions import (
    ContractViolation,
    MaskingError,
    ReverseGenerationError,
    SamplingError,
    StemError,
)
from .kg_store import get_tail
from .projection import Strategy, is_placeholder
from .prompts import format_assertions, format_triple_list, render_prompt

logger = logging.getLogger(__name__)

DEAD_END_RETRIES = 3
MAX_RESTARTS = 10
MAX_MASK_ATTEMPTS = 10
MAX_ANSWERS = 20
NO_SOLUTION = 'no solution'
HOP_BUCKETS = ('1', '2', '3', '4+')


def sample_walk(g, length, seed):
    """
    Seeded walk over the undirected adjacency collecting `length` distinct triples.

    A walk stuck at a node with no unused edge jumps back to a random entity it
    already reached; after DEAD_END_RETRIES such jumps it restarts from a fresh
    random entity, at most MAX_RESTARTS times.
    """
    if length < 1:
        raise ContractViolation("walk length must be at least 1")
    if not g.triples:
        raise SamplingError("graph has no triples to sample")

    rng = random.Random(seed)
    starts = sorted(e for e in g.entities if g.adjacency[e])
    for _ in range(MAX_RESTARTS):
        node = rng.choice(starts)
        reached = [node]
        collected = []
        used = set()
        dead_ends = 0
        while len(collected) < length:
            options = [t for t in g.adjacency[node] if t not in used]
            if not options:
                dead_ends += 1
                if dead_ends > DEAD_END_RETRIES:
                    break
                node = rng.choice(reached)
                continue
            t = rng.choice(options)
            used.add(t)
            collected.append(t)
            node = get_tail(t, node)
            if node not in reached:
                reached.append(node)
        if len(collected) == length:
            return collected, set(reached)
    raise SamplingError(f"no walk of length {length} found after {MAX_RESTARTS} restarts")


def assign_placeholders(label_triples, masked):
    """Replace every label in `masked` by [ENTk], numbered by first appearance (head before tail)."""
    mapping = {}
    for head, _, tail in label_triples:
        for label in (head, tail):
            if label in masked and label not in mapping:
                mapping[label] = f"[ENT{len(mapping) + 1}]"
    rewritten = [(mapping.get(h, h), r, mapping.get(t, t)) for h, r, t in label_triples]
    return rewritten, mapping


@dataclass
class MaskedSubgraph:
    source_triples: list
    triples: list
    placeholders: dict
    answer_placeholder: str
    answers: list

    @property
    def concrete_entities(self):
        seen = []
        for h, _, t in self.triples:
            for label in (h, t):
                if not is_placeholder(label) and label not in seen:
                    seen.append(label)
        return seen

    def restore(self):
        return [
            (self.placeholders.get(h, h), r, self.placeholders.get(t, t))
            for h, r, t in self.triples
        ]


def answer_entities(kg, masked_triples, placeholders, answer_placeholder):
    """Entities that satisfy every masked triple on the answer slot, other placeholders held fixed."""
    fixed = {p: label for p, label in placeholders.items() if p != answer_placeholder}
    constraints = [
        (fixed.get(h, h), r, fixed.get(t, t))
        for h, r, t in masked_triples
        if answer_placeholder in (h, t)
    ]
    candidates = None
    for h, r, t in constraints:
        if h == answer_placeholder and t == answer_placeholder:
            found = {kg.entities[x.head] for x in kg.triples if x.head == x.tail and kg.relations[x.relation] == r}
        elif h == answer_placeholder:
            anchor = kg.entity_id(t)
            found = {kg.entities[x.head] for x in kg.adjacency[anchor] if x.tail == anchor and kg.relations[x.relation] == r}
        else:
            anchor = kg.entity_id(h)
            found = {kg.entities[x.tail] for x in kg.adjacency[anchor] if x.head == anchor and kg.relations[x.relation] == r}
        candidates = found if candidates is None else candidates & found
    return sorted(candidates or ())


def mask(triples, answer_count, seed, kg, entities=None, max_answers=MAX_ANSWERS):
    """
    Mask `answer_count` entities of a sampled path (or exactly `entities`).

    A selection must leave at least one concrete entity and must not open the
    answer slot to more than `max_answers` entities; otherwise it is redrawn,
    up to MAX_MASK_ATTEMPTS times. The highest-numbered placeholder is the
    answer slot.
    """
    if answer_count < 1:
        raise ContractViolation("answer_count must be at least 1")
    label_triples = [kg.labels(t) for t in triples]
    order = []
    for h, _, t in label_triples:
        for label in (h, t):
            if label not in order:
                order.append(label)
    if entities is None and answer_count >= len(order):
        raise MaskingError(f"cannot mask {answer_count} of {len(order)} entities and keep an anchor")

    rng = random.Random(seed)
    attempts = 1 if entities is not None else MAX_MASK_ATTEMPTS
    for _ in range(attempts):
        if entities is not None:
            chosen = {kg.entities[e] for e in entities}
        else:
            chosen = set(rng.sample(order, answer_count))
        if not chosen or len(chosen) >= len(order):
            continue
        rewritten, mapping = assign_placeholders(label_triples, chosen)
        placeholders = {p: label for label, p in mapping.items()}
        answer = f"[ENT{len(mapping)}]"
        answers = answer_entities(kg, rewritten, placeholders, answer)
        if len(answers) <= max_answers:
            return MaskedSubgraph(label_triples, rewritten, placeholders, answer, answers)
    raise MaskingError(f"no valid masking after {attempts} attempts")


def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        return None


def _strip_fences(text):
    text = text.strip()
    if text.startswith('```'):
        text = text.strip('`')
        text = text.split('\n', 1)[1] if '\n' in text else text
    return text.strip()


def parse_reverse(raw, triple_count):
    """(question, assertions) from '[(Sentence_1, ...), Question]', or None for 'No Solution'."""
    text = _strip_fences(raw or '')
    if NO_SOLUTION in text.lower():
        return None
    value = _literal(text)
    if not (isinstance(value, (list, tuple)) and len(value) == 2 and isinstance(value[1], str)):
        raise ReverseGenerationError(f"unexpected completion format: {text[:80]!r}")
    sentences, question = value
    if isinstance(sentences, str):
        sentences = [sentences]
    if not isinstance(sentences, (list, tuple)) or not all(isinstance(s, str) for s in sentences):
        raise ReverseGenerationError("assertions must be a sequence of strings")
    if len(sentences) != triple_count:
        raise ReverseGenerationError(f"{len(sentences)} assertions for {triple_count} triples")
    if not question.strip():
        raise ReverseGenerationError("empty question")
    return question.strip(), [s.strip() for s in sentences]


def reverse_generate(client, masked_triples, answer_placeholder, max_attempts=3, examples=()):
    if not any(answer_placeholder in (h, t) for h, _, t in masked_triples):
        raise ContractViolation(f"answer placeholder {answer_placeholder} does not occur in the triples")
    prompt = render_prompt(
        'reverse',
        examples=examples,
        TripleList=format_triple_list(masked_triples),
        AnswerEntity=answer_placeholder,
    )
    error = None
    for attempt in range(1, max_attempts + 1):
        raw = client.complete_one(prompt)
        try:
            return parse_reverse(raw, len(masked_triples))
        except ReverseGenerationError as e:
            error = e
            logger.warning(f"Reverse generation attempt {attempt} rejected: {str(e)}")
    raise ReverseGenerationError(f"no valid completion after {max_attempts} attempts ({error})")


def label_strategy(answers):
    if not answers:
        raise ContractViolation("label_strategy needs at least one answer")
    return Strategy.PRECISION if len(answers) == 1 else Strategy.BREADTH


def llm_label_strategy(client, question, assertions, examples=()):
    prompt = render_prompt('strategy', examples=examples, Question=question, Assertions=format_assertions(assertions))
    raw = client.complete_one(prompt, temperature=0.0)
    return Strategy.parse(raw.strip().strip('"\'').rstrip('.'))


def path_assertions(client, query, triples, examples=()):
    """One declarative assertion per (possibly masked) triple, for the original query."""
    prompt = render_prompt('path_assertions', examples=examples, Query=query, TripleList=format_triple_list(triples))
    raw = _strip_fences(client.complete_one(prompt, temperature=0.0))
    value = _literal(raw)
    if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
        items = [v.strip() for v in value]
    else:
        body = raw.strip().lstrip('[').rstrip(']')
        items = [line.strip().rstrip(',').strip().strip('"\'') for line in body.splitlines()]
        items = [i for i in items if i]
    if len(items) != len(triples):
        raise ReverseGenerationError(f"{len(items)} assertions for {len(triples)} triples")
    return items


# ===========================
# DATASET EMISSION
# ===========================

def hop_bucket(hops):
    return str(hops) if hops < 4 else '4+'


@dataclass
class SyntheticRecord:
    id: str
    question: str
    answers: list
    masked: MaskedSubgraph
    assertions: list
    strategy: Strategy
    source: str = ''
    entities: list = field(default_factory=list)

    @property
    def hops(self):
        return len(self.masked.triples)

    def to_record(self):
        return {
            'id': self.id,
            'question': self.question,
            'question_entities': self.masked.concrete_entities,
            'answers': list(self.answers),
            'ground_truth_path': [list(t) for t in self.masked.source_triples],
            'masked_triples': [list(t) for t in self.masked.triples],
            'assertions': list(self.assertions),
            'strategy': self.strategy.value,
            'hops': self.hops,
            'source': self.source,
            'sampled_entities': list(self.entities),
        }


@dataclass
class DatasetStats:
    requested: int = 0
    emitted: int = 0
    no_solution: int = 0
    failed: int = 0
    hops: dict = field(default_factory=lambda: {bucket: 0 for bucket in HOP_BUCKETS})
    strategies: dict = field(default_factory=lambda: {s.value: 0 for s in Strategy})

    @classmethod
    def from_outcomes(cls, outcomes):
        stats = cls(requested=len(outcomes))
        for kind, record in outcomes:
            if kind == 'ok':
                stats.emitted += 1
                stats.hops[hop_bucket(record.hops)] += 1
                stats.strategies[record.strategy.value] += 1
            elif kind == 'no_solution':
                stats.no_solution += 1
            else:
                stats.failed += 1
        return stats

    def to_record(self):
        return {
            'requested': self.requested,
            'emitted': self.emitted,
            'no_solution': self.no_solution,
            'failed': self.failed,
            'hops': dict(self.hops),
            'strategies': dict(self.strategies),
        }


def draw_length(rng, walk_lengths):
    lengths = sorted(walk_lengths, key=int)
    return int(rng.choices(lengths, weights=[walk_lengths[k] for k in lengths], k=1)[0])


def synthesize_one(g, client, index, seed, settings, strategy_client=None, source=''):
    """('ok', record), ('no_solution', None) or ('failed', reason) for one sample."""
    rng = random.Random(seed)
    try:
        length = draw_length(rng, settings['walk_lengths'])
        triples, reached = sample_walk(g, length, seed)
        masked = mask(triples, settings['answer_count'], seed, g)
        result = reverse_generate(client, masked.triples, masked.answer_placeholder, settings['max_attempts'])
        if result is None:
            return 'no_solution', None
        question, assertions = result
        if strategy_client is not None:
            strategy = llm_label_strategy(strategy_client, question, assertions)
        else:
            strategy = label_strategy(masked.answers)
    except StemError as e:
        logger.warning(f"Sample {index} failed: {str(e)}")
        return 'failed', str(e)
    record = SyntheticRecord(
        id=f"syn-{index:06d}",
        question=question,
        answers=masked.answers,
        masked=masked,
        assertions=assertions,
        strategy=strategy,
        source=source,
        entities=sorted(g.entities[e] for e in reached),
    )
    return 'ok', record


def generate_dataset(g, client, settings, seed=0, jobs=1, strategy_client=None, source=''):
    """
    Emit up to settings['samples'] records; per-sample seeds come from one seed,
    and results keep sample order whatever the pool size.
    """
    base = random.Random(seed)
    seeds = [base.randrange(2 ** 32) for _ in range(settings['samples'])]

    def work(item):
        index, sample_seed = item
        return synthesize_one(g, client, index, sample_seed, settings, strategy_client, source)

    items = list(enumerate(seeds))
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, items))
    else:
        outcomes = [work(item) for item in items]

    stats = DatasetStats.from_outcomes(outcomes)
    records = [record for kind, record in outcomes if kind == 'ok']
    logger.info(
        f"Generated {stats.emitted}/{stats.requested} records "
        f"({stats.no_solution} no-solution, {stats.failed} failed)"
    )
    return records, stats


# ===========================
# RECORDS FROM QUESTION FILES
# ===========================

def mask_question_path(q):
    """Ground-truth path with every non-question entity masked, plus the positive entity ids."""
    labels = q.ground_truth_labels()
    keep = set(q.entity_labels())
    masked = {label for h, _, t in labels for label in (h, t)} - keep
    schema_triples, _ = assign_placeholders(labels, masked)
    positives = sorted({e for t in q.ground_truth_path for e in (t.head, t.tail)})
    return schema_triples, positives


def build_training_manifest(questions):
    records = []
    for q in questions:
        if not q.ground_truth_path:
            logger.warning(f"Question {q.id} has no ground-truth path; left out of the manifest")
            continue
        schema_triples, positives = mask_question_path(q)
        records.append({
            'question_id': q.id,
            'positive_entity_ids': positives,
            'positive_entities': [q.graph.entities[e] for e in positives],
            'schema_triples': [list(t) for t in schema_triples],
        })
    return records


def assertion_records(client, questions, strategy_client=None):
    """Assertion and strategy records for existing questions, from their masked ground-truth paths."""
    records = []
    failures = 0
    for q in questions:
        if not q.ground_truth_path:
            continue
        schema_triples, _ = mask_question_path(q)
        try:
            assertions = path_assertions(client, q.question, schema_triples)
            if strategy_client is not None:
                strategy = llm_label_strategy(strategy_client, q.question, assertions)
            else:
                strategy = label_strategy(q.answers) if q.answers else Strategy.PRECISION
        except StemError as e:
            failures += 1
            logger.warning(f"Question {q.id} skipped: {str(e)}")
            continue
        records.append({
            'question_id': q.id,
            'question': q.question,
            'assertions': assertions,
            'strategy': strategy.value,
            'schema_triples': [list(t) for t in schema_triples],
        })
    return records, failures


def strategy_counts(records):
    return dict(Counter(r['strategy'] for r in records))
