# ============================================
# FILE: retrieval/tracer.py
# ============================================

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from typing import NamedTuple

from .embedding import cosine_sim, top_n_entities, verbalize_triple
from .exceptions import AnchoringError, ConfigError
from .guidance import GuidanceGraph
from .kg_store import build_graph, get_incident_edges, get_tail, normalize_label
from .projection import Strategy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BiasConfig:
    entity_bias: float = 1.5
    triple_bias: float = 0.5
    threshold: float = 0.6
    anchor_top_n: int = 50
    fuzzy_threshold: float = 0.8
    max_commits: int = 10000

    def __post_init__(self):
        if self.entity_bias < 1:
            raise ConfigError(f"entity_bias must be >= 1, got {self.entity_bias}")
        if self.triple_bias < 0:
            raise ConfigError(f"triple_bias must be >= 0, got {self.triple_bias}")
        if self.threshold > 2:
            raise ConfigError(f"threshold must be <= 2, got {self.threshold}")
        if self.anchor_top_n < 1:
            raise ConfigError("anchor_top_n must be at least 1")
        if not 0 <= self.fuzzy_threshold <= 1:
            raise ConfigError("fuzzy_threshold must lie in [0, 1]")
        if self.max_commits < 1:
            raise ConfigError("max_commits must be at least 1")


class MatchStep(NamedTuple):
    schema_triple: object
    kg_triple: object
    score: float
    cumulative: float


@dataclass
class MatchState:
    """
    One search rooted at an anchor.

    `matched` and `committed` are shared by every branch of the search, so the
    Contradict rule holds across Breadth forks. `binding` and `visited` belong
    to a branch and are copied when Breadth forks.
    """
    matched: list = field(default_factory=list)
    committed: set = field(default_factory=set)
    binding: dict = field(default_factory=dict)
    bound: set = field(default_factory=set)
    visited: set = field(default_factory=set)
    trace: list = None
    truncated: bool = False

    def fork(self):
        return MatchState(
            matched=self.matched,
            committed=self.committed,
            binding=dict(self.binding),
            bound=set(self.bound),
            visited=set(self.visited),
            trace=self.trace,
        )

    def bind(self, node, entity):
        self.binding[node] = entity
        self.bound.add(entity)

    def commit(self, step):
        self.matched.append(step)
        self.committed.add(step.kg_triple)

    def contradicts(self, kg_triple):
        return kg_triple in self.committed

    def admits(self, node, entity):
        """A schema node keeps its binding; an unbound node cannot take an entity already in use."""
        if node in self.binding:
            return self.binding[node] == entity
        return entity not in self.bound


def rectify_entity_scores(candidates, guidance, cfg):
    rectified = [
        (e, s * cfg.entity_bias if guidance.contains_entity(e) else s)
        for e, s in candidates
    ]
    return sorted(rectified, key=lambda pair: (-pair[1], pair[0]))


def fuzzy_ratio(a, b):
    return SequenceMatcher(None, normalize_label(a), normalize_label(b)).ratio()


def anchor(schema, question_entity_label, idx, guidance, cfg):
    concrete = schema.concrete_nodes
    if not concrete:
        raise AnchoringError("schema graph has no concrete node to anchor")

    ratios = [(fuzzy_ratio(node, question_entity_label), node) for node in concrete]
    best_ratio = max(r for r, _ in ratios)
    node = next(n for r, n in ratios if r == best_ratio)
    if best_ratio < cfg.fuzzy_threshold:
        raise AnchoringError(
            f"no schema node matches {question_entity_label!r} (best {node!r} at {best_ratio:.3f})"
        )

    candidates = top_n_entities(idx, question_entity_label, cfg.anchor_top_n)
    if not candidates:
        raise AnchoringError(f"no KG candidates for {question_entity_label!r}")
    entity, s0 = rectify_entity_scores(candidates, guidance, cfg)[0]
    return node, entity, s0


def score_parts(schema_t, kg_t, kg, guidance, enc, cfg):
    raw = cosine_sim(enc.encode(verbalize_triple(schema_t)), enc.encode(verbalize_triple(kg_t, kg)))
    bias = cfg.triple_bias if guidance.contains_triple(kg_t) else 0.0
    return raw, bias


def t_score(schema_t, kg_t, kg, guidance, enc, cfg):
    raw, bias = score_parts(schema_t, kg_t, kg, guidance, enc, cfg)
    return raw + bias


class StructureTracer:
    """Matches schema graphs against one frozen KG under a fixed guidance graph."""

    def __init__(self, kg, guidance, encoder, cfg):
        self.kg = kg
        self.guidance = guidance
        self.encoder = encoder
        self.cfg = cfg

    def label_key(self, kg_t):
        return self.kg.labels(kg_t)

    def candidates(self, state, node, entity, schema_t):
        """Scored incident edges of `entity` for `schema_t`, admissible ones flagged."""
        incident = get_incident_edges(self.kg, entity)
        if not incident:
            return []
        other = schema_t.other(node)
        schema_vec = self.encoder.encode(verbalize_triple(schema_t))
        kg_vecs = self.encoder.encode_batch([verbalize_triple(t, self.kg) for t in incident])
        scored = []
        for kg_t, vec in zip(incident, kg_vecs):
            raw = cosine_sim(schema_vec, vec)
            bias = self.cfg.triple_bias if self.guidance.contains_triple(kg_t) else 0.0
            tail = get_tail(kg_t, entity)
            admissible = not state.contradicts(kg_t) and state.admits(other, tail)
            scored.append((kg_t, tail, raw, bias, admissible))
        return scored

    def _record(self, state, node, entity, schema_t, scored, chosen):
        if state.trace is None:
            return
        state.trace.append({
            'schema_triple': list(schema_t),
            'frontier': [node, self.kg.entities[entity]],
            'candidates': [
                {
                    'triple': list(self.label_key(kg_t)),
                    'raw': raw,
                    'bias': bias,
                    'total': raw + bias,
                    'admissible': admissible,
                }
                for kg_t, _, raw, bias, admissible in scored
            ],
            'committed': [list(self.label_key(t)) for t in chosen],
        })

    def _has_budget(self, state):
        if len(state.matched) >= self.cfg.max_commits:
            if not state.truncated:
                logger.warning(f"Match truncated after {self.cfg.max_commits} commits")
            state.truncated = True
            return False
        return True

    def step_precision(self, state, schema, schema_t, node, entity, score):
        scored = self.candidates(state, node, entity, schema_t)
        admissible = [c for c in scored if c[4]]
        if not admissible:
            self._record(state, node, entity, schema_t, scored, [])
            return
        kg_t, tail, raw, bias, _ = min(admissible, key=lambda c: (-(c[2] + c[3]), self.label_key(c[0])))
        self._record(state, node, entity, schema_t, scored, [kg_t])
        if not self._has_budget(state):
            return
        total = score + raw + bias
        state.commit(MatchStep(schema_t, kg_t, raw + bias, total))
        other = schema_t.other(node)
        state.bind(other, tail)
        self.match(state, schema, other, tail, Strategy.PRECISION, total, last_visit=schema_t)

    def step_breadth(self, state, schema, schema_t, node, entity, score):
        scored = self.candidates(state, node, entity, schema_t)
        passing = sorted(
            (c for c in scored if c[4] and c[2] + c[3] >= self.cfg.threshold),
            key=lambda c: (-(c[2] + c[3]), self.label_key(c[0])),
        )
        self._record(state, node, entity, schema_t, scored, [c[0] for c in passing])

        branches = []
        for kg_t, tail, raw, bias, _ in passing:
            if not self._has_budget(state):
                break
            total = score + raw + bias
            state.commit(MatchStep(schema_t, kg_t, raw + bias, total))
            branches.append((tail, total))

        other = schema_t.other(node)
        for tail, total in branches:
            branch = state.fork()
            branch.bind(other, tail)
            self.match(branch, schema, other, tail, Strategy.BREADTH, total, last_visit=schema_t)
            state.truncated = state.truncated or branch.truncated

    def match(self, state, schema, node, entity, strategy, score, last_visit=None):
        """Walk the schema from `node` (bound to `entity`), matching each unvisited incident edge."""
        for schema_t in schema.adjacency.get(node, ()):
            if schema_t == last_visit or schema_t in state.visited:
                continue
            state.visited.add(schema_t)
            if strategy == Strategy.PRECISION:
                self.step_precision(state, schema, schema_t, node, entity, score)
            else:
                self.step_breadth(state, schema, schema_t, node, entity, score)
        return state

    def run(self, schema, anchor_node, anchor_entity, strategy, s0=0.0, trace=False):
        state = MatchState(trace=[] if trace else None)
        state.bind(anchor_node, anchor_entity)
        self.match(state, schema, anchor_node, anchor_entity, Strategy(strategy), s0)
        return state


def match(schema, kg, anchor_pair, strategy, guidance, enc, cfg, s0=0.0):
    """Matched (schema triple, KG triple, step score, cumulative) list for one anchor pair."""
    node, entity = anchor_pair
    return StructureTracer(kg, guidance, enc, cfg).run(schema, node, entity, strategy, s0).matched


class RetrievalPlan(NamedTuple):
    schema: object
    strategy: Strategy
    guidance: GuidanceGraph = None


@dataclass
class SearchResult:
    plan_idx: int
    anchor: str
    steps: list = field(default_factory=list)
    error: str = ''
    truncated: bool = False
    trace: list = None


@dataclass
class EvidenceGraph:
    graph: object
    provenance: dict
    strategies: list = field(default_factory=list)
    searches: list = field(default_factory=list)

    def __len__(self):
        return len(self.graph.triples)

    @property
    def truncated(self):
        return any(s.truncated for s in self.searches)

    def to_record(self, question_id):
        triples = []
        for t in self.graph.sorted_triples():
            head, relation, tail = self.graph.labels(t)
            info = self.provenance[t]
            triples.append({
                'head': head,
                'relation': relation,
                'tail': tail,
                'score': info['score'],
                'cumulative': info['cumulative'],
                'plan_idx': info['plan_idx'],
                'anchor': info['anchor'],
            })
        return {
            'question_id': question_id,
            'strategy': self.strategies[0] if self.strategies else None,
            'strategies': list(self.strategies),
            'triples': triples,
            'truncated': self.truncated,
        }

    def trace_records(self):
        return [
            {'plan_idx': s.plan_idx, 'anchor': s.anchor, 'error': s.error, 'steps': s.trace or []}
            for s in self.searches
        ]


def _search(plan_idx, plan, entity_label, kg, idx, enc, cfg, trace):
    guidance = plan.guidance if plan.guidance is not None else GuidanceGraph.empty(kg)
    try:
        node, entity, s0 = anchor(plan.schema, entity_label, idx, guidance, cfg)
    except AnchoringError as e:
        logger.warning(f"Plan {plan_idx} skipped for anchor {entity_label!r}: {str(e)}")
        return SearchResult(plan_idx, entity_label, error=str(e))
    state = StructureTracer(kg, guidance, enc, cfg).run(plan.schema, node, entity, plan.strategy, s0, trace)
    return SearchResult(plan_idx, kg.entities[entity], list(state.matched), truncated=state.truncated, trace=state.trace)


def retrieve(plans, question, idx, enc, cfg, jobs=1, trace=False):
    """
    Union of the matches of every plan from every question entity.

    Searches run on a thread pool; results merge in submission order, so the
    first search to reach a triple owns its provenance.
    """
    kg = question.graph
    labels = question.entity_labels()
    tasks = [(i, plan, label) for i, plan in enumerate(plans) for label in labels]

    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_search, i, plan, label, kg, idx, enc, cfg, trace) for i, plan, label in tasks]
            results = [f.result() for f in futures]
    else:
        results = [_search(i, plan, label, kg, idx, enc, cfg, trace) for i, plan, label in tasks]

    provenance = {}
    for result in results:
        for step in result.steps:
            provenance.setdefault(step.kg_triple, {
                'plan_idx': result.plan_idx,
                'anchor': result.anchor,
                'score': step.score,
                'cumulative': step.cumulative,
            })

    evidence = EvidenceGraph(
        graph=build_graph(provenance, source=kg),
        provenance=provenance,
        strategies=[Strategy(p.strategy).value for p in plans],
        searches=results,
    )
    if not evidence.graph.triples:
        logger.warning(f"Empty evidence graph for question {question.id}")
    return evidence
