# ============================================
# FILE: retrieval/pipeline.py
# ============================================

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .answerer import answer_record, generate_answer, linearize
from .config import build_clients, build_encoder
from .embedding import EntityIndex
from .exceptions import PlaceholderProvenanceError, TripleParseError
from .guidance import GuidanceGraph, GuidanceScorer, load_checkpoint
from .kg_store import write_jsonl
from .projection import Strategy, build_schema_graph, decompose, ground
from .tracer import RetrievalPlan, retrieve

logger = logging.getLogger(__name__)

STRATEGY_OVERRIDES = {'precision': Strategy.PRECISION, 'breadth': Strategy.BREADTH}


def load_guidance_params(cfg):
    """Checkpoint params, or None (uniform guidance) when no checkpoint is on disk."""
    path = cfg.path('checkpoint')
    if path is None or not path.exists():
        logger.warning(f"No guidance GNN checkpoint at {path}; guidance falls back to uniform probabilities")
        return None
    params, _ = load_checkpoint(path, cfg.gnn)
    return params


@dataclass
class QuestionResult:
    question_id: str
    evidence: dict = None
    answer: dict = None
    plans: dict = None
    trace: dict = None
    error: str = ''

    @property
    def failed(self):
        return bool(self.error)


@dataclass
class RunOutcome:
    results: list = field(default_factory=list)

    @property
    def failures(self):
        return [r for r in self.results if r.failed]

    @property
    def succeeded(self):
        return [r for r in self.results if not r.failed]


class StemPipeline:
    """decompose → ground → guidance → retrieve → linearize → answer, per question."""

    def __init__(self, cfg, clients, encoder, gnn_params=None):
        self.cfg = cfg
        self.clients = clients
        self.encoder = encoder
        self.scorer = GuidanceScorer(gnn_params, encoder, cfg.gnn.k_multiplier) if cfg.use_guidance else None
        self._indexes = {}
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, cfg, clients=None, encoder=None):
        encoder = encoder or build_encoder(cfg)
        clients = clients or build_clients(cfg)
        params = load_guidance_params(cfg) if cfg.use_guidance else None
        return cls(cfg, clients, encoder, params)

    def entity_index(self, g):
        # Questions sharing one graph share its index
        with self._lock:
            idx = self._indexes.get(id(g))
            if idx is None:
                idx = EntityIndex.build(g, self.encoder)
                self._indexes[id(g)] = idx
            return idx

    def effective_strategy(self, plan):
        return STRATEGY_OVERRIDES.get(self.cfg.strategy_mode, plan.strategy)

    def guidance_for(self, q, schema):
        if self.scorer is None:
            return GuidanceGraph.empty(q.graph)
        return self.scorer.score(q.graph, q.question_entities, schema)

    def answer_question(self, q):
        plans = decompose(
            self.clients['decompose'],
            q.question,
            beam=self.cfg.beam,
            max_attempts=self.cfg.max_plan_attempts,
        )

        retrieval_plans = []
        plan_entries = []
        for i, plan in enumerate(plans):
            entry = plan.to_record()
            entry['effective_strategy'] = self.effective_strategy(plan).value
            entry['schema'] = []
            try:
                schema = build_schema_graph(ground(self.clients['ground'], plan.assertions))
            except (TripleParseError, PlaceholderProvenanceError) as e:
                logger.warning(f"Plan {i} of question {q.id} not grounded: {str(e)}")
                entry['error'] = str(e)
                plan_entries.append(entry)
                continue
            entry['schema'] = schema.to_record()
            guidance = self.guidance_for(q, schema)
            entry['guidance_entities'] = sorted(q.graph.entities[e] for e in guidance.selected)
            retrieval_plans.append(RetrievalPlan(schema, self.effective_strategy(plan), guidance))
            plan_entries.append(entry)

        evidence = retrieve(
            retrieval_plans,
            q,
            self.entity_index(q.graph),
            self.encoder,
            self.cfg.bias,
            jobs=self.cfg.search_jobs,
            trace=self.cfg.trace,
        )
        chains = linearize(evidence, q.question_entities)
        answers = generate_answer(self.clients['generate'], q.question, chains, evidence.graph, q.question_entities)
        logger.info(f"Question {q.id}: {len(evidence)} evidence triples, {len(answers)} answers")

        return QuestionResult(
            question_id=q.id,
            evidence=evidence.to_record(q.id),
            answer=answer_record(q.id, answers, chains),
            plans={'question_id': q.id, 'plans': plan_entries},
            trace={'question_id': q.id, 'searches': evidence.trace_records()} if self.cfg.trace else None,
        )

    def _safe_answer(self, q):
        try:
            return self.answer_question(q)
        except Exception as e:
            logger.error(f"Error answering question {q.id}: {str(e)}")
            return QuestionResult(question_id=q.id, error=f"{type(e).__name__}: {e}")

    def run(self, questions, jobs=None):
        jobs = jobs or self.cfg.jobs
        if jobs > 1 and len(questions) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(self._safe_answer, questions))
        else:
            results = [self._safe_answer(q) for q in questions]
        return RunOutcome(results)


def write_run_outputs(outcome, out_dir, trace=False):
    """Primary outputs hold successful questions only, in question order."""
    out = Path(out_dir)
    done = outcome.succeeded
    write_jsonl([r.evidence for r in done], out / 'evidence.jsonl')
    write_jsonl([r.answer for r in done], out / 'answers.jsonl')
    write_jsonl([r.plans for r in done], out / 'plans.jsonl')
    write_jsonl(
        [{'question_id': r.question_id, 'error': r.error} for r in outcome.failures],
        out / 'failures.jsonl',
    )
    if trace:
        write_jsonl([r.trace for r in done if r.trace is not None], out / 'traces.jsonl')
    logger.info(f"Wrote run outputs for {len(done)} questions to {out} ({len(outcome.failures)} failed)")
