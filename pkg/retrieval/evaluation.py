# ============================================
# FILE: retrieval/evaluation.py
# ============================================

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from rest_framework import serializers

from .exceptions import ContractViolation, GraphParseError
from .kg_store import normalize_label
from .projection import SchemaTriple, Strategy, is_placeholder

logger = logging.getLogger(__name__)

COVERAGE_MODES = ('exact', 'undirected')


class EvidenceTripleSerializer(serializers.Serializer):
    head = serializers.CharField(trim_whitespace=False)
    relation = serializers.CharField(trim_whitespace=False)
    tail = serializers.CharField(trim_whitespace=False)


class EvidenceRecordSerializer(serializers.Serializer):
    question_id = serializers.CharField()
    triples = EvidenceTripleSerializer(many=True)
    strategy = serializers.CharField(allow_null=True, required=False)


class AnswerRecordSerializer(serializers.Serializer):
    question_id = serializers.CharField()
    answers = serializers.ListField(child=serializers.CharField(allow_blank=True), allow_empty=True)
    chains_used = serializers.IntegerField(min_value=0)


class PlanEntrySerializer(serializers.Serializer):
    assertions = serializers.ListField(child=serializers.CharField())
    strategy = serializers.ChoiceField(choices=[s.value for s in Strategy])
    schema = serializers.ListField(
        child=serializers.ListField(child=serializers.CharField(trim_whitespace=False), min_length=3, max_length=3),
        required=False,
        default=list,
    )


class PlanRecordSerializer(serializers.Serializer):
    question_id = serializers.CharField()
    plans = PlanEntrySerializer(many=True)


def normalize_answer(text):
    return normalize_label(text)


def _undirected(label_triple):
    head, relation, tail = label_triple
    return (head, relation, tail) if head <= tail else (tail, relation, head)


def coverage_rate(ground_truth, evidence, mode='exact'):
    """
    |ground truth ∩ evidence| / |ground truth| over label triples.

    Returns None when the ground truth is empty; callers report the question
    as skipped.
    """
    if mode not in COVERAGE_MODES:
        raise ContractViolation(f"coverage mode must be one of {COVERAGE_MODES}, got {mode!r}")
    gold = {tuple(t) for t in ground_truth}
    if not gold:
        return None
    found = {tuple(t) for t in evidence}
    if mode == 'undirected':
        gold = {_undirected(t) for t in gold}
        found = {_undirected(t) for t in found}
    return len(gold & found) / len(gold)


def hit_at_1(predicted, gold):
    if not predicted:
        return 0
    gold_set = {normalize_answer(g) for g in gold}
    return int(normalize_answer(predicted[0]) in gold_set)


def answer_f1(predicted, gold):
    pred = {normalize_answer(p) for p in predicted} - {''}
    ref = {normalize_answer(g) for g in gold} - {''}
    if not pred or not ref:
        return 0.0
    common = len(pred & ref)
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


@dataclass
class SchemaScore:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    defined: bool = False


def _node_matches(schema_node, kg_label):
    return is_placeholder(schema_node) or normalize_label(schema_node) == normalize_label(kg_label)


def schema_triple_matches(schema_t, gold):
    """Placeholders are wildcards on entity slots; the relation must match exactly."""
    head, relation, tail = gold
    return (
        schema_t.relation == relation
        and _node_matches(schema_t.head, head)
        and _node_matches(schema_t.tail, tail)
    )


def schema_prf(ground_truth_path, schema_triples):
    schema = [t if isinstance(t, SchemaTriple) else SchemaTriple(*t) for t in schema_triples]
    gold = [tuple(t) for t in ground_truth_path]
    if not gold or not schema:
        return SchemaScore()
    hits_schema = sum(1 for s in schema if any(schema_triple_matches(s, g) for g in gold))
    hits_gold = sum(1 for g in gold if any(schema_triple_matches(s, g) for s in schema))
    precision = hits_schema / len(schema)
    recall = hits_gold / len(gold)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SchemaScore(precision, recall, f1, True)


def strategy_accuracy(pairs):
    """Share of (predicted, gold) strategy pairs that agree; None for no pairs."""
    pairs = list(pairs)
    if not pairs:
        return None
    return sum(1 for predicted, gold in pairs if Strategy(predicted) == Strategy(gold)) / len(pairs)


@dataclass
class AttributionMatrix:
    """Rows (valid, invalid) by columns (correct, incorrect)."""
    cells: list
    counts: list
    error_share: float

    @classmethod
    def from_flags(cls, pairs):
        counts = [[0, 0], [0, 0]]
        for valid, correct in pairs:
            counts[0 if valid else 1][0 if correct else 1] += 1
        total = sum(map(sum, counts))
        cells = [[c / total for c in row] for row in counts]
        incorrect = counts[0][1] + counts[1][1]
        share = counts[1][1] / incorrect if incorrect else 0.0
        return cls(cells, counts, share)


@dataclass
class Attribution:
    schema: AttributionMatrix
    evidence: AttributionMatrix


def attribution(records):
    records = list(records)
    if not records:
        raise ContractViolation("attribution needs at least one record")
    return Attribution(
        schema=AttributionMatrix.from_flags((r['schema_ok'], r['answer_ok']) for r in records),
        evidence=AttributionMatrix.from_flags((r['evidence_ok'], r['answer_ok']) for r in records),
    )


@dataclass
class MetricsReport:
    questions: int = 0
    answered: int = 0
    hit_at_1: float = 0.0
    f1: float = 0.0
    coverage: float = None
    coverage_skipped: int = 0
    schema_prf: SchemaScore = field(default_factory=SchemaScore)
    schema_skipped: int = 0
    strategy_acc: float = None
    attribution: Attribution = None

    def to_record(self):
        return asdict(self)

    def table(self):
        def fmt(value):
            return 'n/a' if value is None else f"{value:.4f}"

        rows = [
            ('questions', str(self.questions)),
            ('answered', str(self.answered)),
            ('hit@1', fmt(self.hit_at_1)),
            ('answer f1', fmt(self.f1)),
            ('coverage', fmt(self.coverage)),
            ('coverage skipped', str(self.coverage_skipped)),
            ('schema precision', fmt(self.schema_prf.precision)),
            ('schema recall', fmt(self.schema_prf.recall)),
            ('schema f1', fmt(self.schema_prf.f1)),
            ('strategy accuracy', fmt(self.strategy_acc)),
        ]
        if self.attribution is not None:
            for name, matrix in (('schema', self.attribution.schema), ('evidence', self.attribution.evidence)):
                (vc, vi), (ic, ii) = matrix.cells
                rows.append((f"{name} valid c/i", f"{vc:.4f} / {vi:.4f}"))
                rows.append((f"{name} invalid c/i", f"{ic:.4f} / {ii:.4f}"))
                rows.append((f"{name} error share", fmt(matrix.error_share)))
        width = max(len(name) for name, _ in rows)
        return '\n'.join(f"{name:<{width}}  {value:>17}" for name, value in rows)


def _by_question(records, serializer_class, source):
    indexed = {}
    for i, record in enumerate(records, start=1):
        serializer = serializer_class(data=record)
        if not serializer.is_valid():
            raise GraphParseError(i, f"{source}: {serializer.errors}")
        indexed[serializer.validated_data['question_id']] = serializer.validated_data
    return indexed


def expected_strategy(q):
    if 'strategy' in q.extra:
        return Strategy.parse(q.extra['strategy'])
    return Strategy.PRECISION if len(q.answers) == 1 else Strategy.BREADTH


def evaluate_run(questions, evidence_records, answer_records, plan_records=(), coverage_mode='exact'):
    """MetricsReport plus one row of flags per question, in question order."""
    evidence = _by_question(evidence_records, EvidenceRecordSerializer, 'evidence')
    answers = _by_question(answer_records, AnswerRecordSerializer, 'answers')
    plans = _by_question(plan_records, PlanRecordSerializer, 'plans')

    rows = []
    for q in questions:
        gold_path = q.ground_truth_labels()
        found = [(t['head'], t['relation'], t['tail']) for t in evidence.get(q.id, {}).get('triples', [])]
        predicted = list(answers.get(q.id, {}).get('answers', []))
        plan_list = plans.get(q.id, {}).get('plans', [])
        best = plan_list[0] if plan_list else None

        coverage = coverage_rate(gold_path, found, coverage_mode)
        schema = schema_prf(gold_path, best['schema']) if best else SchemaScore()
        schema_ok = bool(best) and bool(gold_path) and all(
            any(schema_triple_matches(SchemaTriple(*s), g) for s in best['schema']) for g in gold_path
        )
        hit = hit_at_1(predicted, q.answers)
        rows.append({
            'question_id': q.id,
            'answered': q.id in answers,
            'hit_at_1': hit,
            'f1': answer_f1(predicted, q.answers),
            'coverage': coverage,
            'schema_precision': schema.precision,
            'schema_recall': schema.recall,
            'schema_f1': schema.f1,
            'schema_defined': schema.defined,
            'predicted_strategy': best['strategy'] if best else '',
            'gold_strategy': expected_strategy(q).value,
            'schema_ok': schema_ok,
            'evidence_ok': coverage == 1.0,
            'answer_ok': bool(hit),
        })

    report = MetricsReport(questions=len(rows), answered=sum(r['answered'] for r in rows))
    if not rows:
        return report, rows

    report.hit_at_1 = sum(r['hit_at_1'] for r in rows) / len(rows)
    report.f1 = sum(r['f1'] for r in rows) / len(rows)
    covered = [r['coverage'] for r in rows if r['coverage'] is not None]
    report.coverage_skipped = len(rows) - len(covered)
    report.coverage = sum(covered) / len(covered) if covered else None

    defined = [r for r in rows if r['schema_defined']]
    report.schema_skipped = len(rows) - len(defined)
    if defined:
        precision = sum(r['schema_precision'] for r in defined) / len(defined)
        recall = sum(r['schema_recall'] for r in defined) / len(defined)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        report.schema_prf = SchemaScore(precision, recall, f1, True)

    report.strategy_acc = strategy_accuracy(
        (r['predicted_strategy'], r['gold_strategy']) for r in rows if r['predicted_strategy']
    )
    report.attribution = attribution(rows)
    return report, rows


PER_QUESTION_FIELDS = (
    'question_id', 'answered', 'hit_at_1', 'f1', 'coverage', 'schema_precision', 'schema_recall',
    'schema_f1', 'predicted_strategy', 'gold_strategy', 'schema_ok', 'evidence_ok', 'answer_ok',
)


def write_report(report, rows, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / 'metrics.json', 'w', encoding='utf-8') as fh:
        json.dump(report.to_record(), fh, indent=2, sort_keys=True)
        fh.write('\n')
    with open(out / 'metrics.txt', 'w', encoding='utf-8') as fh:
        fh.write(report.table() + '\n')
    with open(out / 'per_question.csv', 'w', encoding='utf-8', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=PER_QUESTION_FIELDS, extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.info(f"Wrote metrics for {report.questions} questions to {out}")
