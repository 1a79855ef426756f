from pathlib import Path

from django.core.management.base import CommandError

from ...evaluation import evaluate_run, write_report
from ...kg_store import read_jsonl
from ..base import EXIT_VALIDATION, StemCommand


class Command(StemCommand):
    help = 'Score a run directory against the question file'

    def add_command_arguments(self, parser):
        parser.add_argument('--run-dir', default=None, help='run output directory (default: paths.output)')
        parser.add_argument('--report-dir', default=None, help='where metrics files go (default: <run-dir>/metrics)')
        parser.add_argument('--coverage-mode', choices=['exact', 'undirected'], default=None)

    def config_overrides(self, options):
        return {'coverage_mode': options.get('coverage_mode')}

    def execute_command(self, cfg, options):
        run_dir = Path(options['run_dir']) if options.get('run_dir') else cfg.path('output')
        if run_dir is None or not (run_dir / 'answers.jsonl').exists() or not (run_dir / 'evidence.jsonl').exists():
            raise CommandError(f"no run output in {run_dir}", returncode=EXIT_VALIDATION)

        evidence = read_jsonl(run_dir / 'evidence.jsonl')
        answers = read_jsonl(run_dir / 'answers.jsonl')
        plans = read_jsonl(run_dir / 'plans.jsonl') if (run_dir / 'plans.jsonl').exists() else []
        if not evidence or not answers:
            raise CommandError(f"run output in {run_dir} is empty", returncode=EXIT_VALIDATION)

        _, questions = self.load_inputs(cfg)
        known = {q.id for q in questions}
        unknown = sorted({r.get('question_id') for r in answers} - known)
        if unknown:
            raise CommandError(f"answers for unknown questions {unknown[:5]}", returncode=EXIT_VALIDATION)

        report, rows = evaluate_run(questions, evidence, answers, plans, cfg.coverage_mode)
        report_dir = Path(options['report_dir']) if options.get('report_dir') else run_dir / 'metrics'
        write_report(report, rows, report_dir)
        self.stdout.write(report.table())
        self.stdout.write(self.style.SUCCESS(f"Metrics written to {report_dir}"))
