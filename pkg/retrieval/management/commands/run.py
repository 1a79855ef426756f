from django.core.management.base import CommandError

from ...pipeline import RunOutcome, StemPipeline, write_run_outputs
from ..base import EXIT_PARTIAL, EXIT_RUNTIME, EXIT_VALIDATION, StemCommand


class Command(StemCommand):
    help = 'Answer questions end to end and write evidence, answers and plans'

    def add_command_arguments(self, parser):
        parser.add_argument('question_ids', nargs='*', help='only these question ids (default: all)')
        parser.add_argument('--strategy-mode', choices=['adaptive', 'precision', 'breadth'], default=None)
        parser.add_argument('--no-guidance', action='store_true', help='disable both consistency biases')

    def config_overrides(self, options):
        return {
            'strategy_mode': options.get('strategy_mode'),
            'use_guidance': False if options.get('no_guidance') else None,
        }

    def execute_command(self, cfg, options):
        _, questions = self.load_inputs(cfg)
        wanted = options.get('question_ids') or []
        if wanted:
            keep = set(wanted)
            questions = [q for q in questions if q.id in keep]

        out_dir = cfg.path('output')
        if out_dir is None:
            raise CommandError("run needs paths.output", returncode=EXIT_VALIDATION)
        if not questions:
            write_run_outputs(RunOutcome(), out_dir, trace=cfg.trace)
            self.stdout.write("No questions to run")
            return

        pipeline = StemPipeline.from_config(cfg)
        outcome = pipeline.run(questions)
        write_run_outputs(outcome, out_dir, trace=cfg.trace)

        failed = len(outcome.failures)
        if failed == len(questions):
            raise CommandError(f"All {failed} questions failed; see {out_dir / 'failures.jsonl'}", returncode=EXIT_RUNTIME)
        if failed:
            raise CommandError(
                f"{failed} of {len(questions)} questions failed; see {out_dir / 'failures.jsonl'}",
                returncode=EXIT_PARTIAL,
            )
        self.stdout.write(self.style.SUCCESS(f"Answered {len(questions)} questions into {out_dir}"))
