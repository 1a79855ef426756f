import json

from django.core.management.base import CommandError

from ...config import build_clients
from ...datagen import assertion_records, generate_dataset, strategy_counts
from ...kg_store import write_jsonl
from ..base import EXIT_RUNTIME, EXIT_VALIDATION, StemCommand


class Command(StemCommand):
    help = 'Generate synthetic question records by reverse generation from sampled subgraphs'

    def add_command_arguments(self, parser):
        parser.add_argument('--samples', type=int, default=None)
        parser.add_argument('--llm-strategy', action='store_true', help='label strategies with the chat model')
        parser.add_argument(
            '--from-questions', action='store_true',
            help='write assertion records for the question file instead of sampling the graph',
        )

    def config_overrides(self, options):
        return {'datagen': {
            'samples': options.get('samples'),
            'llm_strategy': True if options.get('llm_strategy') else None,
        }}

    def execute_command(self, cfg, options):
        out_dir = cfg.path('output')
        if out_dir is None:
            raise CommandError("datagen needs paths.output", returncode=EXIT_VALIDATION)
        clients = build_clients(cfg)
        strategy_client = clients['strategy'] if cfg.datagen['llm_strategy'] else None

        if options.get('from_questions'):
            _, questions = self.load_inputs(cfg)
            records, failures = assertion_records(clients['path_assertions'], questions, strategy_client)
            write_jsonl(records, out_dir / 'assertions.jsonl')
            self.stdout.write(self.style.SUCCESS(
                f"Wrote {len(records)} assertion records ({failures} failed), strategies {strategy_counts(records)}"
            ))
            return

        cfg.require('graph')
        graph, _ = self.load_inputs(cfg, need_questions=False)
        records, stats = generate_dataset(
            graph, clients['reverse'], cfg.datagen, seed=cfg.seed,
            jobs=cfg.jobs, strategy_client=strategy_client, source=str(cfg.path('graph')),
        )
        write_jsonl([r.to_record() for r in records], out_dir / 'synthetic.jsonl')
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / 'datagen_stats.json', 'w', encoding='utf-8') as fh:
            json.dump(stats.to_record(), fh, indent=2, sort_keys=True)
            fh.write('\n')

        self.stdout.write(json.dumps(stats.to_record(), sort_keys=True))
        if stats.requested and not stats.emitted:
            raise CommandError(
                f"no records emitted ({stats.no_solution} no-solution, {stats.failed} failed)",
                returncode=EXIT_RUNTIME,
            )
        self.stdout.write(self.style.SUCCESS(f"Wrote {stats.emitted} synthetic records to {out_dir}"))
