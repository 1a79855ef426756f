import json

from django.core.management.base import CommandError

from ...config import build_encoder
from ...datagen import build_training_manifest
from ...exceptions import NumericError
from ...guidance import GnnParams, build_instance, grad_check, save_checkpoint, train
from ...kg_store import read_jsonl, write_jsonl
from ..base import EXIT_RUNTIME, EXIT_VALIDATION, StemCommand


class Command(StemCommand):
    help = 'Train the guidance GNN on a manifest and save a checkpoint once the gradient check passes'

    def add_command_arguments(self, parser):
        parser.add_argument('--steps', type=int, default=None, help='exact number of updates (default: epochs x manifest)')
        parser.add_argument('--build-manifest', action='store_true', help='derive the manifest from the question file first')
        parser.add_argument('--learning-rate', type=float, default=None)
        parser.add_argument('--epochs', type=int, default=None)

    def config_overrides(self, options):
        return {'gnn': {'learning_rate': options.get('learning_rate'), 'epochs': options.get('epochs')}}

    def execute_command(self, cfg, options):
        manifest_path = cfg.path('manifest')
        checkpoint = cfg.path('checkpoint')
        if manifest_path is None or checkpoint is None:
            raise CommandError("train_gnn needs paths.manifest and paths.checkpoint", returncode=EXIT_VALIDATION)

        _, questions = self.load_inputs(cfg)
        if options.get('build_manifest'):
            write_jsonl(build_training_manifest(questions), manifest_path)
            self.stdout.write(f"Wrote training manifest to {manifest_path}")
        cfg.require('manifest')

        by_id = {q.id: q for q in questions}
        encoder = build_encoder(cfg)
        instances = []
        for record in read_jsonl(manifest_path):
            q = by_id.get(record.get('question_id'))
            if q is None:
                raise CommandError(f"manifest names unknown question {record.get('question_id')!r}", returncode=EXIT_VALIDATION)
            schema_triples = [tuple(t) for t in record['schema_triples']]
            instances.append(build_instance(
                q.graph, q.question_entities, schema_triples, record['positive_entity_ids'], encoder, q.id,
            ))
        if not instances:
            raise CommandError("training manifest is empty", returncode=EXIT_VALIDATION)

        params = GnnParams.initialize(cfg.gnn, seed=cfg.seed)
        try:
            losses = train(params, instances, steps=options.get('steps'), progress=True)
        except NumericError as e:
            raise CommandError(f"training diverged: {e}", returncode=EXIT_RUNTIME) from e

        curve_path = checkpoint.with_suffix('.losses.json')
        curve_path.parent.mkdir(parents=True, exist_ok=True)
        with open(curve_path, 'w', encoding='utf-8') as fh:
            json.dump({'losses': losses}, fh)

        probe = min(instances, key=lambda inst: len(inst.index.entity_ids))
        check = grad_check(params, probe, samples=cfg.gnn.grad_check_samples, seed=cfg.seed)
        worst = max(check.errors, key=check.errors.get) if check.errors else ''
        if not check.passed(cfg.gnn.grad_check_tolerance):
            raise CommandError(
                f"gradient check failed on {probe.question_id}: {check.max_error:.2e} in {worst}; checkpoint not saved",
                returncode=EXIT_RUNTIME,
            )

        save_checkpoint(params, checkpoint, {'steps': len(losses), 'seed': cfg.seed, 'loss': cfg.gnn.loss})
        final = f"{losses[-1]:.6f}" if losses else 'n/a'
        self.stdout.write(self.style.SUCCESS(
            f"Trained {len(losses)} steps (final loss {final}); grad check {check.max_error:.2e}; saved {checkpoint}"
        ))
