from django.core.management.base import CommandError

from ...config import build_encoder
from ...embedding import EntityIndex
from ..base import EXIT_VALIDATION, StemCommand


class Command(StemCommand):
    help = 'Embed every entity label of the graph(s) into the vector cache'

    def execute_command(self, cfg, options):
        if cfg.path('cache') is None:
            raise CommandError("index needs paths.cache", returncode=EXIT_VALIDATION)
        if cfg.path('graph') is None and cfg.path('questions') is None:
            raise CommandError("index needs paths.graph or paths.questions", returncode=EXIT_VALIDATION)

        graph, questions = self.load_inputs(cfg, need_questions=cfg.path('questions') is not None)
        graphs = {}
        if graph is not None:
            graphs[id(graph)] = graph
        for q in questions:
            graphs.setdefault(id(q.graph), q.graph)

        encoder = build_encoder(cfg)
        repaired = encoder.cache.corrupted
        if repaired:
            self.stdout.write(self.style.WARNING(f"Dropped {repaired} corrupted cache records; re-encoding"))

        entities = 0
        for g in graphs.values():
            EntityIndex.build(g, encoder, progress=True, batch_size=cfg.encoder['batch_size'])
            entities += len(g.entities)

        if repaired:
            encoder.cache.compact()
        self.stdout.write(self.style.SUCCESS(
            f"Indexed {entities} entities across {len(graphs)} graph(s): "
            f"{encoder.misses} new encodings, {len(encoder.cache)} cached vectors"
        ))
