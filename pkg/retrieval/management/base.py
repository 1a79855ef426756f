# ============================================
# FILE: retrieval/management/base.py
# ============================================

import logging

from django.core.management.base import BaseCommand, CommandError

from ..config import PATH_NAMES, load_run_config
from ..exceptions import ConfigError, GraphParseError, StemError
from ..kg_store import load_graph, load_questions

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


class StemCommand(BaseCommand):
    """
    Shared surface of every retrieval command: --config, --seed, --trace and
    --jobs, plus one flag per configured path. Errors map to exit codes
    1 (validation), 2 (runtime) and 3 (partial run).
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', default=None, help='YAML run configuration')
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--trace', action='store_true', help='write per-step search traces')
        parser.add_argument('--jobs', type=int, default=None, help='question-level worker count')
        for name in PATH_NAMES:
            parser.add_argument(f"--{name}", dest=f"path_{name}", default=None)
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def config_overrides(self, options):
        return {}

    def load_config(self, options):
        overrides = {
            'seed': options.get('seed'),
            'jobs': options.get('jobs'),
            'trace': True if options.get('trace') else None,
            'paths': {name: options.get(f"path_{name}") for name in PATH_NAMES},
        }
        for key, value in self.config_overrides(options).items():
            if isinstance(value, dict):
                overrides.setdefault(key, {}).update(value)
            else:
                overrides[key] = value
        try:
            return load_run_config(options.get('config'), overrides)
        except ConfigError as e:
            raise CommandError(str(e), returncode=EXIT_VALIDATION) from e

    def load_inputs(self, cfg, need_questions=True):
        """Shared graph (if configured) and the questions resolved against it."""
        graph = load_graph(cfg.path('graph')) if cfg.path('graph') else None
        questions = []
        if need_questions:
            cfg.require('questions')
            questions = load_questions(cfg.path('questions'), shared_graph=graph)
        return graph, questions

    def handle(self, *args, **options):
        cfg = self.load_config(options)
        try:
            self.execute_command(cfg, options)
        except CommandError:
            raise
        except (ConfigError, GraphParseError) as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]}: {str(e)}")
            raise CommandError(str(e), returncode=EXIT_VALIDATION) from e
        except StemError as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]}: {str(e)}")
            raise CommandError(str(e), returncode=EXIT_RUNTIME) from e

    def execute_command(self, cfg, options):
        raise NotImplementedError
