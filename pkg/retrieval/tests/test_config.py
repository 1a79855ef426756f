import logging
import tempfile
from pathlib import Path

import yaml
from django.test import SimpleTestCase, override_settings

from retrieval.clients import ROLES, FixtureChatClient
from retrieval.config import build_clients, build_encoder, deep_merge, load_run_config
from retrieval.embedding import CachedEncoder, DeterministicEncoder, HttpEncoder
from retrieval.exceptions import ConfigError

from .helpers import QUIET_LOGGING

logging.disable(logging.CRITICAL)


@override_settings(LOGGING=QUIET_LOGGING)
class RunConfigTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _yaml(self, data, name='run.yaml'):
        path = self.dir / name
        path.write_text(yaml.safe_dump(data), encoding='utf-8')
        return path

    # ===========================
    # LAYERING
    # ===========================

    def test_defaults(self):
        cfg = load_run_config()
        self.assertEqual(cfg.beam, 4)
        self.assertEqual(cfg.strategy_mode, 'adaptive')
        self.assertEqual(cfg.bias.entity_bias, 1.5)
        self.assertEqual(cfg.bias.triple_bias, 0.5)
        self.assertEqual(cfg.bias.threshold, 0.6)
        self.assertEqual(cfg.gnn.layers, 6)
        self.assertEqual(cfg.gnn.k_multiplier, 4)
        self.assertEqual(cfg.encoder['dimension'], cfg.gnn.d_pem)
        self.assertEqual(sorted(cfg.datagen['walk_lengths']), ['1', '2', '3', '4'])

    def test_yaml_then_overrides(self):
        path = self._yaml({'beam': 2, 'bias': {'threshold': 0.3}, 'gnn': {'layers': 2}})
        cfg = load_run_config(path)
        self.assertEqual(cfg.beam, 2)
        self.assertEqual(cfg.bias.threshold, 0.3)
        self.assertEqual(cfg.bias.entity_bias, 1.5)
        self.assertEqual(cfg.gnn.layers, 2)

        cfg = load_run_config(path, {'beam': 3, 'seed': None, 'bias': {'threshold': 0.45}})
        self.assertEqual(cfg.beam, 3)
        self.assertEqual(cfg.seed, 0)
        self.assertEqual(cfg.bias.threshold, 0.45)

    def test_deep_merge_leaves_inputs(self):
        base = {'a': {'b': 1, 'c': 2}}
        merged = deep_merge(base, {'a': {'b': 5}, 'd': None})
        self.assertEqual(merged, {'a': {'b': 5, 'c': 2}})
        self.assertEqual(base, {'a': {'b': 1, 'c': 2}})

    # ===========================
    # VALIDATION
    # ===========================

    def test_invalid_values(self):
        for overrides in (
            {'bias': {'entity_bias': 0.5}},
            {'bias': {'threshold': 2.5}},
            {'strategy_mode': 'greedy'},
            {'beam': 0},
            {'gnn': {'activation': 'relu'}},
            {'chat': {'roles': {'oracle': {'model': 'x'}}}},
            {'datagen': {'walk_lengths': {'0': 1.0}}},
        ):
            with self.assertRaises(ConfigError, msg=str(overrides)):
                load_run_config(None, overrides)

    def test_encoder_dimension_must_match_gnn(self):
        with self.assertRaises(ConfigError) as ctx:
            load_run_config(None, {'encoder': {'dimension': 8}})
        self.assertIn('d_pem', str(ctx.exception))
        cfg = load_run_config(None, {'encoder': {'dimension': 8}, 'gnn': {'d_pem': 8}})
        self.assertEqual(cfg.gnn.d_pem, 8)

    def test_remote_encoder_needs_endpoint(self):
        with self.assertRaises(ConfigError):
            load_run_config(None, {'encoder': {'backend': 'remote-service', 'endpoint': ''}})

    def test_bad_config_files(self):
        with self.assertRaises(ConfigError):
            load_run_config(self.dir / 'missing.yaml')
        broken = self.dir / 'broken.yaml'
        broken.write_text('beam: [1, 2\n', encoding='utf-8')
        with self.assertRaises(ConfigError):
            load_run_config(broken)
        with self.assertRaises(ConfigError):
            load_run_config(self._yaml([1, 2], 'list.yaml'))

    def test_require_paths(self):
        graph = self.dir / 'kg.tsv'
        graph.write_text('', encoding='utf-8')
        cfg = load_run_config(None, {'paths': {'graph': str(graph), 'questions': str(self.dir / 'nope.jsonl')}})
        cfg.require('graph')
        with self.assertRaises(ConfigError) as ctx:
            cfg.require('graph', 'questions', 'manifest')
        self.assertEqual(len(ctx.exception.errors['paths']), 2)

    # ===========================
    # FACTORIES
    # ===========================

    def test_build_encoder(self):
        cfg = load_run_config(None, {'paths': {'cache': ''}})
        self.assertIsInstance(build_encoder(cfg), DeterministicEncoder)

        cfg = load_run_config(None, {'paths': {'cache': str(self.dir / 'vectors.msgpack')}})
        self.assertIsInstance(build_encoder(cfg), CachedEncoder)
        self.assertIsInstance(build_encoder(cfg, use_cache=False), DeterministicEncoder)

        cfg = load_run_config(None, {
            'paths': {'cache': ''},
            'encoder': {'backend': 'remote-service', 'endpoint': 'http://embed.local/v1'},
        })
        self.assertIsInstance(build_encoder(cfg), HttpEncoder)

    def test_build_clients(self):
        cfg = load_run_config(None, {'paths': {'fixtures': ''}})
        with self.assertRaises(ConfigError):
            build_clients(cfg)
        store = FixtureChatClient()
        clients = build_clients(cfg, store)
        self.assertEqual(set(clients), set(ROLES))
        self.assertTrue(all(c is store for c in clients.values()))

    def test_clients_from_fixture_file(self):
        path = self.dir / 'fixtures.jsonl'
        store = FixtureChatClient()
        store.record('prompt', 'answer')
        store.dump(path)
        clients = build_clients(load_run_config(None, {'paths': {'fixtures': str(path)}}))
        self.assertEqual(clients[ROLES[0]].complete('prompt'), ['answer'])
