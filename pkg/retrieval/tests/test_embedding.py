import logging
import tempfile
from pathlib import Path
from unittest import mock

import msgpack
import numpy as np
import requests
from django.test import SimpleTestCase, override_settings

from retrieval.embedding import (
    CachedEncoder,
    DeterministicEncoder,
    EntityIndex,
    HttpEncoder,
    VectorCache,
    cosine_sim,
    text_hash,
    top_n_entities,
    verbalize_triple,
)
from retrieval.exceptions import EncoderArgumentError, EncoderTransportError
from retrieval.kg_store import build_graph
from retrieval.projection import SchemaTriple

from .helpers import QUIET_LOGGING

logging.disable(logging.CRITICAL)


class FakeResponse:
    def __init__(self, payload, status=200):
        self.payload = payload
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.HTTPError(f"status {self.status}")

    def json(self):
        return self.payload


@override_settings(LOGGING=QUIET_LOGGING)
class EncoderTests(SimpleTestCase):

    # ===========================
    # DETERMINISTIC ENCODER
    # ===========================

    def test_same_text_same_vector(self):
        enc = DeterministicEncoder(64)
        a = enc.encode('location.location.nearby_airports')
        b = DeterministicEncoder(64).encode('location.location.nearby_airports')
        self.assertTrue(np.array_equal(a, b))
        self.assertAlmostEqual(float(np.linalg.norm(a)), 1.0, places=12)

    def test_batch_matches_single(self):
        enc = DeterministicEncoder(32)
        texts = ['Rome', 'Italy', 'Rome']
        batch = enc.encode_batch(texts)
        self.assertEqual(batch.shape, (3, 32))
        self.assertTrue(np.array_equal(batch[0], enc.encode('Rome')))

    def test_empty_text_rejected(self):
        with self.assertRaises(EncoderArgumentError):
            DeterministicEncoder(8).encode('   ')

    def test_similar_labels_score_higher(self):
        enc = DeterministicEncoder(256)
        rome = enc.encode('rome')
        self.assertGreater(cosine_sim(rome, enc.encode('Rome')), cosine_sim(rome, enc.encode('Belgium')))

    def test_cosine_edges(self):
        self.assertEqual(cosine_sim([0.0, 0.0], [1.0, 0.0]), 0.0)
        self.assertAlmostEqual(cosine_sim([1.0, 2.0], [2.0, 4.0]), 1.0)
        with self.assertRaises(EncoderArgumentError):
            cosine_sim([1.0], [1.0, 0.0])

    def test_verbalize_schema_triple(self):
        t = SchemaTriple('rome', 'location.location.nearby_airports', '[ENT1]')
        self.assertEqual(verbalize_triple(t), 'rome | location.location.nearby_airports | [ENT1]')

    # ===========================
    # ENTITY INDEX
    # ===========================

    def test_top_n_matches_full_scan(self):
        enc = DeterministicEncoder(64)
        g = build_graph([(f"entity {i}", 'r', f"entity {i + 1}") for i in range(99)])
        idx = EntityIndex.build(g, enc, batch_size=16)
        query = 'entity 42'
        brute = sorted((cosine_sim(enc.encode(query), enc.encode(label)) for label in g.entities.values()), reverse=True)
        got = top_n_entities(idx, query, 10)
        for (_, score), expected in zip(got, brute[:10]):
            self.assertAlmostEqual(score, expected, places=9)
        self.assertEqual(g.entities[got[0][0]], 'entity 42')

    def test_top_n_validates_n(self):
        enc = DeterministicEncoder(16)
        idx = EntityIndex.build(build_graph([('A', 'r', 'B')]), enc)
        with self.assertRaises(EncoderArgumentError):
            top_n_entities(idx, 'A', 0)
        self.assertEqual(len(top_n_entities(idx, 'A', 5)), 2)

    # ===========================
    # VECTOR CACHE
    # ===========================

    def test_cached_encoder_hits_after_first_call(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'vectors.msgpack'
            inner = DeterministicEncoder(16)
            cached = CachedEncoder(inner, VectorCache(path))
            first = cached.encode_batch(['Rome', 'Italy'])
            self.assertEqual(cached.misses, 2)

            again = CachedEncoder(inner, VectorCache(path))
            second = again.encode_batch(['Italy', 'Rome'])
            self.assertEqual(again.misses, 0)
            self.assertTrue(np.allclose(first[0], second[1], atol=1e-6))

    def test_corrupted_record_is_dropped_and_compacted(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'vectors.msgpack'
            enc = DeterministicEncoder(8)
            cache = VectorCache(path)
            cache.put_many([(text_hash(enc.fingerprint, 'Rome'), enc.encode('Rome'))])
            with open(path, 'ab') as fh:
                fh.write(msgpack.packb({'h': 'broken', 'd': 8, 'v': b'abc'}, use_bin_type=True))

            reloaded = VectorCache(path)
            self.assertEqual(len(reloaded), 1)
            self.assertEqual(reloaded.corrupted, 1)
            reloaded.compact()
            self.assertEqual(VectorCache(path).corrupted, 0)

    # ===========================
    # REMOTE ENCODER
    # ===========================

    def test_http_encoder_batches_requests(self):
        enc = HttpEncoder('http://embed.local/v1', 'test-model', dimension=2, batch_size=2)
        session = mock.Mock()
        session.post.side_effect = lambda url, json, timeout: FakeResponse(
            {'vectors': [[1.0, 0.0]] * len(json['inputs'])}
        )
        with mock.patch.object(HttpEncoder, '_session', return_value=session):
            out = enc.encode_batch(['a', 'b', 'c'])
        self.assertEqual(out.shape, (3, 2))
        self.assertEqual(session.post.call_count, 2)

    def test_http_encoder_shape_mismatch(self):
        enc = HttpEncoder('http://embed.local/v1', 'test-model', dimension=3)
        session = mock.Mock()
        session.post.return_value = FakeResponse({'vectors': [[1.0, 0.0]]})
        with mock.patch.object(HttpEncoder, '_session', return_value=session):
            with self.assertRaises(EncoderTransportError):
                enc.encode_batch(['a'])

    def test_http_encoder_transport_failure(self):
        enc = HttpEncoder('http://embed.local/v1', 'test-model', dimension=2, retries=1)
        session = mock.Mock()
        session.post.return_value = FakeResponse({}, status=503)
        with mock.patch.object(HttpEncoder, '_session', return_value=session):
            with self.assertRaises(EncoderTransportError) as ctx:
                enc.encode_batch(['a'])
        self.assertEqual(ctx.exception.retries, 1)
