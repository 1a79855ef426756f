# ============================================
# FILE: retrieval/embedding.py
# ============================================

import hashlib
import logging
import threading
import unicodedata
from abc import ABC, abstractmethod
from functools import lru_cache
from pathlib import Path

import msgpack
import numpy as np
import requests
from filelock import FileLock
from requests.adapters import HTTPAdapter
from tqdm import tqdm
from urllib3.util.retry import Retry

from .exceptions import EncoderArgumentError, EncoderTransportError

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 1024


def _check_text(text):
    if not isinstance(text, str) or not text.strip():
        raise EncoderArgumentError("cannot encode empty text")


class Encoder(ABC):
    """Maps text to a fixed-dimension vector; a pure function per instance."""

    name = 'encoder'
    backend = None

    def __init__(self, dimension=DEFAULT_DIMENSION):
        self.dimension = int(dimension)

    @property
    def fingerprint(self):
        return f"{self.backend}:{self.name}:{self.dimension}"

    def encode(self, text):
        return self.encode_batch([text])[0]

    @abstractmethod
    def encode_batch(self, texts):
        """Return an (len(texts), dimension) float array."""


@lru_cache(maxsize=200_000)
def _hashed_trigrams(text, dimension, seed):
    normalized = unicodedata.normalize('NFC', text).lower()
    padded = f"  {normalized} "
    vector = np.zeros(dimension, dtype=np.float64)
    for i in range(len(padded) - 2):
        digest = hashlib.blake2b(f"{seed}:{padded[i:i + 3]}".encode('utf-8'), digest_size=8).digest()
        value = int.from_bytes(digest, 'little')
        sign = 1.0 if (value >> 63) & 1 else -1.0
        vector[value % dimension] += sign
    norm = np.linalg.norm(vector)
    if norm > 0:
        vector /= norm
    vector.setflags(write=False)
    return vector


class DeterministicEncoder(Encoder):
    """Signed feature hashing of character trigrams, projected to the unit sphere."""

    name = 'hashed-trigram'
    backend = 'deterministic-test'

    def __init__(self, dimension=DEFAULT_DIMENSION, seed=0):
        super().__init__(dimension)
        self.seed = seed

    @property
    def fingerprint(self):
        return f"{super().fingerprint}:{self.seed}"

    def encode(self, text):
        _check_text(text)
        return _hashed_trigrams(text, self.dimension, self.seed)

    def encode_batch(self, texts):
        if not texts:
            return np.zeros((0, self.dimension))
        return np.vstack([self.encode(text) for text in texts])


class HttpEncoder(Encoder):
    """Batched client for an embedding service: {model, inputs} -> {vectors}."""

    backend = 'remote-service'

    def __init__(self, endpoint, model, dimension=DEFAULT_DIMENSION, api_key='', batch_size=64, retries=3, timeout=30.0):
        super().__init__(dimension)
        self.endpoint = endpoint
        self.name = model
        self.api_key = api_key
        self.batch_size = batch_size
        self.retries = retries
        self.timeout = timeout
        self._local = threading.local()

    def _session(self):
        session = getattr(self._local, 'session', None)
        if session is None:
            retry = Retry(
                total=self.retries,
                backoff_factor=0.5,
                status_forcelist=(429, 500, 502, 503, 504),
                allowed_methods=frozenset(['POST']),
            )
            session = requests.Session()
            session.mount('http://', HTTPAdapter(max_retries=retry))
            session.mount('https://', HTTPAdapter(max_retries=retry))
            if self.api_key:
                session.headers['Authorization'] = f"Bearer {self.api_key}"
            self._local.session = session
        return session

    def _post(self, batch):
        try:
            response = self._session().post(
                self.endpoint,
                json={'model': self.name, 'inputs': batch},
                timeout=self.timeout,
            )
            response.raise_for_status()
            vectors = response.json()['vectors']
        except (requests.RequestException, KeyError, ValueError) as e:
            logger.error(f"Embedding request to {self.endpoint} failed: {str(e)}")
            raise EncoderTransportError(f"embedding service error: {e}", self.retries) from e

        array = np.asarray(vectors, dtype=np.float64)
        if array.shape != (len(batch), self.dimension):
            raise EncoderTransportError(
                f"embedding service returned shape {array.shape}, expected {(len(batch), self.dimension)}",
                self.retries,
            )
        return array

    def encode_batch(self, texts):
        for text in texts:
            _check_text(text)
        if not texts:
            return np.zeros((0, self.dimension))
        chunks = [self._post(list(texts[i:i + self.batch_size])) for i in range(0, len(texts), self.batch_size)]
        return np.vstack(chunks)


def text_hash(encoder_fingerprint, text):
    return hashlib.sha256(f"{encoder_fingerprint}\x00{text}".encode('utf-8')).hexdigest()


class VectorCache:
    """
    Append-only msgpack file of (text-hash, dimension, f32 bytes) records.

    Reads are lock-free snapshots; writers serialize through a file lock.
    Records that fail to decode are dropped and reported so the caller can
    re-encode them and compact the file.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.lock = FileLock(f"{self.path}.lock")
        self.vectors = {}
        self.corrupted = 0
        self._mutex = threading.Lock()
        self.reload()

    def reload(self):
        self.vectors = {}
        self.corrupted = 0
        if not self.path.exists():
            return
        with open(self.path, 'rb') as fh:
            unpacker = msgpack.Unpacker(fh, raw=False)
            try:
                for record in unpacker:
                    self._accept(record)
            except (msgpack.UnpackException, ValueError) as e:
                self.corrupted += 1
                logger.warning(f"Vector cache {self.path} truncated: {str(e)}")

    def _accept(self, record):
        try:
            key, dimension, payload = record['h'], int(record['d']), record['v']
            vector = np.frombuffer(payload, dtype='<f4')
            if vector.shape != (dimension,) or not np.all(np.isfinite(vector)):
                raise ValueError("shape or value mismatch")
        except (KeyError, TypeError, ValueError):
            self.corrupted += 1
            return
        self.vectors[key] = vector.astype(np.float64)

    def get(self, key):
        return self.vectors.get(key)

    def __contains__(self, key):
        return key in self.vectors

    def __len__(self):
        return len(self.vectors)

    def put_many(self, items):
        if not items:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self._mutex, self.lock:
            with open(self.path, 'ab') as fh:
                for key, vector in items:
                    data = np.asarray(vector, dtype='<f4')
                    fh.write(msgpack.packb({'h': key, 'd': int(data.shape[0]), 'v': data.tobytes()}, use_bin_type=True))
                    self.vectors[key] = data.astype(np.float64)

    def compact(self):
        """Rewrite the file with only the valid records."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self._mutex, self.lock:
            tmp = self.path.with_suffix(self.path.suffix + '.tmp')
            with open(tmp, 'wb') as fh:
                for key in sorted(self.vectors):
                    data = np.asarray(self.vectors[key], dtype='<f4')
                    fh.write(msgpack.packb({'h': key, 'd': int(data.shape[0]), 'v': data.tobytes()}, use_bin_type=True))
            tmp.replace(self.path)
        logger.info(f"Compacted vector cache {self.path}: {len(self.vectors)} records")
        self.corrupted = 0


class CachedEncoder(Encoder):
    """Wraps another encoder with an on-disk vector cache keyed by (encoder, text)."""

    def __init__(self, inner, cache):
        super().__init__(inner.dimension)
        self.inner = inner
        self.cache = cache
        self.name = inner.name
        self.backend = inner.backend
        self.misses = 0

    @property
    def fingerprint(self):
        return self.inner.fingerprint

    def encode_batch(self, texts):
        for text in texts:
            _check_text(text)
        keys = [text_hash(self.fingerprint, text) for text in texts]
        missing = sorted({(key, text) for key, text in zip(keys, texts) if key not in self.cache})
        if missing:
            vectors = self.inner.encode_batch([text for _, text in missing])
            self.cache.put_many([(key, vector) for (key, _), vector in zip(missing, vectors)])
            self.misses += len(missing)
        if not texts:
            return np.zeros((0, self.dimension))
        return np.vstack([self.cache.get(key) for key in keys])


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EncoderArgumentError(f"dimension mismatch: {a.shape} vs {b.shape}")
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


def verbalize_labels(head, relation, tail):
    return f"{head} | {relation} | {tail}"


def verbalize_triple(t, g=None):
    """
    Canonical "head | relation | tail" text for a KG Triple (labels looked up
    in g) or for anything already carrying labels, like a schema triple.
    """
    if g is not None:
        return verbalize_labels(*g.labels(t))
    head, relation, tail = t
    return verbalize_labels(head, relation, tail)


class EntityIndex:
    """Exact-scan index of entity label embeddings for one graph."""

    def __init__(self, encoder, entity_ids, matrix):
        self.encoder = encoder
        self.fingerprint = encoder.fingerprint
        self.entity_ids = np.asarray(entity_ids, dtype=np.int64)
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(len(self.entity_ids), encoder.dimension)
        norms = np.linalg.norm(self.matrix, axis=1)
        self._norms = np.where(norms == 0, 1.0, norms)
        self._zero = norms == 0

    def __len__(self):
        return len(self.entity_ids)

    @classmethod
    def build(cls, g, encoder, progress=False, batch_size=256):
        entity_ids = sorted(g.entities)
        labels = [g.entities[e] for e in entity_ids]
        blocks = []
        batches = range(0, len(labels), batch_size)
        for start in tqdm(batches, desc='index', unit='batch', disable=not progress):
            blocks.append(encoder.encode_batch(labels[start:start + batch_size]))
        matrix = np.vstack(blocks) if blocks else np.zeros((0, encoder.dimension))
        return cls(encoder, entity_ids, matrix)

    def scores(self, query_vector):
        query = np.asarray(query_vector, dtype=np.float64)
        qnorm = np.linalg.norm(query)
        if qnorm == 0 or len(self.entity_ids) == 0:
            return np.zeros(len(self.entity_ids))
        sims = (self.matrix @ query) / (self._norms * qnorm)
        sims[self._zero] = 0.0
        return np.clip(sims, -1.0, 1.0)


def top_n_entities(idx, query_label, n):
    """The n entities most similar to query_label, by descending cosine then entity id."""
    if n < 1:
        raise EncoderArgumentError("n must be at least 1")
    if len(idx) == 0:
        return []
    sims = idx.scores(idx.encoder.encode(query_label))
    order = np.lexsort((idx.entity_ids, -sims))[:n]
    return [(int(idx.entity_ids[i]), float(sims[i])) for i in order]
