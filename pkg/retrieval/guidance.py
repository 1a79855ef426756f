"""
Triple-dependent GNN that scores every entity of a question graph against
the question's schema triples, and the guidance subgraph cut from it.

All math is float64 numpy with a hand-written backward pass; checkpoints
are safetensors files holding f32 tensors.

Parameter blocks (weights are (fan_in, fan_out), applied as X @ W + b):

    triple_proj        3*d_pem -> d_gnn   schema triple feature
    relation_proj      d_pem   -> d_gnn   initial relation states
    layers.{l}.relation_mlp.{0,2}          d_gnn -> d_gnn -> d_gnn, tanh between
    layers.{l}.update  2*d_gnn -> d_gnn   node update over [state ; aggregate]
    readout            d_gnn   -> 1       node logit
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from safetensors import safe_open
from safetensors.numpy import save_file
from tqdm import tqdm

from .exceptions import ContractViolation, GnnConfigError, NumericError, UnknownEntityError
from .kg_store import induced_subgraph

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = '1'
ACTIVATIONS = ('tanh', 'linear')
LOSS_FORMS = ('positive', 'symmetric')


@dataclass(frozen=True)
class GnnConfig:
    d_pem: int = 1024
    d_gnn: int = 512
    layers: int = 6
    activation: str = 'tanh'
    loss: str = 'positive'
    learning_rate: float = 1e-5
    epochs: int = 2
    k_multiplier: int = 4
    grad_check_tolerance: float = 1e-4
    grad_check_samples: int = 8

    def __post_init__(self):
        if self.d_pem < 1 or self.d_gnn < 1 or self.layers < 0:
            raise GnnConfigError(f"invalid GNN dimensions d_pem={self.d_pem} d_gnn={self.d_gnn} layers={self.layers}")
        if self.activation not in ACTIVATIONS:
            raise GnnConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.loss not in LOSS_FORMS:
            raise GnnConfigError(f"loss must be one of {LOSS_FORMS}, got {self.loss!r}")
        if self.k_multiplier < 1:
            raise GnnConfigError("k_multiplier must be at least 1")


def _layer_names(l):
    prefix = f"layers.{l}"
    return (
        f"{prefix}.relation_mlp.0.weight",
        f"{prefix}.relation_mlp.0.bias",
        f"{prefix}.relation_mlp.2.weight",
        f"{prefix}.relation_mlp.2.bias",
        f"{prefix}.update.weight",
        f"{prefix}.update.bias",
    )


def block_shapes(config):
    d, p = config.d_gnn, config.d_pem
    shapes = {
        'triple_proj.weight': (3 * p, d),
        'triple_proj.bias': (d,),
        'relation_proj.weight': (p, d),
        'relation_proj.bias': (d,),
    }
    for l in range(config.layers):
        w1, b1, w2, b2, wu, bu = _layer_names(l)
        shapes.update({w1: (d, d), b1: (d,), w2: (d, d), b2: (d,), wu: (2 * d, d), bu: (d,)})
    shapes['readout.weight'] = (d,)
    shapes['readout.bias'] = (1,)
    return shapes


def _fan_in(name, config):
    if name.startswith('triple_proj'):
        return 3 * config.d_pem
    if name.startswith('relation_proj'):
        return config.d_pem
    if '.update.' in name:
        return 2 * config.d_gnn
    return config.d_gnn


class GnnParams:
    def __init__(self, blocks, config):
        expected = block_shapes(config)
        if set(blocks) != set(expected):
            missing = sorted(set(expected) - set(blocks))
            extra = sorted(set(blocks) - set(expected))
            raise GnnConfigError(f"parameter blocks do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if tuple(blocks[name].shape) != shape:
                raise GnnConfigError(f"block {name} has shape {blocks[name].shape}, expected {shape}")
        self.blocks = {name: np.asarray(blocks[name], dtype=np.float64) for name in expected}
        self.config = config

    @classmethod
    def initialize(cls, config, seed=0):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every block, seeded."""
        rng = np.random.default_rng(seed)
        blocks = {}
        for name, shape in block_shapes(config).items():
            bound = 1.0 / np.sqrt(_fan_in(name, config))
            blocks[name] = rng.uniform(-bound, bound, size=shape)
        return cls(blocks, config)

    @classmethod
    def zeros(cls, config):
        return cls({name: np.zeros(shape) for name, shape in block_shapes(config).items()}, config)

    def copy(self):
        return GnnParams({name: value.copy() for name, value in self.blocks.items()}, self.config)

    def zeros_like(self):
        return GnnParams.zeros(self.config)

    def __getitem__(self, name):
        return self.blocks[name]

    def __setitem__(self, name, value):
        self.blocks[name] = np.asarray(value, dtype=np.float64)

    def names(self):
        return list(self.blocks)

    def layer(self, l):
        return tuple(self.blocks[name] for name in _layer_names(l))

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.blocks.values())


def save_checkpoint(params, path, metadata=None):
    cfg = params.config
    meta = {
        'format': CHECKPOINT_FORMAT,
        'd_pem': str(cfg.d_pem),
        'd_gnn': str(cfg.d_gnn),
        'layers': str(cfg.layers),
        'activation': cfg.activation,
    }
    meta.update({k: str(v) for k, v in (metadata or {}).items()})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file({name: np.ascontiguousarray(v, dtype=np.float32) for name, v in params.blocks.items()}, str(path), metadata=meta)
    logger.info(f"Saved guidance GNN checkpoint to {path}")


def load_checkpoint(path, config=None):
    with safe_open(str(path), framework='np') as fh:
        meta = fh.metadata() or {}
        blocks = {name: fh.get_tensor(name).astype(np.float64) for name in fh.keys()}
    if meta.get('format') != CHECKPOINT_FORMAT:
        raise GnnConfigError(f"unsupported checkpoint format {meta.get('format')!r} in {path}")
    base = config or GnnConfig()
    cfg = replace(
        base,
        d_pem=int(meta['d_pem']),
        d_gnn=int(meta['d_gnn']),
        layers=int(meta['layers']),
        activation=meta['activation'],
    )
    return GnnParams(blocks, cfg), meta


# ===========================
# GRAPH INPUTS
# ===========================

@dataclass
class EdgeIndex:
    entity_ids: list
    relation_ids: list
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    degree: np.ndarray

    @classmethod
    def from_graph(cls, g):
        entity_ids = sorted(g.entities)
        relation_ids = sorted(g.relations)
        entity_row = {e: i for i, e in enumerate(entity_ids)}
        relation_row = {r: i for i, r in enumerate(relation_ids)}
        ordered = g.sorted_triples()
        heads = np.array([entity_row[t.head] for t in ordered], dtype=np.int64)
        relations = np.array([relation_row[t.relation] for t in ordered], dtype=np.int64)
        tails = np.array([entity_row[t.tail] for t in ordered], dtype=np.int64)
        degree = np.zeros(len(entity_ids))
        np.add.at(degree, heads, 1.0)
        loops = tails != heads
        np.add.at(degree, tails[loops], 1.0)
        return cls(entity_ids, relation_ids, heads, relations, tails, degree)

    @property
    def loops(self):
        return self.tails == self.heads

    def rows(self, entity_ids):
        entity_row = {e: i for i, e in enumerate(self.entity_ids)}
        try:
            return np.array([entity_row[e] for e in entity_ids], dtype=np.int64)
        except KeyError as e:
            raise UnknownEntityError(e.args[0]) from None


def _check_encoder(params, enc):
    if enc.dimension != params.config.d_pem:
        raise GnnConfigError(f"encoder dimension {enc.dimension} does not match d_pem={params.config.d_pem}")


def triple_feature_input(t, enc):
    head, relation, tail = t
    return np.concatenate([enc.encode(head), enc.encode(relation), enc.encode(tail)])


def embed_triple_feature(params, t, enc):
    _check_encoder(params, enc)
    return triple_feature_input(t, enc) @ params['triple_proj.weight'] + params['triple_proj.bias']


def pool_query(features):
    if len(features) == 0:
        raise GnnConfigError("pool_query needs at least one feature")
    return np.mean(np.vstack(features), axis=0)


def relation_inputs(g, enc, relation_ids=None):
    relation_ids = sorted(g.relations) if relation_ids is None else relation_ids
    if not relation_ids:
        return np.zeros((0, enc.dimension))
    return enc.encode_batch([g.relations[r] for r in relation_ids])


def init_features(g, question_entities, e_q, params, enc):
    """Question entities start at e_q, every other entity at zero; relations via relation_proj."""
    _check_encoder(params, enc)
    index = EdgeIndex.from_graph(g)
    H0 = np.zeros((len(index.entity_ids), params.config.d_gnn))
    rows = index.rows(list(question_entities))
    if len(rows):
        H0[rows] = e_q
    Hr0 = relation_inputs(g, enc, index.relation_ids) @ params['relation_proj.weight'] + params['relation_proj.bias']
    return H0, Hr0


# ===========================
# FORWARD / BACKWARD
# ===========================

@dataclass
class _LayerTape:
    H_in: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    X: np.ndarray
    H_out: np.ndarray


def _propagate(params, index, H0, Hr0, tape=None):
    cfg = params.config
    if H0.shape[1] != cfg.d_gnn or (Hr0.size and Hr0.shape[1] != cfg.d_gnn):
        raise GnnConfigError(f"feature dimension must be d_gnn={cfg.d_gnn}")
    H = H0
    has_edges = index.heads.size > 0
    norm = np.maximum(index.degree, 1.0)[:, None]
    loops = index.loops
    for l in range(cfg.layers):
        W1, b1, W2, b2, Wu, bu = params.layer(l)
        Z = np.tanh(Hr0 @ W1 + b1)
        R = Z @ W2 + b2
        agg = np.zeros_like(H)
        if has_edges:
            msg = H[index.heads] * R[index.relations] * H[index.tails]
            np.add.at(agg, index.heads, msg)
            np.add.at(agg, index.tails[~loops], msg[~loops])
            agg = agg / norm
        X = np.hstack([H, agg])
        U = X @ Wu + bu
        H_out = np.tanh(U) if cfg.activation == 'tanh' else U
        if not np.all(np.isfinite(H_out)):
            raise NumericError(f"non-finite node state at layer {l + 1}")
        if tape is not None:
            tape.append(_LayerTape(H, Z, R, X, H_out))
        H = H_out
    return H


def forward(params, g, H0, Hr0):
    return _propagate(params, EdgeIndex.from_graph(g), np.asarray(H0, dtype=np.float64), np.asarray(Hr0, dtype=np.float64))


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def node_logits(params, H):
    return H @ params['readout.weight'] + params['readout.bias'][0]


def node_probabilities(params, H, entity_ids):
    probs = _sigmoid(node_logits(params, np.asarray(H, dtype=np.float64)))
    return {int(e): float(p) for e, p in zip(entity_ids, probs)}


def _bce(p, y, form):
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise NumericError("probabilities must lie strictly inside (0, 1)")
    n = len(p)
    if n == 0:
        return 0.0
    if form == 'symmetric':
        return float(-np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)) / n)
    return float(-np.sum(y * np.log(p)) / n)


def bce_loss(probs, labels, form='positive'):
    """
    Mean binary cross-entropy over every entity.

    The 'positive' form keeps only the -y*log(p) term, so negatives never
    contribute; 'symmetric' is the usual two-sided BCE.
    """
    if form not in LOSS_FORMS:
        raise GnnConfigError(f"loss must be one of {LOSS_FORMS}, got {form!r}")
    ids = sorted(probs)
    missing = [e for e in ids if e not in labels]
    if missing:
        raise ContractViolation(f"no label for entities {missing[:5]}")
    p = np.array([probs[e] for e in ids], dtype=np.float64)
    y = np.array([labels[e] for e in ids], dtype=np.float64)
    return _bce(p, y, form)


@dataclass
class TrainingInstance:
    """Everything the loss needs for one question, precomputed once."""
    index: EdgeIndex
    question_rows: np.ndarray
    triple_inputs: np.ndarray
    relation_inputs: np.ndarray
    labels: np.ndarray
    question_id: str = ''
    entity_labels: list = field(default_factory=list)


def build_instance(g, question_entities, schema_triples, positive_entities, enc, question_id=''):
    if not schema_triples:
        raise GnnConfigError(f"instance {question_id!r} has no schema triples")
    index = EdgeIndex.from_graph(g)
    positives = set(positive_entities)
    labels = np.array([1.0 if e in positives else 0.0 for e in index.entity_ids])
    return TrainingInstance(
        index=index,
        question_rows=index.rows(list(question_entities)),
        triple_inputs=np.vstack([triple_feature_input(t, enc) for t in schema_triples]),
        relation_inputs=relation_inputs(g, enc, index.relation_ids),
        labels=labels,
        question_id=question_id,
        entity_labels=[g.entities[e] for e in index.entity_ids],
    )


def instance_probabilities(params, inst):
    e_q = np.mean(inst.triple_inputs @ params['triple_proj.weight'] + params['triple_proj.bias'], axis=0)
    H0 = np.zeros((len(inst.index.entity_ids), params.config.d_gnn))
    if len(inst.question_rows):
        H0[inst.question_rows] = e_q
    Hr0 = inst.relation_inputs @ params['relation_proj.weight'] + params['relation_proj.bias']
    return _sigmoid(node_logits(params, _propagate(params, inst.index, H0, Hr0)))


def instance_loss(params, inst):
    return _bce(instance_probabilities(params, inst), inst.labels, params.config.loss)


def loss_and_gradients(params, inst):
    cfg = params.config
    d = cfg.d_gnn
    index = inst.index
    grads = params.zeros_like()

    F = inst.triple_inputs
    e_q = np.mean(F @ params['triple_proj.weight'] + params['triple_proj.bias'], axis=0)
    H0 = np.zeros((len(index.entity_ids), d))
    if len(inst.question_rows):
        H0[inst.question_rows] = e_q
    Xr = inst.relation_inputs
    Hr0 = Xr @ params['relation_proj.weight'] + params['relation_proj.bias']

    tape = []
    H_L = _propagate(params, index, H0, Hr0, tape)
    p = _sigmoid(node_logits(params, H_L))
    y = inst.labels
    loss = _bce(p, y, cfg.loss)

    n = len(p)
    if cfg.loss == 'symmetric':
        dz = (p - y) / n
    else:
        dz = -(y * (1.0 - p)) / n

    grads['readout.weight'] = H_L.T @ dz
    grads['readout.bias'] = np.array([dz.sum()])
    dH = np.outer(dz, params['readout.weight'])
    dHr0 = np.zeros_like(Hr0)

    has_edges = index.heads.size > 0
    norm = np.maximum(index.degree, 1.0)[:, None]
    loops = index.loops
    for l in reversed(range(cfg.layers)):
        step = tape[l]
        W1, b1, W2, b2, Wu, bu = params.layer(l)
        n_w1, n_b1, n_w2, n_b2, n_wu, n_bu = _layer_names(l)

        dU = dH * (1.0 - step.H_out ** 2) if cfg.activation == 'tanh' else dH
        grads[n_wu] = step.X.T @ dU
        grads[n_bu] = dU.sum(axis=0)
        dX = dU @ Wu.T
        dH_in = dX[:, :d].copy()
        dR = np.zeros_like(step.R)

        if has_edges:
            scaled = dX[:, d:] / norm
            dmsg = scaled[index.heads] + np.where(loops[:, None], 0.0, scaled[index.tails])
            Hh = step.H_in[index.heads]
            Ht = step.H_in[index.tails]
            Rr = step.R[index.relations]
            np.add.at(dH_in, index.heads, dmsg * Rr * Ht)
            np.add.at(dH_in, index.tails, dmsg * Rr * Hh)
            np.add.at(dR, index.relations, dmsg * Hh * Ht)

        grads[n_w2] = step.Z.T @ dR
        grads[n_b2] = dR.sum(axis=0)
        dA = (dR @ W2.T) * (1.0 - step.Z ** 2)
        grads[n_w1] = Hr0.T @ dA
        grads[n_b1] = dA.sum(axis=0)
        dHr0 += dA @ W1.T
        dH = dH_in

    dE_q = dH[inst.question_rows].sum(axis=0) if len(inst.question_rows) else np.zeros(d)
    grads['triple_proj.weight'] = np.outer(F.mean(axis=0), dE_q)
    grads['triple_proj.bias'] = dE_q
    grads['relation_proj.weight'] = Xr.T @ dHr0
    grads['relation_proj.bias'] = dHr0.sum(axis=0)
    return loss, grads


@dataclass
class GradCheckResult:
    max_error: float
    errors: dict

    def passed(self, tolerance):
        return self.max_error < tolerance


def grad_check(params, inst, step=1e-4, samples=None, seed=0):
    """
    Compare analytic gradients with central finite differences, block by block.

    Relative error per block is ||a - n|| / max(||a||, ||n||, 1e-6). With
    `samples`, only that many coordinates per block are perturbed.
    """
    _, analytic = loss_and_gradients(params, inst)
    rng = np.random.default_rng(seed)
    probe = params.copy()
    errors = {}
    for name in params.names():
        block = probe[name]
        flat = block.reshape(-1)
        coords = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            coords = np.sort(rng.choice(flat.size, size=samples, replace=False))
        numeric = np.zeros(len(coords))
        for k, i in enumerate(coords):
            original = flat[i]
            flat[i] = original + step
            plus = instance_loss(probe, inst)
            flat[i] = original - step
            minus = instance_loss(probe, inst)
            flat[i] = original
            numeric[k] = (plus - minus) / (2.0 * step)
        exact = analytic[name].reshape(-1)[coords]
        scale = max(np.linalg.norm(exact), np.linalg.norm(numeric), 1e-6)
        errors[name] = float(np.linalg.norm(exact - numeric) / scale)
    return GradCheckResult(max(errors.values()) if errors else 0.0, errors)


def train(params, instances, learning_rate=None, epochs=None, steps=None, progress=False):
    """
    Plain gradient descent, one instance per step, in manifest order.

    Runs `epochs` passes, or exactly `steps` updates when given. Returns the
    loss recorded before each update.
    """
    cfg = params.config
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    if steps is None:
        steps = (cfg.epochs if epochs is None else epochs) * len(instances)
    if steps and not instances:
        raise GnnConfigError("no training instances")

    losses = []
    for s in tqdm(range(steps), desc='train', unit='step', disable=not progress):
        inst = instances[s % len(instances)]
        loss, grads = loss_and_gradients(params, inst)
        if not np.isfinite(loss):
            raise NumericError(f"loss diverged at step {s} ({inst.question_id})")
        losses.append(loss)
        for name in params.names():
            params.blocks[name] -= lr * grads[name]
        if not params.is_finite():
            raise NumericError(f"parameters diverged at step {s} ({inst.question_id})")
    return losses


# ===========================
# GUIDANCE SUBGRAPH
# ===========================

@dataclass
class GuidanceGraph:
    node_probs: dict
    selected: frozenset
    subgraph: object
    k: int = 0

    @classmethod
    def empty(cls, g):
        return cls({}, frozenset(), induced_subgraph(g, ()), 0)

    def contains_entity(self, e):
        return e in self.selected

    def contains_triple(self, t):
        return t in self.subgraph.triples


def select_guidance(g, probs, schema_triple_count, k_multiplier=4):
    """Top-K entities by probability (ties by entity id) and their induced subgraph."""
    if schema_triple_count < 1:
        raise ContractViolation("schema_triple_count must be at least 1")
    k = min(k_multiplier * schema_triple_count, len(g.entities))
    ranked = sorted(g.entities, key=lambda e: (-probs.get(e, 0.0), e))
    selected = frozenset(ranked[:k])
    return GuidanceGraph(dict(probs), selected, induced_subgraph(g, selected), k)


class GuidanceScorer:
    """Builds the guidance graph for one (question graph, schema) pair; params=None means uniform 0.5 and an empty selection."""

    def __init__(self, params, encoder, k_multiplier=4):
        if params is not None:
            _check_encoder(params, encoder)
        self.params = params
        self.encoder = encoder
        self.k_multiplier = k_multiplier

    def probabilities(self, g, question_entities, schema_triples):
        if self.params is None:
            return {e: 0.5 for e in g.entities}
        features = [embed_triple_feature(self.params, t, self.encoder) for t in schema_triples]
        e_q = pool_query(features)
        H0, Hr0 = init_features(g, question_entities, e_q, self.params, self.encoder)
        H = forward(self.params, g, H0, Hr0)
        return node_probabilities(self.params, H, sorted(g.entities))

    def score(self, g, question_entities, schema):
        probs = self.probabilities(g, question_entities, schema.triples)
        if self.params is None:
            # Uniform fallback: no entity or triple is biased
            return GuidanceGraph(probs, frozenset(), induced_subgraph(g, ()), 0)
        return select_guidance(g, probs, len(schema.triples), self.k_multiplier)
