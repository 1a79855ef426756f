# ============================================
# FILE: retrieval/config.py
# ============================================

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml
from django.conf import settings
from rest_framework import serializers

from .clients import ROLES, FixtureChatClient, build_chat_client
from .embedding import CachedEncoder, DeterministicEncoder, HttpEncoder, VectorCache
from .exceptions import ConfigError
from .guidance import ACTIVATIONS, LOSS_FORMS, GnnConfig
from .tracer import BiasConfig

logger = logging.getLogger(__name__)

PATH_NAMES = ('graph', 'questions', 'fixtures', 'checkpoint', 'cache', 'output', 'manifest')
STRATEGY_MODES = ('adaptive', 'precision', 'breadth')


# Serializers for run configuration
class PathsSerializer(serializers.Serializer):
    graph = serializers.CharField(allow_blank=True, default='')
    questions = serializers.CharField(allow_blank=True, default='')
    fixtures = serializers.CharField(allow_blank=True, default='')
    checkpoint = serializers.CharField(allow_blank=True, default='')
    cache = serializers.CharField(allow_blank=True, default='')
    output = serializers.CharField(allow_blank=True, default='')
    manifest = serializers.CharField(allow_blank=True, default='')


class BiasSerializer(serializers.Serializer):
    entity_bias = serializers.FloatField(min_value=1.0)
    triple_bias = serializers.FloatField(min_value=0.0)
    threshold = serializers.FloatField(max_value=2.0)
    anchor_top_n = serializers.IntegerField(min_value=1)
    fuzzy_threshold = serializers.FloatField(min_value=0.0, max_value=1.0)
    max_commits = serializers.IntegerField(min_value=1)


class GnnSerializer(serializers.Serializer):
    d_pem = serializers.IntegerField(min_value=1)
    d_gnn = serializers.IntegerField(min_value=1)
    layers = serializers.IntegerField(min_value=0, max_value=64)
    activation = serializers.ChoiceField(choices=ACTIVATIONS)
    loss = serializers.ChoiceField(choices=LOSS_FORMS)
    learning_rate = serializers.FloatField(min_value=0.0)
    epochs = serializers.IntegerField(min_value=0)
    k_multiplier = serializers.IntegerField(min_value=1)
    grad_check_tolerance = serializers.FloatField(min_value=0.0)
    grad_check_samples = serializers.IntegerField(min_value=1)


class EncoderSerializer(serializers.Serializer):
    backend = serializers.ChoiceField(choices=['deterministic-test', 'remote-service'])
    model = serializers.CharField(allow_blank=True)
    dimension = serializers.IntegerField(min_value=1)
    endpoint = serializers.CharField(allow_blank=True)
    api_key = serializers.CharField(allow_blank=True)
    batch_size = serializers.IntegerField(min_value=1)
    retries = serializers.IntegerField(min_value=0)
    timeout = serializers.FloatField(min_value=0.0)

    def validate(self, data):
        if data['backend'] == 'remote-service' and not data['endpoint']:
            raise serializers.ValidationError("remote-service encoder needs an endpoint")
        return data


class ChatRoleSerializer(serializers.Serializer):
    model = serializers.CharField(required=False)
    endpoint = serializers.CharField(required=False, allow_blank=True)
    temperature = serializers.FloatField(required=False, min_value=0.0, max_value=2.0)


class ChatSerializer(serializers.Serializer):
    backend = serializers.ChoiceField(choices=['fixture-mock', 'remote-chat-service'])
    endpoint = serializers.CharField(allow_blank=True)
    api_key = serializers.CharField(allow_blank=True)
    model = serializers.CharField(allow_blank=True)
    timeout = serializers.FloatField(min_value=0.0)
    retries = serializers.IntegerField(min_value=0)
    roles = serializers.DictField(child=ChatRoleSerializer(), required=False, default=dict)

    def validate_roles(self, value):
        unknown = sorted(set(value) - set(ROLES))
        if unknown:
            raise serializers.ValidationError(f"unknown chat roles {unknown}")
        return value


class DatagenSerializer(serializers.Serializer):
    samples = serializers.IntegerField(min_value=0)
    walk_lengths = serializers.DictField(child=serializers.FloatField(min_value=0.0))
    answer_count = serializers.IntegerField(min_value=1)
    max_attempts = serializers.IntegerField(min_value=1)
    llm_strategy = serializers.BooleanField()

    def validate_walk_lengths(self, value):
        try:
            lengths = {int(k): v for k, v in value.items()}
        except ValueError:
            raise serializers.ValidationError("walk lengths must be integers") from None
        if not lengths or min(lengths) < 1 or sum(lengths.values()) <= 0:
            raise serializers.ValidationError("walk lengths need at least one positive length with weight")
        return {str(k): v for k, v in sorted(lengths.items())}


class RunConfigSerializer(serializers.Serializer):
    seed = serializers.IntegerField(min_value=0)
    beam = serializers.IntegerField(min_value=1)
    max_plan_attempts = serializers.IntegerField(min_value=1)
    jobs = serializers.IntegerField(min_value=1)
    search_jobs = serializers.IntegerField(min_value=1)
    strategy_mode = serializers.ChoiceField(choices=STRATEGY_MODES)
    use_guidance = serializers.BooleanField()
    coverage_mode = serializers.ChoiceField(choices=['exact', 'undirected'])
    trace = serializers.BooleanField(default=False)
    paths = PathsSerializer()
    bias = BiasSerializer()
    gnn = GnnSerializer()
    encoder = EncoderSerializer()
    chat = ChatSerializer()
    datagen = DatagenSerializer()

    def validate(self, data):
        if data['encoder']['dimension'] != data['gnn']['d_pem']:
            raise serializers.ValidationError(
                f"encoder dimension {data['encoder']['dimension']} must equal gnn.d_pem {data['gnn']['d_pem']}"
            )
        return data


@dataclass
class RunConfig:
    seed: int
    beam: int
    max_plan_attempts: int
    jobs: int
    search_jobs: int
    strategy_mode: str
    use_guidance: bool
    coverage_mode: str
    trace: bool
    paths: dict
    bias: BiasConfig
    gnn: GnnConfig
    encoder: dict
    chat: dict
    datagen: dict
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_validated(cls, data):
        return cls(
            seed=data['seed'],
            beam=data['beam'],
            max_plan_attempts=data['max_plan_attempts'],
            jobs=data['jobs'],
            search_jobs=data['search_jobs'],
            strategy_mode=data['strategy_mode'],
            use_guidance=data['use_guidance'],
            coverage_mode=data['coverage_mode'],
            trace=data['trace'],
            paths=dict(data['paths']),
            bias=BiasConfig(**data['bias']),
            gnn=GnnConfig(**data['gnn']),
            encoder=dict(data['encoder']),
            chat=dict(data['chat']),
            datagen=dict(data['datagen']),
            raw=data,
        )

    def path(self, name):
        value = self.paths.get(name, '')
        return Path(value) if value else None

    def require(self, *names):
        """Every named path must be set and exist on disk."""
        missing = []
        for name in names:
            p = self.path(name)
            if p is None:
                missing.append(f"{name} (not set)")
            elif not p.exists():
                missing.append(f"{name} ({p} does not exist)")
        if missing:
            raise ConfigError(f"missing required paths: {', '.join(missing)}", {'paths': missing})


def deep_merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_config_file(path):
    try:
        with open(path, encoding='utf-8') as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {str(e)}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {str(e)}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return data


def load_run_config(path=None, overrides=None):
    """Settings defaults < YAML file < overrides, validated as a whole."""
    merged = copy.deepcopy(settings.STEM)
    if path:
        merged = deep_merge(merged, read_config_file(path))
    merged = deep_merge(merged, overrides)

    serializer = RunConfigSerializer(data=merged)
    if not serializer.is_valid():
        raise ConfigError(f"invalid run configuration: {serializer.errors}", serializer.errors)
    return RunConfig.from_validated(serializer.validated_data)


def build_encoder(cfg, use_cache=True):
    enc_cfg = cfg.encoder
    if enc_cfg['backend'] == 'remote-service':
        encoder = HttpEncoder(
            endpoint=enc_cfg['endpoint'],
            model=enc_cfg['model'],
            dimension=enc_cfg['dimension'],
            api_key=enc_cfg['api_key'],
            batch_size=enc_cfg['batch_size'],
            retries=enc_cfg['retries'],
            timeout=enc_cfg['timeout'],
        )
    else:
        encoder = DeterministicEncoder(enc_cfg['dimension'])
    cache_path = cfg.path('cache')
    if use_cache and cache_path is not None:
        return CachedEncoder(encoder, VectorCache(cache_path))
    return encoder


def build_clients(cfg, fixtures=None):
    """One chat client per role; the fixture backend shares a single replay store."""
    if cfg.chat['backend'] == 'fixture-mock' and fixtures is None:
        fixture_path = cfg.path('fixtures')
        if fixture_path is None:
            raise ConfigError("fixture-mock chat backend needs paths.fixtures")
        fixtures = FixtureChatClient.from_file(fixture_path)
    return {role: build_chat_client(cfg.chat, role, fixtures) for role in ROLES}
