"""
Chat-completion clients used by the projection, answering and data
generation stages.

Two backends share one interface: a remote OpenAI-compatible endpoint and
a replay store of recorded completions keyed by the prompt's SHA-256.
"""

import hashlib
import json
import logging
import threading
from abc import ABC, abstractmethod
from pathlib import Path

from openai import OpenAI, OpenAIError

from .exceptions import ChatTransportError, ConfigError, FixtureMissingError

logger = logging.getLogger(__name__)

ROLES = ('decompose', 'ground', 'generate', 'strategy', 'reverse', 'path_assertions')


def prompt_sha256(prompt):
    return hashlib.sha256(prompt.encode('utf-8')).hexdigest()


class ChatClient(ABC):
    backend = None

    def __init__(self, model='', temperature=0.7):
        self.model = model
        self.temperature = temperature

    @abstractmethod
    def complete(self, prompt, n=1, temperature=None):
        """Return up to n completion strings for a single user prompt."""

    def complete_one(self, prompt, temperature=None):
        completions = self.complete(prompt, n=1, temperature=temperature)
        if not completions:
            logger.error(f"Chat completion with {self.model} returned no choices")
            raise ChatTransportError(f"no completions returned for prompt {prompt_sha256(prompt)[:12]}")
        return completions[0]


class FixtureChatClient(ChatClient):
    """Replays recorded completions; a missing prompt is an error, never a guess."""

    backend = 'fixture-mock'

    def __init__(self, fixtures=None, model='fixture', temperature=0.7):
        super().__init__(model, temperature)
        self.fixtures = dict(fixtures or {})
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path, **kwargs):
        fixtures = {}
        with open(path, encoding='utf-8') as fh:
            for line_number, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    record = json.loads(raw)
                    fixtures[record['prompt_sha256']] = list(record['completions'])
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise ConfigError(f"fixture file {path} line {line_number}: {str(e)}") from None
        logger.info(f"Loaded {len(fixtures)} chat fixtures from {path}")
        return cls(fixtures, **kwargs)

    def record(self, prompt, completions):
        if isinstance(completions, str):
            completions = [completions]
        self.fixtures[prompt_sha256(prompt)] = list(completions)

    def dump(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as fh:
            for key in sorted(self.fixtures):
                fh.write(json.dumps({'prompt_sha256': key, 'completions': self.fixtures[key]}, ensure_ascii=False) + '\n')

    def complete(self, prompt, n=1, temperature=None):
        key = prompt_sha256(prompt)
        with self._lock:
            self.calls += 1
        try:
            completions = self.fixtures[key]
        except KeyError:
            raise FixtureMissingError(key) from None
        return list(completions[:max(n, 1)])


class OpenAIChatClient(ChatClient):
    """Any OpenAI-compatible chat endpoint: {model, messages, temperature, n} -> choices."""

    backend = 'remote-chat-service'

    def __init__(self, model, endpoint='', api_key='', temperature=0.7, timeout=60.0, retries=3):
        super().__init__(model, temperature)
        kwargs = {'api_key': api_key or 'unused', 'timeout': timeout, 'max_retries': retries}
        if endpoint:
            kwargs['base_url'] = endpoint
        self.client = OpenAI(**kwargs)

    def complete(self, prompt, n=1, temperature=None):
        params = {
            'model': self.model,
            'messages': [{'role': 'user', 'content': prompt}],
            'temperature': self.temperature if temperature is None else temperature,
            'n': n,
        }
        try:
            response = self.client.chat.completions.create(**params)
        except OpenAIError as e:
            logger.error(f"Chat completion with {self.model} failed: {str(e)}")
            raise ChatTransportError(str(e)) from e
        return [choice.message.content or '' for choice in response.choices]


def build_chat_client(chat_settings, role, fixtures=None):
    """Client for one pipeline role; fixture clients share one replay store."""
    backend = chat_settings.get('backend', 'fixture-mock')
    role_settings = dict(chat_settings)
    role_settings.update(chat_settings.get('roles', {}).get(role, {}))
    temperature = role_settings.get('temperature', 0.0 if role == 'ground' else 0.7)

    if backend == 'fixture-mock':
        if fixtures is None:
            raise ConfigError(f"chat role {role} uses fixtures but no fixture file is configured")
        return fixtures
    if backend == 'remote-chat-service':
        return OpenAIChatClient(
            model=role_settings.get('model', ''),
            endpoint=role_settings.get('endpoint', ''),
            api_key=role_settings.get('api_key', ''),
            temperature=temperature,
            timeout=role_settings.get('timeout', 60.0),
            retries=role_settings.get('retries', 3),
        )
    raise ConfigError(f"unknown chat backend {backend!r}")
